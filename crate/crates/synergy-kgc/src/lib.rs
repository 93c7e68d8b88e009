//! Knowledge-graph completion with dual embedding towers.
//!
//! The model scores `(head, relation, tail)` triples by composing a semantic
//! query embedding for `(head, relation)` and comparing it against entity
//! embeddings under cosine similarity. On top of the plain semantic tower, a
//! synergy tower enriches each embedding with a gated cross-modal attention
//! pass over a neighborhood context pool; low-degree entities anchor the pool
//! with their own semantic identity so that sparse nodes are not drowned out
//! by their neighbors.
//!
//! Training runs in two phases: a semantic warm-up under an in-batch
//! contrastive loss, then a synergy phase that adds a stop-gradient alignment
//! penalty tying each fused representation back to its semantic anchor.
//! Evaluation ranks every entity as a candidate tail (and, via inverse
//! relations, every candidate head) under the filtered protocol.
//!
//! Everything is deterministic given a master seed: initialization, batch
//! shuffling, dropout masks, neighbor subsampling, and evaluation order all
//! draw from per-purpose streams derived from `(seed, stream, epoch)`.
//!
//! Layout:
//! - [`kg_store`]: triple storage, vocabulary, inverse augmentation,
//!   adjacency/degree profiles, k-hop neighborhoods, filtered candidate sets.
//! - [`numerics`]: dense `f64` tensors, a reverse-mode differentiation tape,
//!   AdamW, binary checkpoints, and finite-difference gradient checking.
//! - [`semantic`]: embedding tables and the query composer tower.
//! - [`synergy`]: context pools, identity anchoring, multi-head attention,
//!   the adaptive gate, and the fusion head.
//! - [`model`]: the assembled dual-tower model.
//! - [`trainer`]: two-phase contrastive training loop.
//! - [`evaluator`]: filtered ranking metrics.
//! - [`sweep`]: grid harnesses over density thresholds, hop depth, phase
//!   switch epochs, and component ablations.
//! - [`cli`]: batch command-line front end (`stats`, `train`, `eval`,
//!   `sweep`, `export-curves`).

pub mod cli;
pub mod error;
pub mod evaluator;
pub mod kg_store;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod semantic;
pub mod sweep;
pub mod synergy;
pub mod trainer;

pub use error::{KgcError, Result};
