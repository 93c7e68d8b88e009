//! Two-phase contrastive training.
//!
//! Phase one warms up the semantic tower alone: in-batch contrastive loss
//! over the cosine matrix between composed `(head, relation)` queries and
//! tail embeddings. From the switch epoch on, phase two scores the fused
//! synergy representations instead and adds a stop-gradient alignment
//! penalty pulling each fused vector toward its own semantic embedding,
//! which is treated as a constant target.
//!
//! Epochs draw their shuffle, dropout, and neighbor-sampling generators
//! from `(seed, stream, epoch)`, so resuming from a checkpoint taken at any
//! epoch boundary reproduces the uninterrupted run bit for bit. Phase one
//! consumes nothing but the shuffle stream and touches only semantic
//! parameters, so a phase-one prefix checkpoint can seed any run that
//! shares the semantic-relevant configuration, whatever its synergy
//! settings.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KgcError, Result};
use crate::kg_store::{Triple, TripleStore};
use crate::model::{vocab_fingerprint, Model, TowerInput, TowerOut};
use crate::numerics::checkpoint::{self, Loaded};
use crate::numerics::optim::{AdamConfig, AdamW};
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor;
use crate::rng::{derive, Stream};
use crate::synergy::{DensityThreshold, SynergyConfig};

pub const SEED_ENV: &str = "SYNERGYKGC_SEED";
pub const DEFAULT_SEED: u64 = 42;
pub const CHECKPOINT_KIND: &str = "synergy-kgc.train-state";

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    // Architecture.
    pub dim: usize,
    pub heads: usize,
    pub hops: usize,
    pub phi: DensityThreshold,
    pub pool_cap: usize,
    pub dropout: f64,
    pub anchor: bool,
    pub cross_attention: bool,
    pub adaptive_gate: bool,
    // Objective.
    pub tau: f64,
    pub margin: f64,
    pub lambda_align: f64,
    // Schedule.
    pub epochs: usize,
    /// First epoch of the synergy phase; epochs before it are semantic-only.
    pub t_start: usize,
    pub batch_size: usize,
    // Optimizer.
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Optional seed; the command line and environment can override.
    pub seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = SynergyConfig::default();
        TrainConfig {
            dim: arch.dim,
            heads: arch.heads,
            hops: arch.hops,
            phi: arch.phi,
            pool_cap: arch.pool_cap,
            dropout: arch.dropout,
            anchor: arch.anchor,
            cross_attention: arch.cross_attention,
            adaptive_gate: arch.adaptive_gate,
            tau: 0.05,
            margin: 0.02,
            lambda_align: 0.1,
            epochs: 20,
            t_start: 5,
            batch_size: 256,
            lr: 5e-5,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: None,
        }
    }
}

impl TrainConfig {
    pub fn arch(&self) -> SynergyConfig {
        SynergyConfig {
            dim: self.dim,
            heads: self.heads,
            hops: self.hops,
            phi: self.phi,
            pool_cap: self.pool_cap,
            dropout: self.dropout,
            anchor: self.anchor,
            cross_attention: self.cross_attention,
            adaptive_gate: self.adaptive_gate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        if self.tau <= 0.0 {
            return Err(KgcError::Config(format!(
                "temperature {} must be positive",
                self.tau
            )));
        }
        if self.margin < 0.0 || self.lambda_align < 0.0 {
            return Err(KgcError::Config(
                "margin and alignment weight must be non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(KgcError::Config("batch_size must be at least 1".into()));
        }
        if self.lr <= 0.0 || self.weight_decay < 0.0 || self.grad_clip <= 0.0 {
            return Err(KgcError::Config(
                "lr and grad_clip must be positive, weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    /// Digest of everything that determines the phase-one trajectory:
    /// semantic-relevant hyperparameters, the seed, and the vocabulary.
    /// Synergy-only settings (heads, hops, phi, pool cap, dropout, ablation
    /// flags, alignment weight, switch epoch) are deliberately excluded, so
    /// one phase-one prefix can seed many synergy-phase variants.
    pub fn phase1_fingerprint(&self, seed: u64, vocab_fp: &str) -> String {
        let key = serde_json::json!({
            "dim": self.dim,
            "tau": self.tau,
            "margin": self.margin,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "grad_clip": self.grad_clip,
            "seed": seed,
            "vocab": vocab_fp,
        });
        let mut hasher = Sha256::new();
        hasher.update(key.to_string().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Seed resolution: explicit flag, then config file, then the
/// `SYNERGYKGC_SEED` environment variable, then the fixed default.
pub fn resolve_seed(flag: Option<u64>, cfg_seed: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(cfg_seed) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw.trim().parse::<u64>().map_err(|_| {
            KgcError::Config(format!("{SEED_ENV}={raw}: not an unsigned integer"))
        }),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Semantic,
    Synergy,
}

pub fn phase_of(epoch: usize, t_start: usize) -> Phase {
    if epoch < t_start {
        Phase::Semantic
    } else {
        Phase::Synergy
    }
}

/// Where the alignment penalty takes its constant targets from.
pub enum AlignTargets<'a> {
    /// Detach each semantic embedding at its value from this forward pass.
    Detached,
    /// Externally pinned targets in batch order, for finite-difference
    /// harnesses that must hold the anchors fixed while parameters move.
    Fixed {
        query: &'a [Tensor],
        entity: &'a [Tensor],
    },
}

/// Nodes and side values of one synergy-phase batch.
pub struct SynergyBatchLoss {
    pub total: NodeId,
    pub nce_syn: f64,
    pub nce_sem: f64,
    /// Per-side alignment means; absent when the alignment weight is zero.
    pub align_query: Option<f64>,
    pub align_entity: Option<f64>,
    pub mean_alpha: f64,
    /// Semantic anchor values per batch item, as used for the targets.
    pub query_anchors: Vec<Tensor>,
    pub entity_anchors: Vec<Tensor>,
}

/// Builds the synergy-phase loss for one batch on `tape`:
/// contrastive loss over fused query/entity cosine scores, plus the
/// stop-gradient alignment penalties when their weight is nonzero. The
/// semantic-only contrastive loss is recorded alongside for logging but is
/// not connected to the returned total. Towers run per batch item, query
/// side first, which fixes the draw order on both generators.
#[allow(clippy::too_many_arguments)]
pub fn synergy_batch_loss(
    model: &Model,
    store: &TripleStore,
    batch: &[Triple],
    cfg: &TrainConfig,
    tape: &mut Tape,
    train: bool,
    neighbor_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
    targets: AlignTargets<'_>,
) -> Result<SynergyBatchLoss> {
    assert!(!batch.is_empty(), "empty batch");
    let b = batch.len();
    let mut query_outs: Vec<TowerOut> = Vec::with_capacity(b);
    let mut entity_outs: Vec<TowerOut> = Vec::with_capacity(b);
    for t in batch {
        query_outs.push(model.synergy_tower(
            tape,
            store,
            TowerInput::Query {
                head: t.head,
                relation: t.relation,
            },
            train,
            neighbor_rng,
            dropout_rng,
        )?);
        entity_outs.push(model.synergy_tower(
            tape,
            store,
            TowerInput::Entity(t.tail),
            train,
            neighbor_rng,
            dropout_rng,
        )?);
    }

    let fused_q: Vec<NodeId> = query_outs.iter().map(|o| o.fused).collect();
    let fused_t: Vec<NodeId> = entity_outs.iter().map(|o| o.fused).collect();
    let scores = tape.cosine_matrix(&fused_q, &fused_t)?;
    let nce_syn_node = tape.info_nce(scores, cfg.tau, cfg.margin)?;

    let query_anchors: Vec<Tensor> = match &targets {
        AlignTargets::Detached => query_outs
            .iter()
            .map(|o| tape.value(o.sem).clone())
            .collect(),
        AlignTargets::Fixed { query, .. } => {
            assert_eq!(query.len(), b, "fixed query targets length");
            query.to_vec()
        }
    };
    let entity_anchors: Vec<Tensor> = match &targets {
        AlignTargets::Detached => entity_outs
            .iter()
            .map(|o| tape.value(o.sem).clone())
            .collect(),
        AlignTargets::Fixed { entity, .. } => {
            assert_eq!(entity.len(), b, "fixed entity targets length");
            entity.to_vec()
        }
    };

    let mut terms: Vec<(NodeId, f64)> = vec![(nce_syn_node, 1.0)];
    let mut align_query = None;
    let mut align_entity = None;
    if cfg.lambda_align > 0.0 {
        let side = |tape: &mut Tape, outs: &[TowerOut], anchors: &[Tensor]| -> Result<NodeId> {
            let dists: Vec<(NodeId, f64)> = outs
                .iter()
                .zip(anchors)
                .map(|(o, a)| {
                    tape.sq_dist_to_const(o.fused, a.clone())
                        .map(|n| (n, 1.0 / b as f64))
                })
                .collect::<Result<_>>()?;
            tape.weighted_sum(&dists)
        };
        let aq = side(tape, &query_outs, &query_anchors)?;
        let ae = side(tape, &entity_outs, &entity_anchors)?;
        align_query = Some(tape.value(aq).scalar_value());
        align_entity = Some(tape.value(ae).scalar_value());
        terms.push((aq, cfg.lambda_align));
        terms.push((ae, cfg.lambda_align));
    }
    let total = tape.weighted_sum(&terms)?;

    // Semantic-tower loss for the curves; recorded but not part of the
    // total, so the backward pass ignores it.
    let sem_q: Vec<NodeId> = query_outs.iter().map(|o| o.sem).collect();
    let sem_t: Vec<NodeId> = entity_outs.iter().map(|o| o.sem).collect();
    let sem_scores = tape.cosine_matrix(&sem_q, &sem_t)?;
    let nce_sem_node = tape.info_nce(sem_scores, cfg.tau, cfg.margin)?;

    let mean_alpha = query_outs
        .iter()
        .chain(&entity_outs)
        .map(|o| o.alpha)
        .sum::<f64>()
        / (2 * b) as f64;

    Ok(SynergyBatchLoss {
        total,
        nce_syn: tape.value(nce_syn_node).scalar_value(),
        nce_sem: tape.value(nce_sem_node).scalar_value(),
        align_query,
        align_entity,
        mean_alpha,
        query_anchors,
        entity_anchors,
    })
}

/// Semantic-phase batch loss: contrastive loss over the cosine matrix of
/// composed queries against tail embeddings.
pub fn semantic_batch_loss(
    model: &Model,
    batch: &[Triple],
    cfg: &TrainConfig,
    tape: &mut Tape,
) -> Result<NodeId> {
    assert!(!batch.is_empty(), "empty batch");
    let queries: Vec<NodeId> = batch
        .iter()
        .map(|t| model.semantic_query(tape, t.head, t.relation))
        .collect::<Result<_>>()?;
    let tails: Vec<NodeId> = batch
        .iter()
        .map(|t| model.semantic_entity(tape, t.tail))
        .collect::<Result<_>>()?;
    let scores = tape.cosine_matrix(&queries, &tails)?;
    tape.info_nce(scores, cfg.tau, cfg.margin)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// 1 semantic, 2 synergy.
    pub phase: u8,
    pub l_total: f64,
    pub l_nce_sem: f64,
    pub l_nce_syn: Option<f64>,
    pub l_align_query: Option<f64>,
    pub l_align_entity: Option<f64>,
    pub mean_alpha: Option<f64>,
    /// Pre-clip global gradient norm, averaged over batches.
    pub grad_norm: f64,
}

/// Artifact paths; any of them may be absent for in-memory runs.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub curves: Option<PathBuf>,
    /// Written when the phase switch lies within the run.
    pub phase1_checkpoint: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
    /// Extra checkpoints after the given number of completed epochs.
    pub snapshots: Vec<(usize, PathBuf)>,
}

/// Pretrained entity vectors written into the embedding table after
/// initialization, optionally frozen against further updates.
pub struct EmbeddingImport {
    pub vectors: std::collections::HashMap<crate::kg_store::EntityId, Vec<f64>>,
    pub freeze: bool,
}

pub struct TrainJob<'a> {
    pub store: &'a TripleStore,
    pub cfg: TrainConfig,
    /// Fully resolved seed.
    pub seed: u64,
    pub outputs: TrainOutputs,
    pub resume: Option<Loaded>,
    /// Caller context merged into checkpoint metadata under `dataset`.
    pub dataset_meta: serde_json::Value,
    /// Incompatible with `resume`: a resumed table would be overwritten.
    pub import: Option<EmbeddingImport>,
}

pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub model: Model,
    pub seed: u64,
    pub start_epoch: usize,
}

struct EpochAccum {
    batches: usize,
    total: f64,
    nce_sem: f64,
    nce_syn: f64,
    align_q: f64,
    align_e: f64,
    alpha: f64,
    grad_norm: f64,
    synergy_batches: usize,
    align_batches: usize,
}

impl EpochAccum {
    fn new() -> Self {
        EpochAccum {
            batches: 0,
            total: 0.0,
            nce_sem: 0.0,
            nce_syn: 0.0,
            align_q: 0.0,
            align_e: 0.0,
            alpha: 0.0,
            grad_norm: 0.0,
            synergy_batches: 0,
            align_batches: 0,
        }
    }

    fn record(&mut self, epoch: usize, phase: Phase) -> EpochRecord {
        let n = self.batches.max(1) as f64;
        let syn = self.synergy_batches.max(1) as f64;
        let aln = self.align_batches.max(1) as f64;
        EpochRecord {
            epoch,
            phase: if phase == Phase::Semantic { 1 } else { 2 },
            l_total: self.total / n,
            l_nce_sem: self.nce_sem / n,
            l_nce_syn: (self.synergy_batches > 0).then(|| self.nce_syn / syn),
            l_align_query: (self.align_batches > 0).then(|| self.align_q / aln),
            l_align_entity: (self.align_batches > 0).then(|| self.align_e / aln),
            mean_alpha: (self.synergy_batches > 0).then(|| self.alpha / syn),
            grad_norm: self.grad_norm / n,
        }
    }
}

fn batch_context(e: KgcError, epoch: usize, batch: usize) -> KgcError {
    match e {
        KgcError::Numeric(msg) => {
            KgcError::Numeric(format!("epoch {epoch}, batch {batch}: {msg}"))
        }
        other => other,
    }
}

pub fn train(job: TrainJob<'_>) -> Result<TrainReport> {
    let TrainJob {
        store,
        cfg,
        seed,
        outputs,
        resume,
        dataset_meta,
        import,
    } = job;
    cfg.validate()?;
    if resume.is_some() && import.is_some() {
        return Err(KgcError::Config(
            "importing embeddings into a resumed run would overwrite trained rows".into(),
        ));
    }
    let vocab_fp = vocab_fingerprint(store.vocab());
    let mut prefix_fp = cfg.phase1_fingerprint(seed, &vocab_fp);
    if let Some(import) = &import {
        // Imported rows change the phase-one trajectory, so they join the
        // prefix digest.
        let mut hasher = Sha256::new();
        hasher.update(prefix_fp.as_bytes());
        hasher.update([u8::from(import.freeze)]);
        let mut entities: Vec<_> = import.vectors.keys().copied().collect();
        entities.sort_unstable();
        for e in entities {
            hasher.update(e.to_le_bytes());
            for v in &import.vectors[&e] {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        prefix_fp = hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
    }

    let (mut model, mut adam, start_epoch) = match resume {
        None => {
            let mut model = Model::init(store.vocab(), cfg.arch(), seed)?;
            if let Some(import) = &import {
                let written = model.embeddings.import_entities(
                    &mut model.params,
                    &import.vectors,
                    import.freeze,
                )?;
                log::info!(
                    "imported {written} entity embeddings{}",
                    if import.freeze { " (frozen)" } else { "" }
                );
            }
            let adam = AdamW::new(&model.params, cfg.adam());
            (model, adam, 0)
        }
        Some(loaded) => {
            let meta = &loaded.meta;
            if meta.get("kind").and_then(|v| v.as_str()) != Some(CHECKPOINT_KIND) {
                return Err(KgcError::Data(
                    "checkpoint was not produced by training".into(),
                ));
            }
            if meta.get("vocab_fingerprint").and_then(|v| v.as_str()) != Some(vocab_fp.as_str()) {
                return Err(KgcError::Data(
                    "checkpoint vocabulary does not match the loaded dataset".into(),
                ));
            }
            let epochs_done = meta
                .get("epochs_done")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| KgcError::Data("checkpoint lacks epochs_done".into()))?
                as usize;
            if epochs_done > cfg.epochs {
                return Err(KgcError::Data(format!(
                    "checkpoint has {epochs_done} epochs, target is {}",
                    cfg.epochs
                )));
            }
            let same_config = meta.get("config").cloned().unwrap_or_default()
                == serde_json::to_value(cfg)
                    .map_err(|e| KgcError::Data(format!("config encode: {e}")))?;
            if !same_config {
                // A differently configured run may only continue from a pure
                // phase-one prefix with matching semantic settings.
                let all_phase1 = meta
                    .get("all_phase1")
                    .and_then(|v| v.as_bool())
                    .unwrap_or(false);
                let prefix_ok = meta.get("phase1_fingerprint").and_then(|v| v.as_str())
                    == Some(prefix_fp.as_str());
                if !(all_phase1 && prefix_ok && epochs_done <= cfg.t_start) {
                    return Err(KgcError::Data(
                        "checkpoint configuration is incompatible with this run".into(),
                    ));
                }
            }
            let mut adam = loaded
                .adam
                .clone()
                .ok_or_else(|| KgcError::Data("checkpoint lacks optimizer state".into()))?;
            adam.set_lr(cfg.lr);
            let model = Model::from_loaded(loaded, store.vocab(), cfg.arch())?;
            (model, adam, epochs_done)
        }
    };

    let make_meta = |epochs_done: usize| {
        serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "epochs_done": epochs_done,
            "seed": seed,
            "config": cfg,
            "vocab_fingerprint": vocab_fp,
            "phase1_fingerprint": prefix_fp,
            "all_phase1": epochs_done <= cfg.t_start,
            "dataset": dataset_meta,
        })
    };

    let mut save_points: Vec<(usize, &PathBuf)> = Vec::new();
    if let Some(p) = &outputs.phase1_checkpoint {
        if cfg.t_start <= cfg.epochs {
            save_points.push((cfg.t_start, p));
        } else {
            log::warn!(
                "phase switch epoch {} is beyond the run; no phase-one checkpoint",
                cfg.t_start
            );
        }
    }
    for (after, p) in &outputs.snapshots {
        save_points.push((*after, p));
    }
    if let Some(p) = &outputs.final_checkpoint {
        save_points.push((cfg.epochs, p));
    }

    let save_at = |k: usize, model: &Model, adam: &AdamW| -> Result<()> {
        for (point, path) in &save_points {
            if *point == k {
                checkpoint::save(path, &model.params, Some(adam), &make_meta(k))?;
            }
        }
        Ok(())
    };

    if start_epoch == 0 {
        save_at(0, &model, &adam)?;
    }

    let triples = store.train_augmented().to_vec();
    let mut records: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs - start_epoch);

    for epoch in start_epoch..cfg.epochs {
        let phase = phase_of(epoch, cfg.t_start);
        let mut shuffle_rng = derive(seed, Stream::Shuffle, epoch as u64);
        let mut neighbor_rng = derive(seed, Stream::Neighbors, epoch as u64);
        let mut dropout_rng = derive(seed, Stream::Dropout, epoch as u64);

        let mut order: Vec<usize> = (0..triples.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut accum = EpochAccum::new();
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Triple> = chunk.iter().map(|&i| triples[i]).collect();
            let mut tape = Tape::new();
            let (total_node, batch_stats) = match phase {
                Phase::Semantic => {
                    let loss = semantic_batch_loss(&model, &batch, &cfg, &mut tape)
                        .map_err(|e| batch_context(e, epoch, batch_idx))?;
                    (loss, None)
                }
                Phase::Synergy => {
                    let out = synergy_batch_loss(
                        &model,
                        store,
                        &batch,
                        &cfg,
                        &mut tape,
                        true,
                        &mut neighbor_rng,
                        &mut dropout_rng,
                        AlignTargets::Detached,
                    )
                    .map_err(|e| batch_context(e, epoch, batch_idx))?;
                    (out.total, Some(out))
                }
            };

            let total_value = tape.value(total_node).scalar_value();
            tape.backward(total_node, &mut model.params)
                .map_err(|e| batch_context(e, epoch, batch_idx))?;

            let grad_norm = model.params.global_grad_norm();
            if !grad_norm.is_finite() {
                return Err(KgcError::Numeric(format!(
                    "epoch {epoch}, batch {batch_idx}: non-finite gradient norm"
                )));
            }
            if grad_norm > cfg.grad_clip {
                model.params.scale_grads(cfg.grad_clip / grad_norm);
            }
            adam.step(&mut model.params)
                .map_err(|e| batch_context(e, epoch, batch_idx))?;

            accum.batches += 1;
            accum.total += total_value;
            accum.grad_norm += grad_norm;
            match batch_stats {
                None => accum.nce_sem += total_value,
                Some(out) => {
                    accum.nce_sem += out.nce_sem;
                    accum.nce_syn += out.nce_syn;
                    accum.alpha += out.mean_alpha;
                    accum.synergy_batches += 1;
                    if let (Some(aq), Some(ae)) = (out.align_query, out.align_entity) {
                        accum.align_q += aq;
                        accum.align_e += ae;
                        accum.align_batches += 1;
                    }
                }
            }
        }

        let record = accum.record(epoch, phase);
        log::info!(
            "epoch {epoch} phase {} loss {:.6} grad {:.4}",
            record.phase,
            record.l_total,
            record.grad_norm
        );
        records.push(record);
        save_at(epoch + 1, &model, &adam)?;
    }

    if let Some(curves) = &outputs.curves {
        write_curves(&records, curves, start_epoch > 0)?;
    }

    Ok(TrainReport {
        records,
        model,
        seed,
        start_epoch,
    })
}

pub const CURVES_HEADER: &str =
    "epoch,phase,l_total,l_nce_sem,l_nce_syn,l_align_query,l_align_entity,mean_alpha,grad_norm";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Writes (or, for resumed runs, appends to) the per-epoch training curves.
pub fn write_curves(records: &[EpochRecord], path: &std::path::Path, append: bool) -> Result<()> {
    let mut out = String::new();
    if !(append && path.exists()) {
        out.push_str(CURVES_HEADER);
        out.push('\n');
    }
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.phase,
            r.l_total,
            r.l_nce_sem,
            fmt_opt(r.l_nce_syn),
            fmt_opt(r.l_align_query),
            fmt_opt(r.l_align_entity),
            fmt_opt(r.mean_alpha),
            r.grad_norm
        ));
    }
    if append && path.exists() {
        use std::io::Write as _;
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| KgcError::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| KgcError::io(path, e))?;
    } else {
        std::fs::write(path, out).map_err(|e| KgcError::io(path, e))?;
    }
    Ok(())
}

/// Reads curves written by [`write_curves`].
pub fn read_curves(path: &std::path::Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| KgcError::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CURVES_HEADER => {}
        _ => {
            return Err(KgcError::Data(format!(
                "{}: not a curves file",
                path.display()
            )))
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(KgcError::Data(format!(
                "{}:{}: expected 9 fields, got {}",
                path.display(),
                i + 2,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| KgcError::Data(format!("{}:{}: {e}", path.display(), i + 2)))
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        records.push(EpochRecord {
            epoch: num(fields[0])? as usize,
            phase: num(fields[1])? as u8,
            l_total: num(fields[2])?,
            l_nce_sem: num(fields[3])?,
            l_nce_syn: opt(fields[4])?,
            l_align_query: opt(fields[5])?,
            l_align_entity: opt(fields[6])?,
            mean_alpha: opt(fields[7])?,
            grad_norm: num(fields[8])?,
        });
    }
    Ok(records)
}
