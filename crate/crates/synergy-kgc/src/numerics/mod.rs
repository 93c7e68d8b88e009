//! Dense `f64` numeric kernel.
//!
//! A [`tape::Tape`] records eagerly evaluated operations; one backward pass
//! consumes the tape and accumulates gradients into a [`param::ParamSet`].
//! [`optim::AdamW`] applies decoupled weight decay updates,
//! [`checkpoint`] round-trips parameters and optimizer state bit-exactly,
//! and [`gradcheck`] verifies analytic gradients against central differences.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use param::{ParamId, ParamSet, Parameter};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
