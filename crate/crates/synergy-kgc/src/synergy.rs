//! Synergy tower: density-aware context pools and the gated cross-modal
//! fusion that enriches a semantic embedding with its neighborhood.
//!
//! For an element `x` with semantic embedding `e`, the context pool holds
//! the semantic embeddings of `x`'s k-hop neighbors, plus `e` itself as an
//! identity anchor when `x`'s training-graph degree does not exceed the
//! density threshold. A projected query attends over the projected pool
//! (the pool serves as both keys and values), an adaptive gate blends the
//! query with the attention readout, and the result re-enters the semantic
//! embedding through a dropout-guarded residual followed by layer
//! normalization.

use rand::Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{KgcError, Result};
use crate::kg_store::{EntityId, TripleStore};
use crate::numerics::param::{ParamId, ParamSet};
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor;

/// Degree threshold for identity anchoring: an entity anchors its own
/// semantic embedding into the context pool when its degree is at most the
/// threshold. `Infinite` anchors every entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityThreshold {
    Finite(usize),
    Infinite,
}

impl DensityThreshold {
    pub fn admits(self, degree: usize) -> bool {
        match self {
            DensityThreshold::Finite(phi) => degree <= phi,
            DensityThreshold::Infinite => true,
        }
    }
}

impl std::fmt::Display for DensityThreshold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DensityThreshold::Finite(phi) => write!(f, "{phi}"),
            DensityThreshold::Infinite => write!(f, "inf"),
        }
    }
}

impl std::str::FromStr for DensityThreshold {
    type Err = KgcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inf" | "infinite" => Ok(DensityThreshold::Infinite),
            _ => s
                .parse::<usize>()
                .map(DensityThreshold::Finite)
                .map_err(|_| {
                    KgcError::Config(format!(
                        "density threshold must be a non-negative integer or `inf`, got `{s}`"
                    ))
                }),
        }
    }
}

impl Serialize for DensityThreshold {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            DensityThreshold::Finite(phi) => serializer.serialize_u64(*phi as u64),
            DensityThreshold::Infinite => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for DensityThreshold {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(n) => Ok(DensityThreshold::Finite(n as usize)),
            Raw::Text(s) => s.parse().map_err(|e: KgcError| D::Error::custom(e.to_string())),
        }
    }
}

/// Architecture of the synergy tower. Also carries the embedding dimension
/// and dropout rate shared with the semantic tower.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynergyConfig {
    pub dim: usize,
    pub heads: usize,
    /// Neighborhood radius for context pools, 1 to 5.
    pub hops: usize,
    pub phi: DensityThreshold,
    /// Maximum neighbors kept in a pool; the identity anchor is extra.
    pub pool_cap: usize,
    pub dropout: f64,
    /// Identity anchoring on/off.
    pub anchor: bool,
    /// Cross-modal attention; when off the pool is mean-pooled instead.
    pub cross_attention: bool,
    /// Adaptive gate; when off the blend is fixed at one half.
    pub adaptive_gate: bool,
}

impl Default for SynergyConfig {
    fn default() -> Self {
        SynergyConfig {
            dim: 64,
            heads: 4,
            hops: 1,
            phi: DensityThreshold::Finite(1),
            pool_cap: 64,
            dropout: 0.1,
            anchor: true,
            cross_attention: true,
            adaptive_gate: true,
        }
    }
}

impl SynergyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(KgcError::Config("dimension must be positive".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(KgcError::Config(format!(
                "dimension {} is not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        if !(1..=5).contains(&self.hops) {
            return Err(KgcError::Config(format!(
                "hops must be between 1 and 5, got {}",
                self.hops
            )));
        }
        if self.pool_cap == 0 {
            return Err(KgcError::Config("pool_cap must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(KgcError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// One context-pool slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMember {
    /// The element's own semantic embedding.
    SelfAnchor,
    /// A neighbor entity's semantic embedding.
    Neighbor(EntityId),
}

#[derive(Debug, Clone)]
pub struct ContextPool {
    pub center: EntityId,
    pub members: Vec<PoolMember>,
    /// Whether the identity anchor was admitted by the density rule.
    pub anchored: bool,
    /// True when the pool had neither anchor nor neighbors and fell back to
    /// the bare identity to stay non-empty.
    pub degenerate: bool,
}

impl ContextPool {
    pub fn contains_self(&self) -> bool {
        self.members.contains(&PoolMember::SelfAnchor)
    }
}

/// Builds the context pool for the element centered on `center`: its k-hop
/// neighbors (subsampled to `pool_cap` when larger), preceded by the
/// identity anchor when anchoring is on and `degree(center) <= phi`. An
/// empty pool degenerates to the bare identity so downstream attention
/// always has at least one member.
pub fn build_context_pool(
    store: &TripleStore,
    center: EntityId,
    cfg: &SynergyConfig,
    rng: &mut impl Rng,
) -> ContextPool {
    let neighbors = store.neighborhood(center, cfg.hops, cfg.pool_cap, rng);
    let anchored = cfg.anchor && cfg.phi.admits(store.degree(center));
    let mut members = Vec::with_capacity(neighbors.len() + 1);
    if anchored {
        members.push(PoolMember::SelfAnchor);
    }
    members.extend(neighbors.into_iter().map(PoolMember::Neighbor));
    let degenerate = members.is_empty();
    if degenerate {
        log::debug!("entity {center}: empty context pool, falling back to bare identity");
        members.push(PoolMember::SelfAnchor);
    }
    ContextPool {
        center,
        members,
        anchored,
        degenerate,
    }
}

/// Trainable pieces of the synergy tower.
#[derive(Debug, Clone, Copy)]
pub struct SynergyParams {
    /// Query projection, no bias.
    pub query_proj: ParamId,
    /// Shared key/value projection, no bias.
    pub context_proj: ParamId,
    pub gate_hidden_w: ParamId,
    pub gate_hidden_b: ParamId,
    pub gate_out_w: ParamId,
    pub gate_out_b: ParamId,
    pub fuse_gain: ParamId,
    pub fuse_bias: ParamId,
}

/// Initial bias of the gate output unit. With the zero-initialized output
/// weights this opens the gate at `sigmoid(2) ~ 0.881` toward the query.
pub const GATE_BIAS_INIT: f64 = 2.0;

impl SynergyParams {
    pub fn init(params: &mut ParamSet, dim: usize, rng: &mut impl Rng) -> Self {
        SynergyParams {
            query_proj: params.add(
                "synergy/wq",
                Tensor::glorot_uniform(dim, dim, rng),
                true,
            ),
            context_proj: params.add(
                "synergy/wkv",
                Tensor::glorot_uniform(dim, dim, rng),
                true,
            ),
            gate_hidden_w: params.add(
                "gate/w1",
                Tensor::glorot_uniform(dim, 2 * dim, rng),
                true,
            ),
            gate_hidden_b: params.add("gate/b1", Tensor::zeros(vec![dim]), true),
            // Zero output weights make the initial gate input-independent;
            // only the bias sets the opening.
            gate_out_w: params.add("gate/w2", Tensor::zeros(vec![1, dim]), true),
            gate_out_b: params.add("gate/b2", Tensor::vector(vec![GATE_BIAS_INIT]), true),
            fuse_gain: params.add("fuse/gain", Tensor::new(vec![dim], vec![1.0; dim]), true),
            fuse_bias: params.add("fuse/bias", Tensor::zeros(vec![dim]), true),
        }
    }

    pub fn from_params(params: &ParamSet, dim: usize) -> Result<Self> {
        let lookup = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .lookup(name)
                .ok_or_else(|| KgcError::Data(format!("checkpoint is missing parameter `{name}`")))?;
            if params.get(id).value.shape() != shape {
                return Err(KgcError::Data(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    params.get(id).value.shape()
                )));
            }
            Ok(id)
        };
        Ok(SynergyParams {
            query_proj: lookup("synergy/wq", &[dim, dim])?,
            context_proj: lookup("synergy/wkv", &[dim, dim])?,
            gate_hidden_w: lookup("gate/w1", &[dim, 2 * dim])?,
            gate_hidden_b: lookup("gate/b1", &[dim])?,
            gate_out_w: lookup("gate/w2", &[1, dim])?,
            gate_out_b: lookup("gate/b2", &[1])?,
            fuse_gain: lookup("fuse/gain", &[dim])?,
            fuse_bias: lookup("fuse/bias", &[dim])?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FuseOut {
    /// Fused representation after residual and layer norm.
    pub fused: NodeId,
    pub alpha_node: NodeId,
    /// Gate value as a plain number, for logging.
    pub alpha: f64,
}

impl SynergyParams {
    /// Fuses a semantic embedding with its context pool.
    ///
    /// `member_sems` are the semantic embeddings of the pool members in pool
    /// order (the identity anchor slot carries `e_sem` itself). Steps:
    /// project the query and the pool, attend (or mean-pool when cross
    /// attention is ablated), gate, then `layer_norm(e_sem + dropout(blend))`.
    #[allow(clippy::too_many_arguments)]
    pub fn fuse(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        e_sem: NodeId,
        member_sems: &[NodeId],
        cfg: &SynergyConfig,
        train: bool,
        dropout_rng: &mut impl Rng,
    ) -> Result<FuseOut> {
        let wq = tape.param(params, self.query_proj)?;
        let wkv = tape.param(params, self.context_proj)?;
        let q = tape.affine(wq, e_sem, None)?;
        let projected: Vec<NodeId> = member_sems
            .iter()
            .map(|&m| tape.affine(wkv, m, None))
            .collect::<Result<_>>()?;
        let c_syn = if cfg.cross_attention {
            tape.attend(q, &projected, cfg.heads)?
        } else {
            tape.mean_vecs(&projected)?
        };
        let alpha_node = if cfg.adaptive_gate {
            let cat = tape.concat(q, c_syn)?;
            let w1 = tape.param(params, self.gate_hidden_w)?;
            let b1 = tape.param(params, self.gate_hidden_b)?;
            let hidden = tape.affine(w1, cat, Some(b1))?;
            let hidden = tape.tanh(hidden)?;
            let w2 = tape.param(params, self.gate_out_w)?;
            let b2 = tape.param(params, self.gate_out_b)?;
            let z = tape.affine(w2, hidden, Some(b2))?;
            tape.sigmoid(z)?
        } else {
            tape.constant(Tensor::scalar(0.5))?
        };
        let alpha = tape.value(alpha_node).scalar_value();
        let blend = tape.gate_blend(alpha_node, q, c_syn)?;
        let dropped = tape.dropout(blend, cfg.dropout, train, dropout_rng)?;
        let residual = tape.add(e_sem, dropped)?;
        let gain = tape.param(params, self.fuse_gain)?;
        let bias = tape.param(params, self.fuse_bias)?;
        let fused = tape.layer_norm(residual, gain, bias)?;
        Ok(FuseOut {
            fused,
            alpha_node,
            alpha,
        })
    }
}
