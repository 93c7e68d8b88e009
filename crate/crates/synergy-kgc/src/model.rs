//! The assembled dual-tower model: semantic embeddings, the query
//! composer, and the synergy fusion head over one shared parameter set.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{KgcError, Result};
use crate::kg_store::{EntityId, RelationId, TripleStore, Vocabulary};
use crate::numerics::checkpoint::Loaded;
use crate::numerics::param::ParamSet;
use crate::numerics::tape::{NodeId, Tape};
use crate::rng::{derive, Stream};
use crate::semantic::{EmbeddingTable, QueryComposer};
use crate::synergy::{build_context_pool, PoolMember, SynergyConfig, SynergyParams};

#[derive(Debug, Clone)]
pub struct Model {
    pub params: ParamSet,
    pub cfg: SynergyConfig,
    pub embeddings: EmbeddingTable,
    pub composer: QueryComposer,
    pub synergy: SynergyParams,
}

/// One element to encode: either the query side of a triple or a candidate
/// entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TowerInput {
    Query { head: EntityId, relation: RelationId },
    Entity(EntityId),
}

impl TowerInput {
    /// The entity whose neighborhood feeds the context pool.
    pub fn center(self) -> EntityId {
        match self {
            TowerInput::Query { head, .. } => head,
            TowerInput::Entity(e) => e,
        }
    }
}

/// Output of one synergy-tower pass.
#[derive(Debug, Clone, Copy)]
pub struct TowerOut {
    /// Fused representation.
    pub fused: NodeId,
    /// The semantic embedding the fusion started from.
    pub sem: NodeId,
    pub alpha: f64,
    pub pool_size: usize,
    pub anchored: bool,
    pub degenerate: bool,
}

impl Model {
    pub fn init(vocab: &Vocabulary, cfg: SynergyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive(seed, Stream::Init, 0);
        let mut params = ParamSet::new();
        let embeddings = EmbeddingTable::init(&mut params, vocab, cfg.dim, &mut rng);
        let composer = QueryComposer::init(&mut params, cfg.dim, &mut rng);
        let synergy = SynergyParams::init(&mut params, cfg.dim, &mut rng);
        Ok(Model {
            params,
            cfg,
            embeddings,
            composer,
            synergy,
        })
    }

    /// Rebinds model structure onto parameters restored from a checkpoint.
    pub fn from_loaded(loaded: Loaded, vocab: &Vocabulary, cfg: SynergyConfig) -> Result<Self> {
        Self::from_param_set(loaded.params, vocab, cfg)
    }

    /// Rebinds model structure onto an existing parameter set by name.
    pub fn from_param_set(params: ParamSet, vocab: &Vocabulary, cfg: SynergyConfig) -> Result<Self> {
        cfg.validate()?;
        let embeddings = EmbeddingTable::from_params(&params, vocab, cfg.dim)?;
        let composer = QueryComposer::from_params(&params, cfg.dim)?;
        let synergy = SynergyParams::from_params(&params, cfg.dim)?;
        Ok(Model {
            params,
            cfg,
            embeddings,
            composer,
            synergy,
        })
    }

    pub fn semantic_entity(&self, tape: &mut Tape, e: EntityId) -> Result<NodeId> {
        tape.param(&self.params, self.embeddings.entity(e))
    }

    pub fn semantic_query(
        &self,
        tape: &mut Tape,
        head: EntityId,
        relation: RelationId,
    ) -> Result<NodeId> {
        let h = tape.param(&self.params, self.embeddings.entity(head))?;
        let r = tape.param(&self.params, self.embeddings.relation(relation))?;
        self.composer.compose(tape, &self.params, h, r)
    }

    pub fn semantic(&self, tape: &mut Tape, input: TowerInput) -> Result<NodeId> {
        match input {
            TowerInput::Query { head, relation } => self.semantic_query(tape, head, relation),
            TowerInput::Entity(e) => self.semantic_entity(tape, e),
        }
    }

    /// Runs the full synergy tower for one element: semantic embedding,
    /// context pool around the element's center entity, fusion. The
    /// identity-anchor pool slot reuses the element's own semantic node;
    /// neighbor slots use the neighbors' embedding rows.
    pub fn synergy_tower(
        &self,
        tape: &mut Tape,
        store: &TripleStore,
        input: TowerInput,
        train: bool,
        neighbor_rng: &mut impl Rng,
        dropout_rng: &mut impl Rng,
    ) -> Result<TowerOut> {
        let sem = self.semantic(tape, input)?;
        let pool = build_context_pool(store, input.center(), &self.cfg, neighbor_rng);
        let member_sems: Vec<NodeId> = pool
            .members
            .iter()
            .map(|m| match m {
                PoolMember::SelfAnchor => Ok(sem),
                PoolMember::Neighbor(e) => self.semantic_entity(tape, *e),
            })
            .collect::<Result<_>>()?;
        let fuse = self.synergy.fuse(
            tape,
            &self.params,
            sem,
            &member_sems,
            &self.cfg,
            train,
            dropout_rng,
        )?;
        Ok(TowerOut {
            fused: fuse.fused,
            sem,
            alpha: fuse.alpha,
            pool_size: pool.members.len(),
            anchored: pool.anchored,
            degenerate: pool.degenerate,
        })
    }
}

/// Stable digest of the vocabulary (entity then relation labels), used to
/// verify that a checkpoint matches the dataset it is applied to.
pub fn vocab_fingerprint(vocab: &Vocabulary) -> String {
    let mut hasher = Sha256::new();
    for i in 0..vocab.entity_count() {
        hasher.update(vocab.entity_label(i).as_bytes());
        hasher.update([0u8]);
    }
    hasher.update([1u8]);
    for i in 0..vocab.total_relation_count() {
        hasher.update(vocab.relation_label(i).as_bytes());
        hasher.update([0u8]);
    }
    hex_string(&hasher.finalize())
}

/// Digest of a file's raw bytes.
pub fn file_fingerprint(path: &std::path::Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| KgcError::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg_store::toy::{self, ToySpec};
    use crate::numerics::checkpoint;
    use crate::synergy::DensityThreshold;

    fn toy_store() -> TripleStore {
        toy::generate(&ToySpec {
            entities: 12,
            relations: 2,
            train: 30,
            valid: 0,
            test: 0,
            seed: 3,
        })
        .unwrap()
    }

    fn small_cfg() -> SynergyConfig {
        SynergyConfig {
            dim: 8,
            heads: 2,
            pool_cap: 4,
            ..SynergyConfig::default()
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let store = toy_store();
        let a = Model::init(store.vocab(), small_cfg(), 42).unwrap();
        let b = Model::init(store.vocab(), small_cfg(), 42).unwrap();
        let c = Model::init(store.vocab(), small_cfg(), 43).unwrap();
        for ((_, pa), (_, pb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.value.data(), pb.value.data());
        }
        let differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|((_, pa), (_, pc))| pa.value.data() != pc.value.data());
        assert!(differs);
    }

    #[test]
    fn tower_is_deterministic_in_eval_mode() {
        let store = toy_store();
        let model = Model::init(store.vocab(), small_cfg(), 1).unwrap();
        let input = TowerInput::Query {
            head: 0,
            relation: 1,
        };
        let run = || {
            let mut tape = Tape::new();
            let mut n_rng = derive(9, Stream::Eval, 0);
            let mut d_rng = derive(9, Stream::Eval, 1);
            let out = model
                .synergy_tower(&mut tape, &store, input, false, &mut n_rng, &mut d_rng)
                .unwrap();
            tape.value(out.fused).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn checkpoint_round_trip_restores_tower_output() {
        let store = toy_store();
        let model = Model::init(store.vocab(), small_cfg(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        checkpoint::save(&path, &model.params, None, &serde_json::Value::Null).unwrap();
        let loaded = checkpoint::load(&path).unwrap();
        let restored = Model::from_loaded(loaded, store.vocab(), small_cfg()).unwrap();

        let eval = |m: &Model| {
            let mut tape = Tape::new();
            let mut n_rng = derive(2, Stream::Eval, 0);
            let mut d_rng = derive(2, Stream::Eval, 1);
            let out = m
                .synergy_tower(
                    &mut tape,
                    &store,
                    TowerInput::Entity(3),
                    false,
                    &mut n_rng,
                    &mut d_rng,
                )
                .unwrap();
            tape.value(out.fused).clone()
        };
        assert_eq!(eval(&model).data(), eval(&restored).data());
    }

    #[test]
    fn tower_reports_pool_metadata() {
        let store = toy_store();
        let cfg = SynergyConfig {
            phi: DensityThreshold::Infinite,
            ..small_cfg()
        };
        let model = Model::init(store.vocab(), cfg, 2).unwrap();
        let mut tape = Tape::new();
        let mut n_rng = derive(0, Stream::Neighbors, 0);
        let mut d_rng = derive(0, Stream::Dropout, 0);
        let out = model
            .synergy_tower(
                &mut tape,
                &store,
                TowerInput::Entity(0),
                true,
                &mut n_rng,
                &mut d_rng,
            )
            .unwrap();
        assert!(out.anchored);
        assert!(out.pool_size >= 1);
        assert!(out.alpha > 0.0 && out.alpha < 1.0);
    }

    #[test]
    fn fingerprints_are_stable_and_sensitive() {
        let store = toy_store();
        let a = vocab_fingerprint(store.vocab());
        let b = vocab_fingerprint(store.vocab());
        assert_eq!(a, b);
        let other = toy::generate(&ToySpec {
            entities: 13,
            relations: 2,
            train: 30,
            valid: 0,
            test: 0,
            seed: 3,
        })
        .unwrap();
        assert_ne!(a, vocab_fingerprint(other.vocab()));
    }
}
