//! Filtered ranking evaluation.
//!
//! Queries and candidates are scored through the same fused tower that
//! training optimizes: every entity's fused representation is precomputed
//! once in evaluation mode, each query composes its `(head, relation)`
//! semantic vector and fuses it over the head's context pool, and raw
//! cosine similarity ranks the gold tail against every entity. Known
//! positives from all three splits are filtered out of the candidate list
//! (never the gold answer itself), and tied scores receive the average of
//! the positions they span. Every base triple is asked in both directions:
//! forward `(head, relation, ?)` and backward `(tail, inverse, ?)`.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kg_store::{EntityId, Split, Triple, TripleStore};
use crate::model::{Model, TowerInput};
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;
use crate::rng::{derive, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub queries: usize,
    pub mrr: f64,
    pub mr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl DirectionMetrics {
    fn zero() -> Self {
        DirectionMetrics {
            queries: 0,
            mrr: 0.0,
            mr: 0.0,
            hits1: 0.0,
            hits3: 0.0,
            hits10: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub forward: DirectionMetrics,
    pub backward: DirectionMetrics,
    pub both: DirectionMetrics,
}

impl MetricsReport {
    pub fn direction(&self, d: Direction) -> &DirectionMetrics {
        match d {
            Direction::Forward => &self.forward,
            Direction::Backward => &self.backward,
        }
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<9} {:>8} {:>8} {:>10} {:>8} {:>8} {:>8}",
            "direction", "queries", "MRR", "MR", "Hits@1", "Hits@3", "Hits@10"
        )?;
        for (name, m) in [
            ("forward", &self.forward),
            ("backward", &self.backward),
            ("both", &self.both),
        ] {
            writeln!(
                f,
                "{:<9} {:>8} {:>8.4} {:>10.2} {:>7.1}% {:>7.1}% {:>7.1}%",
                name,
                m.queries,
                m.mrr,
                m.mr,
                m.hits1 * 100.0,
                m.hits3 * 100.0,
                m.hits10 * 100.0
            )?;
        }
        Ok(())
    }
}

/// Accumulates rank statistics in a fixed visit order.
#[derive(Debug, Clone, Copy, Default)]
struct RankAccum {
    queries: usize,
    rr_sum: f64,
    rank_sum: f64,
    hits1: usize,
    hits3: usize,
    hits10: usize,
}

impl RankAccum {
    fn push(&mut self, rank: f64) {
        self.queries += 1;
        self.rr_sum += 1.0 / rank;
        self.rank_sum += rank;
        if rank <= 1.0 {
            self.hits1 += 1;
        }
        if rank <= 3.0 {
            self.hits3 += 1;
        }
        if rank <= 10.0 {
            self.hits10 += 1;
        }
    }

    fn merge(a: RankAccum, b: RankAccum) -> RankAccum {
        RankAccum {
            queries: a.queries + b.queries,
            rr_sum: a.rr_sum + b.rr_sum,
            rank_sum: a.rank_sum + b.rank_sum,
            hits1: a.hits1 + b.hits1,
            hits3: a.hits3 + b.hits3,
            hits10: a.hits10 + b.hits10,
        }
    }

    fn metrics(self) -> DirectionMetrics {
        if self.queries == 0 {
            return DirectionMetrics::zero();
        }
        let n = self.queries as f64;
        DirectionMetrics {
            queries: self.queries,
            mrr: self.rr_sum / n,
            mr: self.rank_sum / n,
            hits1: self.hits1 as f64 / n,
            hits3: self.hits3 as f64 / n,
            hits10: self.hits10 as f64 / n,
        }
    }
}

/// Cosine similarity on raw vectors; a degenerate (zero-norm or non-finite
/// norm) side maps to negative infinity so the candidate sinks to the
/// bottom instead of poisoning every comparison.
pub fn cosine_or_neg_inf(a: &Tensor, b: &Tensor) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na <= 0.0 || nb <= 0.0 || !na.is_finite() || !nb.is_finite() {
        return f64::NEG_INFINITY;
    }
    a.dot(b) / (na * nb)
}

/// Average-tie filtered rank of `gold` among `scores`. Candidates listed in
/// `filtered` are struck from the comparison entirely; the gold entity is
/// always kept even if listed. Ties with the gold score count half.
pub fn filtered_rank(scores: &[f64], gold: usize, filtered: &[EntityId]) -> f64 {
    let gold_score = scores[gold];
    let mut skip = vec![false; scores.len()];
    for &f in filtered {
        skip[f] = true;
    }
    skip[gold] = false;
    let mut greater = 0usize;
    let mut equal = 0usize;
    for (i, &s) in scores.iter().enumerate() {
        if i == gold || skip[i] {
            continue;
        }
        if s > gold_score {
            greater += 1;
        } else if s == gold_score {
            equal += 1;
        }
    }
    // A query whose own representation is degenerate scores everything at
    // negative infinity; the gold then ties the whole eligible field.
    if gold_score == f64::NEG_INFINITY {
        let eligible = skip.iter().enumerate().filter(|&(i, &s)| i == gold || !s).count();
        return 1.0 + (eligible - 1) as f64 / 2.0;
    }
    1.0 + greater as f64 + equal as f64 / 2.0
}

/// One ranking question: a center entity and relation asking for `gold`.
#[derive(Debug, Clone, Copy)]
pub struct Query {
    pub center: EntityId,
    pub relation: usize,
    pub gold: EntityId,
    pub direction: Direction,
}

/// Both directional queries for every base triple of `split`, forward
/// block first, each in triple order.
pub fn queries_for_split(store: &TripleStore, split: Split) -> Vec<Query> {
    let triples: &[Triple] = store.split(split);
    let mut out = Vec::with_capacity(triples.len() * 2);
    for t in triples {
        out.push(Query {
            center: t.head,
            relation: t.relation,
            gold: t.tail,
            direction: Direction::Forward,
        });
    }
    for t in triples {
        out.push(Query {
            center: t.tail,
            relation: store.vocab().inverse_of(t.relation),
            gold: t.head,
            direction: Direction::Backward,
        });
    }
    out
}

/// Fused representations for every entity, in vocabulary order, computed
/// in evaluation mode with the evaluation sampling stream.
pub fn entity_representations(
    model: &Model,
    store: &TripleStore,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let mut neighbor_rng = derive(seed, Stream::Eval, 0);
    let mut dropout_rng = derive(seed, Stream::Eval, 1);
    let mut reps = Vec::with_capacity(store.vocab().entity_count());
    for e in 0..store.vocab().entity_count() {
        let mut tape = Tape::new();
        let out = model.synergy_tower(
            &mut tape,
            store,
            TowerInput::Entity(e),
            false,
            &mut neighbor_rng,
            &mut dropout_rng,
        )?;
        reps.push(tape.value(out.fused).clone());
    }
    Ok(reps)
}

/// The fused representation of one query, evaluation mode.
pub fn query_representation(
    model: &Model,
    store: &TripleStore,
    query: &Query,
    neighbor_rng: &mut rand_chacha::ChaCha8Rng,
    dropout_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let out = model.synergy_tower(
        &mut tape,
        store,
        TowerInput::Query {
            head: query.center,
            relation: query.relation,
        },
        false,
        neighbor_rng,
        dropout_rng,
    )?;
    Ok(tape.value(out.fused).clone())
}

/// Scores `rep` against every entity representation.
pub fn score_against_all(rep: &Tensor, entities: &[Tensor]) -> Vec<f64> {
    entities.iter().map(|e| cosine_or_neg_inf(rep, e)).collect()
}

/// Runs the full filtered evaluation of `split`.
pub fn evaluate(
    model: &Model,
    store: &TripleStore,
    split: Split,
    seed: u64,
) -> Result<MetricsReport> {
    let entity_reps = entity_representations(model, store, seed)?;
    let mut degenerate = 0usize;
    for rep in &entity_reps {
        let n = rep.norm();
        if n <= 0.0 || n.is_nan() {
            degenerate += 1;
        }
    }
    if degenerate > 0 {
        log::warn!("{degenerate} entity representations have zero norm; they rank last");
    }

    let queries = queries_for_split(store, split);
    let mut neighbor_rng = derive(seed, Stream::Eval, 2);
    let mut dropout_rng = derive(seed, Stream::Eval, 3);

    let mut forward = RankAccum::default();
    let mut backward = RankAccum::default();
    for q in &queries {
        let rep = query_representation(model, store, q, &mut neighbor_rng, &mut dropout_rng)?;
        let scores = score_against_all(&rep, &entity_reps);
        let filtered = store.filtered_tails(q.center, q.relation);
        let rank = filtered_rank(&scores, q.gold, filtered);
        match q.direction {
            Direction::Forward => forward.push(rank),
            Direction::Backward => backward.push(rank),
        }
    }

    Ok(MetricsReport {
        split,
        forward: forward.metrics(),
        backward: backward.metrics(),
        both: RankAccum::merge(forward, backward).metrics(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg_store::toy::{self, ToySpec};
    use crate::synergy::SynergyConfig;
    use rand::Rng;

    #[test]
    fn rank_counts_strictly_greater_plus_one() {
        let scores = [0.9, 0.5, 0.7, 0.3];
        assert_eq!(filtered_rank(&scores, 1, &[]), 3.0);
        assert_eq!(filtered_rank(&scores, 0, &[]), 1.0);
        assert_eq!(filtered_rank(&scores, 3, &[]), 4.0);
    }

    #[test]
    fn rank_averages_ties() {
        // Gold ties two others at the top: positions 1..3 average to 2.
        let scores = [0.9, 0.9, 0.9, 0.3];
        assert_eq!(filtered_rank(&scores, 0, &[]), 2.0);
        // One higher, one tied: positions 2..3 average to 2.5.
        let scores = [1.0, 0.9, 0.9, 0.3];
        assert_eq!(filtered_rank(&scores, 1, &[]), 2.5);
    }

    #[test]
    fn rank_ignores_filtered_candidates_but_never_gold() {
        let scores = [0.9, 0.5, 0.7, 0.8];
        // Filtering the two higher scorers promotes the gold to rank 1.
        assert_eq!(filtered_rank(&scores, 1, &[0, 3]), 2.0);
        assert_eq!(filtered_rank(&scores, 1, &[0, 2, 3]), 1.0);
        // Gold listed in the filter is still ranked.
        assert_eq!(filtered_rank(&scores, 1, &[1]), 4.0);
    }

    #[test]
    fn growing_the_filter_never_worsens_the_rank() {
        let mut rng = crate::rng::derive(99, crate::rng::Stream::Synthetic, 0);
        for _ in 0..200 {
            let n = rng.random_range(3..30usize);
            // Coarse scores force plenty of ties.
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..8) as f64) / 8.0)
                .collect();
            let gold = rng.random_range(0..n);
            let mut filtered: Vec<EntityId> = (0..n)
                .filter(|_| rng.random_range(0..3usize) == 0)
                .collect();
            let r_small = filtered_rank(&scores, gold, &filtered);
            // Add one more filtered candidate.
            let extra = rng.random_range(0..n);
            filtered.push(extra);
            let r_big = filtered_rank(&scores, gold, &filtered);
            assert!(
                r_big <= r_small,
                "filter growth raised rank: {r_small} -> {r_big}"
            );
        }
    }

    #[test]
    fn degenerate_query_ties_whole_eligible_field() {
        let scores = [f64::NEG_INFINITY; 5];
        // All five eligible: gold ties the other four, rank 3.
        assert_eq!(filtered_rank(&scores, 2, &[]), 3.0);
        // Two filtered out: three eligible, rank 2.
        assert_eq!(filtered_rank(&scores, 2, &[0, 4]), 2.0);
    }

    #[test]
    fn zero_norm_candidate_scores_neg_inf() {
        let q = Tensor::vector(vec![1.0, 0.0]);
        let z = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(cosine_or_neg_inf(&q, &z), f64::NEG_INFINITY);
        assert_eq!(cosine_or_neg_inf(&z, &q), f64::NEG_INFINITY);
        let u = Tensor::vector(vec![0.0, 2.0]);
        assert!((cosine_or_neg_inf(&q, &u) - 0.0).abs() < 1e-15);
    }

    fn toy_model(seed: u64) -> (crate::kg_store::TripleStore, Model) {
        let store = toy::generate(&ToySpec {
            entities: 30,
            relations: 3,
            train: 80,
            valid: 10,
            test: 10,
            seed,
        })
        .unwrap();
        let cfg = SynergyConfig {
            dim: 8,
            heads: 2,
            pool_cap: 4,
            ..SynergyConfig::default()
        };
        let model = Model::init(store.vocab(), cfg, seed).unwrap();
        (store, model)
    }

    /// Re-derives every rank naively: sort the eligible candidates by
    /// score, find the gold's average position among equals.
    fn naive_rank(scores: &[f64], gold: usize, filtered: &[EntityId]) -> f64 {
        let keep: Vec<usize> = (0..scores.len())
            .filter(|&i| i == gold || !filtered.contains(&i))
            .collect();
        let gold_score = scores[gold];
        let better = keep.iter().filter(|&&i| scores[i] > gold_score).count();
        let tied = keep
            .iter()
            .filter(|&&i| i != gold && scores[i] == gold_score)
            .count();
        // Positions better+1 ..= better+1+tied, averaged.
        (better + 1) as f64 + tied as f64 / 2.0
    }

    #[test]
    fn full_evaluation_matches_naive_reimplementation() {
        for seed in [3u64, 14, 27] {
            let (store, model) = toy_model(seed);
            let report = evaluate(&model, &store, Split::Test, seed).unwrap();

            // Naive pass: same representations, independent ranking and
            // metric arithmetic.
            let reps = entity_representations(&model, &store, seed).unwrap();
            let queries = queries_for_split(&store, Split::Test);
            let mut nrng = derive(seed, Stream::Eval, 2);
            let mut drng = derive(seed, Stream::Eval, 3);
            let mut fwd: Vec<f64> = Vec::new();
            let mut bwd: Vec<f64> = Vec::new();
            for q in &queries {
                let rep =
                    query_representation(&model, &store, q, &mut nrng, &mut drng).unwrap();
                let scores = score_against_all(&rep, &reps);
                let rank = naive_rank(&scores, q.gold, store.filtered_tails(q.center, q.relation));
                match q.direction {
                    Direction::Forward => fwd.push(rank),
                    Direction::Backward => bwd.push(rank),
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let inv: Vec<f64> = fwd.iter().chain(&bwd).map(|r| 1.0 / r).collect();
            assert_eq!(report.forward.queries, fwd.len());
            assert_eq!(report.backward.queries, bwd.len());
            assert!((report.forward.mr - mean(&fwd)).abs() < 1e-12);
            assert!((report.backward.mr - mean(&bwd)).abs() < 1e-12);
            assert!((report.both.mrr - mean(&inv)).abs() < 1e-12);
            let hits1 = fwd
                .iter()
                .chain(&bwd)
                .filter(|&&r| r <= 1.0)
                .count() as f64
                / inv.len() as f64;
            assert!((report.both.hits1 - hits1).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (store, model) = toy_model(8);
        let a = evaluate(&model, &store, Split::Valid, 8).unwrap();
        let b = evaluate(&model, &store, Split::Valid, 8).unwrap();
        assert_eq!(a, b);
        let json_a = serde_json::to_string(&a).unwrap();
        let json_b = serde_json::to_string(&b).unwrap();
        assert_eq!(json_a, json_b);
    }

    #[test]
    fn report_serializes_and_prints() {
        let (store, model) = toy_model(5);
        let report = evaluate(&model, &store, Split::Test, 5).unwrap();
        let text = format!("{report}");
        assert!(text.contains("forward"));
        assert!(text.contains("backward"));
        assert!(text.contains("both"));
        assert!(text.contains('%'));
        let json = serde_json::to_string_pretty(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
