//! Triple storage and graph-side bookkeeping.
//!
//! A [`TripleStore`] holds the three dataset splits over a shared
//! [`Vocabulary`], the inverse-augmented training set, an adjacency index
//! over the base training graph, and the filtered-evaluation index of known
//! true completions. Relation ids `0..R` are the base relations in order of
//! first appearance; id `R + r` is the inverse of `r`, labeled
//! `<label>_inv`, so backward link prediction is ordinary forward
//! prediction under the inverse relation.

pub mod toy;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::error::{KgcError, Result};

pub type EntityId = usize;
pub type RelationId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Entity and relation interning. Relation ids double up: the first
/// `base_relations` ids are the loaded relations, the next
/// `base_relations` are their inverses.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    entity_labels: Vec<String>,
    entity_ids: HashMap<String, EntityId>,
    relation_labels: Vec<String>,
    relation_ids: HashMap<String, RelationId>,
    base_relations: usize,
}

impl Vocabulary {
    fn intern_entity(&mut self, label: &str) -> EntityId {
        if let Some(&id) = self.entity_ids.get(label) {
            return id;
        }
        let id = self.entity_labels.len();
        self.entity_labels.push(label.to_string());
        self.entity_ids.insert(label.to_string(), id);
        id
    }

    fn intern_relation(&mut self, label: &str) -> RelationId {
        if let Some(&id) = self.relation_ids.get(label) {
            return id;
        }
        let id = self.relation_labels.len();
        self.relation_labels.push(label.to_string());
        self.relation_ids.insert(label.to_string(), id);
        id
    }

    /// Appends the `_inv` twin for every base relation. Called once after
    /// all splits are interned.
    fn seal_inverses(&mut self) {
        self.base_relations = self.relation_labels.len();
        for r in 0..self.base_relations {
            let label = format!("{}_inv", self.relation_labels[r]);
            let id = self.relation_labels.len();
            self.relation_labels.push(label.clone());
            self.relation_ids.insert(label, id);
        }
    }

    pub fn entity_count(&self) -> usize {
        self.entity_labels.len()
    }

    /// Base relations only, excluding inverses.
    pub fn base_relation_count(&self) -> usize {
        self.base_relations
    }

    /// Base plus inverse relations.
    pub fn total_relation_count(&self) -> usize {
        self.relation_labels.len()
    }

    pub fn entity_label(&self, id: EntityId) -> &str {
        &self.entity_labels[id]
    }

    pub fn relation_label(&self, id: RelationId) -> &str {
        &self.relation_labels[id]
    }

    pub fn entity_id(&self, label: &str) -> Option<EntityId> {
        self.entity_ids.get(label).copied()
    }

    pub fn relation_id(&self, label: &str) -> Option<RelationId> {
        self.relation_ids.get(label).copied()
    }

    pub fn inverse_of(&self, r: RelationId) -> RelationId {
        if r < self.base_relations {
            r + self.base_relations
        } else {
            r - self.base_relations
        }
    }

    pub fn is_inverse(&self, r: RelationId) -> bool {
        r >= self.base_relations
    }
}

/// One adjacency entry: an incident base-training edge seen from one of its
/// endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub relation: RelationId,
    pub entity: EntityId,
    /// True when the owning entity is the head of the underlying edge.
    pub outgoing: bool,
}

#[derive(Debug, Clone)]
pub struct TripleStore {
    vocab: Vocabulary,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    /// Base training triples followed by their inverses in the same order.
    train_augmented: Vec<Triple>,
    /// Per entity, both directions over the base training split. Multi-edges
    /// appear once per edge; a self-loop contributes two entries.
    adjacency: Vec<Vec<Neighbor>>,
    /// Known true tails per `(entity, relation)` over the augmented triples
    /// of all three splits; sorted and deduplicated.
    filter: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    descriptions: Option<HashMap<EntityId, EntityDescription>>,
}

#[derive(Debug, Clone)]
pub struct EntityDescription {
    pub name: String,
    pub text: String,
}

impl TripleStore {
    /// Assembles a store from interned triples. `vocab` must not yet
    /// contain inverse relations.
    pub fn build(
        mut vocab: Vocabulary,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(KgcError::Data("training split is empty".into()));
        }
        vocab.seal_inverses();

        let mut train_augmented = Vec::with_capacity(train.len() * 2);
        train_augmented.extend_from_slice(&train);
        train_augmented.extend(train.iter().map(|t| Triple {
            head: t.tail,
            relation: vocab.inverse_of(t.relation),
            tail: t.head,
        }));

        let mut adjacency = vec![Vec::new(); vocab.entity_count()];
        for t in &train {
            adjacency[t.head].push(Neighbor {
                relation: t.relation,
                entity: t.tail,
                outgoing: true,
            });
            adjacency[t.tail].push(Neighbor {
                relation: t.relation,
                entity: t.head,
                outgoing: false,
            });
        }

        let mut filter: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        for split in [&train, &valid, &test] {
            for t in split.iter() {
                filter.entry((t.head, t.relation)).or_default().push(t.tail);
                filter
                    .entry((t.tail, vocab.inverse_of(t.relation)))
                    .or_default()
                    .push(t.head);
            }
        }
        for tails in filter.values_mut() {
            tails.sort_unstable();
            tails.dedup();
        }

        Ok(TripleStore {
            vocab,
            train,
            valid,
            test,
            train_augmented,
            adjacency,
            filter,
            descriptions: None,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Base training triples followed by their inverses in matching order.
    pub fn train_augmented(&self) -> &[Triple] {
        &self.train_augmented
    }

    pub fn adjacency(&self, e: EntityId) -> &[Neighbor] {
        &self.adjacency[e]
    }

    /// Undirected degree over the base training split.
    pub fn degree(&self, e: EntityId) -> usize {
        self.adjacency[e].len()
    }

    /// Known true tails for `(e, r)` across all splits, augmented; sorted.
    pub fn filtered_tails(&self, e: EntityId, r: RelationId) -> &[EntityId] {
        self.filter
            .get(&(e, r))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn descriptions(&self) -> Option<&HashMap<EntityId, EntityDescription>> {
        self.descriptions.as_ref()
    }

    /// Entities within `hops` BFS rings of `e` over the base training
    /// graph, in discovery order, excluding `e` itself. When the result
    /// exceeds `cap` it is subsampled without replacement and the surviving
    /// entities keep their discovery order.
    pub fn neighborhood(
        &self,
        e: EntityId,
        hops: usize,
        cap: usize,
        rng: &mut impl Rng,
    ) -> Vec<EntityId> {
        let mut visited = vec![false; self.vocab.entity_count()];
        visited[e] = true;
        let mut result = Vec::new();
        let mut frontier = vec![e];
        for _ in 0..hops {
            let mut next = Vec::new();
            for &x in &frontier {
                for n in &self.adjacency[x] {
                    if !visited[n.entity] {
                        visited[n.entity] = true;
                        result.push(n.entity);
                        next.push(n.entity);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        if result.len() > cap {
            let mut keep = rand::seq::index::sample(rng, result.len(), cap).into_vec();
            keep.sort_unstable();
            result = keep.into_iter().map(|i| result[i]).collect();
        }
        result
    }

    /// Attaches entity descriptions; unknown entity labels are ignored and
    /// counted in the return value as `(attached, skipped)`.
    pub fn attach_descriptions(&mut self, path: &Path) -> Result<(usize, usize)> {
        let text = fs::read_to_string(path).map_err(|e| KgcError::io(path, e))?;
        let mut map = HashMap::new();
        let mut skipped = 0usize;
        let mut malformed = 0usize;
        let mut total = 0usize;
        for line in text.lines() {
            let line = line.trim_end_matches('\r');
            total += 1;
            let mut parts = line.splitn(3, '\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(name), Some(desc)) if !id.is_empty() => {
                    match self.vocab.entity_id(id) {
                        Some(eid) => {
                            map.insert(
                                eid,
                                EntityDescription {
                                    name: name.to_string(),
                                    text: desc.to_string(),
                                },
                            );
                        }
                        None => skipped += 1,
                    }
                }
                _ => {
                    malformed += 1;
                    if malformed <= 5 {
                        log::warn!("{}:{}: malformed description line", path.display(), total);
                    }
                }
            }
        }
        check_malformed(path, malformed, total)?;
        let attached = map.len();
        self.descriptions = Some(map);
        Ok((attached, skipped))
    }

    pub fn degree_profile(&self) -> DegreePercentiles {
        let mut degrees: Vec<usize> = (0..self.vocab.entity_count())
            .map(|e| self.degree(e))
            .collect();
        degrees.sort_unstable();
        DegreePercentiles {
            p1: nearest_rank(&degrees, 1.0),
            p10: nearest_rank(&degrees, 10.0),
            p25: nearest_rank(&degrees, 25.0),
            p50: nearest_rank(&degrees, 50.0),
            p75: nearest_rank(&degrees, 75.0),
            p90: nearest_rank(&degrees, 90.0),
            p100: nearest_rank(&degrees, 100.0),
        }
    }

    pub fn stats(&self) -> DatasetStats {
        let isolated = (0..self.vocab.entity_count())
            .filter(|&e| self.degree(e) == 0)
            .count();
        let mean_degree = if self.vocab.entity_count() == 0 {
            0.0
        } else {
            self.adjacency.iter().map(Vec::len).sum::<usize>() as f64
                / self.vocab.entity_count() as f64
        };
        DatasetStats {
            entities: self.vocab.entity_count(),
            relations: self.vocab.base_relation_count(),
            train: self.train.len(),
            valid: self.valid.len(),
            test: self.test.len(),
            augmented_train: self.train_augmented.len(),
            isolated_entities: isolated,
            mean_degree,
            degree_percentiles: self.degree_profile(),
            descriptions_covered: self.descriptions.as_ref().map(HashMap::len),
        }
    }
}

/// Nearest-rank percentile over an ascending-sorted slice covering the
/// whole entity vocabulary, zero-degree entities included.
fn nearest_rank(sorted: &[usize], pct: f64) -> usize {
    assert!(!sorted.is_empty(), "percentile of an empty degree list");
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    sorted[rank.max(1) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DegreePercentiles {
    pub p1: usize,
    pub p10: usize,
    pub p25: usize,
    pub p50: usize,
    pub p75: usize,
    pub p90: usize,
    pub p100: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetStats {
    pub entities: usize,
    pub relations: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub augmented_train: usize,
    pub isolated_entities: usize,
    pub mean_degree: f64,
    pub degree_percentiles: DegreePercentiles,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub descriptions_covered: Option<usize>,
}

fn check_malformed(path: &Path, malformed: usize, total: usize) -> Result<()> {
    if total > 0 && malformed * 100 > total {
        return Err(KgcError::Data(format!(
            "{}: {malformed} of {total} lines malformed (over 1%)",
            path.display()
        )));
    }
    Ok(())
}

fn parse_triple_file(
    path: &Path,
    vocab: &mut Vocabulary,
) -> Result<Vec<Triple>> {
    let text = fs::read_to_string(path).map_err(|e| KgcError::io(path, e))?;
    let mut triples = Vec::new();
    let mut malformed = 0usize;
    let mut total = 0usize;
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        total += 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            malformed += 1;
            if malformed <= 5 {
                log::warn!("{}:{}: malformed triple line", path.display(), total);
            }
            continue;
        }
        triples.push(Triple {
            head: vocab.intern_entity(fields[0]),
            relation: vocab.intern_relation(fields[1]),
            tail: vocab.intern_entity(fields[2]),
        });
    }
    check_malformed(path, malformed, total)?;
    Ok(triples)
}

/// Loads the three tab-separated splits (`head<TAB>relation<TAB>tail` per
/// line), interning entities and relations in order of first appearance
/// across train, then valid, then test.
pub fn load_dataset(train: &Path, valid: &Path, test: &Path) -> Result<TripleStore> {
    let mut vocab = Vocabulary::default();
    let train_t = parse_triple_file(train, &mut vocab)?;
    let valid_t = parse_triple_file(valid, &mut vocab)?;
    let test_t = parse_triple_file(test, &mut vocab)?;
    TripleStore::build(vocab, train_t, valid_t, test_t)
}

/// Builds a store directly from labeled triples, for tests and synthetic
/// graphs. Splits are interned in the order train, valid, test.
pub fn store_from_labeled(
    train: &[(String, String, String)],
    valid: &[(String, String, String)],
    test: &[(String, String, String)],
) -> Result<TripleStore> {
    let mut vocab = Vocabulary::default();
    let intern = |vocab: &mut Vocabulary, triples: &[(String, String, String)]| {
        triples
            .iter()
            .map(|(h, r, t)| Triple {
                head: vocab.intern_entity(h),
                relation: vocab.intern_relation(r),
                tail: vocab.intern_entity(t),
            })
            .collect::<Vec<_>>()
    };
    let train_t = intern(&mut vocab, train);
    let valid_t = intern(&mut vocab, valid);
    let test_t = intern(&mut vocab, test);
    TripleStore::build(vocab, train_t, valid_t, test_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};
    use std::io::Write as _;

    fn labeled(triples: &[(&str, &str, &str)]) -> Vec<(String, String, String)> {
        triples
            .iter()
            .map(|(h, r, t)| (h.to_string(), r.to_string(), t.to_string()))
            .collect()
    }

    fn small_store() -> TripleStore {
        store_from_labeled(
            &labeled(&[
                ("a", "r1", "b"),
                ("b", "r2", "c"),
                ("a", "r1", "c"),
                ("c", "r1", "d"),
            ]),
            &labeled(&[("a", "r1", "d")]),
            &labeled(&[("d", "r2", "a")]),
        )
        .unwrap()
    }

    #[test]
    fn inverse_relations_double_the_id_space() {
        let store = small_store();
        let v = store.vocab();
        assert_eq!(v.base_relation_count(), 2);
        assert_eq!(v.total_relation_count(), 4);
        let r1 = v.relation_id("r1").unwrap();
        let r1_inv = v.relation_id("r1_inv").unwrap();
        assert_eq!(v.inverse_of(r1), r1_inv);
        assert_eq!(v.inverse_of(r1_inv), r1);
        assert!(!v.is_inverse(r1));
        assert!(v.is_inverse(r1_inv));
        assert_eq!(v.relation_label(r1_inv), "r1_inv");
    }

    #[test]
    fn augmented_train_keeps_original_order_then_inverses()  {
        let store = small_store();
        let aug = store.train_augmented();
        let base = store.split(Split::Train);
        assert_eq!(aug.len(), 2 * base.len());
        for (i, t) in base.iter().enumerate() {
            assert_eq!(&aug[i], t);
            let inv = &aug[base.len() + i];
            assert_eq!(inv.head, t.tail);
            assert_eq!(inv.tail, t.head);
            assert_eq!(inv.relation, store.vocab().inverse_of(t.relation));
        }
    }

    #[test]
    fn degree_is_undirected_over_base_train_only() {
        let store = small_store();
        let v = store.vocab();
        let id = |l: &str| v.entity_id(l).unwrap();
        // a: out r1->b, out r1->c. Valid/test edges must not count.
        assert_eq!(store.degree(id("a")), 2);
        // c: in r2<-b, in r1<-a, out r1->d.
        assert_eq!(store.degree(id("c")), 3);
        assert_eq!(store.degree(id("d")), 1);
    }

    #[test]
    fn multi_edges_and_self_loops_count_per_edge() {
        let store = store_from_labeled(
            &labeled(&[("a", "r", "b"), ("a", "r", "b"), ("a", "r", "a")]),
            &[],
            &[],
        )
        .unwrap();
        let a = store.vocab().entity_id("a").unwrap();
        let b = store.vocab().entity_id("b").unwrap();
        // a: two outgoing to b, plus both sides of the self-loop.
        assert_eq!(store.degree(a), 4);
        assert_eq!(store.degree(b), 2);
    }

    #[test]
    fn filter_spans_all_splits_and_both_directions() {
        let store = small_store();
        let v = store.vocab();
        let id = |l: &str| v.entity_id(l).unwrap();
        let r1 = v.relation_id("r1").unwrap();
        let r2 = v.relation_id("r2").unwrap();
        // (a, r1): b, c from train and d from valid.
        assert_eq!(
            store.filtered_tails(id("a"), r1),
            &[id("b"), id("c"), id("d")]
        );
        // Inverse of the test triple (d, r2, a).
        assert_eq!(
            store.filtered_tails(id("a"), v.inverse_of(r2)),
            &[id("d")]
        );
        assert!(store.filtered_tails(id("b"), r1).is_empty());
    }

    #[test]
    fn neighborhood_grows_by_rings_and_excludes_self() {
        let store = store_from_labeled(
            &labeled(&[("a", "r", "b"), ("b", "r", "c"), ("c", "r", "d")]),
            &[],
            &[],
        )
        .unwrap();
        let v = store.vocab();
        let id = |l: &str| v.entity_id(l).unwrap();
        let mut rng = derive(0, Stream::Neighbors, 0);
        let b = id("b");
        assert_eq!(
            store.neighborhood(b, 1, usize::MAX, &mut rng),
            vec![id("a"), id("c")]
        );
        assert_eq!(
            store.neighborhood(b, 2, usize::MAX, &mut rng),
            vec![id("a"), id("c"), id("d")]
        );
        assert_eq!(
            store.neighborhood(id("a"), 5, usize::MAX, &mut rng),
            vec![id("b"), id("c"), id("d")]
        );
    }

    #[test]
    fn neighborhood_cap_subsamples_preserving_order() {
        let triples: Vec<_> = (0..20)
            .map(|i| ("hub".to_string(), "r".to_string(), format!("n{i}")))
            .collect();
        let store = store_from_labeled(&triples, &[], &[]).unwrap();
        let hub = store.vocab().entity_id("hub").unwrap();
        let mut rng = derive(1, Stream::Neighbors, 0);
        let full = store.neighborhood(hub, 1, usize::MAX, &mut rng);
        assert_eq!(full.len(), 20);
        let capped = store.neighborhood(hub, 1, 5, &mut rng);
        assert_eq!(capped.len(), 5);
        // Surviving entities keep their BFS relative order.
        let positions: Vec<usize> = capped
            .iter()
            .map(|e| full.iter().position(|x| x == e).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        // Same seed, same subsample.
        let mut rng2 = derive(1, Stream::Neighbors, 0);
        store.neighborhood(hub, 1, usize::MAX, &mut rng2);
        let capped2 = store.neighborhood(hub, 1, 5, &mut rng2);
        assert_eq!(capped, capped2);
    }

    #[test]
    fn percentiles_use_nearest_rank_including_zero_degree() {
        // Degrees: a 2 (two edges), b 1, c 1, isolated only in valid: z 0.
        let store = store_from_labeled(
            &labeled(&[("a", "r", "b"), ("a", "r", "c")]),
            &labeled(&[("z", "r", "a")]),
            &[],
        )
        .unwrap();
        let p = store.degree_profile();
        // Sorted degrees: [0, 1, 1, 2].
        assert_eq!(p.p1, 0);
        assert_eq!(p.p25, 0);
        assert_eq!(p.p50, 1);
        assert_eq!(p.p75, 1);
        assert_eq!(p.p100, 2);
    }

    #[test]
    fn loads_tsv_files_and_tolerates_sparse_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, content: &str| {
            let p = dir.path().join(name);
            let mut f = fs::File::create(&p).unwrap();
            f.write_all(content.as_bytes()).unwrap();
            p
        };
        let mut train_content = String::new();
        for i in 0..200 {
            train_content.push_str(&format!("e{}\tr0\te{}\n", i, (i + 1) % 200));
        }
        train_content.push_str("only_two_fields\toops\n");
        let train = write("train.txt", &train_content);
        let valid = write("valid.txt", "e0\tr0\te5\r\n");
        let test = write("test.txt", "e1\tr0\te7\n");
        let store = load_dataset(&train, &valid, &test).unwrap();
        assert_eq!(store.split(Split::Train).len(), 200);
        assert_eq!(store.split(Split::Valid).len(), 1);
        assert_eq!(store.split(Split::Test).len(), 1);
        assert_eq!(store.vocab().entity_count(), 200);
    }

    #[test]
    fn too_many_malformed_lines_abort() {
        let dir = tempfile::tempdir().unwrap();
        let train = dir.path().join("train.txt");
        fs::write(&train, "a\tr\tb\nbroken line\nanother broken\n").unwrap();
        let valid = dir.path().join("valid.txt");
        fs::write(&valid, "").unwrap();
        let err = load_dataset(&train, &valid, &valid).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("malformed"));
    }

    #[test]
    fn empty_train_is_an_error() {
        let err = store_from_labeled(&[], &[], &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn descriptions_attach_by_label() {
        let mut store = small_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("desc.txt");
        fs::write(
            &path,
            "a\tAlpha\tfirst entity, with\ttab inside description\nunknown\tX\ty\n",
        )
        .unwrap();
        let (attached, skipped) = store.attach_descriptions(&path).unwrap();
        assert_eq!((attached, skipped), (1, 1));
        let a = store.vocab().entity_id("a").unwrap();
        let d = &store.descriptions().unwrap()[&a];
        assert_eq!(d.name, "Alpha");
        assert_eq!(d.text, "first entity, with\ttab inside description");
    }
}
