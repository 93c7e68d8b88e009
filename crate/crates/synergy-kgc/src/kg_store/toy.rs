//! Seeded synthetic graphs for tests, examples, and sweep smoke runs.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{KgcError, Result};
use crate::kg_store::{store_from_labeled, TripleStore};
use crate::rng::{derive, Stream};

#[derive(Debug, Clone, Copy)]
pub struct ToySpec {
    pub entities: usize,
    pub relations: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            entities: 50,
            relations: 5,
            train: 200,
            valid: 0,
            test: 0,
            seed: 7,
        }
    }
}

/// String-labeled `(head, relation, tail)` triples.
pub type LabeledTriples = Vec<(String, String, String)>;

/// Distinct random triples with `head != tail`, split into train/valid/test
/// in generation order. Identical specs produce identical datasets.
pub fn generate_labeled(
    spec: &ToySpec,
) -> Result<(LabeledTriples, LabeledTriples, LabeledTriples)> {
    let total = spec.train + spec.valid + spec.test;
    if spec.entities < 2 || spec.relations == 0 {
        return Err(KgcError::Config(
            "toy graph needs at least 2 entities and 1 relation".into(),
        ));
    }
    let capacity = spec.entities * (spec.entities - 1) * spec.relations;
    if total > capacity {
        return Err(KgcError::Config(format!(
            "toy graph cannot hold {total} distinct triples (capacity {capacity})"
        )));
    }

    let mut rng = derive(spec.seed, Stream::Synthetic, 0);
    let mut seen = HashSet::with_capacity(total);
    let mut triples = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while triples.len() < total {
        attempts += 1;
        if attempts > 200 * total + 10_000 {
            return Err(KgcError::Config(format!(
                "toy sampling stalled at {} of {total} triples",
                triples.len()
            )));
        }
        let h = rng.random_range(0..spec.entities);
        let mut t = rng.random_range(0..spec.entities - 1);
        if t >= h {
            t += 1;
        }
        let r = rng.random_range(0..spec.relations);
        if seen.insert((h, r, t)) {
            triples.push((format!("e{h}"), format!("r{r}"), format!("e{t}")));
        }
    }

    let valid_start = spec.train;
    let test_start = spec.train + spec.valid;
    let test = triples.split_off(test_start);
    let valid = triples.split_off(valid_start);
    Ok((triples, valid, test))
}

pub fn generate(spec: &ToySpec) -> Result<TripleStore> {
    let (train, valid, test) = generate_labeled(spec)?;
    store_from_labeled(&train, &valid, &test)
}

/// Writes the generated splits as `train.tsv`, `valid.tsv`, `test.tsv`
/// under `dir` and returns the three paths.
pub fn write_tsv(spec: &ToySpec, dir: &Path) -> Result<(PathBuf, PathBuf, PathBuf)> {
    let (train, valid, test) = generate_labeled(spec)?;
    fs::create_dir_all(dir).map_err(|e| KgcError::io(dir, e))?;
    let write = |name: &str, triples: &[(String, String, String)]| -> Result<PathBuf> {
        let path = dir.join(name);
        let mut out = String::new();
        for (h, r, t) in triples {
            out.push_str(h);
            out.push('\t');
            out.push_str(r);
            out.push('\t');
            out.push_str(t);
            out.push('\n');
        }
        fs::write(&path, out).map_err(|e| KgcError::io(&path, e))?;
        Ok(path)
    };
    Ok((
        write("train.tsv", &train)?,
        write("valid.tsv", &valid)?,
        write("test.tsv", &test)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg_store::Split;

    #[test]
    fn generation_is_deterministic_and_distinct() {
        let spec = ToySpec {
            entities: 30,
            relations: 4,
            train: 120,
            valid: 20,
            test: 20,
            seed: 11,
        };
        let (a_train, a_valid, a_test) = generate_labeled(&spec).unwrap();
        let (b_train, ..) = generate_labeled(&spec).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_train.len(), 120);
        assert_eq!(a_valid.len(), 20);
        assert_eq!(a_test.len(), 20);
        let mut all = a_train.clone();
        all.extend(a_valid.clone());
        all.extend(a_test.clone());
        let set: HashSet<_> = all.iter().collect();
        assert_eq!(set.len(), 160);
        // No self-loops.
        assert!(all.iter().all(|(h, _, t)| h != t));
    }

    #[test]
    fn store_round_trip_through_tsv() {
        let spec = ToySpec {
            entities: 20,
            relations: 3,
            train: 60,
            valid: 10,
            test: 10,
            seed: 5,
        };
        let dir = tempfile::tempdir().unwrap();
        let (train, valid, test) = write_tsv(&spec, dir.path()).unwrap();
        let from_files = crate::kg_store::load_dataset(&train, &valid, &test).unwrap();
        let direct = generate(&spec).unwrap();
        assert_eq!(
            from_files.split(Split::Train),
            direct.split(Split::Train)
        );
        assert_eq!(from_files.split(Split::Test), direct.split(Split::Test));
        assert_eq!(
            from_files.vocab().entity_count(),
            direct.vocab().entity_count()
        );
    }

    #[test]
    fn impossible_specs_are_config_errors() {
        let spec = ToySpec {
            entities: 3,
            relations: 1,
            train: 100,
            valid: 0,
            test: 0,
            seed: 0,
        };
        assert_eq!(generate(&spec).unwrap_err().exit_code(), 2);
    }
}
