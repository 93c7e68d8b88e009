//! Semantic embedding tower: per-entity and per-relation embedding rows
//! plus the query composer that turns a `(head, relation)` pair into a
//! query vector in the same space.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{KgcError, Result};
use crate::kg_store::{EntityId, RelationId, Vocabulary};
use crate::numerics::param::{ParamId, ParamSet};
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor;

/// Embedding rows registered as individual parameters, one per entity and
/// one per relation (inverse relations included), so single rows can be
/// frozen independently when embeddings are imported.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    entity_rows: Vec<ParamId>,
    relation_rows: Vec<ParamId>,
    pub dim: usize,
}

impl EmbeddingTable {
    /// Initializes every row uniformly in `[-1/sqrt(d), 1/sqrt(d))`.
    pub fn init(
        params: &mut ParamSet,
        vocab: &Vocabulary,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let limit = 1.0 / (dim as f64).sqrt();
        let entity_rows = (0..vocab.entity_count())
            .map(|i| {
                params.add(
                    format!("emb/e{i}"),
                    Tensor::uniform(vec![dim], -limit, limit, rng),
                    true,
                )
            })
            .collect();
        let relation_rows = (0..vocab.total_relation_count())
            .map(|i| {
                params.add(
                    format!("emb/r{i}"),
                    Tensor::uniform(vec![dim], -limit, limit, rng),
                    true,
                )
            })
            .collect();
        EmbeddingTable {
            entity_rows,
            relation_rows,
            dim,
        }
    }

    /// Rebinds row ids against a parameter set restored from a checkpoint.
    pub fn from_params(params: &ParamSet, vocab: &Vocabulary, dim: usize) -> Result<Self> {
        let lookup = |name: String| {
            params
                .lookup(&name)
                .ok_or_else(|| KgcError::Data(format!("checkpoint is missing parameter `{name}`")))
        };
        let entity_rows = (0..vocab.entity_count())
            .map(|i| lookup(format!("emb/e{i}")))
            .collect::<Result<Vec<_>>>()?;
        let relation_rows = (0..vocab.total_relation_count())
            .map(|i| lookup(format!("emb/r{i}")))
            .collect::<Result<Vec<_>>>()?;
        for &id in entity_rows.iter().chain(&relation_rows) {
            if params.get(id).value.len() != dim {
                return Err(KgcError::Data(format!(
                    "embedding row `{}` has dimension {}, expected {dim}",
                    params.get(id).name,
                    params.get(id).value.len()
                )));
            }
        }
        Ok(EmbeddingTable {
            entity_rows,
            relation_rows,
            dim,
        })
    }

    pub fn entity(&self, e: EntityId) -> ParamId {
        self.entity_rows[e]
    }

    pub fn relation(&self, r: RelationId) -> ParamId {
        self.relation_rows[r]
    }

    /// Overwrites entity rows with imported vectors; when `freeze` is set
    /// the imported rows stop receiving optimizer updates while the rest of
    /// the table keeps training. Returns the number of rows written.
    pub fn import_entities(
        &self,
        params: &mut ParamSet,
        imported: &HashMap<EntityId, Vec<f64>>,
        freeze: bool,
    ) -> Result<usize> {
        for (&e, row) in imported {
            if row.len() != self.dim {
                return Err(KgcError::Data(format!(
                    "imported embedding for entity {e} has {} values, expected {}",
                    row.len(),
                    self.dim
                )));
            }
            let p = params.get_mut(self.entity(e));
            p.value = Tensor::vector(row.clone());
            if freeze {
                p.trainable = false;
            }
        }
        Ok(imported.len())
    }
}

/// Query tower: `tanh(W [e_h; e_r] + b)` mapping a head/relation pair into
/// the entity embedding space.
#[derive(Debug, Clone, Copy)]
pub struct QueryComposer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl QueryComposer {
    pub fn init(params: &mut ParamSet, dim: usize, rng: &mut impl Rng) -> Self {
        QueryComposer {
            weight: params.add(
                "composer/w",
                Tensor::glorot_uniform(dim, 2 * dim, rng),
                true,
            ),
            bias: params.add("composer/b", Tensor::zeros(vec![dim]), true),
        }
    }

    pub fn from_params(params: &ParamSet, dim: usize) -> Result<Self> {
        let weight = params
            .lookup("composer/w")
            .ok_or_else(|| KgcError::Data("checkpoint is missing parameter `composer/w`".into()))?;
        let bias = params
            .lookup("composer/b")
            .ok_or_else(|| KgcError::Data("checkpoint is missing parameter `composer/b`".into()))?;
        if params.get(weight).value.shape() != [dim, 2 * dim] {
            return Err(KgcError::Data(format!(
                "composer weight has shape {:?}, expected [{dim}, {}]",
                params.get(weight).value.shape(),
                2 * dim
            )));
        }
        Ok(QueryComposer { weight, bias })
    }

    pub fn compose(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        head: NodeId,
        relation: NodeId,
    ) -> Result<NodeId> {
        let hr = tape.concat(head, relation)?;
        let w = tape.param(params, self.weight)?;
        let b = tape.param(params, self.bias)?;
        let lin = tape.affine(w, hr, Some(b))?;
        tape.tanh(lin)
    }
}

/// Parses an embedding import file: `entity_id<TAB>v1,v2,...,vd` per line.
/// Unknown entities are skipped with a warning; inconsistent dimensions or
/// unparseable numbers are hard errors.
pub fn load_embedding_tsv(
    path: &Path,
    vocab: &Vocabulary,
) -> Result<HashMap<EntityId, Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| KgcError::io(path, e))?;
    let mut map = HashMap::new();
    let mut dim: Option<usize> = None;
    let mut skipped = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let (label, values) = line.split_once('\t').ok_or_else(|| {
            KgcError::Data(format!(
                "{}:{}: expected `entity<TAB>v1,v2,...`",
                path.display(),
                lineno + 1
            ))
        })?;
        let row: Vec<f64> = values
            .split(',')
            .map(|v| {
                v.trim().parse::<f64>().map_err(|e| {
                    KgcError::Data(format!(
                        "{}:{}: bad number `{v}`: {e}",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(KgcError::Data(format!(
                    "{}:{}: dimension {} differs from {}",
                    path.display(),
                    lineno + 1,
                    row.len(),
                    d
                )));
            }
            _ => {}
        }
        match vocab.entity_id(label) {
            Some(e) => {
                map.insert(e, row);
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!(
            "{}: skipped {skipped} embeddings for unknown entities",
            path.display()
        );
    }
    Ok(map)
}
