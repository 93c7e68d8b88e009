//! Binary checkpoints with bit-exact round-tripping.
//!
//! Layout: magic `SKGC`, format version (u32 LE), manifest length (u64 LE),
//! a JSON manifest (parameter names, shapes, trainable flags, optimizer
//! hyperparameters and step count, plus caller metadata), then one flat
//! little-endian `f64` payload: parameter values in manifest order, followed
//! by first and second Adam moments in the same order when optimizer state
//! is present. Values survive a save/load cycle bit for bit.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KgcError, Result};
use crate::numerics::optim::{AdamConfig, AdamW};
use crate::numerics::param::ParamSet;
use crate::numerics::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SKGC";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamEntry {
    step_count: u64,
    config: AdamConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    params: Vec<ParamEntry>,
    adam: Option<AdamEntry>,
    meta: serde_json::Value,
}

/// A checkpoint read back from disk.
#[derive(Debug)]
pub struct Loaded {
    pub params: ParamSet,
    pub adam: Option<AdamW>,
    pub meta: serde_json::Value,
}

pub fn save(
    path: &Path,
    params: &ParamSet,
    adam: Option<&AdamW>,
    meta: &serde_json::Value,
) -> Result<()> {
    let manifest = Manifest {
        params: params
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
        adam: adam.map(|a| AdamEntry {
            step_count: a.step_count(),
            config: a.config(),
        }),
        meta: meta.clone(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| KgcError::Data(format!("checkpoint manifest encode: {e}")))?;

    let mut payload: Vec<&Tensor> = params.iter().map(|(_, p)| &p.value).collect();
    if let Some(a) = adam {
        let (m, v) = a.moments();
        payload.extend(m.iter());
        payload.extend(v.iter());
    }

    let mut buf = Vec::with_capacity(
        MAGIC.len()
            + 12
            + manifest_bytes.len()
            + payload.iter().map(|t| t.len() * 8).sum::<usize>(),
    );
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest_bytes);
    for t in payload {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut file = fs::File::create(path).map_err(|e| KgcError::io(path, e))?;
    file.write_all(&buf).map_err(|e| KgcError::io(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = fs::read(path).map_err(|e| KgcError::io(path, e))?;
    let fail = |msg: &str| KgcError::Data(format!("checkpoint {}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(fail("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fail(&format!("unsupported format version {version}")));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(fail("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + manifest_len])
        .map_err(|e| fail(&format!("manifest decode: {e}")))?;

    let payload = &bytes[16 + manifest_len..];
    if payload.len() % 8 != 0 {
        return Err(fail("payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let param_elems: usize = manifest
        .params
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    let expected = if manifest.adam.is_some() {
        3 * param_elems
    } else {
        param_elems
    };
    if values.len() != expected {
        return Err(fail(&format!(
            "payload holds {} values, manifest implies {expected}",
            values.len()
        )));
    }

    let mut cursor = 0usize;
    let mut take = |shape: &[usize]| {
        let len: usize = shape.iter().product();
        let t = Tensor::new(shape.to_vec(), values[cursor..cursor + len].to_vec());
        cursor += len;
        t
    };

    let mut params = ParamSet::new();
    for entry in &manifest.params {
        params.add(entry.name.clone(), take(&entry.shape), entry.trainable);
    }
    let adam = manifest.adam.map(|entry| {
        let m: Vec<Tensor> = manifest.params.iter().map(|e| take(&e.shape)).collect();
        let v: Vec<Tensor> = manifest.params.iter().map(|e| take(&e.shape)).collect();
        AdamW::from_state(entry.config, entry.step_count, m, v)
    });

    Ok(Loaded {
        params,
        adam,
        meta: manifest.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};

    fn sample_params() -> ParamSet {
        let mut rng = derive(21, Stream::Init, 0);
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::glorot_uniform(3, 4, &mut rng), true);
        ps.add(
            "frozen_row",
            Tensor::uniform(vec![4], -1.0, 1.0, &mut rng),
            false,
        );
        ps.add("bias", Tensor::vector(vec![0.0, -0.0, 1.5e-308]), true);
        ps
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ps = sample_params();
        let mut adam = AdamW::new(&ps, AdamConfig::default());
        // Advance the optimizer so moments are non-trivial.
        let mut ps2 = ps.clone();
        let id = ps2.lookup("w").unwrap();
        let g = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1 - 0.4).collect());
        ps2.accumulate_grad(id, &g).unwrap();
        adam.step(&mut ps2).unwrap();

        let meta = serde_json::json!({"kind": "test", "epoch": 3});
        save(&path, &ps2, Some(&adam), &meta).unwrap();
        let loaded = load(&path).unwrap();

        assert_eq!(loaded.meta, meta);
        assert_eq!(loaded.params.len(), ps2.len());
        for ((_, a), (_, b)) in ps2.iter().zip(loaded.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.value.shape(), b.value.shape());
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let restored = loaded.adam.unwrap();
        assert_eq!(restored.step_count(), adam.step_count());
        assert_eq!(restored.config(), adam.config());
        let (m0, v0) = adam.moments();
        let (m1, v1) = restored.moments();
        for (a, b) in m0.iter().zip(m1).chain(v0.iter().zip(v1)) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        // A second save of the loaded state reproduces the file exactly.
        let path2 = dir.path().join("model2.ckpt");
        save(&path2, &loaded.params, Some(&restored), &loaded.meta).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn save_without_optimizer_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bare.ckpt");
        let ps = sample_params();
        save(&path, &ps, None, &serde_json::Value::Null).unwrap();
        let loaded = load(&path).unwrap();
        assert!(loaded.adam.is_none());
        assert_eq!(loaded.params.len(), 3);
    }

    #[test]
    fn corrupt_files_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"not a checkpoint").unwrap();
        let err = load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        let ps = sample_params();
        let good = dir.path().join("good.ckpt");
        save(&good, &ps, None, &serde_json::Value::Null).unwrap();
        let mut bytes = fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, &bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
