//! Hyperparameter and ablation sweeps.
//!
//! One sweep varies a single axis of the training configuration, trains a
//! model per value, evaluates it with filtered ranking, and emits one CSV
//! row per value and direction. All points share the seed of the sweep, so
//! rows differ only by the axis value.
//!
//! Because the semantic warm-up phase is unaffected by every swept setting,
//! the sweep first trains one all-semantic prefix run, snapshots it at each
//! needed phase-switch epoch, and resumes every point from its snapshot;
//! results are bit-identical to training each point from scratch, at a
//! fraction of the cost.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{KgcError, Result};
use crate::evaluator::{evaluate, MetricsReport};
use crate::kg_store::{Split, TripleStore};
use crate::numerics::checkpoint;
use crate::trainer::{train, TrainConfig, TrainJob, TrainOutputs};
use crate::synergy::DensityThreshold;

pub const SWEEP_CSV_HEADER: &str = "axis,value,mrr,mr,hits1,hits3,hits10,direction";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Density threshold for identity anchoring, including `none`
    /// (anchoring disabled) and `inf` (always anchored).
    Phi,
    /// Context neighborhood radius.
    Hops,
    /// Epoch at which the synergy phase begins.
    TStart,
    /// Component ablations.
    Ablation,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Phi => "phi",
            SweepAxis::Hops => "hops",
            SweepAxis::TStart => "t_start",
            SweepAxis::Ablation => "ablation",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = KgcError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phi" => Ok(SweepAxis::Phi),
            "hops" => Ok(SweepAxis::Hops),
            "t_start" => Ok(SweepAxis::TStart),
            "ablation" => Ok(SweepAxis::Ablation),
            other => Err(KgcError::Usage(format!(
                "unknown sweep axis {other:?}; expected phi, hops, t_start, or ablation"
            ))),
        }
    }
}

pub const ABLATION_VALUES: [&str; 5] = ["full", "no_anchor", "no_cross", "no_gate", "no_align"];

/// The default value grid for an axis under `base`.
pub fn default_values(axis: SweepAxis, base: &TrainConfig) -> Vec<String> {
    match axis {
        SweepAxis::Phi => ["none", "0", "1", "2", "5", "inf"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        SweepAxis::Hops => (1..=3).map(|h| h.to_string()).collect(),
        SweepAxis::TStart => {
            let mut vals = vec![0, base.t_start.min(base.epochs), base.epochs];
            vals.sort_unstable();
            vals.dedup();
            vals.into_iter().map(|v| v.to_string()).collect()
        }
        SweepAxis::Ablation => ABLATION_VALUES.iter().map(|s| s.to_string()).collect(),
    }
}

/// Applies one axis value to a copy of the base configuration.
pub fn apply_axis_value(base: &TrainConfig, axis: SweepAxis, value: &str) -> Result<TrainConfig> {
    let mut cfg = *base;
    match axis {
        SweepAxis::Phi => {
            if value == "none" {
                cfg.anchor = false;
            } else {
                cfg.anchor = true;
                cfg.phi = value.parse::<DensityThreshold>()?;
            }
        }
        SweepAxis::Hops => {
            cfg.hops = value
                .parse::<usize>()
                .map_err(|_| KgcError::Usage(format!("hops value {value:?} is not an integer")))?;
        }
        SweepAxis::TStart => {
            let v = value.parse::<usize>().map_err(|_| {
                KgcError::Usage(format!("t_start value {value:?} is not an integer"))
            })?;
            if v > cfg.epochs {
                return Err(KgcError::Config(format!(
                    "t_start value {v} exceeds the {} training epochs",
                    cfg.epochs
                )));
            }
            cfg.t_start = v;
        }
        SweepAxis::Ablation => match value {
            "full" => {}
            "no_anchor" => cfg.anchor = false,
            "no_cross" => cfg.cross_attention = false,
            "no_gate" => cfg.adaptive_gate = false,
            "no_align" => cfg.lambda_align = 0.0,
            other => {
                return Err(KgcError::Usage(format!(
                    "unknown ablation {other:?}; expected one of {ABLATION_VALUES:?}"
                )))
            }
        },
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    /// Axis values in run order; empty means the default grid.
    pub values: Vec<String>,
    pub base: TrainConfig,
    pub seed: u64,
    pub split: Split,
    /// Worker threads; 0 and 1 both mean sequential.
    pub jobs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    pub status: PointStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PointStatus {
    Ok { metrics: MetricsReport },
    Failed { error: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub seed: u64,
    pub split: Split,
    pub base: TrainConfig,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn failed_count(&self) -> usize {
        self.points
            .iter()
            .filter(|p| matches!(p.status, PointStatus::Failed { .. }))
            .count()
    }

    /// Renders the results as CSV under the pinned header: one row per
    /// point and direction, failed points skipped.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for point in &self.points {
            let PointStatus::Ok { metrics } = &point.status else {
                continue;
            };
            for (direction, m) in [
                ("forward", &metrics.forward),
                ("backward", &metrics.backward),
                ("both", &metrics.both),
            ] {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    self.axis.name(),
                    point.value,
                    m.mrr,
                    m.mr,
                    m.hits1,
                    m.hits3,
                    m.hits10,
                    direction
                ));
            }
        }
        out
    }
}

/// Trains the shared all-semantic prefix once and snapshots it at every
/// needed phase-switch epoch. Returns the snapshot path per prefix length.
fn build_prefix_snapshots(
    store: &TripleStore,
    base: &TrainConfig,
    needed: &[usize],
    seed: u64,
    scratch: &Path,
) -> Result<Vec<(usize, PathBuf)>> {
    let longest = *needed.iter().max().expect("at least one prefix length");
    let snapshots: Vec<(usize, PathBuf)> = needed
        .iter()
        .map(|&k| (k, scratch.join(format!("prefix_e{k}.ckpt"))))
        .collect();
    let prefix_cfg = TrainConfig {
        epochs: longest,
        t_start: longest,
        ..*base
    };
    train(TrainJob {
        store,
        cfg: prefix_cfg,
        seed,
        outputs: TrainOutputs {
            snapshots: snapshots.clone(),
            ..TrainOutputs::default()
        },
        resume: None,
        dataset_meta: serde_json::Value::Null,
        import: None,
    })?;
    Ok(snapshots)
}

fn run_point(
    store: &TripleStore,
    cfg: TrainConfig,
    seed: u64,
    split: Split,
    prefix: &Path,
) -> Result<MetricsReport> {
    let loaded = checkpoint::load(prefix)?;
    let report = train(TrainJob {
        store,
        cfg,
        seed,
        outputs: TrainOutputs::default(),
        resume: Some(loaded),
        dataset_meta: serde_json::Value::Null,
        import: None,
    })?;
    evaluate(&report.model, store, split, seed)
}

/// Runs the sweep; `scratch` holds the shared prefix checkpoints.
pub fn run_sweep(store: &TripleStore, spec: &SweepSpec, scratch: &Path) -> Result<SweepReport> {
    spec.base.validate()?;
    let values = if spec.values.is_empty() {
        default_values(spec.axis, &spec.base)
    } else {
        spec.values.clone()
    };
    // Parse all values up front so a typo fails the sweep, not one point.
    let configs: Vec<TrainConfig> = values
        .iter()
        .map(|v| apply_axis_value(&spec.base, spec.axis, v))
        .collect::<Result<_>>()?;

    std::fs::create_dir_all(scratch).map_err(|e| KgcError::io(scratch, e))?;
    let needed: Vec<usize> = {
        let mut n: Vec<usize> = configs
            .iter()
            .map(|c| c.t_start.min(c.epochs))
            .collect();
        n.sort_unstable();
        n.dedup();
        n
    };
    let snapshots = build_prefix_snapshots(store, &spec.base, &needed, spec.seed, scratch)?;
    let prefix_for = |cfg: &TrainConfig| -> PathBuf {
        let k = cfg.t_start.min(cfg.epochs);
        snapshots
            .iter()
            .find(|(p, _)| *p == k)
            .expect("prefix snapshot for every point")
            .1
            .clone()
    };

    let jobs = spec.jobs.max(1).min(values.len().max(1));
    let mut statuses: Vec<Option<PointStatus>> = vec![None; values.len()];
    let to_status = |r: Result<MetricsReport>| match r {
        Ok(metrics) => PointStatus::Ok { metrics },
        Err(e) => PointStatus::Failed {
            error: e.to_string(),
        },
    };

    if jobs <= 1 {
        for (i, cfg) in configs.iter().enumerate() {
            let result = run_point(store, *cfg, spec.seed, spec.split, &prefix_for(cfg));
            if let Err(e) = &result {
                log::error!("sweep point {}={} failed: {e}", spec.axis.name(), values[i]);
            }
            statuses[i] = Some(to_status(result));
        }
    } else {
        let results: std::sync::Mutex<Vec<Option<Result<MetricsReport>>>> =
            std::sync::Mutex::new((0..values.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for worker in 0..jobs {
                let results = &results;
                let configs = &configs;
                let values = &values;
                let prefix_for = &prefix_for;
                scope.spawn(move || {
                    for i in (worker..configs.len()).step_by(jobs) {
                        let cfg = configs[i];
                        let result =
                            run_point(store, cfg, spec.seed, spec.split, &prefix_for(&cfg));
                        if let Err(e) = &result {
                            log::error!(
                                "sweep point {}={} failed: {e}",
                                spec.axis.name(),
                                values[i]
                            );
                        }
                        results.lock().unwrap()[i] = Some(result);
                    }
                });
            }
        });
        for (i, r) in results.into_inner().unwrap().into_iter().enumerate() {
            statuses[i] = Some(to_status(r.expect("every point visited")));
        }
    }

    Ok(SweepReport {
        axis: spec.axis,
        seed: spec.seed,
        split: spec.split,
        base: spec.base,
        points: values
            .into_iter()
            .zip(statuses)
            .map(|(value, status)| SweepPoint {
                value,
                status: status.expect("every point visited"),
            })
            .collect(),
    })
}
