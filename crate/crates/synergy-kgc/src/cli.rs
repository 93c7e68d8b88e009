//! Command-line interface.
//!
//! Subcommands: `stats` (dataset statistics as JSON), `train` (two-phase
//! training with artifacts), `eval` (filtered ranking of a checkpoint),
//! `sweep` (axis sweeps with a shared warm-up prefix), and `export-curves`
//! (reshape training curves into a long format).
//!
//! Exit codes: 0 success, 1 usage errors, 2 data or configuration errors,
//! 3 numeric failures. All artifacts are reproducible byte for byte from
//! the same inputs and seed, so none of them embed wall-clock information.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{KgcError, Result};
use crate::evaluator::evaluate;
use crate::kg_store::{load_dataset, Split, TripleStore};
use crate::model::{file_fingerprint, vocab_fingerprint, Model};
use crate::numerics::checkpoint;
use crate::semantic::load_embedding_tsv;
use crate::sweep::{run_sweep, SweepAxis, SweepSpec};
use crate::synergy::DensityThreshold;
use crate::trainer::{
    read_curves, resolve_seed, train, EmbeddingImport, EpochRecord, TrainConfig, TrainJob,
    TrainOutputs,
};

#[derive(Parser)]
#[command(
    name = "synergy-kgc",
    version,
    about = "Knowledge-graph completion with density-anchored synergy towers",
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print dataset statistics as JSON.
    Stats(StatsArgs),
    /// Train a model and write its artifacts.
    Train(TrainArgs),
    /// Evaluate a checkpoint with filtered ranking.
    Eval(EvalArgs),
    /// Train and evaluate across one configuration axis.
    Sweep(SweepArgs),
    /// Reshape a curves file into long-format CSV or JSON.
    ExportCurves(ExportCurvesArgs),
}

#[derive(Args, Default, Clone)]
struct DataArgs {
    /// Training triples TSV (head<TAB>relation<TAB>tail).
    #[arg(long = "train-triples", value_name = "TSV")]
    train: Option<PathBuf>,
    /// Validation triples TSV.
    #[arg(long = "valid-triples", value_name = "TSV")]
    valid: Option<PathBuf>,
    /// Test triples TSV.
    #[arg(long = "test-triples", value_name = "TSV")]
    test: Option<PathBuf>,
    /// Entity descriptions TSV (entity<TAB>name<TAB>description).
    #[arg(long, value_name = "TSV")]
    descriptions: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    data: DataArgs,
}

/// Training-hyperparameter overrides shared by `train` and `sweep`.
#[derive(Args, Default, Clone)]
struct OverrideArgs {
    /// Embedding width.
    #[arg(long)]
    dim: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    heads: Option<usize>,
    /// Context radius in hops (1-5).
    #[arg(long)]
    hops: Option<usize>,
    /// Density threshold for identity anchoring: an integer or "inf".
    #[arg(long)]
    phi: Option<DensityThreshold>,
    /// Context pool size cap.
    #[arg(long)]
    pool_cap: Option<usize>,
    /// Dropout probability on the synergy branch.
    #[arg(long)]
    dropout: Option<f64>,
    /// Softmax temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Additive margin on the positive logit.
    #[arg(long)]
    margin: Option<f64>,
    /// Alignment penalty weight.
    #[arg(long)]
    lambda_align: Option<f64>,
    /// Total training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// First epoch of the synergy phase.
    #[arg(long)]
    t_start: Option<usize>,
    /// Triples per batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Decoupled weight decay.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Global gradient-norm clip.
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Disable identity anchoring.
    #[arg(long)]
    no_anchor: bool,
    /// Replace cross-attention with mean pooling.
    #[arg(long)]
    no_cross: bool,
    /// Fix the fusion gate at one half.
    #[arg(long)]
    no_gate: bool,
    /// Drop the alignment penalty.
    #[arg(long)]
    no_align: bool,
    /// Random seed (overrides the config file and SYNERGYKGC_SEED).
    #[arg(long)]
    seed: Option<u64>,
}

impl OverrideArgs {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(
            dim,
            heads,
            hops,
            phi,
            pool_cap,
            dropout,
            tau,
            margin,
            lambda_align,
            epochs,
            t_start,
            batch_size,
            lr,
            weight_decay,
            grad_clip
        );
        if self.no_anchor {
            cfg.anchor = false;
        }
        if self.no_cross {
            cfg.cross_attention = false;
        }
        if self.no_gate {
            cfg.adaptive_gate = false;
        }
        if self.no_align {
            cfg.lambda_align = 0.0;
        }
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Configuration file, TOML or JSON, with `data` and `train` sections.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: OverrideArgs,
    /// Pretrained entity embeddings TSV (entity<TAB>v1,v2,...).
    #[arg(long, value_name = "TSV")]
    import_embeddings: Option<PathBuf>,
    /// Freeze imported rows against optimizer updates.
    #[arg(long, requires = "import_embeddings")]
    freeze_imported: bool,
    /// Continue from a checkpoint.
    #[arg(long, value_name = "CKPT", conflicts_with = "import_embeddings")]
    resume: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    /// Dataset overrides; defaults come from the checkpoint metadata.
    #[command(flatten)]
    data: DataArgs,
    /// Split to rank: train, valid, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Seed override; defaults to the training seed in the checkpoint.
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics JSON output path; metrics also print as a table.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Axis to vary: phi, hops, t_start, or ablation.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values; defaults to the axis grid.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    /// Configuration file, TOML or JSON, with `data` and `train` sections.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: OverrideArgs,
    /// Split to rank each point on.
    #[arg(long, default_value = "valid")]
    split: String,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory for sweep.csv, sweep_summary.json, and prefixes.
    #[arg(long, default_value = "runs/sweep")]
    out: PathBuf,
}

#[derive(Args)]
struct ExportCurvesArgs {
    /// Curves CSV written by training.
    #[arg(long, value_name = "CSV")]
    curves: PathBuf,
    /// Output format: csv or json.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Output path; stdout when omitted.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

/// On-disk configuration file: dataset paths plus training settings.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    data: DataSection,
    train: TrainConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataSection {
    train: Option<PathBuf>,
    valid: Option<PathBuf>,
    test: Option<PathBuf>,
    descriptions: Option<PathBuf>,
}

fn load_file_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| KgcError::io(path, e))?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "toml" => toml::from_str(&text)
            .map_err(|e| KgcError::Config(format!("{}: {e}", path.display()))),
        "json" => serde_json::from_str(&text)
            .map_err(|e| KgcError::Config(format!("{}: {e}", path.display()))),
        other => Err(KgcError::Config(format!(
            "{}: unsupported config extension {other:?}; use .toml or .json",
            path.display()
        ))),
    }
}

/// Dataset paths after merging the config file and command-line flags.
#[derive(Debug, Clone, Serialize)]
struct ResolvedData {
    train: PathBuf,
    valid: PathBuf,
    test: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    descriptions: Option<PathBuf>,
}

fn resolve_data(flags: &DataArgs, file: &DataSection) -> Result<ResolvedData> {
    let pick = |flag: &Option<PathBuf>, cfg: &Option<PathBuf>, name: &str| {
        flag.clone().or_else(|| cfg.clone()).ok_or_else(|| {
            KgcError::Usage(format!(
                "no {name} triples given; pass --{name}-triples or set data.{name} in the config"
            ))
        })
    };
    Ok(ResolvedData {
        train: pick(&flags.train, &file.train, "train")?,
        valid: pick(&flags.valid, &file.valid, "valid")?,
        test: pick(&flags.test, &file.test, "test")?,
        descriptions: flags.descriptions.clone().or_else(|| file.descriptions.clone()),
    })
}

fn load_store(data: &ResolvedData) -> Result<TripleStore> {
    let mut store = load_dataset(&data.train, &data.valid, &data.test)?;
    if let Some(desc) = &data.descriptions {
        let (attached, skipped) = store.attach_descriptions(desc)?;
        log::info!("attached {attached} descriptions ({skipped} unknown entities skipped)");
    }
    Ok(store)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(KgcError::Usage(format!(
            "unknown split {other:?}; expected train, valid, or test"
        ))),
    }
}

fn dataset_meta(data: &ResolvedData) -> Result<serde_json::Value> {
    let mut fingerprints = BTreeMap::new();
    for (name, path) in [
        ("train", &data.train),
        ("valid", &data.valid),
        ("test", &data.test),
    ] {
        fingerprints.insert(name, file_fingerprint(path)?);
    }
    Ok(serde_json::json!({
        "train": data.train,
        "valid": data.valid,
        "test": data.test,
        "descriptions": data.descriptions,
        "fingerprints": fingerprints,
    }))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| KgcError::Data(format!("{}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| KgcError::io(path, e))
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let data = resolve_data(&args.data, &DataSection::default())?;
    let store = load_store(&data)?;
    let stats = store.stats();
    println!(
        "{}",
        serde_json::to_string_pretty(&stats).map_err(|e| KgcError::Data(e.to_string()))?
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => load_file_config(path)?,
        None => FileConfig::default(),
    };
    let mut cfg = file.train;
    args.overrides.apply(&mut cfg);
    cfg.validate()?;
    let data = resolve_data(&args.data, &file.data)?;
    let seed = resolve_seed(args.overrides.seed, cfg.seed)?;
    let store = load_store(&data)?;

    let import = match &args.import_embeddings {
        Some(path) => Some(EmbeddingImport {
            vectors: load_embedding_tsv(path, store.vocab())?,
            freeze: args.freeze_imported,
        }),
        None => None,
    };
    let resume = match &args.resume {
        Some(path) => Some(checkpoint::load(path)?),
        None => None,
    };

    std::fs::create_dir_all(&args.out).map_err(|e| KgcError::io(&args.out, e))?;
    let artifact = |name: &str| args.out.join(name);

    let resolved = FileConfig {
        data: DataSection {
            train: Some(data.train.clone()),
            valid: Some(data.valid.clone()),
            test: Some(data.test.clone()),
            descriptions: data.descriptions.clone(),
        },
        train: TrainConfig {
            seed: Some(seed),
            ..cfg
        },
    };
    write_json(&artifact("config_resolved.json"), &resolved)?;

    let meta = dataset_meta(&data)?;
    let manifest = serde_json::json!({
        "command": "train",
        "seed": seed,
        "config": resolved.train,
        "dataset": meta,
        "vocab_fingerprint": vocab_fingerprint(store.vocab()),
        "artifacts": {
            "config": "config_resolved.json",
            "curves": "curves.csv",
            "checkpoint_phase1": "checkpoint_phase1.ckpt",
            "checkpoint_final": "checkpoint_final.ckpt",
        },
        "resume": args.resume,
        "imported_embeddings": args.import_embeddings,
    });
    write_json(&artifact("manifest.json"), &manifest)?;

    let report = train(TrainJob {
        store: &store,
        cfg,
        seed,
        outputs: TrainOutputs {
            curves: Some(artifact("curves.csv")),
            phase1_checkpoint: Some(artifact("checkpoint_phase1.ckpt")),
            final_checkpoint: Some(artifact("checkpoint_final.ckpt")),
            snapshots: Vec::new(),
        },
        resume,
        dataset_meta: meta,
        import,
    })?;

    let last = report.records.last();
    println!(
        "trained {} epochs (seed {seed}); final loss {}",
        report.records.len() + report.start_epoch,
        last.map(|r| format!("{:.6}", r.l_total))
            .unwrap_or_else(|| "n/a".into())
    );
    println!("artifacts in {}", args.out.display());
    Ok(())
}

/// Rebuilds the model and its training context from a checkpoint.
fn load_model(
    path: &Path,
    data_flags: &DataArgs,
) -> Result<(Model, TripleStore, TrainConfig, u64)> {
    let loaded = checkpoint::load(path)?;
    let cfg: TrainConfig = serde_json::from_value(
        loaded
            .meta
            .get("config")
            .cloned()
            .ok_or_else(|| KgcError::Data("checkpoint lacks a training config".into()))?,
    )
    .map_err(|e| KgcError::Data(format!("checkpoint config: {e}")))?;
    let seed = loaded
        .meta
        .get("seed")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| KgcError::Data("checkpoint lacks a seed".into()))?;

    let meta_path = |key: &str| -> Option<PathBuf> {
        loaded
            .meta
            .get("dataset")
            .and_then(|d| d.get(key))
            .and_then(|v| v.as_str())
            .map(PathBuf::from)
    };
    let file = DataSection {
        train: meta_path("train"),
        valid: meta_path("valid"),
        test: meta_path("test"),
        descriptions: None,
    };
    let data = resolve_data(data_flags, &file)?;
    let store = load_store(&data)?;

    let expected = loaded
        .meta
        .get("vocab_fingerprint")
        .and_then(|v| v.as_str())
        .map(str::to_owned);
    if let Some(expected) = expected {
        if expected != vocab_fingerprint(store.vocab()) {
            return Err(KgcError::Data(
                "checkpoint vocabulary does not match the loaded dataset".into(),
            ));
        }
    }
    let model = Model::from_loaded(loaded, store.vocab(), cfg.arch())?;
    Ok((model, store, cfg, seed))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let split = parse_split(&args.split)?;
    let (model, store, _cfg, train_seed) = load_model(&args.checkpoint, &args.data)?;
    let seed = args.seed.unwrap_or(train_seed);
    let report = evaluate(&model, &store, split, seed)?;
    print!("{report}");
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| KgcError::io(parent, e))?;
        }
        write_json(out, &report)?;
        println!("metrics written to {}", out.display());
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let axis: SweepAxis = args.axis.parse()?;
    let split = parse_split(&args.split)?;
    let file = match &args.config {
        Some(path) => load_file_config(path)?,
        None => FileConfig::default(),
    };
    let mut base = file.train;
    args.overrides.apply(&mut base);
    base.validate()?;
    let data = resolve_data(&args.data, &file.data)?;
    let seed = resolve_seed(args.overrides.seed, base.seed)?;
    let store = load_store(&data)?;

    std::fs::create_dir_all(&args.out).map_err(|e| KgcError::io(&args.out, e))?;
    let spec = SweepSpec {
        axis,
        values: args.values.clone(),
        base,
        seed,
        split,
        jobs: args.jobs,
    };
    let report = run_sweep(&store, &spec, &args.out.join("prefix"))?;

    let csv_path = args.out.join("sweep.csv");
    std::fs::write(&csv_path, report.to_csv()).map_err(|e| KgcError::io(&csv_path, e))?;
    write_json(&args.out.join("sweep_summary.json"), &report)?;

    let failed = report.failed_count();
    println!(
        "sweep over {} finished: {} points, {failed} failed",
        axis.name(),
        report.points.len()
    );
    println!("results in {}", args.out.display());
    if failed > 0 {
        return Err(KgcError::Data(format!(
            "{failed} sweep points failed; see sweep_summary.json"
        )));
    }
    Ok(())
}

/// One long-format curve sample.
#[derive(Debug, Serialize)]
struct CurveSample {
    epoch: usize,
    series: &'static str,
    value: f64,
}

fn long_format(records: &[EpochRecord]) -> Vec<CurveSample> {
    let mut out = Vec::new();
    for r in records {
        let mut push = |series: &'static str, value: Option<f64>| {
            if let Some(value) = value {
                out.push(CurveSample {
                    epoch: r.epoch,
                    series,
                    value,
                });
            }
        };
        push("l_total", Some(r.l_total));
        push("l_nce_sem", Some(r.l_nce_sem));
        push("l_nce_syn", r.l_nce_syn);
        push("l_align_query", r.l_align_query);
        push("l_align_entity", r.l_align_entity);
        push("mean_alpha", r.mean_alpha);
        push("grad_norm", Some(r.grad_norm));
    }
    out
}

fn cmd_export_curves(args: ExportCurvesArgs) -> Result<()> {
    let records = read_curves(&args.curves)?;
    let samples = long_format(&records);
    let rendered = match args.format.as_str() {
        "csv" => {
            let mut text = String::from("epoch,series,value\n");
            for s in &samples {
                text.push_str(&format!("{},{},{}\n", s.epoch, s.series, s.value));
            }
            text
        }
        "json" => {
            let mut text = serde_json::to_string_pretty(&samples)
                .map_err(|e| KgcError::Data(e.to_string()))?;
            text.push('\n');
            text
        }
        other => {
            return Err(KgcError::Usage(format!(
                "unknown format {other:?}; expected csv or json"
            )))
        }
    };
    match &args.out {
        Some(path) => std::fs::write(path, rendered).map_err(|e| KgcError::io(path, e))?,
        None => print!("{rendered}"),
    }
    Ok(())
}

/// Parses and dispatches; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Stats(args) => cmd_stats(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::ExportCurves(args) => cmd_export_curves(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
