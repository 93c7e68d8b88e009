//! Sweep the component ablations on a toy graph and print the rows the
//! sweep command would write to sweep.csv: turning off anchoring,
//! cross-attention, the adaptive gate, or the alignment penalty, one at a
//! time, against the full model.
//!
//!     cargo run --release --example ablation_sweep

use synergy_kgc::kg_store::toy::{self, ToySpec};
use synergy_kgc::kg_store::Split;
use synergy_kgc::sweep::{run_sweep, PointStatus, SweepAxis, SweepSpec};
use synergy_kgc::trainer::TrainConfig;

fn main() -> synergy_kgc::Result<()> {
    let store = toy::generate(&ToySpec {
        entities: 40,
        relations: 4,
        train: 150,
        valid: 20,
        test: 20,
        seed: 21,
    })?;

    let base = TrainConfig {
        dim: 16,
        heads: 4,
        batch_size: 32,
        epochs: 40,
        t_start: 8,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    let spec = SweepSpec {
        axis: SweepAxis::Ablation,
        values: Vec::new(), // the default grid: full + four ablations
        base,
        seed: 21,
        split: Split::Valid,
        jobs: 2,
    };

    let scratch = tempfile::tempdir().expect("tempdir");
    println!(
        "sweeping {} on the validation split ({} epochs per point, shared warm-up prefix)...\n",
        spec.axis.name(),
        base.epochs
    );
    let report = run_sweep(&store, &spec, scratch.path())?;

    println!("{}", report.to_csv());

    println!("validation MRR by variant (both directions):");
    for point in &report.points {
        match &point.status {
            PointStatus::Ok { metrics } => println!(
                "  {:<10} {:.4}",
                point.value, metrics.both.mrr
            ),
            PointStatus::Failed { error } => println!("  {:<10} failed: {error}", point.value),
        }
    }
    Ok(())
}
