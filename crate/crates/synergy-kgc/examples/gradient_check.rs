//! Validate every analytic gradient against central finite differences:
//! first each differentiable primitive in isolation, then the full
//! two-tower training loss end to end, dropout masks and all.
//!
//!     cargo run --example gradient_check

use synergy_kgc::kg_store::toy::{self, ToySpec};
use synergy_kgc::model::Model;
use synergy_kgc::numerics::gradcheck::{check_gradients, verify_primitives};
use synergy_kgc::numerics::tape::Tape;
use synergy_kgc::rng::{derive, Stream};
use synergy_kgc::trainer::{synergy_batch_loss, AlignTargets, TrainConfig};

fn main() -> synergy_kgc::Result<()> {
    println!("primitive gradients vs central differences (step 1e-5):\n");
    println!("{:<22} {:>14} {:>10}", "primitive", "max rel err", "elements");
    let mut worst = 0.0f64;
    for check in verify_primitives(1e-5)? {
        println!(
            "{:<22} {:>14.3e} {:>10}",
            check.name, check.outcome.max_rel_err, check.outcome.elements_checked
        );
        worst = worst.max(check.outcome.max_rel_err);
    }
    println!("\nworst primitive error: {worst:.3e}");

    // End to end: the complete synergy-phase loss on a small model. The
    // alignment targets are captured once at the base parameters and held
    // fixed so the finite-difference loss sees the same constants the
    // backward pass treats as stopped gradients.
    let store = toy::generate(&ToySpec {
        entities: 14,
        relations: 2,
        train: 40,
        valid: 0,
        test: 0,
        seed: 12,
    })?;
    let cfg = TrainConfig {
        dim: 8,
        heads: 2,
        pool_cap: 4,
        ..TrainConfig::default()
    };
    let mut model = Model::init(store.vocab(), cfg.arch(), 12)?;
    let batch: Vec<_> = store.train_augmented()[..4].to_vec();

    // Backward pass at the base parameters: capture the semantic anchors
    // and fill the analytic gradients the finite differences will judge.
    let mut tape = Tape::new();
    let base = synergy_batch_loss(
        &model,
        &store,
        &batch,
        &cfg,
        &mut tape,
        true,
        &mut derive(12, Stream::Neighbors, 0),
        &mut derive(12, Stream::Dropout, 0),
        AlignTargets::Detached,
    )?;
    let total = base.total;
    let (q_anchors, e_anchors) = (base.query_anchors, base.entity_anchors);
    tape.backward(total, &mut model.params)?;

    let outcome = check_gradients(&mut model.params, 1e-5, |params| {
        let probe = Model::from_param_set(params.clone(), store.vocab(), cfg.arch())?;
        let mut tape = Tape::new();
        let loss = synergy_batch_loss(
            &probe,
            &store,
            &batch,
            &cfg,
            &mut tape,
            true,
            &mut derive(12, Stream::Neighbors, 0),
            &mut derive(12, Stream::Dropout, 0),
            AlignTargets::Fixed {
                query: &q_anchors,
                entity: &e_anchors,
            },
        )?;
        Ok(tape.value(loss.total).scalar_value())
    })?;

    println!("\nfull training loss, {} elements checked:", outcome.elements_checked);
    println!(
        "  max rel err {:.3e} at {}[{}] (analytic {:+.6e}, numeric {:+.6e})",
        outcome.max_rel_err,
        outcome.worst_param,
        outcome.worst_element,
        outcome.worst_analytic,
        outcome.worst_numeric
    );
    Ok(())
}
