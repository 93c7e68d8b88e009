//! Walk one forward pass through the fused tower and watch the moving
//! parts: context-pool assembly, the density rule that decides identity
//! anchoring, the adaptive gate, and the residual fusion.
//!
//!     cargo run --example synergy_forward

use synergy_kgc::kg_store::store_from_labeled;
use synergy_kgc::model::{Model, TowerInput};
use synergy_kgc::numerics::tape::Tape;
use synergy_kgc::rng::{derive, Stream};
use synergy_kgc::synergy::{build_context_pool, DensityThreshold, SynergyConfig};

fn main() -> synergy_kgc::Result<()> {
    // A small co-purchase graph: one well-connected hub, a few satellites,
    // and one item that appears exactly once.
    let triples: Vec<(String, String, String)> = [
        ("laptop", "bought_with", "mouse"),
        ("laptop", "bought_with", "keyboard"),
        ("laptop", "bought_with", "monitor"),
        ("laptop", "bought_with", "dock"),
        ("mouse", "bought_with", "mousepad"),
        ("keyboard", "bought_with", "wrist_rest"),
        ("webcam", "bought_with", "laptop"),
    ]
    .map(|(h, r, t)| (h.to_string(), r.to_string(), t.to_string()))
    .into();
    let store = store_from_labeled(&triples, &[], &[])?;
    let vocab = store.vocab();

    println!("training degrees (undirected, inverses not double-counted):");
    for e in 0..vocab.entity_count() {
        println!("  {:<11} degree {}", vocab.entity_label(e), store.degree(e));
    }

    let mut cfg = SynergyConfig {
        dim: 16,
        heads: 4,
        hops: 2,
        pool_cap: 8,
        ..SynergyConfig::default()
    };

    println!("\ncontext pools at phi = 1 (sparse entities keep their own identity):");
    let mut rng = derive(1, Stream::Neighbors, 0);
    for label in ["laptop", "mousepad"] {
        let e = vocab.entity_id(label).unwrap();
        let pool = build_context_pool(&store, e, &cfg, &mut rng);
        let members: Vec<String> = pool
            .members
            .iter()
            .map(|m| match m {
                synergy_kgc::synergy::PoolMember::SelfAnchor => "<self>".to_string(),
                synergy_kgc::synergy::PoolMember::Neighbor(n) => {
                    vocab.entity_label(*n).to_string()
                }
            })
            .collect();
        println!(
            "  {:<11} anchored={:<5} pool = [{}]",
            label,
            pool.anchored,
            members.join(", ")
        );
    }

    println!("\nthe same entity under different density thresholds:");
    let laptop = vocab.entity_id("laptop").unwrap();
    for phi in [
        DensityThreshold::Finite(1),
        DensityThreshold::Finite(10),
        DensityThreshold::Infinite,
    ] {
        cfg.phi = phi;
        let pool = build_context_pool(&store, laptop, &cfg, &mut rng);
        println!(
            "  phi = {phi:>3}: anchored = {:<5} (degree {} vs threshold)",
            pool.anchored,
            store.degree(laptop)
        );
    }
    cfg.phi = DensityThreshold::Finite(1);

    // Full tower pass: semantic embedding in, fused representation out.
    let model = Model::init(vocab, cfg, 7)?;
    let mut tape = Tape::new();
    let out = model.synergy_tower(
        &mut tape,
        &store,
        TowerInput::Query {
            head: laptop,
            relation: vocab.relation_id("bought_with").unwrap(),
        },
        false,
        &mut derive(7, Stream::Eval, 0),
        &mut derive(7, Stream::Eval, 1),
    )?;
    println!("\nquery tower for (laptop, bought_with, ?):");
    println!("  pool size     {}", out.pool_size);
    println!("  anchored      {}", out.anchored);
    println!(
        "  gate alpha    {:.6}  (freshly initialized gates open at sigmoid(2))",
        out.alpha
    );
    let fused = tape.value(out.fused);
    let sem = tape.value(out.sem);
    println!("  |semantic|    {:.4}", sem.norm());
    println!("  |fused|       {:.4}", fused.norm());
    println!(
        "  fused[..4]    {:?}",
        fused.data()[..4]
            .iter()
            .map(|v| (v * 1e4).round() / 1e4)
            .collect::<Vec<_>>()
    );
    Ok(())
}
