//! Import pretrained entity vectors, freeze them, and train everything
//! else around them: frozen rows keep their exact values through optimizer
//! steps while the rest of the model adapts to them.
//!
//!     cargo run --release --example frozen_embeddings

use synergy_kgc::kg_store::toy::{self, ToySpec};
use synergy_kgc::semantic::load_embedding_tsv;
use synergy_kgc::trainer::{train, EmbeddingImport, TrainConfig, TrainJob, TrainOutputs};

fn main() -> synergy_kgc::Result<()> {
    let store = toy::generate(&ToySpec {
        entities: 30,
        relations: 3,
        train: 90,
        valid: 0,
        test: 0,
        seed: 3,
    })?;
    let vocab = store.vocab();
    let dim = 16;

    // Fabricate a pretrained embedding file for the first six entities.
    // Each vector is a recognizable ramp so drift would be obvious.
    let dir = tempfile::tempdir().expect("tempdir");
    let tsv = dir.path().join("pretrained.tsv");
    let mut text = String::new();
    for e in 0..6 {
        let row: Vec<String> = (0..dim)
            .map(|j| format!("{:.3}", 0.1 * (e as f64 + 1.0) + 0.001 * j as f64))
            .collect();
        text.push_str(&format!("{}\t{}\n", vocab.entity_label(e), row.join(",")));
    }
    std::fs::write(&tsv, text).expect("write tsv");

    let vectors = load_embedding_tsv(&tsv, vocab)?;
    println!("imported {} pretrained rows from {:?}", vectors.len(), tsv.file_name().unwrap());
    let frozen_ids: Vec<usize> = {
        let mut ids: Vec<usize> = vectors.keys().copied().collect();
        ids.sort_unstable();
        ids
    };
    let before: Vec<Vec<f64>> = frozen_ids.iter().map(|e| vectors[e].clone()).collect();

    let cfg = TrainConfig {
        dim,
        heads: 4,
        batch_size: 32,
        epochs: 30,
        t_start: 5,
        lr: 5e-3,
        ..TrainConfig::default()
    };
    let report = train(TrainJob {
        store: &store,
        cfg,
        seed: 3,
        outputs: TrainOutputs::default(),
        resume: None,
        dataset_meta: serde_json::Value::Null,
        import: Some(EmbeddingImport {
            vectors,
            freeze: true,
        }),
    })?;
    println!(
        "trained {} epochs; final loss {:.4}",
        report.records.len(),
        report.records.last().unwrap().l_total
    );

    let model = &report.model;
    println!("\nfrozen rows after training (drift must be exactly zero):");
    for (k, &e) in frozen_ids.iter().enumerate() {
        let row = &model.params.get(model.embeddings.entity(e)).value;
        let drift = row
            .data()
            .iter()
            .zip(&before[k])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        println!(
            "  {:<6} max |drift| = {drift:.1e}   first values {:?}",
            vocab.entity_label(e),
            &row.data()[..3]
        );
        assert_eq!(drift, 0.0, "frozen row moved");
    }

    // A trainable row, by contrast, has moved well away from its start.
    let free = frozen_ids.len();
    let row = &model.params.get(model.embeddings.entity(free)).value;
    println!(
        "\ntrainable row {:?} norm {:.4} (freely optimized)",
        vocab.entity_label(free),
        row.norm()
    );
    Ok(())
}
