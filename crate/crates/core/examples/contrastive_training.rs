//! Trains a context aggregator with the symmetric InfoNCE loss on the
//! synthetic caption pairs and scores the toy benchmark before and after.
//!
//! `cargo run --release --example contrastive_training -- norm_avg`

use tedkit::encoder::{ToyEncoder, ToyEncoderConfig};
use tedkit::evaluator::{evaluate, EvalOptions};
use tedkit::fusion::FusionStrategy;
use tedkit::toygen::{generate, ToyCorpusConfig};
use tedkit::trainer::{train_aggregator, TrainConfig};

fn main() -> tedkit::Result<()> {
    let fusion: FusionStrategy = std::env::args().nth(1).unwrap_or_else(|| "norm_avg".into()).parse()?;
    let corpus = generate(&ToyCorpusConfig::default())?;
    let encoder = ToyEncoder::new(ToyEncoderConfig::default())?;
    let cfg = TrainConfig {
        lr: 1e-3,
        fusion: fusion.clone(),
        freeze_step: Some(8),
        ..TrainConfig::default()
    };

    let untrained = train_aggregator(&corpus.pairs, &encoder, &TrainConfig { epochs: 0, ..cfg.clone() })?;
    let before = evaluate(&corpus.bench, &encoder, &untrained.eval_strategy(&fusion.clone().sized_for(9)), &untrained.params, &EvalOptions::default())?;

    let out = train_aggregator(&corpus.pairs, &encoder, &cfg)?;
    let after = evaluate(&corpus.bench, &encoder, &out.eval_strategy(&fusion), &out.params, &EvalOptions::default())?;

    let rows = &out.history.rows;
    println!("{} steps, loss {:.3} -> {:.3}", rows.len(), rows[0].loss, rows[rows.len() - 1].loss);
    println!("accuracy {:.2}% -> {:.2}%", before.overall_accuracy, after.overall_accuracy);
    if let Some(w) = &out.fusion {
        let a: Vec<String> = w.alphas().iter().map(|v| format!("{v:.3}")).collect();
        println!("learned alphas (frozen at step {:?}): {}", w.step_frozen_at(), a.join(" "));
    }
    Ok(())
}
