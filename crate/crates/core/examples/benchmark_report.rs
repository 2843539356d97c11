//! Scores the toy benchmark with a trained aggregator, a mean-pooling
//! baseline and a random embedder, writes report files, and runs the
//! shuffled-caption control.
//!
//! `cargo run --release --example benchmark_report -- /tmp/report`

use tedkit::encoder::{ToyEncoder, ToyEncoderConfig};
use tedkit::evaluator::{evaluate, evaluate_with, shuffle_report, EvalOptions, MeanPoolEmbedder, PipelineEmbedder, RandomEmbedder};
use tedkit::fusion::FusionStrategy;
use tedkit::toygen::{generate, ToyCorpusConfig};
use tedkit::trainer::{train_aggregator, TrainConfig};

fn main() -> tedkit::Result<()> {
    let out_dir = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("tedkit-report").display().to_string());
    let corpus = generate(&ToyCorpusConfig::default())?;
    let encoder = ToyEncoder::new(ToyEncoderConfig::default())?;
    let cfg = TrainConfig {
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let trained = train_aggregator(&corpus.pairs, &encoder, &cfg)?;
    let opts = EvalOptions::default();

    let report = evaluate(&corpus.bench, &encoder, &FusionStrategy::NormAvg, &trained.params, &opts)?;
    print!("{}", report.to_text());
    std::fs::create_dir_all(&out_dir).map_err(|e| tedkit::Error::io("creating report dir", e))?;
    report.write(&out_dir)?;
    println!("report files in {out_dir}\n");

    let mean_pool = evaluate_with(&corpus.bench, &MeanPoolEmbedder { encoder: &encoder }, &opts)?;
    let random = evaluate_with(&corpus.bench, &RandomEmbedder { seed: 1, dim: 64 }, &opts)?;
    let pipeline = PipelineEmbedder::new(&encoder, FusionStrategy::NormAvg, &trained.params);
    let shuffled = shuffle_report(&corpus.bench, &pipeline, 0, &opts)?;
    println!("mean pooling of last layer: {:.2}%", mean_pool.overall_accuracy);
    println!("random embeddings:          {:.2}%", random.overall_accuracy);
    println!("shuffled captions:          {:.2}%", shuffled.overall_accuracy);
    Ok(())
}
