//! Trains and scores one aggregator per seed for two fusion strategies and
//! reports the spread and whether their ranking holds on every seed.
//!
//! `cargo run --release --example seed_stability -- 5`

use tedkit::encoder::{ToyEncoder, ToyEncoderConfig};
use tedkit::evaluator::stability_runs;
use tedkit::fusion::FusionStrategy;
use tedkit::toygen::{generate, ToyCorpusConfig};
use tedkit::trainer::TrainConfig;

fn main() -> tedkit::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let corpus = generate(&ToyCorpusConfig::default())?;
    let encoder = ToyEncoder::new(ToyEncoderConfig::default())?;
    let base = TrainConfig {
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let mut all = Vec::new();
    for fusion in [FusionStrategy::NormAvg, FusionStrategy::last()] {
        let r = stability_runs(&corpus.pairs, &corpus.bench, &encoder, &TrainConfig { fusion: fusion.clone(), ..base.clone() }, n)?;
        println!("{fusion:>9}: {:?} (max variation {:.2})", r.scores, r.max_variation);
        all.push(r.scores);
    }
    let stable = all[0].iter().zip(&all[1]).all(|(a, b)| a > b) || all[0].iter().zip(&all[1]).all(|(a, b)| a < b);
    println!("ranking identical on every seed: {stable}");
    Ok(())
}
