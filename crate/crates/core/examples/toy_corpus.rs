//! Generates the synthetic caption-pair corpus and benchmark and prints a
//! few records.
//!
//! `cargo run --example toy_corpus -- 2`

use tedkit::toygen::{generate, ToyCorpusConfig};

fn main() -> tedkit::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(ToyCorpusConfig::default().seed);
    let corpus = generate(&ToyCorpusConfig { seed, ..ToyCorpusConfig::default() })?;
    for (i, syn) in corpus.lexicon.iter().enumerate() {
        println!("component {i}: {}", syn.join(", "));
    }
    for p in corpus.pairs.iter().take(3) {
        println!("pair {}: {:?} / {:?}", p.id, p.caption_a, p.caption_b);
    }
    for b in corpus.bench.iter().take(2) {
        println!("{} [{}] {:?}\n  + {:?}\n  - {:?}", b.id, b.category, b.caption, b.positive, b.negatives);
    }
    Ok(())
}
