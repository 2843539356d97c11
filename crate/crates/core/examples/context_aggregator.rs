//! Pools fused token sequences into sentence embeddings with an untrained
//! context aggregator, compares two texts, and round-trips the checkpoint.
//!
//! `cargo run --example context_aggregator`

use tedkit::aggregator::{aggregate, decode_checkpoint, encode_checkpoint, similarity, AggregatorConfig, AggregatorParams};
use tedkit::encoder::{HiddenStateSource, ToyEncoder, ToyEncoderConfig};
use tedkit::fusion::{fuse, FusionStrategy};

fn main() -> tedkit::Result<()> {
    let encoder = ToyEncoder::new(ToyEncoderConfig::default())?;
    let cfg = AggregatorConfig::new(64, 64, 8, 2);
    let params = AggregatorParams::init(0, cfg)?;
    println!("aggregator with {} parameters", params.num_params());

    let texts = ["a cat on a mat", "a cat sits on a mat", "stock prices fell sharply"];
    let embs = texts
        .iter()
        .map(|t| aggregate(&fuse(&encoder.encode(t)?, &FusionStrategy::NormAvg)?, &params))
        .collect::<tedkit::Result<Vec<_>>>()?;
    for i in 0..texts.len() {
        for j in i + 1..texts.len() {
            println!("cos({:?}, {:?}) = {:.4}", texts[i], texts[j], similarity(&embs[i], &embs[j])?);
        }
    }

    let bytes = encode_checkpoint(&params);
    let back = decode_checkpoint(&bytes)?;
    println!("checkpoint: {} bytes, {} parameters restored", bytes.len(), back.num_params());
    Ok(())
}
