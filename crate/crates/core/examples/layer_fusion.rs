//! Fuses the hidden states of one text with every fixed strategy and with
//! learnable weights, and shows the softmaxed layer weights.
//!
//! `cargo run --example layer_fusion -- "a red kite over the beach"`

use tedkit::encoder::{HiddenStateSource, ToyEncoder, ToyEncoderConfig};
use tedkit::fusion::{fuse, fuse_grad_w, FusionStrategy, FusionWeights};
use tedkit::numerics::Tensor;

fn main() -> tedkit::Result<()> {
    let text = std::env::args().nth(1).unwrap_or_else(|| "a red kite over the beach".into());
    let encoder = ToyEncoder::new(ToyEncoderConfig::default())?;
    let h = encoder.encode(&text)?;
    println!("{} layers, {} valid of {} tokens, dim {}", h.layers(), h.valid_tokens(), h.tokens(), h.dim());

    for name in ["last", "penult", "avg", "norm_avg", "layer:0"] {
        let strategy: FusionStrategy = name.parse()?;
        let seq = fuse(&h, &strategy)?;
        let first = &seq.data.row(0)[..4];
        println!("{name:>9}: first token {first:.3?}");
    }

    let weights = FusionWeights::from_values((0..h.layers()).map(|i| 0.3 * i as f64).collect())?;
    let alphas: Vec<String> = weights.alphas().iter().map(|a| format!("{a:.3}")).collect();
    println!("learnable alphas: {}", alphas.join(" "));

    // Gradient of the first fused feature summed over tokens. Normalized rows
    // sum to zero, so an all-ones upstream would give a zero gradient.
    let seq = fuse(&h, &FusionStrategy::Learnable(weights.clone()))?;
    let d = seq.data.shape()[1];
    let ones = (0..seq.data.len()).map(|i| if i % d == 0 { 1.0 } else { 0.0 }).collect();
    let upstream = Tensor::new(seq.data.shape().to_vec(), ones)?;
    let grad = fuse_grad_w(&h, &weights, &upstream)?;
    println!("gradient wrt raw weights: {grad:.4?}");
    Ok(())
}
