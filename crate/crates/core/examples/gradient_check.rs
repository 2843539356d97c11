//! Compares tape gradients of a pre-LN attention block against finite
//! differences at a random point.
//!
//! `cargo run --release --example gradient_check`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tedkit::numerics::{block_forward, finite_diff_check_with, BlockOptions, BlockParams, GradTape, Stencil, Tensor};

fn main() -> tedkit::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d, heads) = (5, 8, 2);
    let params = BlockParams::init(d, heads, 4 * d, 0.3, &mut rng)?;
    let x = Tensor::randn(&[n, d], 1.0, &mut rng);
    let mask = vec![true, true, false, true, true];
    let upstream = Tensor::randn(&[n, d], 1.0, &mut rng);
    let opts = BlockOptions::default();

    let loss = |x: &Tensor| -> tedkit::Result<f64> {
        let mut tape = GradTape::new();
        let vars = params.register(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = block_forward(&mut tape, xv, &mask, &vars, opts)?;
        Ok(tape.value(y).data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum())
    };

    let mut tape = GradTape::new();
    let vars = params.register(&mut tape);
    let xv = tape.leaf(x.clone());
    let y = block_forward(&mut tape, xv, &mask, &vars, opts)?;
    let grads = tape.backward(&[(y, upstream.clone())])?;
    let analytic = grads.wrt(xv);

    let err = finite_diff_check_with(
        |flat| loss(&Tensor::new(vec![n, d], flat.to_vec())?),
        x.data(),
        analytic.data(),
        1e-3,
        Stencil::FivePoint,
    )?;
    println!("input gradient: max relative error {err:.2e} over {} entries", x.len());
    Ok(())
}
