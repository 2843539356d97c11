//! Pre-LayerNorm transformer block:
//!
//! ```text
//! x = x + Wo * MHA(LN(x) Wq, LN(x) Wk, LN(x) Wv)
//! x = x + W2 * GELU(W1 * LN(x))
//! ```
//!
//! LayerNorms here are parameter-free. Masked keys get zero attention weight
//! from every query.

use rand::Rng;

use super::ops::{GeluKind, LN_EPS};
use super::tape::{GradTape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub heads: usize,
}

impl BlockParams {
    /// Normal(0, std) weights, zero biases.
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        heads: usize,
        hidden: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let w = |r: usize, c: usize, rng: &mut R| Tensor::randn(&[r, c], std, rng);
        Ok(Self {
            wq: w(dim, dim, rng),
            bq: Tensor::zeros(&[dim]),
            wk: w(dim, dim, rng),
            bk: Tensor::zeros(&[dim]),
            wv: w(dim, dim, rng),
            bv: Tensor::zeros(&[dim]),
            wo: w(dim, dim, rng),
            bo: Tensor::zeros(&[dim]),
            w1: w(dim, hidden, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: w(hidden, dim, rng),
            b2: Tensor::zeros(&[dim]),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    /// Parameter tensors in serialization order.
    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    /// Registers every parameter as a tape leaf.
    pub fn register(&self, tape: &mut GradTape) -> BlockVars {
        let [wq, bq, wk, bk, wv, bv, wo, bo, w1, b1, w2, b2] =
            self.tensors().map(|t| tape.leaf(t.clone()));
        BlockVars {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            w1,
            b1,
            w2,
            b2,
            heads: self.heads,
        }
    }
}

/// Tape handles for one block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub heads: usize,
}

impl BlockVars {
    pub fn vars(&self) -> [Var; 12] {
        [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.w1,
            self.b1, self.w2, self.b2,
        ]
    }
}

/// Options for the block forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BlockOptions {
    pub gelu: GeluKind,
    /// When false the attention sub-layer is skipped entirely.
    pub attention: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            gelu: GeluKind::Exact,
            attention: true,
        }
    }
}

fn linear(tape: &mut GradTape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Records one pre-LN block on `tape`; `x` is `[t, d]`.
pub fn block_forward(
    tape: &mut GradTape,
    x: Var,
    mask: &[bool],
    p: &BlockVars,
    opts: BlockOptions,
) -> Result<Var> {
    let xv = tape.value(x);
    if xv.shape().len() != 2 || xv.rows() != mask.len() {
        return Err(Error::Argument(format!(
            "block input {:?} with mask of length {}",
            xv.shape(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Argument("attention block with every position masked".into()));
    }
    let mut x = x;
    if opts.attention {
        let h = tape.layer_norm_rows(x, LN_EPS)?;
        let q = linear(tape, h, p.wq, p.bq)?;
        let k = linear(tape, h, p.wk, p.bk)?;
        let v = linear(tape, h, p.wv, p.bv)?;
        let a = tape.attention(q, k, v, mask, p.heads)?;
        let o = linear(tape, a, p.wo, p.bo)?;
        x = tape.add(x, o)?;
    }
    let h = tape.layer_norm_rows(x, LN_EPS)?;
    let u = linear(tape, h, p.w1, p.b1)?;
    let u = tape.gelu(u, opts.gelu)?;
    let m = linear(tape, u, p.w2, p.b2)?;
    tape.add(x, m)
}

/// Forward value of one block on `x: [t, d]`.
pub fn attention_block(x: &Tensor, mask: &[bool], params: &BlockParams) -> Result<Tensor> {
    attention_block_with(x, mask, params, BlockOptions::default())
}

pub fn attention_block_with(
    x: &Tensor,
    mask: &[bool],
    params: &BlockParams,
    opts: BlockOptions,
) -> Result<Tensor> {
    if x.cols() != params.dim() {
        return Err(Error::Argument(format!(
            "block of dim {} applied to rows of width {}",
            params.dim(),
            x.cols()
        )));
    }
    let mut tape = GradTape::new();
    let vars = params.register(&mut tape);
    let xv = tape.leaf(x.clone());
    let y = block_forward(&mut tape, xv, mask, &vars, opts)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_bad_head_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(BlockParams::init(6, 4, 8, 0.02, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn masked_padding_leaves_valid_rows_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = BlockParams::init(8, 2, 16, 0.3, &mut rng).unwrap();
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let y = attention_block(&x, &[true, true, false], &p).unwrap();

        let pad = Tensor::randn(&[2, 8], 5.0, &mut rng);
        let mut data = x.data().to_vec();
        data.extend_from_slice(pad.data());
        let xp = Tensor::matrix(5, 8, data).unwrap();
        let yp = attention_block(&xp, &[true, true, false, false, false], &p).unwrap();
        assert_eq!(&y.data()[..16], &yp.data()[..16]);
    }

    #[test]
    fn zero_weights_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = BlockParams::init(4, 2, 8, 0.0, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        assert_eq!(attention_block(&x, &[true, true], &p).unwrap(), x);
    }

    #[test]
    fn all_masked_is_an_argument_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = BlockParams::init(4, 2, 8, 0.1, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        assert!(matches!(attention_block(&x, &[false, false], &p), Err(Error::Argument(_))));
    }
}
