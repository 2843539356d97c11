//! Minimal reverse-mode autodiff over the op set the harness uses.
//!
//! A [`GradTape`] records every op with the activations its backward needs.
//! Values are read back with [`GradTape::value`]; [`GradTape::backward`] seeds
//! one or more outputs with upstream gradients, walks the record in reverse
//! and clears the tape.

use std::sync::Arc;

use super::ops::{
    gelu_grad, gelu_with, layer_norm_backward, layer_norm_into, masked_attention,
    masked_attention_backward, softmax_backward, softmax_in_place, GeluKind,
};
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    Gelu { x: Var, kind: GeluKind },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Vec<bool>,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatRows(Var, Var),
    Row { x: Var, index: usize },
    Softmax(Var),
    Mix { stack: Arc<Tensor>, alpha: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn check(value: &Tensor, what: &str) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Numeric(format!("{what} produced a non-finite value")));
    }
    Ok(())
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `a @ b`; a 1-D `a` is treated as a single row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        if bv.shape().len() != 2 || bv.shape()[0] != k {
            return Err(Error::Argument(format!(
                "matmul shape mismatch {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let n = bv.shape()[1];
        let data = matmul(av.data(), bv.data(), m, k, n);
        let shape = if av.shape().len() == 1 { vec![n] } else { vec![m, n] };
        let out = Tensor::new(shape, data)?;
        check(&out, "matmul")?;
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Argument(format!(
                "add shape mismatch {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        check(&out, "add")?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `[n]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.len() != n {
            return Err(Error::Argument(format!(
                "bias of length {} for rows of width {n}",
                bv.len()
            )));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        check(&out, "add_bias")?;
        Ok(self.push(out, Op::AddBias { x, bias }))
    }

    /// Parameter-free LayerNorm applied to every row.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let mut data = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(xv.rows());
        for (src, dst) in xv.data().chunks(n).zip(data.chunks_mut(n)) {
            inv_std.push(layer_norm_into(src, eps, dst));
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        check(&out, "layer_norm")?;
        Ok(self.push(out, Op::LayerNormRows { x, inv_std }))
    }

    pub fn gelu(&mut self, x: Var, kind: GeluKind) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_with(v, kind)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        check(&out, "gelu")?;
        Ok(self.push(out, Op::Gelu { x, kind }))
    }

    /// Masked multi-head attention over `[t, d]` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &[bool], heads: usize) -> Result<Var> {
        let qv = self.value(q);
        let (t, d) = (qv.rows(), qv.cols());
        if self.value(k).shape() != qv.shape() || self.value(v).shape() != qv.shape() {
            return Err(Error::Argument("attention q/k/v shapes differ".into()));
        }
        let (out, probs) = masked_attention(
            qv.data(),
            self.value(k).data(),
            self.value(v).data(),
            mask,
            t,
            d,
            heads,
        )?;
        let out = Tensor::new(vec![t, d], out)?;
        check(&out, "attention")?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                mask: mask.to_vec(),
                heads,
                probs,
            },
        ))
    }

    /// Stacks the rows of `a` on top of the rows of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::Argument(format!(
                "concat of rows with widths {} and {}",
                av.cols(),
                bv.cols()
            )));
        }
        let rows = av.rows() + bv.rows();
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let out = Tensor::new(vec![rows, av.cols()], data)?;
        Ok(self.push(out, Op::ConcatRows(a, b)))
    }

    /// Row `index` of a 2-D tensor, as a 1-D tensor.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if index >= xv.rows() {
            return Err(Error::Argument(format!("row {index} of {} rows", xv.rows())));
        }
        let out = Tensor::from_vec(xv.row(index).to_vec());
        Ok(self.push(out, Op::Row { x, index }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::Argument("softmax of an empty vector".into()));
        }
        let mut data = xv.data().to_vec();
        softmax_in_place(&mut data);
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        check(&out, "softmax")?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// `sum_i alpha[i] * stack[i]` for a constant stack of shape `[L, ...]`.
    pub fn mix(&mut self, stack: Arc<Tensor>, alpha: Var) -> Result<Var> {
        let layers = stack.shape()[0];
        let av = self.value(alpha);
        if av.len() != layers {
            return Err(Error::Argument(format!(
                "{} mixing weights for {layers} layers",
                av.len()
            )));
        }
        let width = stack.len() / layers;
        let mut data = vec![0.0; width];
        for (l, &a) in av.data().iter().enumerate() {
            for (o, s) in data.iter_mut().zip(&stack.data()[l * width..(l + 1) * width]) {
                *o += a * s;
            }
        }
        let out = Tensor::new(stack.shape()[1..].to_vec(), data)?;
        check(&out, "mix")?;
        Ok(self.push(out, Op::Mix { stack, alpha }))
    }

    /// Reverse pass seeded with `(output, upstream gradient)` pairs.
    ///
    /// The tape is empty afterwards; `Var`s issued before the call are stale.
    pub fn backward(&mut self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let nodes = std::mem::take(&mut self.nodes);
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        for (v, g) in seeds {
            if g.shape() != nodes[v.0].value.shape() {
                return Err(Error::Argument(format!(
                    "seed gradient shape {:?} for value of shape {:?}",
                    g.shape(),
                    nodes[v.0].value.shape()
                )));
            }
            accumulate(&mut grads, &shapes, *v, g.data());
        }

        for idx in (0..nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b, m, k, n } => {
                    let ga = matmul_nt(g.data(), val(*b).data(), *m, *n, *k);
                    let gb = matmul_tn(val(*a).data(), g.data(), *m, *k, *n);
                    accumulate(&mut grads, &shapes, *a, &ga);
                    accumulate(&mut grads, &shapes, *b, &gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, &shapes, *a, g.data());
                    accumulate(&mut grads, &shapes, *b, g.data());
                }
                Op::AddBias { x, bias } => {
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, &shapes, *x, g.data());
                    accumulate(&mut grads, &shapes, *bias, &gb);
                }
                Op::LayerNormRows { x, inv_std } => {
                    let n = g.cols();
                    let mut gx = vec![0.0; g.len()];
                    for (r, ((y, gy), gxr)) in node
                        .value
                        .data()
                        .chunks(n)
                        .zip(g.data().chunks(n))
                        .zip(gx.chunks_mut(n))
                        .enumerate()
                    {
                        layer_norm_backward(y, inv_std[r], gy, gxr);
                    }
                    accumulate(&mut grads, &shapes, *x, &gx);
                }
                Op::Gelu { x, kind } => {
                    let gx: Vec<f64> = val(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xi, gi)| gi * gelu_grad(xi, *kind))
                        .collect();
                    accumulate(&mut grads, &shapes, *x, &gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    mask,
                    heads,
                    probs,
                } => {
                    let (t, d) = (g.rows(), g.cols());
                    let mut gq = vec![0.0; t * d];
                    let mut gk = vec![0.0; t * d];
                    let mut gv = vec![0.0; t * d];
                    masked_attention_backward(
                        val(*q).data(),
                        val(*k).data(),
                        val(*v).data(),
                        probs,
                        mask,
                        g.data(),
                        t,
                        d,
                        *heads,
                        &mut gq,
                        &mut gk,
                        &mut gv,
                    );
                    accumulate(&mut grads, &shapes, *q, &gq);
                    accumulate(&mut grads, &shapes, *k, &gk);
                    accumulate(&mut grads, &shapes, *v, &gv);
                }
                Op::ConcatRows(a, b) => {
                    let split = val(*a).len();
                    accumulate(&mut grads, &shapes, *a, &g.data()[..split]);
                    accumulate(&mut grads, &shapes, *b, &g.data()[split..]);
                }
                Op::Row { x, index } => {
                    let xv = val(*x);
                    let c = xv.cols();
                    let mut gx = vec![0.0; xv.len()];
                    gx[index * c..(index + 1) * c].copy_from_slice(g.data());
                    accumulate(&mut grads, &shapes, *x, &gx);
                }
                Op::Softmax(x) => {
                    let mut gx = vec![0.0; g.len()];
                    softmax_backward(node.value.data(), g.data(), &mut gx);
                    accumulate(&mut grads, &shapes, *x, &gx);
                }
                Op::Mix { stack, alpha } => {
                    let layers = stack.shape()[0];
                    let width = stack.len() / layers;
                    let ga: Vec<f64> = (0..layers)
                        .map(|l| {
                            stack.data()[l * width..(l + 1) * width]
                                .iter()
                                .zip(g.data())
                                .map(|(s, gi)| s * gi)
                                .sum()
                        })
                        .collect();
                    accumulate(&mut grads, &shapes, *alpha, &ga);
                }
            }
            // Leaf gradients are the only ones callers read back.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], shapes: &[Vec<usize>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shapes[v.0].clone(), g.to_vec()).expect("gradient shape"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_tape_backward_gives_zero_gradients() {
        let mut tape = GradTape::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let grads = tape.backward(&[]).unwrap();
        assert_eq!(grads.wrt(a).data(), &[0.0, 0.0]);
        assert!(tape.is_empty());
    }

    #[test]
    fn tape_is_cleared_after_backward() {
        let mut tape = GradTape::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let s = tape.softmax(a).unwrap();
        let _ = tape.backward(&[(s, Tensor::from_vec(vec![1.0, 0.0]))]).unwrap();
        assert_eq!(tape.len(), 0);
    }

    #[test]
    fn shared_input_accumulates() {
        // y = x + x  => dy/dx = 2
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3.0]));
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(&[(y, Tensor::from_vec(vec![1.0]))]).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0]);
    }

    #[test]
    fn matmul_of_vector_keeps_rank_one() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let w = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 0.0, 2.0, 0.0, 1.0, 3.0]).unwrap());
        let y = tape.matmul(x, w).unwrap();
        assert_eq!(tape.value(y).shape(), &[3]);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 8.0]);
        let g = tape.backward(&[(y, Tensor::from_vec(vec![1.0, 1.0, 1.0]))]).unwrap();
        assert_eq!(g.wrt(x).data(), &[3.0, 4.0]);
        assert_eq!(g.wrt(w).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }
}
