//! Layer-wise fusion of multi-layer hidden states into one token sequence.
//!
//! Strategies: a single layer verbatim, the plain layer mean, the mean of
//! per-layer LayerNorm outputs, and a softmax-weighted sum of those
//! normalized layers with learnable per-layer scalars:
//!
//! ```text
//! alpha = softmax(w)
//! c_text = sum_i alpha_i * LayerNorm(h_i)
//! ```
//!
//! With `w = 0` the learnable sum is exactly the normalized mean.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::io::HiddenStates;
use crate::numerics::ops::{layer_norm_into, softmax_backward, softmax_in_place};
use crate::numerics::{Tensor, LN_EPS};

/// Learnable per-layer scalars and their freeze state.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    w: Vec<f64>,
    frozen: bool,
    step_frozen_at: Option<u64>,
}

impl FusionWeights {
    /// All-zero weights, i.e. uniform attention over layers.
    pub fn zeros(layers: usize) -> Self {
        Self {
            w: vec![0.0; layers],
            frozen: false,
            step_frozen_at: None,
        }
    }

    pub fn from_values(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("fusion weights must be non-empty and finite".into()));
        }
        Ok(Self {
            w,
            frozen: false,
            step_frozen_at: None,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    pub fn layers(&self) -> usize {
        self.w.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn step_frozen_at(&self) -> Option<u64> {
        self.step_frozen_at
    }

    /// Softmax of the raw weights.
    pub fn alphas(&self) -> Vec<f64> {
        let mut a = self.w.clone();
        softmax_in_place(&mut a);
        a
    }

    /// Replaces the raw weights; refused once frozen.
    pub fn set_values(&mut self, w: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::State("fusion weights are frozen".into()));
        }
        if w.len() != self.w.len() {
            return Err(Error::Argument(format!(
                "{} new values for {} fusion weights",
                w.len(),
                self.w.len()
            )));
        }
        self.w.copy_from_slice(w);
        Ok(())
    }

    pub fn freeze(&mut self, step: u64) {
        if !self.frozen {
            self.frozen = true;
            self.step_frozen_at = Some(step);
        }
    }

    /// Setting `frozen = false` on frozen weights is a state error.
    pub fn set_frozen(&mut self, frozen: bool, step: u64) -> Result<()> {
        match (self.frozen, frozen) {
            (true, false) => Err(Error::State("fusion weights cannot be unfrozen".into())),
            (false, true) => {
                self.freeze(step);
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Text record: `layers`, `w` (space separated, round-trip precision),
    /// `frozen`, `step_frozen_at` (`none` when never frozen).
    pub fn to_record(&self) -> String {
        let w: Vec<String> = self.w.iter().map(|v| format!("{v:?}")).collect();
        format!(
            "layers={}\nw={}\nfrozen={}\nstep_frozen_at={}\n",
            self.w.len(),
            w.join(" "),
            self.frozen,
            self.step_frozen_at.map_or("none".to_string(), |s| s.to_string())
        )
    }

    pub fn parse_record(text: &str) -> Result<Self> {
        let mut layers = None;
        let mut w = None;
        let mut frozen = None;
        let mut step = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("fusion weights line {line:?} is not key=value")))?;
            let bad = || Error::Config(format!("bad fusion weights value {line:?}"));
            match k {
                "layers" => layers = Some(v.parse::<usize>().map_err(|_| bad())?),
                "w" => {
                    w = Some(
                        v.split_whitespace()
                            .map(|s| s.parse::<f64>().map_err(|_| bad()))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "frozen" => frozen = Some(v.parse::<bool>().map_err(|_| bad())?),
                "step_frozen_at" => {
                    step = Some(if v == "none" {
                        None
                    } else {
                        Some(v.parse::<u64>().map_err(|_| bad())?)
                    })
                }
                other => return Err(Error::Config(format!("unknown fusion weights key {other:?}"))),
            }
        }
        let w = w.ok_or_else(|| Error::Config("fusion weights record without w".into()))?;
        if layers != Some(w.len()) {
            return Err(Error::Config(format!(
                "fusion weights record declares {layers:?} layers but lists {}",
                w.len()
            )));
        }
        let mut out = FusionWeights::from_values(w)?;
        out.frozen = frozen.unwrap_or(false);
        out.step_frozen_at = step.flatten();
        if out.frozen && out.step_frozen_at.is_none() {
            return Err(Error::Config("frozen fusion weights without step_frozen_at".into()));
        }
        Ok(out)
    }
}

/// Trainable before `freeze_step`, frozen from it on; never unfreezes.
/// `freeze_step = None` means the weights stay trainable.
pub fn apply_schedule(weights: &FusionWeights, step: u64, freeze_step: Option<u64>) -> FusionWeights {
    let mut out = weights.clone();
    if let Some(fs) = freeze_step {
        if step >= fs {
            out.freeze(step);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusionStrategy {
    /// A single layer; negative indices count from the end.
    SingleLayer(isize),
    Avg,
    NormAvg,
    Learnable(FusionWeights),
}

impl FusionStrategy {
    pub fn last() -> Self {
        FusionStrategy::SingleLayer(-1)
    }

    pub fn penultimate() -> Self {
        FusionStrategy::SingleLayer(-2)
    }

    /// Gives an unsized `learnable` strategy zero weights for `layers`.
    pub fn sized_for(self, layers: usize) -> Self {
        match self {
            FusionStrategy::Learnable(w) if w.layers() == 0 => {
                FusionStrategy::Learnable(FusionWeights::zeros(layers))
            }
            other => other,
        }
    }

    /// Short name used in fingerprints and file names.
    pub fn name(&self) -> String {
        match self {
            FusionStrategy::SingleLayer(-1) => "last".into(),
            FusionStrategy::SingleLayer(-2) => "penult".into(),
            FusionStrategy::SingleLayer(i) => format!("layer:{i}"),
            FusionStrategy::Avg => "avg".into(),
            FusionStrategy::NormAvg => "norm_avg".into(),
            FusionStrategy::Learnable(_) => "learnable".into(),
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Parses `last | penult | avg | norm_avg | learnable | layer:<i>`.
/// `learnable` starts with zero weights sized on first use.
impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(FusionStrategy::last()),
            "penult" => Ok(FusionStrategy::penultimate()),
            "avg" => Ok(FusionStrategy::Avg),
            "norm_avg" => Ok(FusionStrategy::NormAvg),
            "learnable" => Ok(FusionStrategy::Learnable(FusionWeights {
                w: Vec::new(),
                frozen: false,
                step_frozen_at: None,
            })),
            other => match other.strip_prefix("layer:").map(str::parse::<isize>) {
                Some(Ok(i)) => Ok(FusionStrategy::SingleLayer(i)),
                _ => Err(Error::Config(format!("unknown fusion strategy {other:?}"))),
            },
        }
    }
}

/// Fused `[tokens, dim]` sequence with the source mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    pub data: Tensor,
    pub mask: Vec<bool>,
}

impl TokenSeq {
    pub fn new(data: Tensor, mask: Vec<bool>) -> Result<Self> {
        if data.shape().len() != 2 || data.rows() != mask.len() {
            return Err(Error::Argument(format!(
                "token sequence {:?} with mask of length {}",
                data.shape(),
                mask.len()
            )));
        }
        Ok(Self { data, mask })
    }
}

/// Per-layer parameter-free LayerNorm of every token row, `[L, N, D]`.
pub fn normalized_stack(h: &HiddenStates) -> Tensor {
    let (l, n, d) = (h.layers(), h.tokens(), h.dim());
    let mut out = vec![0.0; l * n * d];
    let mut row = vec![0.0; d];
    for (src, dst) in h.data().chunks(d).zip(out.chunks_mut(d)) {
        for (r, &v) in row.iter_mut().zip(src) {
            *r = v as f64;
        }
        layer_norm_into(&row, LN_EPS, dst);
    }
    Tensor::new(vec![l, n, d], out).expect("stack shape")
}

/// `sum_i weights[i] * stack[i]` accumulated in layer order.
fn mix(stack: &Tensor, weights: &[f64]) -> Vec<f64> {
    let layers = stack.shape()[0];
    let width = stack.len() / layers;
    let mut out = vec![0.0; width];
    for (l, &a) in weights.iter().enumerate() {
        for (o, s) in out.iter_mut().zip(&stack.data()[l * width..(l + 1) * width]) {
            *o += a * s;
        }
    }
    out
}

fn check_weights(h: &HiddenStates, w: &FusionWeights) -> Result<()> {
    if w.layers() != h.layers() {
        return Err(Error::Argument(format!(
            "{} fusion weights for {} layers",
            w.layers(),
            h.layers()
        )));
    }
    Ok(())
}

pub fn fuse(h: &HiddenStates, strategy: &FusionStrategy) -> Result<TokenSeq> {
    let (n, d) = (h.tokens(), h.dim());
    let data = match strategy {
        FusionStrategy::SingleLayer(i) => h.layer_f64(h.resolve_layer(*i)?),
        FusionStrategy::Avg => {
            let l = h.layers();
            let mut out = vec![0.0; n * d];
            for i in 0..l {
                for (o, &v) in out.iter_mut().zip(h.layer(i)) {
                    *o += v as f64;
                }
            }
            out.iter_mut().for_each(|v| *v /= l as f64);
            out
        }
        FusionStrategy::NormAvg => {
            let l = h.layers();
            let mut uniform = vec![0.0; l];
            softmax_in_place(&mut uniform);
            mix(&normalized_stack(h), &uniform)
        }
        FusionStrategy::Learnable(w) => {
            check_weights(h, w)?;
            mix(&normalized_stack(h), &w.alphas())
        }
    };
    TokenSeq::new(Tensor::matrix(n, d, data)?, h.mask().to_vec())
}

/// Gradient of the learnable fusion output w.r.t. the raw weights `w`.
pub fn fuse_grad_w(h: &HiddenStates, weights: &FusionWeights, upstream: &Tensor) -> Result<Vec<f64>> {
    if weights.is_frozen() {
        return Err(Error::State("gradient requested for frozen fusion weights".into()));
    }
    check_weights(h, weights)?;
    if upstream.len() != h.tokens() * h.dim() {
        return Err(Error::Argument(format!(
            "upstream gradient of {} values for a [{}, {}] sequence",
            upstream.len(),
            h.tokens(),
            h.dim()
        )));
    }
    let stack = normalized_stack(h);
    Ok(grad_w_from_stack(&stack, &weights.alphas(), upstream.data()))
}

pub(crate) fn grad_w_from_stack(stack: &Tensor, alphas: &[f64], upstream: &[f64]) -> Vec<f64> {
    let layers = stack.shape()[0];
    let width = stack.len() / layers;
    let g_alpha: Vec<f64> = (0..layers)
        .map(|l| {
            stack.data()[l * width..(l + 1) * width]
                .iter()
                .zip(upstream)
                .map(|(s, g)| s * g)
                .sum()
        })
        .collect();
    let mut gw = vec![0.0; layers];
    softmax_backward(alphas, &g_alpha, &mut gw);
    gw
}

/// Shared normalized stack for the tape's `mix` op.
pub fn shared_stack(h: &HiddenStates) -> Arc<Tensor> {
    Arc::new(normalized_stack(h))
}

/// Masked mean of the last layer's token vectors.
pub fn mean_pool_last(h: &HiddenStates) -> Result<Vec<f64>> {
    let valid = h.valid_tokens();
    if valid == 0 {
        return Err(Error::Argument("mean pooling with every token masked".into()));
    }
    let d = h.dim();
    let last = h.layer(h.layers() - 1);
    let mut out = vec![0.0; d];
    for (row, &m) in last.chunks(d).zip(h.mask()) {
        if m {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v as f64;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= valid as f64);
    Ok(out)
}
