//! Toy conditional denoiser for exercising learnable fusion weights under a
//! train-then-freeze schedule.
//!
//! Each caption hashes to one component of a 2-D Gaussian mixture. A small
//! MLP predicts the noise added to samples, conditioned on the masked token
//! mean of the fused caption encoding, so the denoising loss can only drop
//! below the unconditional optimum by reading the caption.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::encoder::HiddenStateSource;
use crate::error::{Error, Result};
use crate::fusion::{apply_schedule, normalized_stack, FusionWeights};
use crate::io::HiddenStates;
use crate::numerics::{adam_step, AdamConfig, AdamState, GeluKind, GradTape, Precision, Tensor, Var};

/// Linear beta schedule with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("noise schedule needs at least 2 steps, got {steps}")));
        }
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !ok(beta_start) || !ok(beta_end) {
            return Err(Error::Config(format!("betas {beta_start}..{beta_end} must lie in (0, 1)")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64)
            .collect();
        // alpha_bar[t] is the signal fraction left after t noising steps.
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            alpha_bar.push(acc);
            acc *= 1.0 - b;
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(100, 1e-4, 0.02).expect("default schedule")
    }
}

/// Isotropic 2-D Gaussian mixture with means evenly spaced on a circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mixture {
    pub components: usize,
    pub radius: f64,
    pub sigma: f64,
}

impl Default for Mixture {
    fn default() -> Self {
        Self {
            components: 4,
            radius: 3.0,
            sigma: 0.5,
        }
    }
}

pub const DATA_DIM: usize = 2;

impl Mixture {
    pub fn validate(&self) -> Result<()> {
        if self.components < 2 || !(self.radius > 0.0) || !(self.sigma > 0.0) {
            return Err(Error::Config(format!("invalid mixture {self:?}")));
        }
        Ok(())
    }

    pub fn mean(&self, component: usize) -> [f64; DATA_DIM] {
        let a = std::f64::consts::TAU * component as f64 / self.components as f64;
        [self.radius * a.cos(), self.radius * a.sin()]
    }

    /// Component a caption belongs to: SHA-256 of the text modulo `k`.
    pub fn component_of(&self, caption: &str) -> usize {
        let digest = Sha256::digest(caption.as_bytes());
        let head = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        (head % self.components as u64) as usize
    }

    pub fn sample_from<R: Rng + ?Sized>(&self, caption: &str, rng: &mut R) -> Result<[f64; DATA_DIM]> {
        if caption.is_empty() {
            return Err(Error::Argument("cannot sample for an empty caption".into()));
        }
        let m = self.mean(self.component_of(caption));
        Ok(m.map(|c| c + self.sigma * rng.sample::<f64, _>(StandardNormal)))
    }
}

/// One seeded draw `x0` for `caption`.
pub fn sample_synthetic(caption: &str, seed: u64, mixture: &Mixture) -> Result<[f64; DATA_DIM]> {
    mixture.sample_from(caption, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `x_t = sqrt(ab) x0 + sqrt(1 - ab) eps`; returns `(x_t, eps)`.
pub fn forward_diffuse_with<R: Rng + ?Sized>(
    x0: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if t >= sched.steps() {
        return Err(Error::Argument(format!("timestep {t} outside 0..{}", sched.steps())));
    }
    let ab = sched.alpha_bar(t);
    let eps: Vec<f64> = x0.iter().map(|_| rng.sample(StandardNormal)).collect();
    let xt = x0
        .iter()
        .zip(&eps)
        .map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
        .collect();
    Ok((xt, eps))
}

pub fn forward_diffuse(x0: &[f64], t: usize, sched: &NoiseSchedule, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    forward_diffuse_with(x0, t, sched, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Sinusoidal embedding: `dim / 2` sines then `dim / 2` cosines.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

/// Per-layer masked token mean of the normalized stack, `[L, D]`. Mixing its
/// rows with `alpha` gives the masked mean of the learnable fusion output.
pub fn condition_layers(h: &HiddenStates) -> Result<Tensor> {
    let valid = h.valid_tokens();
    if valid == 0 {
        return Err(Error::Argument("condition from a fully masked text".into()));
    }
    let stack = normalized_stack(h);
    let (l, n, d) = (h.layers(), h.tokens(), h.dim());
    let mut out = vec![0.0; l * d];
    for layer in 0..l {
        let dst = &mut out[layer * d..(layer + 1) * d];
        for (tok, _) in h.mask().iter().enumerate().filter(|(_, &m)| m) {
            let row = &stack.data()[(layer * n + tok) * d..(layer * n + tok + 1) * d];
            for (o, v) in dst.iter_mut().zip(row) {
                *o += v;
            }
        }
        dst.iter_mut().for_each(|v| *v /= valid as f64);
    }
    Tensor::new(vec![l, d], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub cond_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
}

impl DenoiserConfig {
    pub fn new(cond_dim: usize) -> Self {
        Self {
            cond_dim,
            hidden: 128,
            time_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cond_dim == 0 || self.hidden == 0 || self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("invalid denoiser config {self:?}")));
        }
        Ok(())
    }
}

/// Three-layer MLP. The first layer is split by input block so no column
/// concatenation is needed: `h1 = gelu(x W_x + temb W_t + c W_c + b1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    cfg: DenoiserConfig,
    w_x: Tensor,
    w_t: Tensor,
    w_c: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct DenoiserVars {
    pub all: [Var; 8],
}

impl DenoiserParams {
    pub fn init(seed: u64, cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan1 = (DATA_DIM + cfg.time_dim + cfg.cond_dim) as f64;
        let s1 = 1.0 / fan1.sqrt();
        let s2 = 1.0 / (cfg.hidden as f64).sqrt();
        Ok(Self {
            cfg,
            w_x: Tensor::randn(&[DATA_DIM, cfg.hidden], s1, &mut rng),
            w_t: Tensor::randn(&[cfg.time_dim, cfg.hidden], s1, &mut rng),
            w_c: Tensor::randn(&[cfg.cond_dim, cfg.hidden], s1, &mut rng),
            b1: Tensor::zeros(&[cfg.hidden]),
            w2: Tensor::randn(&[cfg.hidden, cfg.hidden], s2, &mut rng),
            b2: Tensor::zeros(&[cfg.hidden]),
            w3: Tensor::randn(&[cfg.hidden, DATA_DIM], s2, &mut rng),
            b3: Tensor::zeros(&[DATA_DIM]),
        })
    }

    pub fn config(&self) -> DenoiserConfig {
        self.cfg
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [&self.w_x, &self.w_t, &self.w_c, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.w_x,
            &mut self.w_t,
            &mut self.w_c,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Argument(format!(
                "{} values for {} denoiser parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut GradTape) -> DenoiserVars {
        DenoiserVars {
            all: self.tensors().map(|t| tape.leaf(t.clone())),
        }
    }
}

/// Records the network on `tape`; inputs are `[B, 2]`, `[B, time_dim]`,
/// `[B, cond_dim]`. Returns the predicted noise `[B, 2]`.
pub fn denoiser_on_tape(tape: &mut GradTape, vars: &DenoiserVars, x: Var, temb: Var, cond: Var) -> Result<Var> {
    let [w_x, w_t, w_c, b1, w2, b2, w3, b3] = vars.all;
    let hx = tape.matmul(x, w_x)?;
    let ht = tape.matmul(temb, w_t)?;
    let hc = tape.matmul(cond, w_c)?;
    let h = tape.add(hx, ht)?;
    let h = tape.add(h, hc)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.gelu(h, GeluKind::Exact)?;
    let h = tape.matmul(h, w2)?;
    let h = tape.add_bias(h, b2)?;
    let h = tape.gelu(h, GeluKind::Exact)?;
    let out = tape.matmul(h, w3)?;
    tape.add_bias(out, b3)
}

/// Condition rows for a batch: fixed vectors, or a `[L, B, D]` stack of
/// per-layer summaries mixed by the fusion weights.
#[derive(Debug, Clone)]
pub enum Condition {
    Fixed(Tensor),
    Stack(Arc<Tensor>),
}

#[derive(Debug, Clone)]
pub struct DenoiseBatch {
    pub x_t: Tensor,
    pub t: Vec<usize>,
    pub eps: Tensor,
    pub cond: Condition,
}

impl DenoiseBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn time_embeddings(&self, dim: usize) -> Tensor {
        let data = self.t.iter().flat_map(|&t| timestep_embedding(t, dim)).collect();
        Tensor::new(vec![self.len(), dim], data).expect("time embedding shape")
    }
}

/// Batch mean of `||eps - pred||^2` and its gradient with respect to `pred`.
pub fn noise_mse(pred: &Tensor, eps: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != eps.shape() {
        return Err(Error::Argument(format!("prediction {:?} vs noise {:?}", pred.shape(), eps.shape())));
    }
    let rows = pred.rows().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, e) in pred.data().iter().zip(eps.data()) {
        let r = p - e;
        loss += r * r;
        grad.push(2.0 * r / rows);
    }
    let loss = loss / rows;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("denoising loss is {loss}")));
    }
    Ok((loss, Tensor::new(pred.shape().to_vec(), grad)?))
}

#[derive(Debug, Clone)]
pub struct DenoiseLoss {
    pub loss: f64,
    /// Gradients in [`DenoiserParams::tensors`] order.
    pub grad_theta: Vec<Tensor>,
    /// Gradient on the raw fusion weights; `None` for fixed conditions or
    /// frozen weights.
    pub grad_w: Option<Vec<f64>>,
}

/// Denoising loss of one batch with gradients to the network and, for a
/// stacked condition with trainable weights, to the fusion weights.
pub fn denoise_loss(params: &DenoiserParams, batch: &DenoiseBatch, weights: Option<&FusionWeights>) -> Result<DenoiseLoss> {
    let cfg = params.cfg;
    let b = batch.len();
    if b == 0 || batch.x_t.shape() != [b, DATA_DIM] || batch.eps.shape() != [b, DATA_DIM] {
        return Err(Error::Argument(format!(
            "batch of {b} timesteps with x_t {:?} and eps {:?}",
            batch.x_t.shape(),
            batch.eps.shape()
        )));
    }
    let mut tape = GradTape::new();
    let vars = params.register(&mut tape);
    let x = tape.leaf(batch.x_t.clone());
    let temb = tape.leaf(batch.time_embeddings(cfg.time_dim));
    let (cond, w_var) = match &batch.cond {
        Condition::Fixed(c) => {
            if c.shape() != [b, cfg.cond_dim] {
                return Err(Error::Argument(format!("condition {:?} for batch {b}", c.shape())));
            }
            (tape.leaf(c.clone()), None)
        }
        Condition::Stack(stack) => {
            let w = weights.ok_or_else(|| Error::State("stacked condition without fusion weights".into()))?;
            if stack.shape().len() != 3 || stack.shape()[1..] != [b, cfg.cond_dim] || stack.shape()[0] != w.layers() {
                return Err(Error::Argument(format!(
                    "condition stack {:?} for batch {b} and {} fusion weights",
                    stack.shape(),
                    w.layers()
                )));
            }
            let wv = tape.leaf(Tensor::from_vec(w.values().to_vec()));
            let alpha = tape.softmax(wv)?;
            let c = tape.mix(stack.clone(), alpha)?;
            (c, (!w.is_frozen()).then_some(wv))
        }
    };
    let pred = denoiser_on_tape(&mut tape, &vars, x, temb, cond)?;
    let (loss, seed) = noise_mse(tape.value(pred), &batch.eps)?;
    let grads = tape.backward(&[(pred, seed)])?;
    Ok(DenoiseLoss {
        loss,
        grad_theta: vars.all.iter().map(|&v| grads.wrt(v)).collect(),
        grad_w: w_var.map(|v| grads.wrt(v).into_data()),
    })
}

/// Forward-only noise prediction.
pub fn predict(params: &DenoiserParams, x_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let vars = params.register(&mut tape);
    let batch = DenoiseBatch {
        x_t: x_t.clone(),
        t: t.to_vec(),
        eps: Tensor::zeros(x_t.shape()),
        cond: Condition::Fixed(cond.clone()),
    };
    let x = tape.leaf(batch.x_t.clone());
    let temb = tape.leaf(batch.time_embeddings(params.cfg.time_dim));
    let c = tape.leaf(cond.clone());
    let out = denoiser_on_tape(&mut tape, &vars, x, temb, c)?;
    Ok(tape.value(out).clone())
}

/// Which caption a sample is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConditioningMode {
    /// The caption the sample was drawn for.
    #[default]
    True,
    /// An independently drawn caption, so the condition carries no
    /// information about the sample.
    Shuffled,
}

impl std::str::FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true" => Ok(Self::True),
            "shuffled" => Ok(Self::Shuffled),
            other => Err(Error::Config(format!("unknown conditioning mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDiffConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate of the fusion weights; defaults to `lr`.
    pub fusion_lr: Option<f64>,
    pub freeze_step: Option<u64>,
    pub seed: u64,
    pub mixture: Mixture,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: usize,
    pub time_dim: usize,
    pub conditioning: ConditioningMode,
    pub precision: Precision,
    /// Held-out samples for the final loss.
    pub eval_samples: usize,
}

impl Default for ToyDiffConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 64,
            lr: 1e-3,
            fusion_lr: None,
            freeze_step: None,
            seed: 0,
            mixture: Mixture::default(),
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            hidden: 128,
            time_dim: 32,
            conditioning: ConditioningMode::True,
            precision: Precision::Test,
            eval_samples: 16384,
        }
    }
}

impl ToyDiffConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_samples == 0 {
            return Err(Error::Config("batch size and eval samples must be positive".into()));
        }
        for (name, v) in [("lr", self.lr), ("fusion lr", self.fusion_lr.unwrap_or(self.lr))] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        self.mixture.validate()?;
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub step: u64,
    pub alphas: Vec<f64>,
    pub frozen: bool,
}

/// Softmaxed fusion weights in effect at every training step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightTrajectory {
    pub rows: Vec<TrajectoryRow>,
    pub freeze_step: Option<u64>,
}

impl WeightTrajectory {
    /// Tab-separated `step, alpha_1..alpha_L, frozen`; values use the
    /// shortest round-trip decimal form.
    pub fn to_tsv(&self) -> Result<String> {
        let first = self
            .rows
            .first()
            .ok_or_else(|| Error::Argument("empty weight trajectory".into()))?;
        let mut out = String::from("step");
        for i in 1..=first.alphas.len() {
            write!(out, "\talpha_{i}").expect("string write");
        }
        out.push_str("\tfrozen\n");
        for r in &self.rows {
            write!(out, "{}", r.step).expect("string write");
            for a in &r.alphas {
                write!(out, "\t{a}").expect("string write");
            }
            writeln!(out, "\t{}", u8::from(r.frozen)).expect("string write");
        }
        Ok(out)
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split('\t').collect();
        if header.len() < 3 || header[0] != "step" || header[header.len() - 1] != "frozen" {
            return Err(Error::Argument(format!("bad trajectory header {header:?}")));
        }
        let layers = header.len() - 2;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::Argument(format!("bad trajectory row {}: {line:?}", i + 2));
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != layers + 2 {
                return Err(bad());
            }
            rows.push(TrajectoryRow {
                step: cells[0].parse().map_err(|_| bad())?,
                alphas: cells[1..=layers]
                    .iter()
                    .map(|c| c.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?,
                frozen: match cells[layers + 1] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad()),
                },
            });
        }
        let freeze_step = rows.iter().find(|r| r.frozen).map(|r| r.step);
        Ok(Self { rows, freeze_step })
    }

    /// Largest `|alpha_i(last) - alpha_i(first)|`.
    pub fn max_drift(&self) -> f64 {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => a.alphas.iter().zip(&b.alphas).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max),
            _ => 0.0,
        }
    }
}

pub fn trajectory_report(traj: &WeightTrajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, traj.to_tsv()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub params: DenoiserParams,
    pub weights: FusionWeights,
    pub trajectory: WeightTrajectory,
    /// Training loss per step.
    pub losses: Vec<f64>,
    /// Mean loss on a held-out sample set fixed by the seed.
    pub final_loss: f64,
}

const EVAL_STREAM: u64 = 0xE7A1_5A3D;

/// Encodes every caption and returns its per-layer summaries.
pub fn caption_conditions(captions: &[String], encoder: &dyn HiddenStateSource) -> Result<Vec<Tensor>> {
    captions
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            encoder
                .encode(c)
                .and_then(|h| condition_layers(&h))
                .map_err(|e| Error::item(format!("caption {i}"), e))
        })
        .collect()
}

/// Draws `n` samples: data caption, condition caption, timestep, `x_t`, noise.
fn draw_batch(
    rng: &mut ChaCha8Rng,
    n: usize,
    captions: &[String],
    summaries: &[Tensor],
    sched: &NoiseSchedule,
    cfg: &ToyDiffConfig,
) -> Result<DenoiseBatch> {
    let (layers, dim) = (summaries[0].shape()[0], summaries[0].shape()[1]);
    let mut x_t = Vec::with_capacity(n * DATA_DIM);
    let mut eps = Vec::with_capacity(n * DATA_DIM);
    let mut ts = Vec::with_capacity(n);
    let mut stack = vec![0.0; layers * n * dim];
    for b in 0..n {
        let data_idx = rng.gen_range(0..captions.len());
        let cond_idx = match cfg.conditioning {
            ConditioningMode::True => data_idx,
            ConditioningMode::Shuffled => rng.gen_range(0..captions.len()),
        };
        let x0 = cfg.mixture.sample_from(&captions[data_idx], rng)?;
        let t = rng.gen_range(0..sched.steps());
        let (xt, e) = forward_diffuse_with(&x0, t, sched, rng)?;
        x_t.extend(xt);
        eps.extend(e);
        ts.push(t);
        let s = summaries[cond_idx].data();
        for l in 0..layers {
            stack[(l * n + b) * dim..(l * n + b + 1) * dim].copy_from_slice(&s[l * dim..(l + 1) * dim]);
        }
    }
    Ok(DenoiseBatch {
        x_t: Tensor::new(vec![n, DATA_DIM], x_t)?,
        t: ts,
        eps: Tensor::new(vec![n, DATA_DIM], eps)?,
        cond: Condition::Stack(Arc::new(Tensor::new(vec![layers, n, dim], stack)?)),
    })
}

/// Jointly trains the denoiser and learnable fusion weights, freezing the
/// weights at `cfg.freeze_step`.
pub fn train_joint(captions: &[String], encoder: &dyn HiddenStateSource, cfg: &ToyDiffConfig) -> Result<JointOutcome> {
    cfg.validate()?;
    if captions.is_empty() {
        return Err(Error::Argument("no captions".into()));
    }
    let mut components: Vec<usize> = captions.iter().map(|c| cfg.mixture.component_of(c)).collect();
    components.sort_unstable();
    components.dedup();
    if components.len() < 2 {
        return Err(Error::Argument("captions cover fewer than 2 mixture components".into()));
    }
    let sched = cfg.schedule()?;
    let mut summaries = caption_conditions(captions, encoder)?;
    if cfg.precision == Precision::Run {
        summaries.iter_mut().for_each(Tensor::round_to_f32);
    }
    let (layers, dim) = (summaries[0].shape()[0], summaries[0].shape()[1]);

    let mut params = DenoiserParams::init(
        cfg.seed,
        DenoiserConfig {
            cond_dim: dim,
            hidden: cfg.hidden,
            time_dim: cfg.time_dim,
        },
    )?;
    let mut weights = FusionWeights::zeros(layers);
    let mut w_tensor = Tensor::from_vec(weights.values().to_vec());
    let adam = AdamConfig::with_lr(cfg.lr);
    let w_adam = AdamConfig::with_lr(cfg.fusion_lr.unwrap_or(cfg.lr));
    let mut opt = AdamState::new(params.tensors());
    let mut w_opt = AdamState::new([&w_tensor]);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trajectory = WeightTrajectory {
        rows: Vec::with_capacity(cfg.steps as usize),
        freeze_step: cfg.freeze_step,
    };
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        weights = apply_schedule(&weights, step, cfg.freeze_step);
        trajectory.rows.push(TrajectoryRow {
            step,
            alphas: weights.alphas(),
            frozen: weights.is_frozen(),
        });
        let batch = draw_batch(&mut rng, cfg.batch_size, captions, &summaries, &sched, cfg)?;
        let out = denoise_loss(&params, &batch, Some(&weights)).map_err(|e| Error::item(format!("step {step}"), e))?;
        losses.push(out.loss);
        adam_step(&mut params.tensors_mut(), &out.grad_theta, &mut opt, &adam)?;
        if cfg.precision == Precision::Run {
            params.tensors_mut().into_iter().for_each(Tensor::round_to_f32);
        }
        if let Some(g) = out.grad_w {
            adam_step(&mut [&mut w_tensor], &[Tensor::from_vec(g)], &mut w_opt, &w_adam)?;
            if cfg.precision == Precision::Run {
                w_tensor.round_to_f32();
            }
            weights.set_values(w_tensor.data())?;
        }
        if step % 500 == 0 {
            log::debug!("toydiff step {step} loss {:.5}", out.loss);
        }
    }
    weights = apply_schedule(&weights, cfg.steps, cfg.freeze_step);

    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_STREAM);
    let eval = draw_batch(&mut eval_rng, cfg.eval_samples, captions, &summaries, &sched, cfg)?;
    let final_loss = denoise_loss(&params, &eval, Some(&weights))?.loss;
    Ok(JointOutcome {
        params,
        weights,
        trajectory,
        losses,
        final_loss,
    })
}

/// Picks `n` distinct captions with `seed`, preserving their input order.
pub fn select_captions(captions: &[String], n: usize, seed: u64) -> Vec<String> {
    let mut idx: Vec<usize> = (0..captions.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| captions[i].clone()).collect()
}

const DENOISER_MAGIC: &[u8; 4] = b"TEDD";
const DENOISER_VERSION: u16 = 1;
const DENOISER_HEADER_LEN: usize = 20;

/// Denoiser blob: magic, u16 version, u16 reserved, u32 cond_dim, hidden,
/// time_dim, then f32 little-endian parameters in tensor order.
pub fn encode_denoiser(params: &DenoiserParams) -> Vec<u8> {
    let cfg = params.cfg;
    let mut out = Vec::with_capacity(DENOISER_HEADER_LEN + 4 * params.num_params());
    out.extend_from_slice(DENOISER_MAGIC);
    out.extend_from_slice(&DENOISER_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for v in [cfg.cond_dim, cfg.hidden, cfg.time_dim] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in params.to_flat() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_denoiser(bytes: &[u8]) -> Result<DenoiserParams> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < DENOISER_HEADER_LEN {
        return Err(bad(format!("truncated denoiser header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != DENOISER_MAGIC {
        return Err(bad("bad denoiser magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != DENOISER_VERSION {
        return Err(bad(format!("unsupported denoiser version {version}")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let cfg = DenoiserConfig {
        cond_dim: u32_at(8),
        hidden: u32_at(12),
        time_dim: u32_at(16),
    };
    let mut params = DenoiserParams::init(0, cfg)?;
    let payload = &bytes[DENOISER_HEADER_LEN..];
    if payload.len() != 4 * params.num_params() {
        return Err(bad(format!(
            "denoiser payload has {} bytes, expected {}",
            payload.len(),
            4 * params.num_params()
        )));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    params.set_flat(&flat)?;
    Ok(params)
}

pub fn save_denoiser(params: &DenoiserParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_denoiser(params)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_denoiser(path: impl AsRef<Path>) -> Result<DenoiserParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading denoiser {}", path.display()), e))?;
    decode_denoiser(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{ToyEncoder, ToyEncoderConfig};
    use crate::fusion::{fuse, FusionStrategy};
    use crate::numerics::{finite_diff_check_with, Stencil};

    fn encoder() -> ToyEncoder {
        ToyEncoder::new(ToyEncoderConfig {
            layers: 3,
            dim: 8,
            max_tokens: 16,
            vocab_size: 256,
            heads: 2,
            ..ToyEncoderConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 100);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((1..100).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)));
        assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
    }

    #[test]
    fn diffuse_endpoints() {
        let s = NoiseSchedule::default();
        let (xt, _) = forward_diffuse(&[1.5, -2.0], 0, &s, 3).unwrap();
        assert_eq!(xt, vec![1.5, -2.0]);
        let long = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let (xt, eps) = forward_diffuse(&[1.5, -2.0], 999, &long, 3).unwrap();
        assert!(xt.iter().zip(&eps).all(|(x, e)| (x - e).abs() < 0.02));
        assert!(matches!(forward_diffuse(&[0.0], 100, &s, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn variance_identity() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = 60;
        let n = 10_000;
        // x0 ~ N(0, 4) per coordinate.
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let x0 = 2.0 * rng.sample::<f64, _>(StandardNormal);
                forward_diffuse_with(&[x0], t, &s, &mut rng).unwrap().0[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let expected = s.alpha_bar(t) * 4.0 + (1.0 - s.alpha_bar(t));
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }

    #[test]
    fn mixture_sampling() {
        let m = Mixture::default();
        assert_eq!(sample_synthetic("a cat", 4, &m).unwrap(), sample_synthetic("a cat", 4, &m).unwrap());
        for i in 0..m.components {
            for j in 0..i {
                let (a, b) = (m.mean(i), m.mean(j));
                assert!(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() >= 4.0 * m.sigma);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws: Vec<[f64; 2]> = (0..1000).map(|_| m.sample_from("a red kite", &mut rng).unwrap()).collect();
        let mu = m.mean(m.component_of("a red kite"));
        for d in 0..2 {
            let avg = draws.iter().map(|x| x[d]).sum::<f64>() / 1000.0;
            assert!((avg - mu[d]).abs() < 0.2);
        }
        assert!(sample_synthetic("", 0, &m).is_err());
    }

    #[test]
    fn loss_special_cases() {
        let eps = Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        assert_eq!(noise_mse(&eps, &eps).unwrap().0, 0.0);
        let (l, _) = noise_mse(&Tensor::zeros(&[2, 2]), &eps).unwrap();
        assert!((l - (0.25 + 1.0 + 4.0 + 0.0625) / 2.0).abs() < 1e-15);
        let nan = Tensor::matrix(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(noise_mse(&nan, &Tensor::zeros(&[1, 2])), Err(Error::Numeric(_))));
    }

    #[test]
    fn summaries_match_fused_mean() {
        let h = encoder().encode("a tiny blue house").unwrap();
        let w = FusionWeights::from_values(vec![0.3, -0.7, 1.1]).unwrap();
        let fused = fuse(&h, &FusionStrategy::Learnable(w.clone())).unwrap();
        let valid: Vec<usize> = (0..fused.mask.len()).filter(|&i| fused.mask[i]).collect();
        let layers = condition_layers(&h).unwrap();
        let alpha = w.alphas();
        for d in 0..8 {
            let direct = valid.iter().map(|&i| fused.data.row(i)[d]).sum::<f64>() / valid.len() as f64;
            let mixed: f64 = (0..3).map(|l| alpha[l] * layers.row(l)[d]).sum();
            assert!((direct - mixed).abs() < 1e-12);
        }
    }

    fn small_batch(seed: u64) -> (DenoiserParams, DenoiseBatch, FusionWeights) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = DenoiserConfig {
            cond_dim: 3,
            hidden: 6,
            time_dim: 4,
        };
        let params = DenoiserParams::init(seed, cfg).unwrap();
        let batch = DenoiseBatch {
            x_t: Tensor::randn(&[2, 2], 1.0, &mut rng),
            t: vec![3, 70],
            eps: Tensor::randn(&[2, 2], 1.0, &mut rng),
            cond: Condition::Stack(Arc::new(Tensor::randn(&[4, 2, 3], 1.0, &mut rng))),
        };
        let w = FusionWeights::from_values(vec![0.2, -0.4, 0.9, 0.0]).unwrap();
        (params, batch, w)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (params, batch, w) = small_batch(2);
        let out = denoise_loss(&params, &batch, Some(&w)).unwrap();
        let analytic: Vec<f64> = out.grad_theta.iter().flat_map(|t| t.data().iter().copied()).collect();
        let f = |flat: &[f64]| {
            let mut p = params.clone();
            p.set_flat(flat)?;
            Ok(denoise_loss(&p, &batch, Some(&w))?.loss)
        };
        let err = finite_diff_check_with(f, &params.to_flat(), &analytic, 1e-3, Stencil::FivePoint).unwrap();
        assert!(err < 1e-4, "theta err {err}");
        let g = |v: &[f64]| Ok(denoise_loss(&params, &batch, Some(&FusionWeights::from_values(v.to_vec())?))?.loss);
        let err = finite_diff_check_with(g, w.values(), out.grad_w.as_ref().unwrap(), 1e-3, Stencil::FivePoint).unwrap();
        assert!(err < 1e-4, "w err {err}");
    }

    #[test]
    fn frozen_weights_get_no_gradient() {
        let (params, batch, mut w) = small_batch(3);
        w.freeze(0);
        assert!(denoise_loss(&params, &batch, Some(&w)).unwrap().grad_w.is_none());
        assert!(denoise_loss(&params, &batch, None).is_err());
    }

    fn captions() -> Vec<String> {
        (0..12).map(|i| format!("caption number {i} with words")).collect()
    }

    fn quick(freeze: Option<u64>) -> ToyDiffConfig {
        ToyDiffConfig {
            steps: 40,
            batch_size: 8,
            hidden: 16,
            time_dim: 8,
            freeze_step: freeze,
            eval_samples: 64,
            seed: 4,
            ..ToyDiffConfig::default()
        }
    }

    #[test]
    fn freeze_contract_and_determinism() {
        let enc = encoder();
        let a = train_joint(&captions(), &enc, &quick(Some(15))).unwrap();
        let b = train_joint(&captions(), &enc, &quick(Some(15))).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.final_loss, b.final_loss);
        let rows = &a.trajectory.rows;
        assert!(rows[15..].iter().all(|r| r.alphas == rows[15].alphas && r.frozen));
        assert!(rows[..15].iter().all(|r| !r.frozen));
        assert_ne!(rows[0].alphas, rows[15].alphas);
        assert_eq!(a.weights.step_frozen_at(), Some(15));

        let z = train_joint(&captions(), &enc, &quick(Some(0))).unwrap();
        let uniform = vec![1.0 / 3.0; 3];
        assert!(z.trajectory.rows.iter().all(|r| r.alphas == uniform));
    }

    #[test]
    fn trajectory_tsv_round_trip() {
        let a = train_joint(&captions(), &encoder(), &quick(Some(10))).unwrap();
        let text = a.trajectory.to_tsv().unwrap();
        let back = WeightTrajectory::parse_tsv(&text).unwrap();
        assert_eq!(back, a.trajectory);
        let flips = back.rows.windows(2).filter(|w| w[0].frozen != w[1].frozen).count();
        assert_eq!(flips, 1);
        assert!(back.rows.iter().all(|r| (r.alphas.iter().sum::<f64>() - 1.0).abs() < 1e-9));
        assert!(WeightTrajectory::default().to_tsv().is_err());
    }

    #[test]
    fn denoiser_blob_round_trip() {
        let (params, _, _) = small_batch(5);
        let back = decode_denoiser(&encode_denoiser(&params)).unwrap();
        for (a, b) in params.to_flat().iter().zip(back.to_flat()) {
            assert_eq!(*a as f32 as f64, b);
        }
        let mut bytes = encode_denoiser(&params);
        bytes.pop();
        assert!(matches!(decode_denoiser(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn single_component_corpus_is_rejected() {
        let m = Mixture::default();
        let one: Vec<String> = (0..200)
            .map(|i| format!("text {i}"))
            .filter(|c| m.component_of(c) == 0)
            .take(3)
            .collect();
        assert!(matches!(train_joint(&one, &encoder(), &quick(None)), Err(Error::Argument(_))));
    }
}
