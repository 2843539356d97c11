//! Contrastive training of the aggregator over a frozen encoder.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregator::{AggregatorConfig, AggregatorParams, ContextEmbedding};
use crate::encoder::HiddenStateSource;
use crate::error::{Error, Result};
use crate::fusion::{apply_schedule, FusionStrategy, FusionWeights};
use crate::io::CaptionPair;
use crate::numerics::ops::softmax_in_place;
use crate::numerics::{adam_step, AdamConfig, AdamState, GeluKind, GradTape, Precision, Tensor};
use crate::pipeline::{prepare_texts, record, Prepared};

/// Loss value and gradients w.r.t. both embedding sets.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_a: Vec<Vec<f64>>,
    pub grad_b: Vec<Vec<f64>>,
}

fn unit(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Numeric(format!("embedding with norm {norm}")));
    }
    Ok((v.iter().map(|x| x / norm).collect(), norm))
}

/// Symmetric InfoNCE over cosine similarities: the mean of the row-wise and
/// column-wise cross-entropies of `S / tau` with diagonal targets.
pub fn info_nce_loss(a: &[ContextEmbedding], b: &[ContextEmbedding], tau: f64) -> Result<InfoNce> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Argument(format!("InfoNCE over {} and {} embeddings", a.len(), b.len())));
    }
    let n = a.len();
    let d = a[0].dim();
    if a.iter().chain(b).any(|e| e.dim() != d) {
        return Err(Error::Argument("InfoNCE embeddings differ in dimension".into()));
    }
    let ua: Vec<(Vec<f64>, f64)> = a.iter().map(|e| unit(e.as_slice())).collect::<Result<_>>()?;
    let ub: Vec<(Vec<f64>, f64)> = b.iter().map(|e| unit(e.as_slice())).collect::<Result<_>>()?;
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();

    let mut logits = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            logits[i * n + j] = dot(&ua[i].0, &ub[j].0) / tau;
        }
    }
    let mut rows = logits.clone();
    let mut cols = vec![0.0; n * n];
    let mut loss = 0.0;
    for i in 0..n {
        let r = &mut rows[i * n..(i + 1) * n];
        loss += log_sum_exp(r) - r[i];
        softmax_in_place(r);
    }
    for j in 0..n {
        let mut c: Vec<f64> = (0..n).map(|i| logits[i * n + j]).collect();
        loss += log_sum_exp(&c) - c[j];
        softmax_in_place(&mut c);
        for i in 0..n {
            cols[i * n + j] = c[i];
        }
    }
    let loss = loss / (2.0 * n as f64);

    // dL/dS_ij = (P_row_ij + P_col_ij - 2 delta_ij) / (2 n tau)
    let scale = 1.0 / (2.0 * n as f64 * tau);
    let g: Vec<f64> = (0..n * n)
        .map(|k| {
            let diag = if k / n == k % n { 2.0 } else { 0.0 };
            (rows[k] + cols[k] - diag) * scale
        })
        .collect();
    let mut grad_a = Vec::with_capacity(n);
    let mut grad_b = Vec::with_capacity(n);
    for i in 0..n {
        let mut gu = vec![0.0; d];
        for j in 0..n {
            for (o, v) in gu.iter_mut().zip(&ub[j].0) {
                *o += g[i * n + j] * v;
            }
        }
        grad_a.push(through_normalize(&ua[i].0, ua[i].1, &gu));
    }
    for j in 0..n {
        let mut gv = vec![0.0; d];
        for i in 0..n {
            for (o, u) in gv.iter_mut().zip(&ua[i].0) {
                *o += g[i * n + j] * u;
            }
        }
        grad_b.push(through_normalize(&ub[j].0, ub[j].1, &gv));
    }
    crate::error::ensure_finite(&[loss], "InfoNCE loss")?;
    Ok(InfoNce { loss, grad_a, grad_b })
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Gradient through `u = x / |x|`.
fn through_normalize(u: &[f64], norm: f64, gu: &[f64]) -> Vec<f64> {
    let proj: f64 = u.iter().zip(gu).map(|(a, b)| a * b).sum();
    u.iter().zip(gu).map(|(ui, gi)| (gi - ui * proj) / norm).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub seed: u64,
    pub fusion: FusionStrategy,
    /// Step at which learnable fusion weights freeze; `None` never freezes.
    pub freeze_step: Option<u64>,
    pub precision: Precision,
    pub heads: usize,
    pub blocks: usize,
    /// Output dimension; `None` keeps the encoder's hidden size.
    pub out_dim: Option<usize>,
    pub force_projection: bool,
    pub init_std: f64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            epochs: 1,
            batch_size: 32,
            tau: 0.07,
            seed: 0,
            fusion: FusionStrategy::NormAvg,
            freeze_step: None,
            precision: Precision::Test,
            heads: 8,
            blocks: 2,
            out_dim: None,
            force_projection: false,
            init_std: 0.02,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "contrastive batches need at least 2 pairs, got {}",
                self.batch_size
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn aggregator_config(&self, dim: usize) -> AggregatorConfig {
        AggregatorConfig {
            dim,
            out_dim: self.out_dim.unwrap_or(dim),
            heads: self.heads,
            blocks: self.blocks,
            mlp_ratio: 4,
            force_projection: self.force_projection,
            init_std: self.init_std,
            gelu: GeluKind::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    /// Fusion weights used for this step (empty for fixed strategies).
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
    pub seed: u64,
    pub wall_clock_secs: f64,
}

impl TrainHistory {
    /// Mean loss per epoch, in epoch order.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let epochs = self.rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let l: Vec<f64> = self.rows.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
                l.iter().sum::<f64>() / l.len().max(1) as f64
            })
            .collect()
    }

    /// Tab-separated `step, loss, alpha_1..alpha_L`. Wall-clock time is
    /// left out so reruns produce identical files.
    pub fn to_tsv(&self) -> String {
        let layers = self.rows.first().map_or(0, |r| r.alphas.len());
        let mut out = String::from("step\tloss");
        for i in 1..=layers {
            let _ = write!(out, "\talpha_{i}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}\t{:e}", r.step, r.loss);
            for a in &r.alphas {
                let _ = write!(out, "\t{a:e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: AggregatorParams,
    /// Final fusion weights for a learnable strategy.
    pub fusion: Option<FusionWeights>,
    pub history: TrainHistory,
}

impl TrainOutcome {
    /// The strategy the trained aggregator expects at evaluation time.
    pub fn eval_strategy(&self, trained_with: &FusionStrategy) -> FusionStrategy {
        match &self.fusion {
            Some(w) => FusionStrategy::Learnable(w.clone()),
            None => trained_with.clone(),
        }
    }
}

/// Evaluation strategy for a checkpoint. A learnable request is resolved to
/// the frozen weights stored in the checkpoint metadata.
pub fn checkpoint_strategy(params: &AggregatorParams, requested: &FusionStrategy) -> Result<FusionStrategy> {
    match requested {
        FusionStrategy::Learnable(_) => {
            let raw = params
                .meta_get("fusion_weights")
                .ok_or_else(|| Error::Config("checkpoint carries no learned fusion weights".into()))?;
            let w = raw
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|_| Error::Checkpoint(format!("bad fusion weight {v:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let mut w = FusionWeights::from_values(w)?;
            w.freeze(0);
            Ok(FusionStrategy::Learnable(w))
        }
        other => Ok(other.clone()),
    }
}

struct StepItem {
    tape: GradTape,
    vars: crate::aggregator::AggregatorVars,
    w: Option<crate::numerics::Var>,
    out: crate::numerics::Var,
}

/// Trains an aggregator for the `(encoder, cfg.fusion)` pairing.
pub fn train_aggregator(
    pairs: &[CaptionPair],
    encoder: &dyn HiddenStateSource,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Argument("empty caption-pair corpus".into()));
    }
    let started = Instant::now();
    let learnable = matches!(cfg.fusion, FusionStrategy::Learnable(_));

    let mut texts = Vec::with_capacity(2 * pairs.len());
    let mut ids = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        texts.push(p.caption_a.as_str());
        texts.push(p.caption_b.as_str());
        ids.push(format!("pair {} caption_a", p.id));
        ids.push(format!("pair {} caption_b", p.id));
    }
    let prepared = prepare_texts(&texts, &ids, encoder, &cfg.fusion, learnable, cfg.precision)?;
    let dim = match &prepared[0] {
        Prepared::Fused(s) => s.data.cols(),
        Prepared::Stack { stack, .. } => stack.shape()[2],
    };
    let layers = match &prepared[0] {
        Prepared::Stack { stack, .. } => stack.shape()[0],
        Prepared::Fused(_) => 0,
    };

    let mut params = AggregatorParams::init(cfg.seed, cfg.aggregator_config(dim))?;
    if cfg.precision == Precision::Run {
        params.tensors_mut().into_iter().for_each(Tensor::round_to_f32);
    }
    params.set_meta("encoder", encoder.id());
    params.set_meta("fusion", cfg.fusion.name());
    params.set_meta("seed", cfg.seed.to_string());

    let mut weights = match &cfg.fusion {
        FusionStrategy::Learnable(w) if w.layers() == 0 => Some(FusionWeights::zeros(layers)),
        FusionStrategy::Learnable(w) if w.layers() != layers => {
            return Err(Error::Config(format!("{} fusion weights for {layers} encoder layers", w.layers())))
        }
        FusionStrategy::Learnable(w) => Some(w.clone()),
        _ => None,
    };
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut opt = AdamState::new(params.tensors());
    let mut w_tensor = weights.as_ref().map(|w| Tensor::from_vec(w.values().to_vec()));
    let mut w_opt = w_tensor.as_ref().map(|t| AdamState::new([t]));

    let b = cfg.batch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5E_ED0F_BA7C);
    let mut history = TrainHistory {
        seed: cfg.seed,
        ..TrainHistory::default()
    };
    let mut step: u64 = 0;
    if pairs.len() < b {
        log::warn!("{} pairs is fewer than one batch of {b}; no training steps", pairs.len());
    }
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks_exact(b) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            if let Some(w) = weights.as_mut() {
                *w = apply_schedule(w, step, cfg.freeze_step);
            }
            let alphas = weights.as_ref().map(|w| w.alphas()).unwrap_or_default();

            let items: Vec<usize> = batch.iter().flat_map(|&p| [2 * p, 2 * p + 1]).collect();
            let mut forward: Vec<StepItem> = items
                .par_iter()
                .map(|&k| {
                    let mut tape = GradTape::new();
                    let vars = params.register(&mut tape);
                    let (w, alpha) = match &w_tensor {
                        Some(t) => {
                            let w = tape.leaf(t.clone());
                            (Some(w), Some(tape.softmax(w)?))
                        }
                        None => (None, None),
                    };
                    let out = record(&mut tape, &prepared[k], &vars, alpha).map_err(|e| Error::item(&ids[k], e))?;
                    Ok(StepItem { tape, vars, w, out })
                })
                .collect::<Result<_>>()?;

            let embs: Vec<ContextEmbedding> = forward
                .iter()
                .map(|it| ContextEmbedding(it.tape.value(it.out).data().to_vec()))
                .collect();
            let (ea, eb): (Vec<_>, Vec<_>) = embs.chunks(2).map(|c| (c[0].clone(), c[1].clone())).unzip();
            let nce = info_nce_loss(&ea, &eb, cfg.tau)
                .map_err(|e| Error::item(format!("step {step}"), e))?;
            if !nce.loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {step}")));
            }
            let seeds: Vec<Vec<f64>> = nce
                .grad_a
                .into_iter()
                .zip(nce.grad_b)
                .flat_map(|(ga, gb)| [ga, gb])
                .collect();

            let per_item: Vec<(Vec<Tensor>, Option<Tensor>)> = forward
                .par_iter_mut()
                .zip(seeds.into_par_iter())
                .map(|(it, g)| {
                    let grads = it.tape.backward(&[(it.out, Tensor::from_vec(g))])?;
                    let pg = params.collect_grads(&it.vars, &grads);
                    Ok((pg, it.w.map(|w| grads.wrt(w))))
                })
                .collect::<Result<_>>()?;

            // Fixed-order reduction keeps runs bit-reproducible.
            let mut it = per_item.into_iter();
            let (mut total, mut total_w) = it.next().expect("non-empty batch");
            for (pg, wg) in it {
                for (t, g) in total.iter_mut().zip(&pg) {
                    t.add_assign(g);
                }
                if let (Some(t), Some(g)) = (total_w.as_mut(), wg.as_ref()) {
                    t.add_assign(g);
                }
            }
            adam_step(&mut params.tensors_mut(), &total, &mut opt, &adam)?;
            if cfg.precision == Precision::Run {
                params.tensors_mut().into_iter().for_each(Tensor::round_to_f32);
            }
            if let (Some(w), Some(t), Some(o), Some(g)) = (weights.as_mut(), w_tensor.as_mut(), w_opt.as_mut(), total_w)
            {
                if !w.is_frozen() {
                    adam_step(&mut [&mut *t], &[g], o, &adam)?;
                    if cfg.precision == Precision::Run {
                        t.round_to_f32();
                    }
                    w.set_values(t.data())?;
                }
            }
            history.rows.push(HistoryRow {
                step,
                epoch,
                loss: nce.loss,
                alphas,
            });
            log::debug!("step {step} loss {:.5}", nce.loss);
            step += 1;
        }
    }
    if let Some(w) = weights.as_mut() {
        *w = apply_schedule(w, step, cfg.freeze_step);
        params.set_meta("fusion_weights", w.values().iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(","));
    }
    history.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        params,
        fusion: weights,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{ToyEncoder, ToyEncoderConfig};
    use crate::numerics::gradcheck::finite_diff_check;

    fn emb(v: &[f64]) -> ContextEmbedding {
        ContextEmbedding(v.to_vec())
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let r = info_nce_loss(&[emb(&[1.0, 2.0])], &[emb(&[3.0, -1.0])], 0.07).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grad_a[0].iter().chain(&r.grad_b[0]).all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn identical_embeddings_give_ln_b() {
        let a: Vec<_> = (0..4).map(|_| emb(&[0.3, -0.2, 0.9])).collect();
        let r = info_nce_loss(&a, &a, 0.07).unwrap();
        assert!((r.loss - 4f64.ln()).abs() < 1e-12);
        assert!((r.loss - 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_pairs_approach_zero_loss() {
        let a: Vec<_> = (0..3).map(|i| emb(&(0..3).map(|j| (i == j) as u8 as f64).collect::<Vec<_>>())).collect();
        let hot = info_nce_loss(&a, &a, 0.01).unwrap().loss;
        assert!(hot < 1e-40, "{hot}");
        assert!(info_nce_loss(&a, &a, 1.0).unwrap().loss > hot);
    }

    #[test]
    fn errors() {
        let a = [emb(&[1.0, 0.0]), emb(&[0.0, 1.0])];
        assert!(matches!(info_nce_loss(&a, &a, 0.0), Err(Error::Config(_))));
        assert!(matches!(info_nce_loss(&a, &a[..1], 0.1), Err(Error::Argument(_))));
        let z = [emb(&[1.0, 0.0]), emb(&[0.0, 0.0])];
        assert!(matches!(info_nce_loss(&a, &z, 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (3, 4);
        let point = Tensor::randn(&[2 * n * d], 1.0, &mut rng).into_data();
        let split = |p: &[f64]| {
            let e: Vec<_> = p.chunks(d).map(emb).collect();
            (e[..n].to_vec(), e[n..].to_vec())
        };
        let (a, b) = split(&point);
        let r = info_nce_loss(&a, &b, 0.5).unwrap();
        let analytic: Vec<f64> = r.grad_a.concat().into_iter().chain(r.grad_b.concat()).collect();
        let err = finite_diff_check(
            |p| {
                let (a, b) = split(p);
                info_nce_loss(&a, &b, 0.5).map(|r| r.loss)
            },
            &point,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    fn tiny_setup() -> (Vec<CaptionPair>, ToyEncoder) {
        let pairs = (0..8)
            .map(|i| CaptionPair {
                id: format!("p{i}"),
                caption_a: format!("item {i} left side"),
                caption_b: format!("item {i} right view"),
                source: format!("s{i}"),
            })
            .collect();
        let enc = ToyEncoder::new(ToyEncoderConfig {
            layers: 3,
            dim: 8,
            max_tokens: 24,
            vocab_size: 256,
            heads: 2,
            ..ToyEncoderConfig::default()
        })
        .unwrap();
        (pairs, enc)
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            batch_size: 4,
            epochs: 2,
            heads: 2,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_init() {
        let (pairs, enc) = tiny_setup();
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let out = train_aggregator(&pairs, &enc, &cfg).unwrap();
        let init = AggregatorParams::init(11, cfg.aggregator_config(8)).unwrap();
        assert_eq!(out.params.to_flat(), init.to_flat());
        assert!(out.history.rows.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_leaves_encoder_alone() {
        let (pairs, enc) = tiny_setup();
        let before = enc.encode(&pairs[0].caption_a).unwrap();
        let a = train_aggregator(&pairs, &enc, &tiny_cfg()).unwrap();
        let b = train_aggregator(&pairs, &enc, &tiny_cfg()).unwrap();
        assert_eq!(
            crate::aggregator::encode_checkpoint(&a.params),
            crate::aggregator::encode_checkpoint(&b.params)
        );
        assert_eq!(a.history.rows, b.history.rows);
        assert_eq!(a.history.rows.len(), 4);
        assert_eq!(enc.encode(&pairs[0].caption_a).unwrap(), before);
    }

    #[test]
    fn learnable_fusion_follows_schedule() {
        let (pairs, enc) = tiny_setup();
        let frozen = TrainConfig {
            fusion: "learnable".parse().unwrap(),
            freeze_step: Some(0),
            ..tiny_cfg()
        };
        let out = train_aggregator(&pairs, &enc, &frozen).unwrap();
        let first = &out.history.rows[0].alphas;
        assert_eq!(first.len(), 3);
        assert!(out.history.rows.iter().all(|r| &r.alphas == first));
        assert!(out.fusion.as_ref().unwrap().is_frozen());

        let free = TrainConfig {
            freeze_step: None,
            lr: 5e-2,
            ..frozen
        };
        let out = train_aggregator(&pairs, &enc, &free).unwrap();
        let w = out.fusion.unwrap();
        assert!(!w.is_frozen());
        let moved = w.alphas().iter().map(|a| (a - 1.0 / 3.0).abs()).fold(0.0, f64::max);
        assert!(moved > 1e-3, "{moved}");
        for r in &out.history.rows {
            assert!((r.alphas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn history_tsv_layout() {
        let h = TrainHistory {
            rows: vec![HistoryRow {
                step: 0,
                epoch: 0,
                loss: 1.5,
                alphas: vec![0.25, 0.75],
            }],
            ..TrainHistory::default()
        };
        assert_eq!(h.to_tsv(), "step\tloss\talpha_1\talpha_2\n0\t1.5e0\t2.5e-1\t7.5e-1\n");
        assert_eq!(h.epoch_losses(), vec![1.5]);
    }

    #[test]
    fn config_validation() {
        let (pairs, enc) = tiny_setup();
        for bad in [
            TrainConfig { batch_size: 1, ..tiny_cfg() },
            TrainConfig { lr: 0.0, ..tiny_cfg() },
            TrainConfig { tau: -1.0, ..tiny_cfg() },
        ] {
            assert!(matches!(train_aggregator(&pairs, &enc, &bad), Err(Error::Config(_))));
        }
        assert!(matches!(train_aggregator(&[], &enc, &tiny_cfg()), Err(Error::Argument(_))));
    }
}
