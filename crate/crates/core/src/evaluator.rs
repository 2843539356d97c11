//! Similarity-argmax scoring of benchmark instances, per-category reports,
//! and the caption-shuffle and seed-stability analyses.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::aggregator::{encode_checkpoint, AggregatorParams, ContextEmbedding};
use crate::encoder::{text_hash, HiddenStateSource};
use crate::error::{Error, Result};
use crate::fusion::{mean_pool_last, FusionStrategy};
use crate::io::{CaptionPair, Category, Ted6kInstance};
use crate::numerics::ops::cosine;
use crate::numerics::{Precision, Tensor};
use crate::pipeline::{embed, prepare};
use crate::trainer::{train_aggregator, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    /// Raw dot product, kept for sensitivity checks.
    Dot,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Similarity::Cosine),
            "dot" => Ok(Similarity::Dot),
            other => Err(Error::Config(format!("unknown similarity {other:?}"))),
        }
    }
}

impl Similarity {
    pub fn score(self, a: &ContextEmbedding, b: &ContextEmbedding) -> Result<f64> {
        if a.dim() != b.dim() {
            return Err(Error::Argument(format!("embeddings of dim {} and {}", a.dim(), b.dim())));
        }
        match self {
            Similarity::Cosine => cosine(a.as_slice(), b.as_slice()),
            Similarity::Dot => Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()),
        }
    }
}

/// Correct iff the positive is strictly more similar than every negative.
/// Returns the outcome and `sim(pos) - max sim(neg)`.
pub fn score_instance(cap: &ContextEmbedding, pos: &ContextEmbedding, negs: &[ContextEmbedding]) -> Result<(bool, f64)> {
    score_instance_with(Similarity::Cosine, cap, pos, negs)
}

pub fn score_instance_with(
    metric: Similarity,
    cap: &ContextEmbedding,
    pos: &ContextEmbedding,
    negs: &[ContextEmbedding],
) -> Result<(bool, f64)> {
    if negs.is_empty() {
        return Err(Error::Argument("instance without negatives".into()));
    }
    let sp = metric.score(cap, pos)?;
    let mut best = f64::NEG_INFINITY;
    for n in negs {
        best = best.max(metric.score(cap, n)?);
    }
    Ok((sp > best, sp - best))
}

/// Maps texts to sentence embeddings.
pub trait Embedder: Sync {
    fn embed(&self, text: &str) -> Result<ContextEmbedding>;
    fn describe(&self) -> String;
}

/// Encoder, fusion and trained aggregator.
pub struct PipelineEmbedder<'a> {
    pub encoder: &'a dyn HiddenStateSource,
    pub strategy: FusionStrategy,
    pub params: &'a AggregatorParams,
    pub precision: Precision,
}

impl<'a> PipelineEmbedder<'a> {
    pub fn new(encoder: &'a dyn HiddenStateSource, strategy: FusionStrategy, params: &'a AggregatorParams) -> Self {
        Self {
            encoder,
            strategy,
            params,
            precision: Precision::Test,
        }
    }
}

impl Embedder for PipelineEmbedder<'_> {
    fn embed(&self, text: &str) -> Result<ContextEmbedding> {
        let h = self.encoder.encode(text)?;
        embed(&prepare(&h, &self.strategy, false, self.precision)?, self.params)
    }

    fn describe(&self) -> String {
        format!("{} | {} | aggregator", self.encoder.id(), self.strategy)
    }
}

/// Masked mean of the last layer, no aggregator.
pub struct MeanPoolEmbedder<'a> {
    pub encoder: &'a dyn HiddenStateSource,
}

impl Embedder for MeanPoolEmbedder<'_> {
    fn embed(&self, text: &str) -> Result<ContextEmbedding> {
        ContextEmbedding::new(mean_pool_last(&self.encoder.encode(text)?)?)
    }

    fn describe(&self) -> String {
        format!("{} | mean-pool last layer", self.encoder.id())
    }
}

/// Independent Gaussian vector per distinct text; a chance-level reference.
pub struct RandomEmbedder {
    pub seed: u64,
    pub dim: usize,
}

impl Embedder for RandomEmbedder {
    fn embed(&self, text: &str) -> Result<ContextEmbedding> {
        let h = Sha256::digest(format!("{}:{text}", self.seed).as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&h);
        let mut rng = ChaCha8Rng::from_seed(seed);
        ContextEmbedding::new(Tensor::randn(&[self.dim], 1.0, &mut rng).into_data())
    }

    fn describe(&self) -> String {
        format!("random:seed={},dim={}", self.seed, self.dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryResult {
    pub category: Category,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Identifies what produced a report.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct EvalFingerprint {
    pub embedder: String,
    pub encoder: String,
    pub fusion: String,
    pub checkpoint_sha256: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub n_instances: usize,
    pub n_correct: usize,
    /// Categories present in the benchmark, in canonical order.
    pub per_category: Vec<CategoryResult>,
    /// Expected accuracy of uniform guessing, weighted per instance.
    pub chance_accuracy: f64,
    pub mean_margin: f64,
    pub skipped: Vec<String>,
    pub fingerprint: EvalFingerprint,
}

impl EvalReport {
    pub fn category(&self, c: Category) -> Option<&CategoryResult> {
        self.per_category.iter().find(|r| r.category == c)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("category\tn\taccuracy\n");
        for r in &self.per_category {
            let _ = writeln!(out, "{}\t{}\t{:.2}", r.category, r.n, r.accuracy);
        }
        let _ = writeln!(out, "overall\t{}\t{:.2}", self.n_instances, self.overall_accuracy);
        out
    }

    pub fn to_text(&self) -> String {
        let f = &self.fingerprint;
        let mut out = String::new();
        let _ = writeln!(out, "embedder:    {}", f.embedder);
        if !f.checkpoint_sha256.is_empty() {
            let _ = writeln!(out, "checkpoint:  {}", f.checkpoint_sha256);
        }
        let _ = writeln!(out, "instances:   {}", self.n_instances);
        let _ = writeln!(out, "accuracy:    {:.2}% ({}/{})", self.overall_accuracy, self.n_correct, self.n_instances);
        let _ = writeln!(out, "chance:      {:.2}%", self.chance_accuracy);
        let _ = writeln!(out, "mean margin: {:.4}", self.mean_margin);
        if !self.skipped.is_empty() {
            let _ = writeln!(out, "skipped:     {}", self.skipped.len());
        }
        let _ = writeln!(out);
        let width = self.per_category.iter().map(|r| r.category.as_str().len()).max().unwrap_or(8);
        for r in &self.per_category {
            let _ = writeln!(out, "{:<width$}  {:>5}  {:>6.2}", r.category.as_str(), r.n, r.accuracy);
        }
        out
    }

    /// Writes `report.txt`, `report.tsv` and `report.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(format!("writing {}", p.display()), e))
        };
        put("report.txt", self.to_text())?;
        put("report.tsv", self.to_tsv())?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        put("report.json", json + "\n")
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub metric: Similarity,
    /// Exclude instances whose texts fail to embed instead of aborting.
    pub skip_errors: bool,
    /// Treat an encoder/fusion mismatch with the checkpoint as an error.
    pub strict_pairing: bool,
}

/// Evaluates with the aggregator trained for `(encoder, strategy)`.
pub fn evaluate(
    bench: &[Ted6kInstance],
    encoder: &dyn HiddenStateSource,
    strategy: &FusionStrategy,
    params: &AggregatorParams,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    check_pairing(encoder, strategy, params, opts.strict_pairing)?;
    let embedder = PipelineEmbedder::new(encoder, strategy.clone(), params);
    let mut report = evaluate_with(bench, &embedder, opts)?;
    report.fingerprint = EvalFingerprint {
        embedder: embedder.describe(),
        encoder: encoder.id(),
        fusion: strategy.name(),
        checkpoint_sha256: checkpoint_hash(params),
        seed: params.meta_get("seed").and_then(|s| s.parse().ok()),
    };
    Ok(report)
}

pub fn checkpoint_hash(params: &AggregatorParams) -> String {
    hex::encode(Sha256::digest(encode_checkpoint(params)))
}

fn check_pairing(encoder: &dyn HiddenStateSource, strategy: &FusionStrategy, params: &AggregatorParams, strict: bool) -> Result<()> {
    let mut problems = Vec::new();
    if let Some(e) = params.meta_get("encoder") {
        if e != encoder.id() {
            problems.push(format!("checkpoint trained on encoder {e}, evaluating with {}", encoder.id()));
        }
    }
    if let Some(f) = params.meta_get("fusion") {
        if f != strategy.name() {
            problems.push(format!("checkpoint trained with fusion {f}, evaluating with {strategy}"));
        }
    }
    if problems.is_empty() {
        return Ok(());
    }
    let msg = problems.join("; ");
    if strict {
        return Err(Error::Config(msg));
    }
    log::warn!("{msg}");
    Ok(())
}

/// Embeds every distinct text once, in parallel.
fn embed_all<'t>(
    texts: impl Iterator<Item = &'t str>,
    embedder: &dyn Embedder,
) -> HashMap<&'t str, std::result::Result<ContextEmbedding, String>> {
    let mut unique: Vec<&str> = texts.collect();
    unique.sort_unstable();
    unique.dedup();
    let embedded: Vec<_> = unique
        .par_iter()
        .map(|t| embedder.embed(t).map_err(|e| e.to_string()))
        .collect();
    unique.into_iter().zip(embedded).collect()
}

pub fn evaluate_with(bench: &[Ted6kInstance], embedder: &dyn Embedder, opts: &EvalOptions) -> Result<EvalReport> {
    let captions: Vec<&str> = bench.iter().map(|i| i.caption.as_str()).collect();
    evaluate_captions(bench, &captions, embedder, opts)
}

/// Scores instance `i` with `captions[i]` in place of its own caption.
fn evaluate_captions(
    bench: &[Ted6kInstance],
    captions: &[&str],
    embedder: &dyn Embedder,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if bench.is_empty() {
        return Err(Error::Argument("empty benchmark".into()));
    }
    let texts = captions.iter().copied().chain(
        bench
            .iter()
            .flat_map(|i| std::iter::once(i.positive.as_str()).chain(i.negatives.iter().map(String::as_str))),
    );
    let table = embed_all(texts, embedder);
    let get = |t: &str, id: &str| -> Result<&ContextEmbedding> {
        table[t].as_ref().map_err(|e| {
            Error::item(
                format!("instance {id}"),
                Error::Argument(format!("text {:?} ({}): {e}", short(t), &text_hash(t)[..12])),
            )
        })
    };

    let mut outcomes: Vec<(Category, bool, f64, usize)> = Vec::with_capacity(bench.len());
    let mut skipped = Vec::new();
    for (inst, cap) in bench.iter().zip(captions) {
        let scored = (|| {
            let c = get(cap, &inst.id)?;
            let p = get(&inst.positive, &inst.id)?;
            let n: Vec<ContextEmbedding> = inst
                .negatives
                .iter()
                .map(|t| get(t, &inst.id).cloned())
                .collect::<Result<_>>()?;
            score_instance_with(opts.metric, c, p, &n).map_err(|e| Error::item(format!("instance {}", inst.id), e))
        })();
        match scored {
            Ok((ok, margin)) => outcomes.push((inst.category, ok, margin, inst.negatives.len())),
            Err(e) if opts.skip_errors => {
                log::warn!("skipping: {e}");
                skipped.push(inst.id.clone());
            }
            Err(e) => return Err(e),
        }
    }
    if outcomes.is_empty() {
        return Err(Error::Argument("every instance failed to embed".into()));
    }
    let n = outcomes.len();
    let n_correct = outcomes.iter().filter(|o| o.1).count();
    let per_category = Category::ALL
        .iter()
        .filter_map(|&c| {
            let rows: Vec<_> = outcomes.iter().filter(|o| o.0 == c).collect();
            (!rows.is_empty()).then(|| {
                let correct = rows.iter().filter(|o| o.1).count();
                CategoryResult {
                    category: c,
                    n: rows.len(),
                    correct,
                    accuracy: percent(correct, rows.len()),
                }
            })
        })
        .collect();
    Ok(EvalReport {
        overall_accuracy: percent(n_correct, n),
        n_instances: n,
        n_correct,
        per_category,
        chance_accuracy: 100.0 * outcomes.iter().map(|o| 1.0 / (1 + o.3) as f64).sum::<f64>() / n as f64,
        mean_margin: outcomes.iter().map(|o| o.2).sum::<f64>() / n as f64,
        skipped,
        fingerprint: EvalFingerprint {
            embedder: embedder.describe(),
            ..EvalFingerprint::default()
        },
    })
}

fn percent(k: usize, n: usize) -> f64 {
    100.0 * k as f64 / n as f64
}

fn short(t: &str) -> String {
    t.chars().take(40).collect()
}

/// Seeded permutation without fixed points (Sattolo's single-cycle shuffle).
pub fn derangement(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Accuracy with each caption paired to another instance's statements.
pub fn shuffle_baseline(bench: &[Ted6kInstance], embedder: &dyn Embedder, seed: u64, opts: &EvalOptions) -> Result<f64> {
    shuffle_report(bench, embedder, seed, opts).map(|r| r.overall_accuracy)
}

pub fn shuffle_report(bench: &[Ted6kInstance], embedder: &dyn Embedder, seed: u64, opts: &EvalOptions) -> Result<EvalReport> {
    if bench.len() < 2 {
        return Err(Error::Argument(format!(
            "shuffling needs at least 2 instances, got {}",
            bench.len()
        )));
    }
    let perm = derangement(bench.len(), seed);
    let captions: Vec<&str> = perm.iter().map(|&j| bench[j].caption.as_str()).collect();
    evaluate_captions(bench, &captions, embedder, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityResult {
    pub seeds: Vec<u64>,
    pub scores: Vec<f64>,
    /// `max - min` of the scores, in accuracy points.
    pub max_variation: f64,
}

/// Trains and evaluates one aggregator per seed `cfg.seed + i`.
pub fn stability_runs(
    pairs: &[CaptionPair],
    bench: &[Ted6kInstance],
    encoder: &dyn HiddenStateSource,
    cfg: &TrainConfig,
    n_seeds: usize,
) -> Result<StabilityResult> {
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| cfg.seed + i).collect();
    stability_runs_with_seeds(pairs, bench, encoder, cfg, &seeds)
}

pub fn stability_runs_with_seeds(
    pairs: &[CaptionPair],
    bench: &[Ted6kInstance],
    encoder: &dyn HiddenStateSource,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<StabilityResult> {
    if seeds.len() < 2 {
        return Err(Error::Argument(format!("stability needs at least 2 seeds, got {}", seeds.len())));
    }
    let mut scores = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run = TrainConfig { seed, ..cfg.clone() };
        let score = train_aggregator(pairs, encoder, &run)
            .and_then(|out| {
                let strategy = out.eval_strategy(&cfg.fusion);
                evaluate(bench, encoder, &strategy, &out.params, &EvalOptions::default())
            })
            .map_err(|e| Error::item(format!("seed {seed}"), e))?;
        log::info!("seed {seed}: {:.2}%", score.overall_accuracy);
        scores.push(score.overall_accuracy);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(StabilityResult {
        seeds: seeds.to_vec(),
        scores,
        max_variation: max - min,
    })
}
