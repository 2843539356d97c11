//! Sentence-level context aggregator.
//!
//! A learnable context token is prepended to the fused token sequence; the
//! result runs through a stack of pre-LN attention blocks whose mask is
//! bidirectional over the context token and every valid token. The context
//! position is then normalized (parameter-free), optionally projected to
//! `out_dim`, and returned as the sentence embedding.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::TokenSeq;
use crate::numerics::ops::cosine;
use crate::numerics::{
    block_forward, BlockOptions, BlockParams, BlockVars, GeluKind, GradTape, Gradients, Tensor, Var, LN_EPS,
};

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorConfig {
    pub dim: usize,
    pub out_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    /// Instantiate the projection even when `dim == out_dim`.
    pub force_projection: bool,
    pub init_std: f64,
    pub gelu: GeluKind,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            dim: 1024,
            out_dim: 1024,
            heads: 8,
            blocks: 2,
            mlp_ratio: 4,
            force_projection: false,
            init_std: 0.02,
            gelu: GeluKind::Exact,
        }
    }
}

impl AggregatorConfig {
    pub fn new(dim: usize, out_dim: usize, heads: usize, blocks: usize) -> Self {
        Self {
            dim,
            out_dim,
            heads,
            blocks,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.out_dim == 0 || self.blocks == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(format!("invalid aggregator config {self:?}")));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "aggregator dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    fn has_projection(&self) -> bool {
        self.force_projection || self.dim != self.out_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams {
    pub context_token: Tensor,
    pub blocks: Vec<BlockParams>,
    pub projection: Option<Projection>,
    cfg: AggregatorConfig,
    /// `key=value` entries stored with checkpoints (encoder id, fusion...).
    pub meta: Vec<(String, String)>,
}

/// Sentence embedding read out at the context position.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedding(pub Vec<f64>);

impl ContextEmbedding {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        crate::error::ensure_finite(&v, "context embedding")?;
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Cosine similarity of two embeddings.
pub fn similarity(a: &ContextEmbedding, b: &ContextEmbedding) -> Result<f64> {
    cosine(&a.0, &b.0)
}

pub fn init_params(seed: u64, dim: usize, out_dim: usize, heads: usize, blocks: usize) -> Result<AggregatorParams> {
    AggregatorParams::init(seed, AggregatorConfig::new(dim, out_dim, heads, blocks))
}

impl AggregatorParams {
    pub fn init(seed: u64, cfg: AggregatorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let context_token = Tensor::randn(&[cfg.dim], cfg.init_std, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams::init(cfg.dim, cfg.heads, cfg.mlp_ratio * cfg.dim, cfg.init_std, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let projection = cfg.has_projection().then(|| Projection {
            weight: Tensor::randn(&[cfg.dim, cfg.out_dim], cfg.init_std, &mut rng),
            bias: Tensor::zeros(&[cfg.out_dim]),
        });
        Ok(Self {
            context_token,
            blocks,
            projection,
            cfg,
            meta: Vec::new(),
        })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.out_dim
    }

    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    /// Parameter tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.context_token];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        if let Some(p) = &self.projection {
            out.push(&p.weight);
            out.push(&p.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.context_token];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        if let Some(p) = &mut self.projection {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
        }
        out
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
                "{} values for {} aggregator parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut GradTape) -> AggregatorVars {
        let ctx = tape.leaf(
            self.context_token
                .clone()
                .reshape(vec![1, self.cfg.dim])
                .expect("context token shape"),
        );
        let blocks = self.blocks.iter().map(|b| b.register(tape)).collect();
        let projection = self
            .projection
            .as_ref()
            .map(|p| (tape.leaf(p.weight.clone()), tape.leaf(p.bias.clone())));
        AggregatorVars {
            context_token: ctx,
            blocks,
            projection,
            gelu: self.cfg.gelu,
        }
    }

    /// Gradients for every parameter tensor, in [`Self::tensors`] order.
    pub fn collect_grads(&self, vars: &AggregatorVars, grads: &Gradients) -> Vec<Tensor> {
        vars.all()
            .into_iter()
            .zip(self.tensors())
            .map(|(v, t)| {
                grads
                    .wrt(v)
                    .reshape(t.shape().to_vec())
                    .expect("gradient shape matches parameter")
            })
            .collect()
    }
}

/// Tape handles for every aggregator parameter.
#[derive(Debug, Clone)]
pub struct AggregatorVars {
    pub context_token: Var,
    pub blocks: Vec<BlockVars>,
    pub projection: Option<(Var, Var)>,
    gelu: GeluKind,
}

impl AggregatorVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.context_token];
        for b in &self.blocks {
            out.extend(b.vars());
        }
        if let Some((w, b)) = self.projection {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// Records the aggregator on `tape` for a `[n, dim]` token sequence.
pub fn aggregate_on_tape(tape: &mut GradTape, vars: &AggregatorVars, c_text: Var, mask: &[bool]) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Argument("aggregate with every token masked".into()));
    }
    let dim = tape.value(vars.context_token).cols();
    let tv = tape.value(c_text);
    if tv.shape().len() != 2 || tv.cols() != dim || tv.rows() != mask.len() {
        return Err(Error::Argument(format!(
            "token sequence {:?} (mask {}) for an aggregator of dim {dim}",
            tv.shape(),
            mask.len()
        )));
    }
    let mut full_mask = Vec::with_capacity(mask.len() + 1);
    full_mask.push(true);
    full_mask.extend_from_slice(mask);

    let mut x = tape.concat_rows(vars.context_token, c_text)?;
    let opts = BlockOptions {
        gelu: vars.gelu,
        attention: true,
    };
    for b in &vars.blocks {
        x = block_forward(tape, x, &full_mask, b, opts)?;
    }
    // Only the context position is read out, and the final norm and
    // projection act row-wise, so they are applied to that row alone.
    let ctx = tape.row(x, 0)?;
    let mut out = tape.layer_norm_rows(ctx, LN_EPS)?;
    if let Some((w, b)) = vars.projection {
        out = tape.matmul(out, w)?;
        out = tape.add_bias(out, b)?;
    }
    Ok(out)
}

pub fn aggregate(c_text: &TokenSeq, params: &AggregatorParams) -> Result<ContextEmbedding> {
    let mut tape = GradTape::new();
    let vars = params.register(&mut tape);
    let x = tape.leaf(c_text.data.clone());
    let out = aggregate_on_tape(&mut tape, &vars, x, &c_text.mask)?;
    ContextEmbedding::new(tape.value(out).data().to_vec())
}

const CKPT_MAGIC: &[u8; 4] = b"TEDA";
const CKPT_VERSION: u16 = 1;
const FLAG_PROJECTION: u16 = 1;
const FLAG_TANH_GELU: u16 = 2;
const FLAG_FORCE_PROJECTION: u16 = 4;
const CKPT_HEADER_LEN: usize = 32;

/// Binary checkpoint:
///
/// ```text
/// "TEDA" | version u16 = 1 | flags u16 (1 = projection, 2 = tanh GELU,
/// 4 = forced projection) | dim u32 | out_dim u32 | heads u32 | blocks u32 |
/// mlp_hidden u32 | meta_len u32 | meta (UTF-8 key=value lines) |
/// float32 LE parameters in `tensors()` order:
///   context_token[dim];
///   per block: wq bq wk bk wv bv wo bo w1 b1 w2 b2 (weights [in, out]);
///   projection weight [dim, out_dim], bias [out_dim] (when present).
/// ```
pub fn encode_checkpoint(params: &AggregatorParams) -> Vec<u8> {
    let cfg = &params.cfg;
    let mut flags = 0u16;
    if params.projection.is_some() {
        flags |= FLAG_PROJECTION;
    }
    if cfg.gelu == GeluKind::Tanh {
        flags |= FLAG_TANH_GELU;
    }
    if cfg.force_projection {
        flags |= FLAG_FORCE_PROJECTION;
    }
    let meta = params
        .meta
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("\n");
    let mut out = Vec::with_capacity(CKPT_HEADER_LEN + meta.len() + 4 * params.num_params());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    for v in [cfg.dim, cfg.out_dim, cfg.heads, cfg.blocks, cfg.mlp_ratio * cfg.dim] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    for t in params.tensors() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<AggregatorParams> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < CKPT_HEADER_LEN {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != CKPT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CKPT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let flags = u16::from_le_bytes([bytes[6], bytes[7]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    let (dim, out_dim, heads, blocks, hidden) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20), u32_at(24));
    let meta_len = u32_at(28);
    if dim == 0 || hidden % dim != 0 {
        return Err(bad(format!("mlp hidden {hidden} is not a multiple of dim {dim}")));
    }
    let cfg = AggregatorConfig {
        dim,
        out_dim,
        heads,
        blocks,
        mlp_ratio: hidden / dim,
        force_projection: flags & FLAG_FORCE_PROJECTION != 0,
        init_std: 0.0,
        gelu: if flags & FLAG_TANH_GELU != 0 {
            GeluKind::Tanh
        } else {
            GeluKind::Exact
        },
    };
    cfg.validate()?;
    if (flags & FLAG_PROJECTION != 0) != cfg.has_projection() {
        return Err(bad("projection flag inconsistent with dims".into()));
    }
    let meta_end = CKPT_HEADER_LEN + meta_len;
    if bytes.len() < meta_end {
        return Err(bad("truncated metadata".into()));
    }
    let meta_str =
        std::str::from_utf8(&bytes[CKPT_HEADER_LEN..meta_end]).map_err(|e| bad(format!("metadata not UTF-8: {e}")))?;
    let mut meta = Vec::new();
    for line in meta_str.split('\n').filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("metadata line {line:?}")))?;
        meta.push((k.to_string(), v.to_string()));
    }
    let mut params = AggregatorParams::init(0, cfg)?;
    let n = params.num_params();
    let payload = &bytes[meta_end..];
    if payload.len() != 4 * n {
        return Err(bad(format!(
            "payload has {} bytes, expected {} for {n} parameters",
            payload.len(),
            4 * n
        )));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    crate::error::ensure_finite(&flat, "checkpoint parameters")?;
    params.set_flat(&flat)?;
    params.meta = meta;
    Ok(params)
}

pub fn save_checkpoint(params: &AggregatorParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AggregatorParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg() -> AggregatorConfig {
        AggregatorConfig {
            init_std: 0.3,
            ..AggregatorConfig::new(8, 6, 2, 2)
        }
    }

    fn seq(n: usize, valid: usize, seed: u64) -> TokenSeq {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Tensor::randn(&[n, 8], 1.0, &mut rng);
        TokenSeq::new(data, (0..n).map(|i| i < valid).collect()).unwrap()
    }

    #[test]
    fn defaults_match_reported_setup() {
        let cfg = AggregatorConfig::default();
        assert_eq!(cfg.blocks, 2);
        assert_eq!(cfg.dim, 1024);
        assert_eq!(cfg.out_dim, 1024);
        let p = AggregatorParams::init(1, AggregatorConfig::new(64, 64, 8, 2)).unwrap();
        assert!(p.projection.is_none());
    }

    #[test]
    fn same_seed_same_params() {
        let a = AggregatorParams::init(5, small_cfg()).unwrap();
        let b = AggregatorParams::init(5, small_cfg()).unwrap();
        assert_eq!(a, b);
        let c = AggregatorParams::init(6, small_cfg()).unwrap();
        assert_ne!(a, c);
        assert!(matches!(init_params(0, 10, 10, 4, 2), Err(Error::Config(_))));
    }

    #[test]
    fn padding_invariance_is_bitwise() {
        let p = AggregatorParams::init(2, small_cfg()).unwrap();
        let s = seq(3, 3, 9);
        let out = aggregate(&s, &p).unwrap();

        let mut data = s.data.data().to_vec();
        data.extend(std::iter::repeat_n(7.5, 16));
        let padded = TokenSeq::new(Tensor::matrix(5, 8, data).unwrap(), vec![true, true, true, false, false]).unwrap();
        assert_eq!(aggregate(&padded, &p).unwrap(), out);
        assert_eq!(aggregate(&s, &p).unwrap(), out);
    }

    #[test]
    fn zero_blocks_reduce_to_normalized_context_token() {
        let mut p = AggregatorParams::init(2, AggregatorConfig {
            force_projection: true,
            ..small_cfg()
        })
        .unwrap();
        for b in &mut p.blocks {
            for t in b.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let ln = crate::numerics::layer_norm(p.context_token.data(), LN_EPS).unwrap();
        let proj = p.projection.as_ref().unwrap();
        let expected: Vec<f64> = (0..p.out_dim())
            .map(|j| (0..p.dim()).map(|i| ln[i] * proj.weight.data()[i * p.out_dim() + j]).sum::<f64>() + proj.bias.data()[j])
            .collect();
        for seed in 0..3 {
            let out = aggregate(&seq(4, 2 + seed as usize % 2, seed), &p).unwrap();
            for (a, b) in out.0.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn errors() {
        let p = AggregatorParams::init(2, small_cfg()).unwrap();
        assert!(matches!(aggregate(&seq(3, 0, 1), &p), Err(Error::Argument(_))));
        let wrong = TokenSeq::new(Tensor::zeros(&[2, 4]), vec![true, true]).unwrap();
        assert!(matches!(aggregate(&wrong, &p), Err(Error::Argument(_))));
    }

    #[test]
    fn similarity_examples() {
        let a = ContextEmbedding::new(vec![1.0, 0.0]).unwrap();
        let b = ContextEmbedding::new(vec![1.0, 1.0]).unwrap();
        let c = ContextEmbedding::new(vec![0.0, 1.0]).unwrap();
        assert!((similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(similarity(&a, &c).unwrap(), 0.0);
        assert!((similarity(&a, &b).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(similarity(&a, &b).unwrap(), similarity(&b, &a).unwrap());
        let z = ContextEmbedding::new(vec![0.0, 0.0]).unwrap();
        assert!(matches!(similarity(&a, &z), Err(Error::Numeric(_))));
    }

    #[test]
    fn checkpoint_round_trip_at_f32() {
        let mut p = AggregatorParams::init(3, small_cfg()).unwrap();
        p.set_meta("encoder", "toy:seed=7");
        p.set_meta("fusion", "norm_avg");
        for t in p.tensors_mut() {
            t.round_to_f32();
        }
        let bytes = encode_checkpoint(&p);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.to_flat(), p.to_flat());
        assert_eq!(back.meta, p.meta);
        assert_eq!(back.config().out_dim, 6);
        assert_eq!(encode_checkpoint(&back), bytes);

        let mut broken = bytes.clone();
        broken[0] = b'X';
        assert!(matches!(decode_checkpoint(&broken), Err(Error::Checkpoint(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 2]), Err(Error::Checkpoint(_))));
    }
}
