//! Hidden-state sources: the built-in toy encoder and pre-extracted TEDH dumps.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::hidden::{HiddenStates, META_ENCODER, META_INCLUDES_EMBEDDING, META_TEXT_HASH, META_TOKENIZER};
use crate::io::tedh::read_tedh;
use crate::numerics::{attention_block_with, BlockOptions, BlockParams, Tensor};

/// Anything that maps a text to its per-layer hidden states.
pub trait HiddenStateSource: Send + Sync {
    fn encode(&self, text: &str) -> Result<HiddenStates>;
    /// Stable identifier recorded in checkpoints and reports.
    fn id(&self) -> String;
}

/// Lowercase hex SHA-256 of the UTF-8 text; names TEDH dump files.
pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoderConfig {
    pub seed: u64,
    /// Emitted layers, embedding layer included.
    pub layers: usize,
    pub dim: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub heads: usize,
    /// Std of the block weights.
    pub block_std: f64,
    /// When false every block skips its attention sub-layer.
    pub attention: bool,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            layers: 9,
            dim: 64,
            max_tokens: 64,
            vocab_size: 4096,
            heads: 4,
            block_std: 0.07,
            attention: true,
        }
    }
}

impl ToyEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.max_tokens == 0 || self.vocab_size < 2 {
            return Err(Error::Config(format!("invalid toy encoder config {self:?}")));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "toy encoder dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Byte 3-gram rolling hash tokenizer. Id 0 is reserved for padding.
pub fn toy_tokenize(text: &str, vocab_size: usize, max_tokens: usize) -> Vec<usize> {
    let bytes = text.as_bytes();
    let buckets = (vocab_size - 1) as u64;
    let id = |h: u64| 1 + (h % buckets) as usize;
    if bytes.len() < 3 {
        let h = bytes.iter().fold(0u64, |h, &b| h.wrapping_mul(257).wrapping_add(b as u64 + 1));
        return vec![id(h)];
    }
    const BASE: u64 = 257;
    const BASE2: u64 = BASE * BASE;
    let mut h = (bytes[0] as u64 + 1) * BASE2 + (bytes[1] as u64 + 1) * BASE + bytes[2] as u64 + 1;
    let mut out = Vec::with_capacity(bytes.len() - 2);
    out.push(id(h.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 17));
    for i in 3..bytes.len() {
        h = (h - (bytes[i - 3] as u64 + 1) * BASE2) * BASE + bytes[i] as u64 + 1;
        out.push(id(h.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 17));
        if out.len() == max_tokens {
            break;
        }
    }
    out.truncate(max_tokens);
    out
}

/// Fixed random-init pre-LN transformer used as a frozen stand-in encoder.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    cfg: ToyEncoderConfig,
    embeddings: Tensor,
    positions: Tensor,
    blocks: Vec<BlockParams>,
}

impl ToyEncoder {
    pub fn new(cfg: ToyEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let embeddings = Tensor::randn(&[cfg.vocab_size, cfg.dim], 1.0, &mut rng);
        let positions = Tensor::randn(&[cfg.max_tokens, cfg.dim], 0.1, &mut rng);
        let blocks = (1..cfg.layers)
            .map(|_| BlockParams::init(cfg.dim, cfg.heads, 4 * cfg.dim, cfg.block_std, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            embeddings,
            positions,
            blocks,
        })
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.cfg
    }
}

/// Convenience wrapper: build the encoder and encode one text.
pub fn toy_encode(text: &str, cfg: &ToyEncoderConfig) -> Result<HiddenStates> {
    ToyEncoder::new(cfg.clone())?.encode(text)
}

impl HiddenStateSource for ToyEncoder {
    fn encode(&self, text: &str) -> Result<HiddenStates> {
        if text.is_empty() {
            return Err(Error::Argument("cannot encode an empty text".into()));
        }
        let cfg = &self.cfg;
        let ids = toy_tokenize(text, cfg.vocab_size, cfg.max_tokens);
        let n = cfg.max_tokens;
        let d = cfg.dim;
        let mut mask = vec![false; n];
        let mut x = vec![0.0; n * d];
        for pos in 0..n {
            let tok = ids.get(pos).copied().unwrap_or(0);
            mask[pos] = pos < ids.len();
            let e = self.embeddings.row(tok);
            let p = self.positions.row(pos);
            for c in 0..d {
                x[pos * d + c] = e[c] + p[c];
            }
        }
        let mut x = Tensor::matrix(n, d, x)?;
        let mut data: Vec<f32> = Vec::with_capacity(cfg.layers * n * d);
        data.extend(x.data().iter().map(|&v| v as f32));
        let opts = BlockOptions {
            attention: cfg.attention,
            ..BlockOptions::default()
        };
        for block in &self.blocks {
            x = attention_block_with(&x, &mask, block, opts)?;
            data.extend(x.data().iter().map(|&v| v as f32));
        }
        HiddenStates::new(cfg.layers, n, d, mask, data)?
            .with_meta(META_ENCODER, self.id())?
            .with_meta(META_TOKENIZER, format!("byte3:vocab={}", cfg.vocab_size))?
            .with_meta(META_TEXT_HASH, text_hash(text))?
            .with_meta(META_INCLUDES_EMBEDDING, "true")
    }

    fn id(&self) -> String {
        let c = &self.cfg;
        let mut s = format!(
            "toy:seed={},layers={},dim={},tokens={},vocab={},heads={},std={}",
            c.seed, c.layers, c.dim, c.max_tokens, c.vocab_size, c.heads, c.block_std
        );
        if !c.attention {
            s.push_str(",attention=false");
        }
        s
    }
}

/// Reads `<dir>/<sha256(text)>.tedh` files written by an external extractor.
#[derive(Debug, Clone)]
pub struct TedhDirSource {
    dir: PathBuf,
}

impl TedhDirSource {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(Error::Argument(format!("TEDH dump directory {} not found", dir.display())));
        }
        Ok(Self { dir })
    }

    pub fn path_for(&self, text: &str) -> PathBuf {
        self.dir.join(format!("{}.tedh", text_hash(text)))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl HiddenStateSource for TedhDirSource {
    fn encode(&self, text: &str) -> Result<HiddenStates> {
        let path = self.path_for(text);
        if !path.exists() {
            return Err(Error::Argument(format!(
                "no hidden-state dump for text {:?} (expected {})",
                truncate(text, 40),
                path.display()
            )));
        }
        read_tedh(&path)
    }

    fn id(&self) -> String {
        format!("tedh:{}", self.dir.display())
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

/// Parses `toy:seed=<n>[,key=value...]` or `tedh:<dir>`.
pub fn parse_encoder_uri(uri: &str) -> Result<Box<dyn HiddenStateSource>> {
    if let Some(rest) = uri.strip_prefix("toy:") {
        let cfg = parse_toy_config(rest)?;
        return Ok(Box::new(ToyEncoder::new(cfg)?));
    }
    if let Some(dir) = uri.strip_prefix("tedh:") {
        return Ok(Box::new(TedhDirSource::new(dir)?));
    }
    Err(Error::Config(format!("unknown encoder source {uri:?}; expected toy:... or tedh:<dir>")))
}

pub fn parse_toy_config(spec: &str) -> Result<ToyEncoderConfig> {
    let mut cfg = ToyEncoderConfig::default();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("toy encoder option {part:?} is not key=value")))?;
        let bad = |_| Error::Config(format!("bad value for toy encoder option {k}: {v:?}"));
        match k {
            "seed" => cfg.seed = v.parse().map_err(bad)?,
            "layers" => cfg.layers = v.parse().map_err(bad)?,
            "dim" => cfg.dim = v.parse().map_err(bad)?,
            "tokens" => cfg.max_tokens = v.parse().map_err(bad)?,
            "vocab" => cfg.vocab_size = v.parse().map_err(bad)?,
            "heads" => cfg.heads = v.parse().map_err(bad)?,
            "std" => cfg.block_std = v.parse().map_err(|_| Error::Config(format!("bad std {v:?}")))?,
            "attention" => cfg.attention = v.parse().map_err(|_| Error::Config(format!("bad attention flag {v:?}")))?,
            other => return Err(Error::Config(format!("unknown toy encoder option {other:?}"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyEncoderConfig {
        ToyEncoderConfig {
            layers: 3,
            dim: 8,
            max_tokens: 24,
            vocab_size: 256,
            heads: 2,
            ..ToyEncoderConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed_and_text() {
        let a = toy_encode("a red fox jumps", &small()).unwrap();
        let b = toy_encode("a red fox jumps", &small()).unwrap();
        assert_eq!(a, b);
        let c = toy_encode("a red fox jumps", &ToyEncoderConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.data(), c.data());
        assert_eq!((a.layers(), a.tokens(), a.dim()), (c.layers(), c.tokens(), c.dim()));
    }

    #[test]
    fn mask_marks_real_tokens() {
        let h = toy_encode("abcdef", &small()).unwrap();
        assert_eq!(h.valid_tokens(), 4);
        assert!(h.mask()[..4].iter().all(|&m| m));
        assert!(h.mask()[4..].iter().all(|&m| !m));
        assert_eq!(h.meta_get(META_INCLUDES_EMBEDDING), Some("true"));
    }

    #[test]
    fn long_text_is_truncated() {
        let text = "x".repeat(500);
        let h = toy_encode(&text, &small()).unwrap();
        assert_eq!(h.valid_tokens(), 24);
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(matches!(toy_encode("", &small()), Err(Error::Argument(_))));
    }

    #[test]
    fn shared_prefix_rows_differ_only_through_attention() {
        let a_text = "the quick brown fox sat";
        let b_text = "the quick brown fox ran far away";
        let prefix_tokens = toy_tokenize("the quick brown fox ", 256, 64).len();

        let with_attn = small();
        let a = toy_encode(a_text, &with_attn).unwrap();
        let b = toy_encode(b_text, &with_attn).unwrap();
        let last = a.layers() - 1;
        let rows = prefix_tokens * a.dim();
        assert_ne!(&a.layer(last)[..rows], &b.layer(last)[..rows]);

        let ablated = ToyEncoderConfig { attention: false, ..small() };
        let a = toy_encode(a_text, &ablated).unwrap();
        let b = toy_encode(b_text, &ablated).unwrap();
        for l in 0..a.layers() {
            assert_eq!(&a.layer(l)[..rows], &b.layer(l)[..rows], "layer {l}");
        }
    }

    #[test]
    fn uri_parsing() {
        let src = parse_encoder_uri("toy:seed=7").unwrap();
        assert!(src.id().starts_with("toy:seed=7,"));
        let cfg = parse_toy_config("seed=3,layers=2,dim=16,heads=4").unwrap();
        assert_eq!((cfg.seed, cfg.layers, cfg.dim), (3, 2, 16));
        assert!(parse_encoder_uri("bert:base").is_err());
        assert!(parse_toy_config("dim=10,heads=4").is_err());
    }
}
