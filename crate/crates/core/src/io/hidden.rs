use crate::error::{Error, Result};

/// Metadata key recording whether layer 0 is the embedding layer.
pub const META_INCLUDES_EMBEDDING: &str = "includes_embedding_layer";
pub const META_ENCODER: &str = "encoder";
pub const META_TOKENIZER: &str = "tokenizer";
pub const META_TEXT_HASH: &str = "text_hash";

/// Per-layer token representations of one text, `[layers][tokens][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    layers: usize,
    tokens: usize,
    dim: usize,
    mask: Vec<bool>,
    data: Vec<f32>,
    flags: u16,
    meta: Vec<(String, String)>,
}

impl HiddenStates {
    pub fn new(
        layers: usize,
        tokens: usize,
        dim: usize,
        mask: Vec<bool>,
        data: Vec<f32>,
    ) -> Result<Self> {
        if layers == 0 || tokens == 0 || dim == 0 {
            return Err(Error::Argument(format!(
                "hidden states need positive dims, got L={layers} N={tokens} D={dim}"
            )));
        }
        if mask.len() != tokens {
            return Err(Error::Argument(format!(
                "mask length {} for {tokens} tokens",
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Argument("hidden states with no valid token".into()));
        }
        if data.len() != layers * tokens * dim {
            return Err(Error::Argument(format!(
                "payload of {} values for L={layers} N={tokens} D={dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite hidden state at index {i}")));
        }
        Ok(Self {
            layers,
            tokens,
            dim,
            mask,
            data,
            flags: 0,
            meta: Vec::new(),
        })
    }

    pub fn with_flags(mut self, flags: u16) -> Self {
        self.flags = flags;
        self
    }

    /// Appends a metadata entry. Keys may not contain `=` or newlines;
    /// values may not contain newlines.
    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Result<Self> {
        let (key, value) = (key.into(), value.into());
        if key.is_empty() || key.contains(['=', '\n']) || value.contains('\n') {
            return Err(Error::Argument(format!("invalid metadata entry {key:?}={value:?}")));
        }
        self.meta.push((key, value));
        Ok(self)
    }

    pub(crate) fn set_meta_unchecked(&mut self, meta: Vec<(String, String)>) {
        self.meta = meta;
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn flags(&self) -> u16 {
        self.flags
    }

    pub fn meta(&self) -> &[(String, String)] {
        &self.meta
    }

    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Resolves a possibly negative layer index (`-1` = last).
    pub fn resolve_layer(&self, index: isize) -> Result<usize> {
        let l = self.layers as isize;
        if index < -l || index >= l {
            return Err(Error::Argument(format!(
                "layer index {index} out of range for {} layers",
                self.layers
            )));
        }
        Ok(if index < 0 { (l + index) as usize } else { index as usize })
    }

    /// Layer `i` as `[tokens * dim]` values.
    pub fn layer(&self, i: usize) -> &[f32] {
        let stride = self.tokens * self.dim;
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn layer_f64(&self, i: usize) -> Vec<f64> {
        self.layer(i).iter().map(|&v| v as f64).collect()
    }
}
