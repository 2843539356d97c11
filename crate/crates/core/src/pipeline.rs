//! Text to sentence-embedding path shared by training and evaluation.
//!
//! Texts are encoded once, trailing padding is dropped (the aggregator is
//! bitwise invariant to masked padding, so this only saves work), and the
//! result is either fused up front or kept as a normalized layer stack when
//! the fusion weights are still being trained.

use std::sync::Arc;

use rayon::prelude::*;

use crate::aggregator::{aggregate, aggregate_on_tape, AggregatorParams, AggregatorVars, ContextEmbedding};
use crate::encoder::HiddenStateSource;
use crate::error::{Error, Result};
use crate::fusion::{fuse, normalized_stack, FusionStrategy, TokenSeq};
use crate::io::HiddenStates;
use crate::numerics::{GradTape, Precision, Tensor, Var};

/// Drops masked positions after the last valid token.
pub fn trim_padding(h: &HiddenStates) -> HiddenStates {
    let keep = h.mask().iter().rposition(|&m| m).map_or(0, |i| i + 1);
    if keep == h.tokens() {
        return h.clone();
    }
    let (n, d) = (h.tokens(), h.dim());
    let mut data = Vec::with_capacity(h.layers() * keep * d);
    for l in 0..h.layers() {
        data.extend_from_slice(&h.data()[l * n * d..l * n * d + keep * d]);
    }
    let mut out = HiddenStates::new(h.layers(), keep, d, h.mask()[..keep].to_vec(), data)
        .expect("trimmed hidden states stay valid")
        .with_flags(h.flags());
    out.set_meta_unchecked(h.meta().to_vec());
    out
}

/// One text ready for the aggregator.
#[derive(Debug, Clone)]
pub enum Prepared {
    Fused(TokenSeq),
    /// Normalized `[L, N, D]` stack, mixed on the tape by trainable weights.
    Stack { stack: Arc<Tensor>, mask: Vec<bool> },
}

impl Prepared {
    pub fn mask(&self) -> &[bool] {
        match self {
            Prepared::Fused(s) => &s.mask,
            Prepared::Stack { mask, .. } => mask,
        }
    }
}

/// Prepares one encoded text. With `trainable_fusion` a learnable strategy
/// keeps the layer stack; every other case fuses immediately.
pub fn prepare(h: &HiddenStates, strategy: &FusionStrategy, trainable_fusion: bool, precision: Precision) -> Result<Prepared> {
    let h = trim_padding(h);
    let round = precision == Precision::Run;
    match strategy {
        FusionStrategy::Learnable(_) if trainable_fusion => {
            let mut stack = normalized_stack(&h);
            if round {
                stack.round_to_f32();
            }
            Ok(Prepared::Stack {
                stack: Arc::new(stack),
                mask: h.mask().to_vec(),
            })
        }
        s => {
            let mut seq = fuse(&h, s)?;
            if round {
                seq.data.round_to_f32();
            }
            Ok(Prepared::Fused(seq))
        }
    }
}

/// Encodes and prepares `texts` in parallel; `ids[i]` labels failures.
pub fn prepare_texts(
    texts: &[&str],
    ids: &[String],
    encoder: &dyn HiddenStateSource,
    strategy: &FusionStrategy,
    trainable_fusion: bool,
    precision: Precision,
) -> Result<Vec<Prepared>> {
    debug_assert_eq!(texts.len(), ids.len());
    texts
        .par_iter()
        .zip(ids.par_iter())
        .map(|(text, id)| {
            encoder
                .encode(text)
                .and_then(|h| prepare(&h, strategy, trainable_fusion, precision))
                .map_err(|e| Error::item(id.clone(), e))
        })
        .collect()
}

/// Records fusion (when needed) and aggregation of one text on `tape`.
/// `alpha` must be the softmaxed fusion weights for a `Stack` input.
pub fn record(tape: &mut GradTape, prepared: &Prepared, vars: &AggregatorVars, alpha: Option<Var>) -> Result<Var> {
    let x = match prepared {
        Prepared::Fused(seq) => tape.leaf(seq.data.clone()),
        Prepared::Stack { stack, .. } => {
            let alpha = alpha.ok_or_else(|| Error::State("layer stack recorded without fusion weights".into()))?;
            tape.mix(stack.clone(), alpha)?
        }
    };
    aggregate_on_tape(tape, vars, x, prepared.mask())
}

/// Forward-only embedding of a fused text.
pub fn embed(prepared: &Prepared, params: &AggregatorParams) -> Result<ContextEmbedding> {
    match prepared {
        Prepared::Fused(seq) => aggregate(seq, params),
        Prepared::Stack { .. } => Err(Error::State("embedding an unfused layer stack".into())),
    }
}
