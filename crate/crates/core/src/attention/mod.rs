//! The three attention blocks of an Event Transformer Block.
//!
//! All of them use vector attention: the score for a (query, key) pair is a
//! vector with one entry per head channel, softmax runs over the keys of a
//! query independently per channel, and the result weights `value + pe`
//! elementwise. Position encodings are MLPs of attribute differences.
//!
//! Each block computes a residual delta; `forward` adds it to the input
//! features.

mod gxformer;
mod lxformer;
mod scformer;

use std::sync::Arc;

pub use gxformer::GxFormer;
pub use lxformer::LxFormer;
pub use scformer::{sparse_conv, stack_frame, FrameStack, ScFormer, SparseConv};

use crate::error::{Error, Result};
use crate::numerics::{Activation, Mlp, MlpSpec, ParamBuilder, Real, Segments, Tape, Tensor, Var};

/// Hyperparameters shared by the attention blocks of every stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    /// Temporal neighbours per event in the local block.
    pub neighbors: usize,
    /// Side of the square attention window of the sparse block (odd).
    pub window: usize,
    /// Down-sampling rate of the global block; also its group size.
    pub rate: usize,
    /// Output channels of the sparse convolutions, one entry per stage that
    /// has a sparse block.
    pub spconv_channels: Vec<usize>,
    /// Side of the sparse convolution kernel (odd).
    pub spconv_kernel: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            neighbors: 16,
            window: 3,
            rate: 32,
            spconv_channels: vec![64, 128, 256],
            spconv_kernel: 3,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neighbors == 0 || self.rate == 0 {
            return Err(Error::Config("neighbors and rate must be at least 1".into()));
        }
        if self.window % 2 == 0 || self.spconv_kernel % 2 == 0 {
            return Err(Error::Config("window and spconv_kernel must be odd".into()));
        }
        if self.spconv_channels.contains(&0) {
            return Err(Error::Config("spconv_channels must be positive".into()));
        }
        Ok(())
    }
}

/// MLP from a coordinate difference to a head-channel vector.
#[derive(Clone, Debug)]
pub struct RelPosEncoder {
    pub mlp: Mlp,
}

impl RelPosEncoder {
    pub fn build<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        prefix: &str,
        input: usize,
        head: usize,
    ) -> Result<Self> {
        Ok(RelPosEncoder { mlp: Mlp::build(b, prefix, MlpSpec::two_layer(input, head, Activation::Relu)?)? })
    }

    /// Encodes a `pairs × input` tensor of differences.
    pub fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, diffs: Tensor<T>) -> Result<Var> {
        let d = tape.constant(diffs);
        self.mlp.forward(tape, d)
    }
}

pub(crate) fn internal_mlp<T: Real>(
    b: &mut ParamBuilder<'_, T>,
    prefix: &str,
    input: usize,
    output: usize,
) -> Result<Mlp> {
    Mlp::build(b, prefix, MlpSpec::two_layer(input, output, Activation::Relu)?)
}

/// Gathered per-pair operands of a vector attention.
pub(crate) struct PairOperands {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub pe: Var,
}

/// `s_q = sum_j softmax_j(score(query - key + pe)) * (value + pe)` over the
/// pairs in each segment. Returns the per-query result and the weights.
pub(crate) fn vector_attention<T: Real>(
    tape: &mut Tape<'_, T>,
    score: &Mlp,
    ops: PairOperands,
    seg: Arc<Segments>,
) -> Result<(Var, Var)> {
    let diff = tape.sub(ops.query, ops.key)?;
    let rel = tape.add(diff, ops.pe)?;
    let logits = score.forward(tape, rel)?;
    let weights = tape.segment_softmax(logits, seg.clone())?;
    let values = tape.add(ops.value, ops.pe)?;
    let weighted = tape.mul(weights, values)?;
    let out = tape.segment_sum(weighted, seg)?;
    Ok((out, weights))
}

/// Row differences `a[i] - b[j]` for each pair, as a `pairs × D` tensor.
pub(crate) fn pair_differences<T: Real, const D: usize>(
    a: &[[f64; D]],
    b: &[[f64; D]],
    pairs: impl Iterator<Item = (usize, usize)>,
) -> Tensor<T> {
    let mut data = Vec::new();
    for (i, j) in pairs {
        data.extend((0..D).map(|c| T::from_f64(a[i][c] - b[j][c])));
    }
    let n = data.len() / D;
    Tensor::new(&[n, D], data).unwrap()
}
