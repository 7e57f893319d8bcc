use std::sync::Arc;

use super::{internal_mlp, pair_differences, vector_attention, PairOperands, RelPosEncoder};
use crate::error::{Error, Result};
use crate::events::NormalizedEvents;
use crate::geometry::{build_sparse_grid, SparseGrid};
use crate::numerics::{
    Activation, Mlp, MlpSpec, ParamBuilder, ParamId, ParamStore, Real, Segments, Tape, Tensor, Var, PAD,
};

/// Events stacked into a sparse 2D frame: one row per active pixel holding
/// `(count_pos, count_neg, mean feature)`.
pub struct FrameStack {
    pub grid: SparseGrid,
    /// `S × 2` positive and negative event counts per site.
    pub counts: Tensor<f64>,
    /// `S × C` mean of the member features.
    pub mean: Var,
    /// `S × (2 + C)` concatenation of counts and mean.
    pub frame: Var,
    /// Sign of `count_pos - count_neg` per site.
    pub polarity: Vec<f64>,
}

pub fn stack_frame<T: Real>(
    tape: &mut Tape<'_, T>,
    events: &NormalizedEvents,
    f: Var,
) -> Result<FrameStack> {
    let grid = build_sparse_grid(events.pixels(), events.height() as usize, events.width() as usize)?;
    let (members, offsets) = grid.member_order();
    let seg = Arc::new(Segments::from_offsets(offsets.to_vec())?);
    let grouped = tape.gather(f, members.to_vec())?;
    let mean = tape.segment_mean(grouped, seg)?;

    let s = grid.num_sites();
    let mut counts = vec![0.0f64; 2 * s];
    for (i, row) in events.rows().iter().enumerate() {
        let site = grid.site_of_event()[i];
        counts[2 * site + usize::from(row[3] <= 0.0)] += 1.0;
    }
    let polarity = counts.chunks(2).map(|c| (c[0] - c[1]).clamp(-1.0, 1.0)).collect();
    let counts = Tensor::new(&[s, 2], counts)?;
    let cv = tape.constant(counts.cast());
    let frame = tape.concat(&[cv, mean])?;
    Ok(FrameStack { grid, counts, mean, frame, polarity })
}

/// Submanifold sparse convolution: outputs exist only at active sites, and
/// inactive taps read zero. `weight` is `(k·k·C_in) × C_out` with taps in
/// row-major order and input channels fastest.
pub fn sparse_conv<T: Real>(
    tape: &mut Tape<'_, T>,
    grid: &SparseGrid,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    kernel: usize,
) -> Result<Var> {
    let cin = tape.value(x).cols();
    let taps: Arc<[usize]> = grid.kernel_taps(kernel).into_iter().map(|t| t.unwrap_or(PAD)).collect();
    let cols = tape.gather(x, taps)?;
    let patches = tape.reshape(cols, &[grid.num_sites(), kernel * kernel * cin])?;
    tape.linear(patches, weight, bias)
}

#[derive(Clone, Debug)]
pub struct SparseConv {
    pub kernel: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl SparseConv {
    pub fn build<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        prefix: &str,
        kernel: usize,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        let fan_in = kernel * kernel * input;
        Ok(SparseConv {
            kernel,
            weight: b.weight(&format!("{prefix}.weight"), &[fan_in, output], fan_in)?,
            bias: b.uniform(&format!("{prefix}.bias"), &[output], fan_in)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, grid: &SparseGrid, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let b = tape.param(self.bias)?;
        sparse_conv(tape, grid, x, w, Some(b), self.kernel)
    }
}

/// Sparse transformer: events are stacked into a sparse frame, sites attend
/// to active sites in a `w × w` window, and the site result is broadcast back
/// to each member event.
#[derive(Clone, Debug)]
pub struct ScFormer {
    pub channels: usize,
    pub head: usize,
    pub window: usize,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub query: SparseConv,
    pub key: SparseConv,
    pub value: SparseConv,
    pub pos: RelPosEncoder,
    pub score: Mlp,
    pub inner: Mlp,
    pub phi: Mlp,
}

impl ScFormer {
    pub fn build<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        prefix: &str,
        channels: usize,
        head: usize,
        window: usize,
        kernel: usize,
    ) -> Result<Self> {
        if window % 2 == 0 || kernel % 2 == 0 {
            return Err(Error::Config(format!("window {window} and kernel {kernel} must be odd")));
        }
        let cin = channels + 2;
        Ok(ScFormer {
            channels,
            head,
            window,
            norm_gain: b.constant(&format!("{prefix}.norm.gain"), &[cin], 1.0)?,
            norm_bias: b.constant(&format!("{prefix}.norm.bias"), &[cin], 0.0)?,
            query: SparseConv::build(b, &format!("{prefix}.query"), kernel, cin, head)?,
            key: SparseConv::build(b, &format!("{prefix}.key"), kernel, cin, head)?,
            value: SparseConv::build(b, &format!("{prefix}.value"), kernel, cin, head)?,
            pos: RelPosEncoder::build(b, &format!("{prefix}.pos"), 3, head)?,
            score: internal_mlp(b, &format!("{prefix}.score"), head, head)?,
            inner: internal_mlp(b, &format!("{prefix}.inner"), head, channels)?,
            phi: Mlp::build(
                b,
                &format!("{prefix}.phi"),
                MlpSpec::new(&[2 * channels, channels, channels], Activation::Gelu)?,
            )?,
        })
    }

    pub fn kernel(&self) -> usize {
        self.query.kernel
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        events: &NormalizedEvents,
        f: Var,
    ) -> Result<Var> {
        let delta = self.delta(tape, events, f)?;
        tape.add(f, delta)
    }

    pub fn delta<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        events: &NormalizedEvents,
        f: Var,
    ) -> Result<Var> {
        Ok(self.delta_traced(tape, events, f)?.0)
    }

    /// Residual delta and the per-pair window attention weights.
    pub fn delta_traced<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        events: &NormalizedEvents,
        f: Var,
    ) -> Result<(Var, Var)> {
        let fv = tape.value(f);
        if fv.rows() != events.len() || fv.cols() != self.channels {
            return Err(Error::shape(format!(
                "ScFormer: features {:?} for {} events x {} channels",
                fv.shape(),
                events.len(),
                self.channels
            )));
        }
        let stack = stack_frame(tape, events, f)?;
        let grid = &stack.grid;
        let gain = tape.param(self.norm_gain)?;
        let bias = tape.param(self.norm_bias)?;
        let normed = tape.layer_norm(stack.frame, gain, bias)?;
        let q = self.query.forward(tape, grid, normed)?;
        let k = self.key.forward(tape, grid, normed)?;
        let v = self.value.forward(tape, grid, normed)?;

        let windows: Vec<Vec<usize>> =
            (0..grid.num_sites()).map(|s| grid.window_neighbors(s, self.window)).collect();
        let seg = Arc::new(Segments::from_lengths(windows.iter().map(Vec::len)));
        let rep: Arc<[usize]> =
            windows.iter().enumerate().flat_map(|(i, w)| std::iter::repeat(i).take(w.len())).collect();
        let nbr: Arc<[usize]> = windows.into_iter().flatten().collect();
        let attrs: Vec<[f64; 3]> = grid
            .sites()
            .iter()
            .zip(&stack.polarity)
            .map(|(&(y, x), &p)| [y as f64, x as f64, p])
            .collect();
        let diffs = pair_differences(&attrs, &attrs, rep.iter().copied().zip(nbr.iter().copied()));
        let pe = self.pos.encode(tape, diffs)?;
        let ops = PairOperands {
            query: tape.gather(q, rep)?,
            key: tape.gather(k, nbr.clone())?,
            value: tape.gather(v, nbr)?,
            pe,
        };
        let (s, weights) = vector_attention(tape, &self.score, ops, seg)?;

        let site_out = self.inner.forward(tape, s)?;
        let per_event = tape.gather(site_out, grid.site_of_event().to_vec())?;
        let cat = tape.concat(&[f, per_event])?;
        Ok((self.phi.forward(tape, cat)?, weights))
    }

    pub fn zero_output<T: Real>(&self, store: &mut ParamStore<T>) {
        self.phi.zero_last_layer(store);
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.norm_gain, self.norm_bias];
        for c in [&self.query, &self.key, &self.value] {
            ids.extend([c.weight, c.bias]);
        }
        for m in [&self.pos.mlp, &self.score, &self.inner, &self.phi] {
            ids.extend(m.param_ids());
        }
        ids
    }
}
