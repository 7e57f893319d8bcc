use std::sync::Arc;

use super::{internal_mlp, pair_differences, vector_attention, PairOperands, RelPosEncoder};
use crate::error::{Error, Result};
use crate::events::NormalizedEvents;
use crate::geometry::knn_temporal;
use crate::numerics::{Mlp, ParamBuilder, ParamId, ParamStore, Real, Segments, Tape, Var};

/// Local transformer: each event attends to its `M` temporally closest
/// events, with relative position encodings of the full 4-attribute
/// difference.
#[derive(Clone, Debug)]
pub struct LxFormer {
    pub channels: usize,
    pub head: usize,
    pub neighbors: usize,
    pub query: Mlp,
    pub key: Mlp,
    pub value: Mlp,
    pub pos: RelPosEncoder,
    pub score: Mlp,
    pub out: Mlp,
}

impl LxFormer {
    pub fn build<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        prefix: &str,
        channels: usize,
        head: usize,
        neighbors: usize,
    ) -> Result<Self> {
        Ok(LxFormer {
            channels,
            head,
            neighbors,
            query: internal_mlp(b, &format!("{prefix}.query"), channels, head)?,
            key: internal_mlp(b, &format!("{prefix}.key"), channels, head)?,
            value: internal_mlp(b, &format!("{prefix}.value"), channels, head)?,
            pos: RelPosEncoder::build(b, &format!("{prefix}.pos"), 4, head)?,
            score: internal_mlp(b, &format!("{prefix}.score"), head, head)?,
            out: internal_mlp(b, &format!("{prefix}.out"), head, channels)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        events: &NormalizedEvents,
        f: Var,
    ) -> Result<Var> {
        let (delta, _) = self.delta_traced(tape, events, f)?;
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

    /// Residual delta and the `N·M × C_h` attention weights.
    pub fn delta_traced<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        events: &NormalizedEvents,
        f: Var,
    ) -> Result<(Var, Var)> {
        let n = events.len();
        let fv = tape.value(f);
        if fv.rows() != n || fv.cols() != self.channels {
            return Err(Error::shape(format!(
                "LxFormer: features {:?} for {n} events x {} channels",
                fv.shape(),
                self.channels
            )));
        }
        let m = self.neighbors;
        let times: Vec<f64> = events.rows().iter().map(|r| r[2]).collect();
        let knn = knn_temporal(&times, m)?;
        let rep: Arc<[usize]> = (0..n).flat_map(|i| std::iter::repeat(i).take(m)).collect();
        let nbr: Arc<[usize]> = knn.flat().into();

        let q = self.query.forward(tape, f)?;
        let k = self.key.forward(tape, f)?;
        let v = self.value.forward(tape, f)?;
        let diffs = pair_differences(events.rows(), events.rows(), rep.iter().copied().zip(nbr.iter().copied()));
        let pe = self.pos.encode(tape, diffs)?;
        let ops = PairOperands {
            query: tape.gather(q, rep)?,
            key: tape.gather(k, nbr.clone())?,
            value: tape.gather(v, nbr)?,
            pe,
        };
        let (s, weights) = vector_attention(tape, &self.score, ops, Arc::new(Segments::uniform(n, m)))?;
        let delta = self.out.forward(tape, s)?;
        Ok((delta, weights))
    }

    /// Zeroes the output projection so the block is the identity.
    pub fn zero_output<T: Real>(&self, store: &mut ParamStore<T>) {
        self.out.zero_last_layer(store);
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.pos.mlp, &self.score, &self.out]
            .iter()
            .flat_map(|m| m.param_ids())
            .collect()
    }
}
