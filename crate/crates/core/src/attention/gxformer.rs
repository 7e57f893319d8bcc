use std::sync::Arc;

use super::{internal_mlp, pair_differences, vector_attention, PairOperands, RelPosEncoder};
use crate::error::{Error, Result};
use crate::events::NormalizedEvents;
use crate::geometry::{farthest_point_sampling, group_nearest};
use crate::numerics::{Mlp, ParamBuilder, ParamId, ParamStore, Real, Segments, Tape, Var};

/// Global transformer: `max(1, N / r)` centers chosen by farthest point
/// sampling summarise their `r` nearest events by max-pooling, and every
/// event attends to all centers.
#[derive(Clone, Debug)]
pub struct GxFormer {
    pub channels: usize,
    pub head: usize,
    pub rate: usize,
    pub group: Mlp,
    pub query: Mlp,
    pub key: Mlp,
    pub value: Mlp,
    pub pos: RelPosEncoder,
    pub score: Mlp,
    pub out: Mlp,
}

/// Spatio-temporal coordinates `(x, y, t)` used for sampling and grouping.
pub(crate) fn xyt(events: &NormalizedEvents) -> Vec<[f64; 3]> {
    events.rows().iter().map(|r| [r[0], r[1], r[2]]).collect()
}

impl GxFormer {
    pub fn build<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        prefix: &str,
        channels: usize,
        head: usize,
        rate: usize,
    ) -> Result<Self> {
        if rate == 0 {
            return Err(Error::Config("rate must be at least 1".into()));
        }
        Ok(GxFormer {
            channels,
            head,
            rate,
            group: internal_mlp(b, &format!("{prefix}.group"), channels + 4, channels)?,
            query: internal_mlp(b, &format!("{prefix}.query"), channels, head)?,
            key: internal_mlp(b, &format!("{prefix}.key"), channels, head)?,
            value: internal_mlp(b, &format!("{prefix}.value"), channels, head)?,
            pos: RelPosEncoder::build(b, &format!("{prefix}.pos"), 4, head)?,
            score: internal_mlp(b, &format!("{prefix}.score"), head, head)?,
            out: internal_mlp(b, &format!("{prefix}.out"), head, channels)?,
        })
    }

    pub fn num_centers(&self, n: usize) -> usize {
        (n / self.rate).max(1)
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

    /// Residual delta and the `N·m × C_h` attention weights.
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
                "GxFormer: features {:?} for {n} events x {} channels",
                fv.shape(),
                self.channels
            )));
        }
        let m = self.num_centers(n);
        let points = xyt(events);
        let centers = farthest_point_sampling(&points, m, 0)?;
        let groups = group_nearest(&points, &centers, self.rate.min(n))?;

        let e = tape.constant(events.to_tensor());
        let ef = tape.concat(&[e, f])?;
        let embedded = self.group.forward(tape, ef)?;
        let members = tape.gather(embedded, groups.flat().to_vec())?;
        let pooled = tape.segment_max(members, &Segments::uniform(m, groups.k()))?;

        let q = self.query.forward(tape, pooled)?;
        let v = self.value.forward(tape, pooled)?;
        let k = self.key.forward(tape, f)?;
        let rep: Arc<[usize]> = (0..n).flat_map(|i| std::iter::repeat(i).take(m)).collect();
        let cyc: Arc<[usize]> = (0..n).flat_map(|_| 0..m).collect();
        let center_rows: Vec<[f64; 4]> = centers.iter().map(|&c| events.rows()[c]).collect();
        let diffs = pair_differences(events.rows(), &center_rows, rep.iter().copied().zip(cyc.iter().copied()));
        let pe = self.pos.encode(tape, diffs)?;
        let ops = PairOperands {
            query: tape.gather(k, rep)?,
            key: tape.gather(q, cyc.clone())?,
            value: tape.gather(v, cyc)?,
            pe,
        };
        let (s, weights) = vector_attention(tape, &self.score, ops, Arc::new(Segments::uniform(n, m)))?;
        Ok((self.out.forward(tape, s)?, weights))
    }

    pub fn zero_output<T: Real>(&self, store: &mut ParamStore<T>) {
        self.out.zero_last_layer(store);
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.group, &self.query, &self.key, &self.value, &self.pos.mlp, &self.score, &self.out]
            .iter()
            .flat_map(|m| m.param_ids())
            .collect()
    }
}
