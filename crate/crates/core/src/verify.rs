//! Finite-difference verification of every reverse-mode rule, every block and
//! the whole network, in f64.
//!
//! Each check evaluates the scalar `sum(R * y)` for a fixed random projection
//! `R` of the output `y`. The analytic side seeds the reverse pass with `R`
//! directly, so the projection itself adds no rule to the tape and a fault
//! injected into one rule only breaks the checks that use it.

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{GxFormer, LxFormer, ScFormer};
use crate::backbone::{ModelConfig, Network, SamplingLayer};
use crate::error::{Error, Result};
use crate::events::{normalize_events, Event, EventStream, NormalizedEvents, Polarity};
use crate::numerics::{
    finite_diff_at, relative_error, Activation, Mlp, MlpSpec, OpKind, ParamBuilder, ParamId, ParamStore,
    Segments, Tape, Tensor, Var, PAD,
};
use crate::seed::{derive_seed, rng_for, streams};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const COMPOSED_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;
/// Parameter coordinates probed per tensor in the end-to-end check; the
/// embedding is always probed in full.
const E2E_COORDS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckLevel {
    Primitive,
    Block,
    EndToEnd,
}

impl fmt::Display for CheckLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckLevel::Primitive => "primitive",
            CheckLevel::Block => "block",
            CheckLevel::EndToEnd => "end-to-end",
        })
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub level: CheckLevel,
    pub instances: usize,
    /// Largest relative error over all instances.
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<10} {:<16} instances={:<3} max_rel_err={:.3e} tol={:.0e} {}",
            self.level,
            self.name,
            self.instances,
            self.max_error,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    /// Corrupts the backward rule of one op kind on the analytic side.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { instances: 10, seed: 0, fault: None }
    }
}

type Forward<'a> = Box<dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var> + 'a>;

/// One differentiable function together with the point it is checked at.
struct Problem<'a> {
    inputs: Vec<Tensor<f64>>,
    params: ParamStore<f64>,
    /// Parameter coordinates to probe.
    coords: Vec<(ParamId, Vec<usize>)>,
    forward: Forward<'a>,
}

impl<'a> Problem<'a> {
    fn new(inputs: Vec<Tensor<f64>>, forward: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var> + 'a) -> Self {
        Problem { inputs, params: ParamStore::new(), coords: Vec::new(), forward: Box::new(forward) }
    }

    fn with_params(mut self, params: ParamStore<f64>) -> Self {
        self.coords = params.iter().map(|(id, _, t)| (id, (0..t.len()).collect())).collect();
        self.params = params;
        self
    }

    fn output(&self, params: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let mut tape = Tape::with_params(params);
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let y = (self.forward)(&mut tape, &vars)?;
        Ok(tape.value(y).clone())
    }

    fn objective(&self, params: &ParamStore<f64>, inputs: &[Tensor<f64>], proj: &Tensor<f64>) -> Result<f64> {
        let y = self.output(params, inputs)?;
        Ok(y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    }

    fn analytic(&self, proj: &Tensor<f64>, fault: Option<OpKind>) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&self.params);
        if let Some(kind) = fault {
            tape.inject_fault(kind);
        }
        let vars: Vec<Var> = self.inputs.iter().map(|x| tape.input(x.clone())).collect();
        let y = (self.forward)(&mut tape, &vars)?;
        let grads = tape.backward_seeded(y, proj.clone())?;
        let mut out = Vec::new();
        for (v, x) in vars.iter().zip(&self.inputs) {
            match grads.wrt(*v) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat(0.0).take(x.len())),
            }
        }
        for (id, coords) in &self.coords {
            let g = grads.param(*id);
            out.extend(coords.iter().map(|&i| g.map_or(0.0, |g| g.data()[i])));
        }
        Ok(out)
    }

    fn numeric(&self, proj: &Tensor<f64>) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        let mut inputs = self.inputs.clone();
        for k in 0..inputs.len() {
            let x = inputs[k].clone();
            let all: Vec<usize> = (0..x.len()).collect();
            let g = finite_diff_at(
                |probe| {
                    inputs[k] = probe.clone();
                    self.objective(&self.params, &inputs, proj)
                },
                &x,
                &all,
                EPS,
            )?;
            inputs[k] = x;
            out.extend(g);
        }
        let mut params = self.params.clone();
        for (id, coords) in &self.coords {
            let orig = params.get(*id).clone();
            let g = finite_diff_at(
                |probe| {
                    *params.get_mut(*id) = probe.clone();
                    self.objective(&params, &self.inputs, proj)
                },
                &orig,
                coords,
                EPS,
            )?;
            *params.get_mut(*id) = orig;
            out.extend(g);
        }
        Ok(out)
    }

    /// Relative error between reverse-mode and central-difference gradients.
    fn error(&self, rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
        let y = self.output(&self.params, &self.inputs)?;
        let proj = uniform(rng, y.shape(), 1.0);
        let a = self.analytic(&proj, fault)?;
        let n = self.numeric(&proj)?;
        Ok(relative_error(&a, &n))
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("length matches shape")
}

/// Uniform values at least `gap` away from zero, for rules with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    uniform(rng, shape, 1.0).map(|v| if v < 0.0 { v - gap } else { v + gap })
}

fn run_check<'a>(
    name: &str,
    level: CheckLevel,
    tolerance: f64,
    opts: &GradcheckOptions,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Result<Problem<'a>>,
) -> Result<CheckReport> {
    let mut max_error: f64 = 0.0;
    for i in 0..opts.instances {
        let stream = derive_seed(streams::VERIFY, i as u64) ^ name.bytes().fold(0u64, |h, b| h.rotate_left(5) ^ b as u64);
        let mut rng = rng_for(opts.seed, stream);
        let problem = make(&mut rng)?;
        let e = problem.error(&mut rng, opts.fault)?;
        // NaN must fail the check, so it cannot go through `max`.
        max_error = if e.is_nan() || max_error.is_nan() { f64::NAN } else { max_error.max(e) };
    }
    Ok(CheckReport { name: name.to_string(), level, instances: opts.instances, max_error, tolerance })
}

fn store_with<B>(
    rng: &mut ChaCha8Rng,
    build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<B>,
) -> Result<(B, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let mut init = rng_for(rng.gen(), streams::INIT);
    let b = build(&mut ParamBuilder::new(&mut store, &mut init).with_weight_gain(6f64.sqrt()))?;
    Ok((b, store))
}

/// `n` events on a small sensor so that pixels are shared and windows overlap.
fn random_events(rng: &mut ChaCha8Rng, n: usize, side: u16) -> Result<NormalizedEvents> {
    let events = (0..n)
        .map(|i| {
            let p = if rng.gen_bool(0.5) { Polarity::Pos } else { Polarity::Neg };
            Event::new(rng.gen_range(0..side), rng.gen_range(0..side), i as u64 * 50 + rng.gen_range(0..40), p)
        })
        .collect();
    normalize_events(&EventStream::new(events, side, side)?)
}

fn unary(rng: &mut ChaCha8Rng, op: fn(&mut Tape<'_, f64>, Var) -> Var) -> Problem<'static> {
    let x = uniform(rng, &[4, 3], 1.0);
    Problem::new(vec![x], move |t, v| Ok(op(t, v[0])))
}

fn binary(rng: &mut ChaCha8Rng, op: fn(&mut Tape<'_, f64>, Var, Var) -> Result<Var>) -> Problem<'static> {
    let a = uniform(rng, &[4, 3], 1.0);
    let b = uniform(rng, &[4, 3], 1.0);
    Problem::new(vec![a, b], move |t, v| op(t, v[0], v[1]))
}

fn primitive(kind: OpKind, rng: &mut ChaCha8Rng) -> Result<Problem<'static>> {
    let segs = || Arc::new(Segments::from_lengths([2, 1, 4]));
    Ok(match kind {
        OpKind::Linear => {
            let x = uniform(rng, &[3, 4], 1.0);
            let w = uniform(rng, &[4, 5], 1.0);
            let b = uniform(rng, &[5], 1.0);
            Problem::new(vec![x, w, b], |t, v| t.linear(v[0], v[1], Some(v[2])))
        }
        OpKind::Add => binary(rng, |t, a, b| t.add(a, b)),
        OpKind::Sub => binary(rng, |t, a, b| t.sub(a, b)),
        OpKind::Mul => binary(rng, |t, a, b| t.mul(a, b)),
        OpKind::Scale => unary(rng, |t, x| t.scale(x, -1.7)),
        OpKind::Relu => {
            let x = away_from_zero(rng, &[4, 3], 0.05);
            Problem::new(vec![x], |t, v| Ok(t.relu(v[0])))
        }
        OpKind::Gelu => {
            let x = uniform(rng, &[4, 3], 3.0);
            Problem::new(vec![x], |t, v| Ok(t.gelu(v[0])))
        }
        OpKind::Gather => {
            let x = uniform(rng, &[5, 3], 1.0);
            Problem::new(vec![x], |t, v| t.gather(v[0], vec![0, 3, 3, PAD, 4, 1]))
        }
        OpKind::Concat => {
            let a = uniform(rng, &[4, 2], 1.0);
            let b = uniform(rng, &[4, 3], 1.0);
            Problem::new(vec![a, b], |t, v| t.concat(&[v[0], v[1]]))
        }
        OpKind::Reshape => {
            let x = uniform(rng, &[4, 6], 1.0);
            Problem::new(vec![x], |t, v| t.reshape(v[0], &[6, 4]))
        }
        OpKind::SegmentSoftmax => {
            let x = uniform(rng, &[7, 3], 2.0);
            Problem::new(vec![x], move |t, v| t.segment_softmax(v[0], segs()))
        }
        OpKind::SegmentSum => {
            let x = uniform(rng, &[7, 3], 1.0);
            Problem::new(vec![x], move |t, v| t.segment_sum(v[0], segs()))
        }
        OpKind::SegmentMean => {
            let x = uniform(rng, &[7, 3], 1.0);
            Problem::new(vec![x], move |t, v| t.segment_mean(v[0], segs()))
        }
        OpKind::SegmentMax => {
            // Distinct values on a coarse lattice keep every maximum unique.
            let mut vals: Vec<f64> = (0..21).map(|i| i as f64 * 0.1 - 1.0).collect();
            vals.shuffle(rng);
            let x = Tensor::new(&[7, 3], vals)?;
            Problem::new(vec![x], move |t, v| t.segment_max(v[0], &segs()))
        }
        OpKind::SoftmaxRows => {
            let x = uniform(rng, &[4, 5], 2.0);
            Problem::new(vec![x], |t, v| Ok(t.softmax_rows(v[0])))
        }
        OpKind::LayerNorm => {
            let x = uniform(rng, &[4, 5], 1.0);
            let g = uniform(rng, &[5], 1.0);
            let b = uniform(rng, &[5], 1.0);
            Problem::new(vec![x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2]))
        }
        OpKind::MeanRows => {
            let x = uniform(rng, &[5, 3], 1.0);
            Problem::new(vec![x], |t, v| t.mean_rows(v[0]))
        }
        OpKind::SumAll => unary(rng, |t, x| t.sum_all(x)),
        OpKind::CrossEntropy => {
            let x = uniform(rng, &[4, 5], 2.0);
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            Problem::new(vec![x], move |t, v| t.cross_entropy(v[0], &labels))
        }
    })
}

/// One check per backward rule, plus a three-layer MLP.
pub fn check_primitives(opts: &GradcheckOptions) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for kind in OpKind::ALL {
        reports.push(run_check(kind.name(), CheckLevel::Primitive, PRIMITIVE_TOLERANCE, opts, |rng| {
            primitive(kind, rng)
        })?);
    }
    reports.push(run_check("mlp", CheckLevel::Primitive, PRIMITIVE_TOLERANCE, opts, |rng| {
        let (mlp, store) =
            store_with(rng, |b| Mlp::build(b, "mlp", MlpSpec::new(&[5, 7, 6, 3], Activation::Gelu)?))?;
        let x = uniform(rng, &[4, 5], 1.0);
        Ok(Problem::new(vec![x], move |t, v| mlp.forward(t, v[0])).with_params(store))
    })?);
    Ok(reports)
}

/// Gradients of the three attention blocks and of the sampling layer with
/// respect to their input features and every parameter.
pub fn check_blocks(opts: &GradcheckOptions) -> Result<Vec<CheckReport>> {
    let size = |rng: &mut ChaCha8Rng| (rng.gen_range(16..=32usize), rng.gen_range(4..=8usize));
    let mut reports = Vec::new();
    reports.push(run_check("lxformer", CheckLevel::Block, COMPOSED_TOLERANCE, opts, |rng| {
        let (n, c) = size(rng);
        let ev = random_events(rng, n, 8)?;
        let (block, store) = store_with(rng, |b| LxFormer::build(b, "lx", c, c, 8))?;
        let f = uniform(rng, &[n, c], 1.0);
        Ok(Problem::new(vec![f], move |t, v| block.forward(t, &ev, v[0])).with_params(store))
    })?);
    reports.push(run_check("scformer", CheckLevel::Block, COMPOSED_TOLERANCE, opts, |rng| {
        let (n, c) = size(rng);
        let ev = random_events(rng, n, 6)?;
        let (block, store) = store_with(rng, |b| ScFormer::build(b, "sc", c, c + 2, 3, 3))?;
        let f = uniform(rng, &[n, c], 1.0);
        Ok(Problem::new(vec![f], move |t, v| block.forward(t, &ev, v[0])).with_params(store))
    })?);
    reports.push(run_check("gxformer", CheckLevel::Block, COMPOSED_TOLERANCE, opts, |rng| {
        let (n, c) = size(rng);
        let ev = random_events(rng, n, 8)?;
        let (block, store) = store_with(rng, |b| GxFormer::build(b, "gx", c, c, 4))?;
        let f = uniform(rng, &[n, c], 1.0);
        Ok(Problem::new(vec![f], move |t, v| block.forward(t, &ev, v[0])).with_params(store))
    })?);
    reports.push(run_check("sampling", CheckLevel::Block, COMPOSED_TOLERANCE, opts, |rng| {
        let (n, c) = size(rng);
        let ev = random_events(rng, n, 8)?;
        let (mlp, store) = store_with(rng, |b| {
            Mlp::build(b, "sample", MlpSpec::new(&[c + 4, 2 * c, 2 * c], Activation::Relu)?)
        })?;
        let layer = SamplingLayer { factor: 4, mlp };
        let f = uniform(rng, &[n, c], 1.0);
        Ok(Problem::new(vec![f], move |t, v| Ok(layer.forward(t, &ev, v[0])?.1)).with_params(store))
    })?);
    Ok(reports)
}

/// Toy-width configuration for the end-to-end check.
pub fn toy_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.channels = 4;
    c.attention.spconv_channels = vec![4, 8, 16];
    c.head_widths = vec![16];
    c
}

/// Logits of a toy network on 64 events with respect to the full embedding
/// and a random sample of coordinates from every other parameter tensor.
pub fn check_end_to_end(opts: &GradcheckOptions) -> Result<CheckReport> {
    let config = toy_config();
    run_check("network", CheckLevel::EndToEnd, COMPOSED_TOLERANCE, opts, |rng| {
        let ev = random_events(rng, 64, 34)?;
        let (net, store) = store_with(rng, |b| Network::build(&config, b))?;
        let coords = store
            .iter()
            .map(|(id, name, t)| {
                let idx = if name.starts_with("embed.") {
                    (0..t.len()).collect()
                } else {
                    (0..E2E_COORDS.min(t.len())).map(|_| rng.gen_range(0..t.len())).collect()
                };
                (id, idx)
            })
            .collect();
        let mut p = Problem::new(Vec::new(), move |t, _| net.logits(t, &ev));
        p.params = store;
        p.coords = coords;
        Ok(p)
    })
}

/// Every check; the first error aborts.
pub fn run_all(opts: &GradcheckOptions) -> Result<Vec<CheckReport>> {
    if opts.instances == 0 {
        return Err(Error::invalid("at least one instance per check is required"));
    }
    let mut reports = check_primitives(opts)?;
    reports.extend(check_blocks(opts)?);
    reports.push(check_end_to_end(opts)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradcheckOptions {
        GradcheckOptions { instances: 2, ..Default::default() }
    }

    #[test]
    fn primitives_pass() {
        for r in check_primitives(&quick()).unwrap() {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn fault_is_localized() {
        let opts = GradcheckOptions { fault: Some(OpKind::Gelu), ..quick() };
        let failing: Vec<String> =
            check_primitives(&opts).unwrap().into_iter().filter(|r| !r.passed()).map(|r| r.name).collect();
        assert_eq!(failing, ["gelu", "mlp"]);
    }

    #[test]
    fn nan_fails() {
        let r = CheckReport {
            name: "x".into(),
            level: CheckLevel::Block,
            instances: 1,
            max_error: f64::NAN,
            tolerance: 1e-4,
        };
        assert!(!r.passed());
    }
}
