#![allow(dead_code)]

pub mod oracle;

use evtf::events::{normalize_events, Event, EventStream, NormalizedEvents, Polarity};
use evtf::numerics::{ParamBuilder, ParamStore, Tensor};
use evtf::seed::rng_for;
use rand::Rng;

/// Random stream on an `h × w` sensor with distinct timestamps.
pub fn random_events(n: usize, h: u16, w: u16, seed: u64) -> NormalizedEvents {
    let mut rng = rng_for(seed, 99);
    let events = (0..n)
        .map(|i| {
            let p = if rng.gen_bool(0.5) { Polarity::Pos } else { Polarity::Neg };
            Event::new(rng.gen_range(0..w), rng.gen_range(0..h), (i as u64) * 97 + rng.gen_range(0..50), p)
        })
        .collect();
    normalize_events(&EventStream::new(events, h, w).unwrap()).unwrap()
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rng_for(seed, 77);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Runs `build` against a fresh f64 store.
pub fn with_store<B>(
    seed: u64,
    build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> evtf::Result<B>,
) -> (B, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = rng_for(seed, 1);
    let block = build(&mut ParamBuilder::new(&mut store, &mut rng)).unwrap();
    (block, store)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Plain-loop evaluation of an MLP on one row.
pub fn mlp_row(store: &ParamStore<f64>, mlp: &evtf::numerics::Mlp, x: &[f64]) -> Vec<f64> {
    use evtf::numerics::Activation;
    let mut h = x.to_vec();
    for (i, layer) in mlp.layers.iter().enumerate() {
        h = affine_row(store.get(layer.weight), store.get(layer.bias), &h);
        if i + 1 < mlp.layers.len() {
            for v in &mut h {
                *v = match mlp.spec.activation {
                    Activation::Relu => v.max(0.0),
                    Activation::Gelu => {
                        let c = (2.0 / std::f64::consts::PI).sqrt();
                        0.5 * *v * (1.0 + (c * (*v + 0.044715 * v.powi(3))).tanh())
                    }
                    Activation::Identity => *v,
                };
            }
        }
    }
    h
}

/// `x · W + b` for a `in × out` weight.
pub fn affine_row(w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let (fin, fout) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), fin);
    (0..fout).map(|o| b.data()[o] + (0..fin).map(|i| x[i] * w.data()[i * fout + o]).sum::<f64>()).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Vector attention of one query over explicit key rows: per-channel softmax
/// of `score(q - k_j + pe_j)` weighting `v_j + pe_j`.
pub fn attend(
    store: &ParamStore<f64>,
    score: &evtf::numerics::Mlp,
    q: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    pes: &[Vec<f64>],
) -> Vec<f64> {
    let logits: Vec<Vec<f64>> =
        keys.iter().zip(pes).map(|(k, pe)| mlp_row(store, score, &add(&sub(q, k), pe))).collect();
    let c = q.len();
    let mut out = vec![0.0; c];
    for ch in 0..c {
        let mx = logits.iter().map(|l| l[ch]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l[ch] - mx).exp()).sum();
        for j in 0..keys.len() {
            out[ch] += (logits[j][ch] - mx).exp() / z * (values[j][ch] + pes[j][ch]);
        }
    }
    out
}
