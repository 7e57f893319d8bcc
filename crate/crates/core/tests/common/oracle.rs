//! Exhaustive reference implementations used by the oracle suites.

use std::collections::BTreeMap;

use evtf::attention::LxFormer;
use evtf::events::NormalizedEvents;
use evtf::numerics::{ParamStore, Tensor};
use evtf::seed::rng_for;
use rand::Rng;

use super::{add, affine_row, attend, mlp_row, sub};

pub fn sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Points on a coarse lattice so that distance ties are frequent.
pub fn lattice_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = rng_for(seed, 500);
    (0..n).map(|_| [rng.gen_range(0..5) as f64 / 4.0, rng.gen_range(0..5) as f64 / 4.0, rng.gen_range(0..5) as f64 / 4.0]).collect()
}

pub fn fps_oracle(points: &[[f64; 3]], m: usize, start: usize) -> Vec<usize> {
    let mut sel = vec![start];
    while sel.len() < m {
        let mut best = None;
        for i in 0..points.len() {
            if sel.contains(&i) {
                continue;
            }
            let d = sel.iter().map(|&s| sq(&points[i], &points[s])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        sel.push(best.unwrap().1);
    }
    sel
}

pub fn knn_oracle(times: &[f64], m: usize) -> Vec<Vec<usize>> {
    let n = times.len();
    (0..n)
        .map(|i| {
            if n == 1 {
                return vec![i; m];
            }
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| {
                (times[a] - times[i]).abs().total_cmp(&(times[b] - times[i]).abs()).then(a.cmp(&b))
            });
            let mut out: Vec<usize> = others.iter().copied().take(m).collect();
            while out.len() < m {
                out.push(others[0]);
            }
            out
        })
        .collect()
}

pub fn group_oracle(points: &[[f64; 3]], centers: &[usize], k: usize) -> Vec<Vec<usize>> {
    centers
        .iter()
        .map(|&c| {
            let mut others: Vec<usize> = (0..points.len()).filter(|&j| j != c).collect();
            others.sort_by(|&a, &b| sq(&points[a], &points[c]).total_cmp(&sq(&points[b], &points[c])).then(a.cmp(&b)));
            let mut out = vec![c];
            out.extend(others.into_iter().take(k - 1));
            out.resize(k, c);
            out
        })
        .collect()
}

pub fn lx_oracle(block: &LxFormer, store: &ParamStore<f64>, ev: &NormalizedEvents, f: &Tensor<f64>) -> Vec<f64> {
    let n = ev.len();
    let q: Vec<_> = (0..n).map(|i| mlp_row(store, &block.query, &f.row(i).to_vec())).collect();
    let k: Vec<_> = (0..n).map(|i| mlp_row(store, &block.key, &f.row(i).to_vec())).collect();
    let v: Vec<_> = (0..n).map(|i| mlp_row(store, &block.value, &f.row(i).to_vec())).collect();
    let mut out = Vec::new();
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let pes: Vec<_> =
            others.iter().map(|&j| mlp_row(store, &block.pos.mlp, &sub(&ev.rows()[i], &ev.rows()[j]))).collect();
        let keys: Vec<_> = others.iter().map(|&j| k[j].clone()).collect();
        let vals: Vec<_> = others.iter().map(|&j| v[j].clone()).collect();
        let s = attend(store, &block.score, &q[i], &keys, &vals, &pes);
        out.extend(add(&f.row(i).to_vec(), &mlp_row(store, &block.out, &s)));
    }
    out
}

pub fn dense_conv(
    sites: &[(u16, u16)],
    x: &[Vec<f64>],
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    kernel: usize,
) -> Vec<Vec<f64>> {
    let r = (kernel / 2) as i64;
    let cin = x[0].len();
    let lookup: BTreeMap<(i64, i64), usize> =
        sites.iter().enumerate().map(|(s, &(y, x))| ((y as i64, x as i64), s)).collect();
    sites
        .iter()
        .map(|&(y, xx)| {
            let mut patch = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    match lookup.get(&(y as i64 + dy, xx as i64 + dx)) {
                        Some(&s) => patch.extend(&x[s]),
                        None => patch.extend(std::iter::repeat(0.0).take(cin)),
                    }
                }
            }
            affine_row(w, b, &patch)
        })
        .collect()
}
