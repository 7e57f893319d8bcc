mod common;

use std::collections::BTreeMap;

use common::oracle::{dense_conv, lx_oracle};
use common::*;
use evtf::attention::{sparse_conv, stack_frame, GxFormer, LxFormer, ScFormer};
use evtf::events::{normalize_events, Event, EventStream, NormalizedEvents, Polarity};
use evtf::geometry::build_sparse_grid;
use evtf::numerics::{ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;

fn run<B>(
    store: &ParamStore<f64>,
    f: &Tensor<f64>,
    block: impl FnOnce(&mut Tape<'_, f64>, Var) -> evtf::Result<B>,
) -> B {
    let mut tape = Tape::with_params(store);
    let fv = tape.constant(f.clone());
    block(&mut tape, fv).unwrap()
}

fn forward_values<'p>(
    store: &'p ParamStore<f64>,
    f: &Tensor<f64>,
    block: impl FnOnce(&mut Tape<'p, f64>, Var) -> evtf::Result<Var>,
) -> Vec<f64> {
    let mut tape = Tape::with_params(store);
    let fv = tape.constant(f.clone());
    let y = block(&mut tape, fv).unwrap();
    tape.value(y).data().to_vec()
}

fn row(t: &Tensor<f64>, i: usize) -> Vec<f64> {
    t.row(i).to_vec()
}

#[test]
fn lxformer_matches_dense_attention_over_all_other_events() {
    for inst in 0..100u64 {
        let m = 1 + (inst as usize % 16);
        let c = 3 + (inst as usize % 3);
        let ev = random_events(m + 1, 12, 12, inst);
        let f = random_tensor(&[m + 1, c], inst);
        let (block, store) = with_store(inst, |b| LxFormer::build(b, "lx", c, c + 1, m));
        let got = forward_values(&store, &f, |t, x| block.forward(t, &ev, x));
        let want = lx_oracle(&block, &store, &ev, &f);
        assert!(max_abs_diff(&got, &want) <= 1e-10, "instance {inst}: {}", max_abs_diff(&got, &want));
    }
}

fn gx_oracle(block: &GxFormer, store: &ParamStore<f64>, ev: &NormalizedEvents, f: &Tensor<f64>, centers: &[(usize, Vec<usize>)]) -> Vec<f64> {
    let n = ev.len();
    let embed: Vec<_> = (0..n)
        .map(|i| {
            let mut x = ev.rows()[i].to_vec();
            x.extend(row(f, i));
            mlp_row(store, &block.group, &x)
        })
        .collect();
    let pooled: Vec<Vec<f64>> = centers
        .iter()
        .map(|(_, g)| (0..block.channels).map(|c| g.iter().map(|&i| embed[i][c]).fold(f64::NEG_INFINITY, f64::max)).collect())
        .collect();
    let qh: Vec<_> = pooled.iter().map(|p| mlp_row(store, &block.query, p)).collect();
    let vh: Vec<_> = pooled.iter().map(|p| mlp_row(store, &block.value, p)).collect();
    let mut out = Vec::new();
    for i in 0..n {
        let k = mlp_row(store, &block.key, &row(f, i));
        let pes: Vec<_> = centers
            .iter()
            .map(|(c, _)| mlp_row(store, &block.pos.mlp, &sub(&ev.rows()[i], &ev.rows()[*c])))
            .collect();
        let s = attend(store, &block.score, &k, &qh, &vh, &pes);
        out.extend(add(&row(f, i), &mlp_row(store, &block.out, &s)));
    }
    out
}

#[test]
fn gxformer_with_unit_rate_attends_to_every_event() {
    for inst in 0..100u64 {
        let n = 2 + (inst as usize % 30);
        let c = 3;
        let ev = random_events(n, 10, 10, 1000 + inst);
        let f = random_tensor(&[n, c], inst);
        let (block, store) = with_store(inst, |b| GxFormer::build(b, "gx", c, 4, 1));
        let got = forward_values(&store, &f, |t, x| block.forward(t, &ev, x));
        let centers: Vec<_> = (0..n).map(|i| (i, vec![i])).collect();
        let want = gx_oracle(&block, &store, &ev, &f, &centers);
        assert!(max_abs_diff(&got, &want) <= 1e-10, "instance {inst}");
    }
}

#[test]
fn gxformer_with_rate_n_pools_everything_into_one_center() {
    for inst in 0..20u64 {
        let n = 4 + inst as usize;
        let ev = random_events(n, 10, 10, 2000 + inst);
        let f = random_tensor(&[n, 3], inst);
        let (block, store) = with_store(inst, |b| GxFormer::build(b, "gx", 3, 3, n));
        let got = forward_values(&store, &f, |t, x| block.forward(t, &ev, x));
        let want = gx_oracle(&block, &store, &ev, &f, &[(0, (0..n).collect())]);
        assert!(max_abs_diff(&got, &want) <= 1e-10);
    }
}

/// Active sites in row-major order with member events.
fn sites_of(ev: &NormalizedEvents) -> BTreeMap<(u16, u16), Vec<usize>> {
    let mut sites: BTreeMap<(u16, u16), Vec<usize>> = BTreeMap::new();
    for (i, &p) in ev.pixels().iter().enumerate() {
        sites.entry(p).or_default().push(i);
    }
    sites
}

fn sc_oracle(block: &ScFormer, store: &ParamStore<f64>, ev: &NormalizedEvents, f: &Tensor<f64>) -> Vec<f64> {
    let map = sites_of(ev);
    let sites: Vec<(u16, u16)> = map.keys().copied().collect();
    let mut frame = Vec::new();
    let mut pol = Vec::new();
    for members in map.values() {
        let pos = members.iter().filter(|&&i| ev.rows()[i][3] > 0.0).count() as f64;
        let neg = members.len() as f64 - pos;
        pol.push((pos - neg).signum() * if pos == neg { 0.0 } else { 1.0 });
        let mut r = vec![pos, neg];
        for c in 0..block.channels {
            r.push(members.iter().map(|&i| f.row(i)[c]).sum::<f64>() / members.len() as f64);
        }
        let mu = r.iter().sum::<f64>() / r.len() as f64;
        let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / r.len() as f64;
        let g = store.get(block.norm_gain).data();
        let bb = store.get(block.norm_bias).data();
        frame.push(r.iter().enumerate().map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + bb[j]).collect::<Vec<_>>());
    }
    let conv = |c: &evtf::attention::SparseConv| {
        dense_conv(&sites, &frame, store.get(c.weight), store.get(c.bias), c.kernel)
    };
    let (q, k, v) = (conv(&block.query), conv(&block.key), conv(&block.value));
    let r = (block.window / 2) as i64;
    let mut site_out = Vec::new();
    for i in 0..sites.len() {
        let win: Vec<usize> = (0..sites.len())
            .filter(|&j| {
                (sites[i].0 as i64 - sites[j].0 as i64).abs() <= r && (sites[i].1 as i64 - sites[j].1 as i64).abs() <= r
            })
            .collect();
        let attr = |s: usize| [sites[s].0 as f64, sites[s].1 as f64, pol[s]];
        let pes: Vec<_> = win.iter().map(|&j| mlp_row(store, &block.pos.mlp, &sub(&attr(i), &attr(j)))).collect();
        let keys: Vec<_> = win.iter().map(|&j| k[j].clone()).collect();
        let vals: Vec<_> = win.iter().map(|&j| v[j].clone()).collect();
        let s = attend(store, &block.score, &q[i], &keys, &vals, &pes);
        site_out.push(mlp_row(store, &block.inner, &s));
    }
    let mut out = Vec::new();
    for i in 0..ev.len() {
        let s = sites.iter().position(|&p| p == ev.pixels()[i]).unwrap();
        let mut cat = row(f, i);
        cat.extend(&site_out[s]);
        out.extend(add(&row(f, i), &mlp_row(store, &block.phi, &cat)));
    }
    out
}

#[test]
fn scformer_matches_dense_frame_oracle() {
    for inst in 0..100u64 {
        let n = 8 + (inst as usize % 57);
        let c = 2 + (inst as usize % 3);
        let kernel = if inst % 2 == 0 { 3 } else { 1 };
        let window = if inst % 3 == 0 { 5 } else { 3 };
        let ev = random_events(n, 6, 7, 3000 + inst);
        let f = random_tensor(&[n, c], inst);
        let (block, store) = with_store(inst, |b| ScFormer::build(b, "sc", c, 4, window, kernel));
        let got = forward_values(&store, &f, |t, x| block.forward(t, &ev, x));
        let want = sc_oracle(&block, &store, &ev, &f);
        assert!(max_abs_diff(&got, &want) <= 1e-10, "instance {inst}: {}", max_abs_diff(&got, &want));
    }
}

#[test]
fn sparse_conv_matches_dense_convolution() {
    for inst in 0..50u64 {
        let n = 5 + inst as usize;
        let ev = random_events(n, 5, 6, 4000 + inst);
        let grid = build_sparse_grid(ev.pixels(), 5, 6).unwrap();
        let s = grid.num_sites();
        let x = random_tensor(&[s, 3], inst);
        let kernel = [1, 3, 5][inst as usize % 3];
        let w = random_tensor(&[kernel * kernel * 3, 2], inst + 1);
        let b = random_tensor(&[2], inst + 2);
        let got = run(&ParamStore::new(), &x, |t, xv| {
            let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
            let y = sparse_conv(t, &grid, xv, wv, Some(bv), kernel)?;
            Ok(t.value(y).data().to_vec())
        });
        let rows: Vec<_> = (0..s).map(|i| row(&x, i)).collect();
        let want: Vec<f64> = dense_conv(grid.sites(), &rows, &w, &b, kernel).concat();
        assert!(max_abs_diff(&got, &want) <= 1e-12);
    }
}

#[test]
fn frame_stack_counts_and_means() {
    let ev = random_events(40, 4, 4, 7);
    let f = random_tensor(&[40, 2], 7);
    let (counts, mean) = run(&ParamStore::new(), &f, |t, x| {
        let st = stack_frame(t, &ev, x)?;
        Ok((st.counts.clone(), t.value(st.mean).clone()))
    });
    for (s, members) in sites_of(&ev).values().enumerate() {
        let pos = members.iter().filter(|&&i| ev.rows()[i][3] > 0.0).count() as f64;
        assert_eq!(counts.row(s), &[pos, members.len() as f64 - pos]);
        for c in 0..2 {
            let m = members.iter().map(|&i| f.row(i)[c]).sum::<f64>() / members.len() as f64;
            assert!((mean.row(s)[c] - m).abs() < 1e-14);
        }
    }
    assert_eq!(counts.data().iter().sum::<f64>(), 40.0);
}

#[test]
fn attention_weights_sum_to_one_per_channel() {
    let ev = random_events(64, 12, 12, 5);
    let f = random_tensor(&[64, 4], 5);
    let (lx, store) = with_store(5, |b| LxFormer::build(b, "lx", 4, 6, 16));
    let w = run(&store, &f, |t, x| {
        let w = lx.delta_traced(t, &ev, x)?.1;
        Ok(t.value(w).clone())
    });
    for q in 0..64 {
        for c in 0..6 {
            let s: f64 = (0..16).map(|j| w.row(q * 16 + j)[c]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    let (gx, store) = with_store(6, |b| GxFormer::build(b, "gx", 4, 5, 8));
    let w = run(&store, &f, |t, x| {
        let w = gx.delta_traced(t, &ev, x)?.1;
        Ok(t.value(w).clone())
    });
    assert_eq!(w.rows(), 64 * 8);
    for q in 0..64 {
        for c in 0..5 {
            let s: f64 = (0..8).map(|j| w.row(q * 8 + j)[c]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn zeroed_output_layers_make_blocks_the_identity() {
    let ev = random_events(50, 9, 9, 3);
    let f = random_tensor(&[50, 4], 3);
    let (lx, mut s1) = with_store(1, |b| LxFormer::build(b, "lx", 4, 4, 16));
    lx.zero_output(&mut s1);
    assert_eq!(forward_values(&s1, &f, |t, x| lx.forward(t, &ev, x)), f.data());
    let (sc, mut s2) = with_store(2, |b| ScFormer::build(b, "sc", 4, 8, 3, 3));
    sc.zero_output(&mut s2);
    assert_eq!(forward_values(&s2, &f, |t, x| sc.forward(t, &ev, x)), f.data());
    let (gx, mut s3) = with_store(3, |b| GxFormer::build(b, "gx", 4, 4, 8));
    gx.zero_output(&mut s3);
    assert_eq!(forward_values(&s3, &f, |t, x| gx.forward(t, &ev, x)), f.data());
}

fn line_events(xs: &[u16]) -> NormalizedEvents {
    let events = xs.iter().enumerate().map(|(i, &x)| Event::new(x, 5, i as u64 * 10, Polarity::Pos)).collect();
    normalize_events(&EventStream::new(events, 12, 12).unwrap()).unwrap()
}

#[test]
fn sparse_kernel_widens_the_receptive_field_by_its_radius() {
    // Sites on one row at columns 5, 6, 7; perturb the event at column 7.
    let ev = line_events(&[5, 6, 7]);
    let f = random_tensor(&[3, 3], 1);
    let mut g = f.clone();
    g.row_mut(2)[0] += 0.5;
    for (kernel, changes) in [(1, false), (3, true)] {
        let (sc, store) = with_store(4, |b| ScFormer::build(b, "sc", 3, 4, 3, kernel));
        let a = forward_values(&store, &f, |t, x| sc.forward(t, &ev, x));
        let b = forward_values(&store, &g, |t, x| sc.forward(t, &ev, x));
        assert_eq!(a[..3] != b[..3], changes, "kernel {kernel}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn scformer_output_is_local(seed in 0u64..10_000, kernel in prop::sample::select(vec![1usize, 3]), window in prop::sample::select(vec![1usize, 3, 5])) {
        let ev = random_events(48, 10, 10, seed);
        let f = random_tensor(&[48, 3], seed);
        let (sc, store) = with_store(seed, |b| ScFormer::build(b, "sc", 3, 4, window, kernel));
        let target = ev.pixels()[seed as usize % 48];
        let mut g = f.clone();
        for i in 0..48 {
            if ev.pixels()[i] == target {
                for v in g.row_mut(i) {
                    *v += 1.0;
                }
            }
        }
        let a = forward_values(&store, &f, |t, x| sc.forward(t, &ev, x));
        let b = forward_values(&store, &g, |t, x| sc.forward(t, &ev, x));
        let radius = (window / 2 + kernel / 2) as i64;
        for i in 0..48 {
            let (y, x) = ev.pixels()[i];
            let d = (y as i64 - target.0 as i64).abs().max((x as i64 - target.1 as i64).abs());
            if d > radius {
                prop_assert_eq!(&a[i * 3..i * 3 + 3], &b[i * 3..i * 3 + 3]);
            }
        }
    }

    #[test]
    fn lxformer_ignores_events_outside_the_temporal_neighbourhood(seed in 0u64..10_000) {
        let ev = random_events(40, 8, 8, seed);
        let f = random_tensor(&[40, 3], seed);
        let (lx, store) = with_store(seed, |b| LxFormer::build(b, "lx", 3, 3, 4));
        let mut g = f.clone();
        g.row_mut(39)[1] -= 2.0;
        let a = forward_values(&store, &f, |t, x| lx.forward(t, &ev, x));
        let b = forward_values(&store, &g, |t, x| lx.forward(t, &ev, x));
        // Timestamps are strictly increasing, so event 39 is among the
        // 4 nearest only for events 35..=38.
        for i in 0..35 {
            prop_assert_eq!(&a[i * 3..i * 3 + 3], &b[i * 3..i * 3 + 3]);
        }
    }
}
