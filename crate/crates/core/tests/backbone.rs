mod common;

use common::*;
use evtf::backbone::{
    load_checkpoint, prepare_input, save_checkpoint, Block, Checkpoint, Etb, EtbStep, Fusion, Model, ModelConfig,
    Network,
};
use evtf::events::synth_dataset;
use evtf::numerics::{OptimizerState, ParamStore, Tape, Tensor};

fn small(fusion: Fusion) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.channels = 4;
    c.attention.spconv_channels = vec![4, 8, 16];
    c.head_widths = vec![16];
    c.num_classes = 5;
    c.fusion = fusion;
    c
}

fn rows_after_sampling(n: usize) -> usize {
    n.div_ceil(4).div_ceil(4).div_ceil(4)
}

#[test]
fn output_shape_contract() {
    let model = Model::<f32>::new(&ModelConfig::default(), 0).unwrap();
    for n in [64, 128, 1024] {
        let ev = random_events(n, 34, 34, n as u64);
        let out = model.backbone_output(&ev).unwrap();
        assert_eq!(out.shape(), &[rows_after_sampling(n), 16 * 32 + 4], "N = {n}");
        assert_eq!(model.logits(&ev).unwrap().shape(), &[1, 10]);
    }
    assert!(model.backbone_output(&random_events(63, 34, 34, 0)).is_err());
}

#[test]
fn stage_sizes_at_reference_input() {
    let model = Model::<f32>::new(&ModelConfig::default(), 0).unwrap();
    let ev = random_events(1024, 34, 34, 3);
    let mut tape = Tape::with_params(&model.params);
    let e = tape.constant(ev.to_tensor());
    let mut f = model.network.embed.forward(&mut tape, e).unwrap();
    assert_eq!(tape.value(f).shape(), &[1024, 32]);
    let mut events = ev.clone();
    let expected = [(256, 128), (64, 256), (16, 512)];
    for (stage, want) in model.network.stages[1..].iter().zip(expected) {
        let (next, g) = stage.sampling.as_ref().unwrap().forward(&mut tape, &events, f).unwrap();
        assert_eq!(tape.value(g).shape(), &[want.0, want.1]);
        assert!(next.source().iter().all(|s| events.source().contains(s)));
        events = next;
        f = g;
    }
}

#[test]
fn short_streams_are_padded() {
    let d = synth_dataset(1, 1, 40, 2);
    let ev = prepare_input(&d[0].stream).unwrap();
    assert_eq!(ev.len(), 64);
    let model = Model::<f32>::new(&small(Fusion::Serial), 0).unwrap();
    assert_eq!(model.backbone_output(&ev).unwrap().shape(), &[1, 16 * 4 + 4]);
}

#[test]
fn logits_ignore_a_global_time_shift() {
    let model = Model::<f32>::new(&small(Fusion::Serial), 4).unwrap();
    for s in synth_dataset(2, 2, 256, 9) {
        let a = model.logits(&prepare_input(&s.stream).unwrap()).unwrap();
        let b = model.logits(&prepare_input(&s.stream.shifted(123_456_789)).unwrap()).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn same_seed_same_logits() {
    let ev = random_events(128, 34, 34, 1);
    let a = Model::<f32>::new(&small(Fusion::Concat), 7).unwrap().logits(&ev).unwrap();
    let b = Model::<f32>::new(&small(Fusion::Concat), 7).unwrap().logits(&ev).unwrap();
    let c = Model::<f32>::new(&small(Fusion::Concat), 8).unwrap().logits(&ev).unwrap();
    assert_eq!(a.data(), b.data());
    assert_ne!(a.data(), c.data());
}

#[test]
fn checkpoint_round_trip_reproduces_logits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = Model::<f32>::new(&small(Fusion::Parallel), 5).unwrap();
    let opt = OptimizerState::new(&model.params, 0.01, 0.9);
    let ev = random_events(200, 34, 34, 5);
    let before = model.logits(&ev).unwrap();
    save_checkpoint(&path, &Checkpoint { model, optimizer: Some(opt), epoch: 2, seed: 5 }).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.model.logits(&ev).unwrap().data(), before.data());
    assert_eq!(back.epoch, 2);
}

/// Embedding, sampling layers and head with every attention block skipped.
fn blocks_removed(net: &Network, params: &ParamStore<f32>, ev: &evtf::events::NormalizedEvents) -> Tensor<f32> {
    let mut tape = Tape::with_params(params);
    let e = tape.constant(ev.to_tensor());
    let mut f = net.embed.forward(&mut tape, e).unwrap();
    let mut events = ev.clone();
    for stage in &net.stages {
        if let Some(sl) = &stage.sampling {
            let (next, g) = sl.forward(&mut tape, &events, f).unwrap();
            events = next;
            f = g;
        }
    }
    let e = tape.constant(events.to_tensor());
    let out = tape.concat(&[e, f]).unwrap();
    let y = net.classify(&mut tape, out).unwrap();
    tape.value(y).clone()
}

#[test]
fn zero_deltas_equal_the_blocks_removed_path() {
    for fusion in [Fusion::Serial, Fusion::Parallel, Fusion::Concat] {
        let mut model = Model::<f32>::new(&small(fusion), 11).unwrap();
        let ev = random_events(256, 34, 34, 11);
        let before = model.logits(&ev).unwrap();
        model.zero_block_outputs();
        let zeroed = model.logits(&ev).unwrap();
        assert_ne!(before.data(), zeroed.data());
        assert_eq!(zeroed.data(), blocks_removed(&model.network, &model.params, &ev).data(), "{fusion}");
    }
}

fn stage0_blocks(seed: u64) -> (Block, Block, ParamStore<f64>) {
    let model = Model::<f64>::new(&small(Fusion::Serial), seed).unwrap();
    let mut blocks = model.network.stages[0].etb.blocks().cloned();
    let l = blocks.next().unwrap();
    let s = blocks.next().unwrap();
    (l, s, model.params)
}

#[test]
fn block_order_matters() {
    let (l, s, params) = stage0_blocks(3);
    let ev = random_events(64, 12, 12, 3);
    let f = random_tensor(&[64, 4], 3);
    let run = |etb: Etb| {
        let mut tape = Tape::with_params(&params);
        let x = tape.constant(f.clone());
        let y = etb.forward(&mut tape, &ev, x).unwrap();
        tape.value(y).clone()
    };
    let ls = run(Etb { steps: vec![EtbStep::Single(l.clone()), EtbStep::Single(s.clone())] });
    let sl = run(Etb { steps: vec![EtbStep::Single(s), EtbStep::Single(l)] });
    assert_eq!(ls.shape(), sl.shape());
    assert!(max_abs_diff(ls.data(), sl.data()) > 1e-6);
}

#[test]
fn fusion_modes_follow_their_definitions() {
    let (l, s, params) = stage0_blocks(6);
    let ev = random_events(64, 12, 12, 6);
    let f = random_tensor(&[64, 4], 6);
    let mut tape = Tape::with_params(&params);
    let x = tape.constant(f.clone());
    let parallel = Etb { steps: vec![EtbStep::Parallel(l.clone(), s.clone())] }.forward(&mut tape, &ev, x).unwrap();
    let serial = Etb { steps: vec![EtbStep::Single(l.clone()), EtbStep::Single(s.clone())] }
        .forward(&mut tape, &ev, x)
        .unwrap();
    let dl = l.delta(&mut tape, &ev, x).unwrap();
    let ds = s.delta(&mut tape, &ev, x).unwrap();
    let want: Vec<f64> = f
        .data()
        .iter()
        .zip(tape.value(dl).data())
        .zip(tape.value(ds).data())
        .map(|((a, b), c)| a + b + c)
        .collect();
    assert!(max_abs_diff(tape.value(parallel).data(), &want) < 1e-12);
    let x1 = tape.add(x, dl).unwrap();
    let ds1 = s.delta(&mut tape, &ev, x1).unwrap();
    let want_serial: Vec<f64> =
        tape.value(x1).data().iter().zip(tape.value(ds1).data()).map(|(a, b)| a + b).collect();
    assert!(max_abs_diff(tape.value(serial).data(), &want_serial) < 1e-12);
    assert!(max_abs_diff(tape.value(serial).data(), tape.value(parallel).data()) > 1e-6);
}

#[test]
fn concat_fusion_builds_a_mixing_mlp() {
    let model = Model::<f32>::new(&small(Fusion::Concat), 0).unwrap();
    let mix = model.params.id("stage0.0mix.0.weight").expect("mixing layer");
    assert_eq!(model.params.get(mix).shape(), &[8, 4]);
    assert!(Model::<f32>::new(&small(Fusion::Serial), 0).unwrap().params.id("stage0.0mix.0.weight").is_none());
}

#[test]
fn head_averages_rows() {
    let model = Model::<f64>::new(&small(Fusion::Serial), 2).unwrap();
    let row = random_tensor(&[1, 68], 2);
    let twice = Tensor::from_rows(&[row.row(0).to_vec(), row.row(0).to_vec()]).unwrap();
    let run = |t: &Tensor<f64>| {
        let mut tape = Tape::with_params(&model.params);
        let x = tape.constant(t.clone());
        let y = model.network.classify(&mut tape, x).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(&row).data(), run(&twice).data());
}

#[test]
fn zero_head_gives_uniform_prediction() {
    let mut model = Model::<f64>::new(&small(Fusion::Serial), 2).unwrap();
    model.network.head.zero_last_layer(&mut model.params);
    let ev = random_events(64, 34, 34, 2);
    let mut tape = Tape::with_params(&model.params);
    let y = model.network.logits(&mut tape, &ev).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let loss = tape.cross_entropy(y, &[3]).unwrap();
    assert!((tape.value(loss).data()[0] - 5f64.ln()).abs() < 1e-12);
}
