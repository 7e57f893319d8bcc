use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use evtf::backbone::{count_params_flops, load_checkpoint, prepare_input, save_checkpoint, Checkpoint, Model};
use evtf::events::{encode_nmnist_bin, read_nmnist_file, synth_dataset, synth_split, LabeledSample, Polarity};
use evtf::numerics::OpKind;
use evtf::training::{self, evaluate, Metrics, TrainState};
use evtf::verify::{run_all, GradcheckOptions};
use evtf::Error;

use crate::config::RunConfig;
use crate::{data, Common, Failure, Split};

/// Published size of the reference model, for comparison only.
const REFERENCE_PARAMS: &str = "15.87M";
const REFERENCE_FLOPS: &str = "0.51G";

fn require_labels(data: &[LabeledSample], num_classes: usize) -> evtf::Result<()> {
    match data.iter().map(|s| s.label).max() {
        Some(l) if l >= num_classes => {
            Err(Error::Config(format!("label {l} does not fit a model with {num_classes} classes")))
        }
        _ => Ok(()),
    }
}

/// The metrics record without its wall-clock column, so the file is
/// reproducible.
fn metrics_record(m: &Metrics) -> String {
    let line = m.to_string();
    let (stable, _seconds) = line.rsplit_once('\t').expect("metrics have five columns");
    stable.to_string()
}

fn resolve_classes(cfg: &mut RunConfig, data: &data::Dataset) -> evtf::Result<()> {
    if !cfg.is_explicit("model.num_classes") {
        cfg.model.num_classes = data.num_classes();
    }
    cfg.validate()?;
    require_labels(&data.train, cfg.model.num_classes)?;
    require_labels(&data.test, cfg.model.num_classes)
}

pub fn train(common: &Common) -> Result<(), Failure> {
    let out = common.out.as_deref().ok_or_else(|| Failure::usage("train needs --out"))?;
    let mut cfg = common.resolve()?;
    let data = data::load(&cfg.data, cfg.train.seed)?;
    resolve_classes(&mut cfg, &data)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;

    let model = Model::new(&cfg.model, cfg.train.seed)?;
    let mut state = TrainState::new(model, &cfg.train);
    let mut log = File::create(out.join("metrics.tsv"))?;
    let mut log_err = None;
    let result = training::train(&mut state, &cfg.train, &data.train, Some(&data.test), |m| {
        println!("{m}");
        if let Err(e) = writeln!(log, "{}", metrics_record(m)) {
            log_err.get_or_insert(e);
        }
    });
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let epoch = state.epoch as u64;
    let ck = Checkpoint { model: state.model, optimizer: Some(state.optimizer), epoch, seed: cfg.train.seed };
    match result {
        Ok(_) => {
            save_checkpoint(&out.join("model.ckpt"), &ck)?;
            Ok(())
        }
        Err(e @ (Error::Divergence { .. } | Error::NonFinite(_))) => {
            let path = out.join("diverged.ckpt");
            save_checkpoint(&path, &ck)?;
            Err(Failure { code: 3, message: format!("{e}; diagnostic checkpoint written to {}", path.display()) })
        }
        Err(e) => Err(e.into()),
    }
}

pub fn eval(common: &Common, checkpoint: &Path, split: Split) -> Result<(), Failure> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = common.resolve()?;
    // Synthetic data is regenerated from the training seed unless overridden.
    let seed = common.seed.unwrap_or(ck.seed);
    let data = data::load(&cfg.data, seed)?;
    let set = match split {
        Split::Train => &data.train,
        Split::Test => &data.test,
    };
    require_labels(set, ck.model.config().num_classes)?;
    println!("top1={:?}", evaluate(&ck.model, set)?);
    Ok(())
}

pub fn gradcheck(instances: usize, seed: u64, fault: Option<&str>) -> Result<(), Failure> {
    let fault = match fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            Failure::usage(format!("unknown op `{name}`; expected one of {}", known.join(", ")))
        })?),
    };
    let reports = run_all(&GradcheckOptions { instances, seed, fault })?;
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("passed={}", reports.len());
        Ok(())
    } else {
        println!("failed={}", failed.join(","));
        Err(Failure { code: 1, message: format!("gradient check failed for {}", failed.join(", ")) })
    }
}

fn human(n: u64) -> String {
    match n {
        n if n >= 1_000_000_000 => format!("{:.2}G", n as f64 / 1e9),
        n if n >= 1_000_000 => format!("{:.2}M", n as f64 / 1e6),
        n if n >= 1_000 => format!("{:.2}K", n as f64 / 1e3),
        n => n.to_string(),
    }
}

pub fn bench(common: &Common, ablate_window: Option<usize>, events: usize, runs: usize) -> Result<(), Failure> {
    if runs == 0 {
        return Err(Failure::usage("--runs must be positive"));
    }
    let mut cfg = common.resolve()?;
    if let Some(w) = ablate_window {
        cfg.set("attention.window", &w.to_string())?;
        cfg.validate()?;
    }
    let c = count_params_flops(&cfg.model, events)?;
    println!("params={} flops={}", c.params, c.flops);
    for m in &c.modules {
        println!("module={} params={} flops={}", m.name, m.params, m.flops);
    }
    println!(
        "reference params={REFERENCE_PARAMS} flops={REFERENCE_FLOPS} (published; informational) this params={} flops={}",
        human(c.params),
        human(c.flops)
    );

    let model = Model::<f32>::new(&cfg.model, cfg.train.seed)?;
    let stream = &synth_dataset(1, 1, events, cfg.train.seed)[0].stream;
    let ev = prepare_input(stream)?;
    model.logits(&ev)?;
    let mut times: Vec<f64> = (0..runs)
        .map(|_| {
            let start = Instant::now();
            model.logits(&ev).map(|_| start.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<evtf::Result<_>>()?;
    times.sort_by(f64::total_cmp);
    let median = if runs % 2 == 1 { times[runs / 2] } else { (times[runs / 2 - 1] + times[runs / 2]) / 2.0 };
    println!("latency_ms median={median:.3} runs={runs} events={}", ev.len());
    Ok(())
}

pub fn inspect(file: &Path, dump: Option<usize>) -> Result<(), Failure> {
    let stream = read_nmnist_file(file)?;
    let ev = stream.events();
    let positive = ev.iter().filter(|e| e.p == Polarity::Pos).count();
    let (xs, ys) = (ev.iter().map(|e| e.x), ev.iter().map(|e| e.y));
    println!("count={}", ev.len());
    println!("duration_us={}", stream.duration());
    println!("positive={positive} negative={}", ev.len() - positive);
    println!(
        "x_min={} x_max={} y_min={} y_max={}",
        xs.clone().min().unwrap_or(0),
        xs.max().unwrap_or(0),
        ys.clone().min().unwrap_or(0),
        ys.max().unwrap_or(0)
    );
    for e in ev.iter().take(dump.unwrap_or(0)) {
        let p = if e.p == Polarity::Pos { "+1" } else { "-1" };
        println!("{}\t{}\t{}\t{p}", e.x, e.y, e.t);
    }
    Ok(())
}

pub fn make_synth(common: &Common) -> Result<(), Failure> {
    let out = common.out.as_deref().ok_or_else(|| Failure::usage("make-synth needs --out"))?;
    let cfg = common.resolve()?;
    let d = &cfg.data;
    let per = |c: Option<usize>| c.ok_or_else(|| Failure::usage("make-synth needs explicit per-class counts"));
    let (train, test) = synth_split(d.classes, per(d.train_per_class)?, per(d.test_per_class)?, d.events, cfg.train.seed);
    for (name, set) in [("Train", &train), ("Test", &test)] {
        let mut index: BTreeMap<usize, usize> = BTreeMap::new();
        for s in set {
            let dir = out.join(name).join(s.label.to_string());
            fs::create_dir_all(&dir)?;
            let i = index.entry(s.label).or_default();
            fs::write(dir.join(format!("{i:05}.bin")), encode_nmnist_bin(&s.stream)?)?;
            *i += 1;
        }
    }
    println!("train={} test={} out={}", train.len(), test.len(), out.display());
    Ok(())
}
