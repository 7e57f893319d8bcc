//! SGD training with a step learning-rate schedule, per-epoch event
//! resampling and full-stream evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::backbone::{argmax, prepare_input, Model};
use crate::error::{Error, Result};
use crate::events::{sample_events, LabeledSample};
use crate::numerics::{sgd_step, OptimizerState, Real, Tape, Tensor};
use crate::seed::{derive_seed, rng_for, streams};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `(first epoch, learning rate)` pairs, sorted by epoch, starting at 0.
    pub milestones: Vec<(usize, f64)>,
    pub momentum: f64,
    /// Events drawn from each training stream per epoch.
    pub train_events: usize,
    pub seed: u64,
    /// Evaluate on the test set every this many epochs (0 disables).
    pub eval_every: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<u64>,
    /// Rescale the batch gradient to at most this global L2 norm (0 disables).
    pub clip_norm: f64,
    /// Stop once an evaluation reaches this top-1 accuracy, if set.
    pub target_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            milestones: vec![(0, 0.01), (150, 0.001), (180, 0.0001)],
            momentum: 0.9,
            train_events: 1024,
            seed: 0,
            eval_every: 1,
            max_steps: None,
            clip_norm: 0.0,
            target_acc: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 10] = [
        "train.batch_size",
        "train.clip_norm",
        "train.epochs",
        "train.eval_every",
        "train.max_steps",
        "train.milestones",
        "train.momentum",
        "train.seed",
        "train.target_acc",
        "train.train_events",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.train_events == 0 {
            return Err(Error::Config("batch_size and train_events must be positive".into()));
        }
        if self.milestones.first().map(|m| m.0) != Some(0) {
            return Err(Error::Config("the first milestone must be at epoch 0".into()));
        }
        if self.milestones.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("milestones must be strictly increasing".into()));
        }
        if self.milestones.iter().any(|m| !(m.1 >= 0.0 && m.1.is_finite())) {
            return Err(Error::Config("learning rates must be finite and nonnegative".into()));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config("clip_norm must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.milestones.iter().take_while(|m| m.0 <= epoch).last().map_or(0.0, |m| m.1)
    }

    /// Parses `0:0.01,150:0.001`.
    pub fn parse_milestones(value: &str) -> Result<Vec<(usize, f64)>> {
        value
            .split(',')
            .map(|part| {
                let (e, lr) = part
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("milestone `{part}` is not epoch:lr")))?;
                Ok((parse("train.milestones", e)?, parse("train.milestones", lr)?))
            })
            .collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.clip_norm" => self.clip_norm = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.eval_every" => self.eval_every = parse(key, value)?,
            "train.max_steps" => {
                self.max_steps = match value.trim() {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "train.milestones" => self.milestones = Self::parse_milestones(value)?,
            "train.momentum" => self.momentum = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "train.target_acc" => {
                self.target_acc = match value.trim() {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "train.train_events" => self.train_events = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown train key `{other}`"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let milestones: Vec<String> = self.milestones.iter().map(|(e, lr)| format!("{e}:{lr}")).collect();
        let values = [
            self.batch_size.to_string(),
            self.clip_norm.to_string(),
            self.epochs.to_string(),
            self.eval_every.to_string(),
            self.max_steps.map_or("none".into(), |s| s.to_string()),
            milestones.join(","),
            self.momentum.to_string(),
            self.seed.to_string(),
            self.target_acc.map_or("none".into(), |a| a.to_string()),
            self.train_events.to_string(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }
}

/// One record per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    /// `None` when no evaluation ran this epoch.
    pub test_acc: Option<f64>,
    pub seconds: f64,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let test = self.test_acc.map_or("nan".to_string(), |a| format!("{a:.6}"));
        write!(f, "{}\t{:.6}\t{:.6}\t{}\t{:.3}", self.epoch, self.loss, self.train_acc, test, self.seconds)
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model<f32>,
    pub optimizer: OptimizerState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub steps: u64,
    /// Loss of every optimizer step so far.
    pub step_losses: Vec<f64>,
}

impl TrainState {
    pub fn new(model: Model<f32>, cfg: &TrainConfig) -> Self {
        let optimizer = OptimizerState::new(&model.params, cfg.lr_at(0), cfg.momentum);
        TrainState { model, optimizer, epoch: 0, steps: 0, step_losses: Vec::new() }
    }
}

/// Seed of the event subset drawn from dataset item `index` in `epoch`.
pub fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    derive_seed(seed, derive_seed(streams::EVENT_SAMPLE, (epoch as u64) << 32 | index as u64))
}

/// Loss and gradients of one sample, and whether it was classified right.
fn sample_gradients(
    model: &Model<f32>,
    sample: &LabeledSample,
    events: usize,
    seed: u64,
) -> Result<(f64, bool, Vec<Option<Tensor<f32>>>)> {
    let stream = sample_events(&sample.stream, events, seed);
    let ev = prepare_input(&stream)?;
    let mut tape = Tape::with_params(&model.params);
    let logits = model.network.logits(&mut tape, &ev)?;
    let correct = argmax(tape.value(logits).data()) == sample.label;
    let loss = tape.cross_entropy(logits, &[sample.label])?;
    let lv = tape.value(loss).data()[0].to_f64();
    if !lv.is_finite() {
        return Ok((lv, correct, Vec::new()));
    }
    Ok((lv, correct, tape.backward(loss)?.into_param_grads()))
}

fn global_norm(grads: &[Option<Tensor<f32>>]) -> f64 {
    grads.iter().flatten().flat_map(|g| g.data()).map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

fn accumulate(total: &mut [Option<Tensor<f32>>], grads: Vec<Option<Tensor<f32>>>) {
    for (t, g) in total.iter_mut().zip(grads) {
        match (t.as_mut(), g) {
            (Some(t), Some(g)) => t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            (None, Some(g)) => *t = Some(g),
            _ => {}
        }
    }
}

/// Runs one epoch over `data`. Returns mean loss and running accuracy.
pub fn train_epoch(state: &mut TrainState, cfg: &TrainConfig, data: &[LabeledSample]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let classes = state.model.config().num_classes;
    if let Some(s) = data.iter().find(|s| s.label >= classes) {
        return Err(Error::invalid(format!("label {} exceeds the model's {classes} classes", s.label)));
    }
    let epoch = state.epoch;
    state.optimizer.lr = cfg.lr_at(epoch);
    state.optimizer.momentum = cfg.momentum;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng_for(cfg.seed, derive_seed(streams::SHUFFLE, epoch as u64)));

    let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
    for batch in order.chunks(cfg.batch_size) {
        if cfg.max_steps.is_some_and(|m| state.steps >= m) {
            break;
        }
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; state.model.params.len()];
        let mut batch_loss = 0.0;
        for &i in batch {
            let seed = sample_seed(cfg.seed, epoch, i);
            let (loss, ok, g) = sample_gradients(&state.model, &data[i], cfg.train_events, seed)?;
            if !loss.is_finite() || g.iter().flatten().any(|t| !t.all_finite()) {
                return Err(Error::Divergence { epoch, step: state.steps, loss });
            }
            batch_loss += loss;
            correct += usize::from(ok);
            accumulate(&mut grads, g);
        }
        let mut scale = 1.0 / batch.len() as f64;
        if cfg.clip_norm > 0.0 {
            let norm = scale * global_norm(&grads);
            if norm > cfg.clip_norm {
                scale *= cfg.clip_norm / norm;
            }
        }
        let scale = scale as f32;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        sgd_step(&mut state.model.params, &grads, &mut state.optimizer)?;
        if !state.model.params.iter().all(|(_, _, t)| t.all_finite()) {
            return Err(Error::Divergence { epoch, step: state.steps, loss: f64::NAN });
        }
        state.steps += 1;
        state.step_losses.push(batch_loss / batch.len() as f64);
        loss_sum += batch_loss;
        seen += batch.len();
    }
    state.epoch += 1;
    let n = seen.max(1) as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Trains until `cfg.epochs` (or `cfg.max_steps`) is reached, reporting each
/// epoch to `sink`.
pub fn train(
    state: &mut TrainState,
    cfg: &TrainConfig,
    train_set: &[LabeledSample],
    test_set: Option<&[LabeledSample]>,
    mut sink: impl FnMut(&Metrics),
) -> Result<Vec<Metrics>> {
    cfg.validate()?;
    let mut out = Vec::new();
    while state.epoch < cfg.epochs && !cfg.max_steps.is_some_and(|m| state.steps >= m) {
        let start = Instant::now();
        let (loss, train_acc) = train_epoch(state, cfg, train_set)?;
        let epoch = state.epoch;
        let due = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let test_acc = match test_set {
            Some(t) if due => Some(evaluate(&state.model, t)?),
            _ => None,
        };
        let m = Metrics { epoch, loss, train_acc, test_acc, seconds: start.elapsed().as_secs_f64() };
        sink(&m);
        out.push(m);
        if cfg.target_acc.is_some_and(|t| test_acc.is_some_and(|a| a >= t)) {
            break;
        }
    }
    Ok(out)
}

/// Predicted class of one full stream.
pub fn predict(model: &Model<f32>, sample: &LabeledSample) -> Result<usize> {
    let ev = prepare_input(&sample.stream)?;
    Ok(argmax(model.logits(&ev)?.data()))
}

/// Top-1 accuracy over full streams.
pub fn evaluate(model: &Model<f32>, data: &[LabeledSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut correct = 0;
    for s in data {
        correct += usize::from(predict(model, s)? == s.label);
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_steps() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.01);
        assert_eq!(c.lr_at(149), 0.01);
        assert_eq!(c.lr_at(150), 0.001);
        assert_eq!(c.lr_at(160), 0.001);
        assert_eq!(c.lr_at(185), 0.0001);
        assert_eq!(c.lr_at(10_000), 0.0001);
    }

    #[test]
    fn config_keys_round_trip() {
        let mut c = TrainConfig::default();
        c.max_steps = Some(300);
        c.milestones = vec![(0, 0.05), (10, 0.005)];
        let mut d = TrainConfig::default();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
        assert!(d.set("train.warmup", "3").is_err());
    }

    #[test]
    fn validation_rejects_bad_schedules() {
        let mut c = TrainConfig::default();
        c.milestones = vec![(5, 0.1)];
        assert!(c.validate().is_err());
        c.milestones = vec![(0, 0.1), (0, 0.01)];
        assert!(c.validate().is_err());
        c.milestones = vec![(0, f64::NAN)];
        assert!(c.validate().is_err());
    }

    #[test]
    fn metrics_line_format() {
        let m = Metrics { epoch: 3, loss: 0.5, train_acc: 0.75, test_acc: None, seconds: 1.25 };
        assert_eq!(m.to_string(), "3\t0.500000\t0.750000\tnan\t1.250");
    }
}
