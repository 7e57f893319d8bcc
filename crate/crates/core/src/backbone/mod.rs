//! The four-stage backbone: a linear embedding, Event Transformer Blocks
//! separated by event sampling layers, and a classification head over the
//! mean of the final events.

mod checkpoint;
mod complexity;
mod config;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use complexity::{count_params_flops, Complexity, ModuleCost, REFERENCE_EVENTS};
pub use config::{BlockKind, Fusion, Init, ModelConfig, Structure, MIN_EVENTS, NUM_STAGES};

use crate::attention::{GxFormer, LxFormer, ScFormer};
use crate::error::{Error, Result};
use crate::events::{normalize_events, pad_events, EventStream, NormalizedEvents};
use crate::geometry::{farthest_point_sampling, group_nearest};
use crate::numerics::{
    Activation, Mlp, MlpSpec, ParamBuilder, ParamStore, Real, Segments, Tape, Tensor, Var,
};
use crate::seed::{rng_for, streams};

#[derive(Clone, Debug)]
pub enum Block {
    Local(LxFormer),
    Sparse(ScFormer),
    Global(GxFormer),
}

impl Block {
    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Local(_) => BlockKind::Local,
            Block::Sparse(_) => BlockKind::Sparse,
            Block::Global(_) => BlockKind::Global,
        }
    }

    pub fn delta<T: Real>(&self, tape: &mut Tape<'_, T>, ev: &NormalizedEvents, f: Var) -> Result<Var> {
        match self {
            Block::Local(b) => b.delta(tape, ev, f),
            Block::Sparse(b) => b.delta(tape, ev, f),
            Block::Global(b) => b.delta(tape, ev, f),
        }
    }

    pub fn zero_output<T: Real>(&self, store: &mut ParamStore<T>) {
        match self {
            Block::Local(b) => b.zero_output(store),
            Block::Sparse(b) => b.zero_output(store),
            Block::Global(b) => b.zero_output(store),
        }
    }
}

/// One step of an ETB: a single residual block, or an `L` and `S` pair
/// combined in parallel or by concatenation.
#[derive(Clone, Debug)]
pub enum EtbStep {
    Single(Block),
    Parallel(Block, Block),
    Concat(Block, Block, Mlp),
}

#[derive(Clone, Debug)]
pub struct Etb {
    pub steps: Vec<EtbStep>,
}

impl Etb {
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, ev: &NormalizedEvents, f: Var) -> Result<Var> {
        let mut x = f;
        for step in &self.steps {
            x = match step {
                EtbStep::Single(b) => {
                    let d = b.delta(tape, ev, x)?;
                    tape.add(x, d)?
                }
                EtbStep::Parallel(l, s) => {
                    let dl = l.delta(tape, ev, x)?;
                    let ds = s.delta(tape, ev, x)?;
                    let y = tape.add(x, dl)?;
                    tape.add(y, ds)?
                }
                EtbStep::Concat(l, s, mix) => {
                    let dl = l.delta(tape, ev, x)?;
                    let ds = s.delta(tape, ev, x)?;
                    let cat = tape.concat(&[dl, ds])?;
                    let d = mix.forward(tape, cat)?;
                    tape.add(x, d)?
                }
            };
        }
        Ok(x)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.steps.iter().flat_map(|s| match s {
            EtbStep::Single(b) => vec![b],
            EtbStep::Parallel(a, b) | EtbStep::Concat(a, b, _) => vec![a, b],
        })
    }
}

/// Farthest point sampling to `⌈N / factor⌉` centers followed by max-pooling
/// an MLP of `concat(e, f)` over each center's `factor` nearest events.
#[derive(Clone, Debug)]
pub struct SamplingLayer {
    pub factor: usize,
    pub mlp: Mlp,
}

impl SamplingLayer {
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        ev: &NormalizedEvents,
        f: Var,
    ) -> Result<(NormalizedEvents, Var)> {
        let n = ev.len();
        if n < self.factor {
            return Err(Error::invalid(format!("sampling layer needs at least {} events, got {n}", self.factor)));
        }
        let m = n.div_ceil(self.factor);
        let points: Vec<[f64; 3]> = ev.rows().iter().map(|r| [r[0], r[1], r[2]]).collect();
        let mut centers = farthest_point_sampling(&points, m, 0)?;
        centers.sort_unstable();
        let groups = group_nearest(&points, &centers, self.factor)?;
        let e = tape.constant(ev.to_tensor());
        let ef = tape.concat(&[e, f])?;
        let h = self.mlp.forward(tape, ef)?;
        let members = tape.gather(h, groups.flat().to_vec())?;
        let pooled = tape.segment_max(members, &Segments::uniform(m, self.factor))?;
        Ok((ev.select(&centers), pooled))
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub sampling: Option<SamplingLayer>,
    pub etb: Etb,
}

/// Parameter layout of a model; the values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub embed: Mlp,
    pub stages: Vec<Stage>,
    pub head: Mlp,
}

/// Output of the backbone: surviving events and their final features.
pub struct BackboneOutput {
    pub events: NormalizedEvents,
    pub features: Var,
    /// `concat(E, F)` with `16C + 4` columns.
    pub output: Var,
}

impl Network {
    pub fn build<T: Real>(config: &ModelConfig, b: &mut ParamBuilder<'_, T>) -> Result<Self> {
        config.validate()?;
        let relu = |w: &[usize]| MlpSpec::new(w, Activation::Relu);
        let c = config.channels;
        let embed = Mlp::build(b, "embed", MlpSpec::two_layer(4, c, Activation::Relu)?)?;
        let widths = config.stage_channels();
        let mut stages = Vec::new();
        for (s, kinds) in config.structure.0.iter().enumerate() {
            let cs = widths[s];
            let sampling = if s == 0 {
                None
            } else {
                let mlp = Mlp::build(b, &format!("stage{s}.sample"), relu(&[widths[s - 1] + 4, cs, cs])?)?;
                Some(SamplingLayer { factor: config.downsample, mlp })
            };
            let mut steps = Vec::new();
            let mut j = 0;
            while j < kinds.len() {
                let pair = kinds[j] == BlockKind::Local && kinds.get(j + 1) == Some(&BlockKind::Sparse);
                if pair && config.fusion != Fusion::Serial {
                    let l = build_block(b, config, s, j, BlockKind::Local)?;
                    let sp = build_block(b, config, s, j + 1, BlockKind::Sparse)?;
                    steps.push(match config.fusion {
                        Fusion::Parallel => EtbStep::Parallel(l, sp),
                        _ => {
                            let mix = Mlp::build(b, &format!("stage{s}.{j}mix"), relu(&[2 * cs, cs, cs])?)?;
                            EtbStep::Concat(l, sp, mix)
                        }
                    });
                    j += 2;
                } else {
                    steps.push(EtbStep::Single(build_block(b, config, s, j, kinds[j])?));
                    j += 1;
                }
            }
            stages.push(Stage { sampling, etb: Etb { steps } });
        }
        let mut head_widths = vec![config.final_channels() + 4];
        head_widths.extend(&config.head_widths);
        head_widths.push(config.num_classes);
        let head = Mlp::build(b, "head", relu(&head_widths)?)?;
        Ok(Network { config: config.clone(), embed, stages, head })
    }

    pub fn backbone<T: Real>(&self, tape: &mut Tape<'_, T>, ev: &NormalizedEvents) -> Result<BackboneOutput> {
        if ev.len() < MIN_EVENTS {
            return Err(Error::invalid(format!("backbone needs at least {MIN_EVENTS} events, got {}", ev.len())));
        }
        let e = tape.constant(ev.to_tensor());
        let mut f = self.embed.forward(tape, e)?;
        let mut events = ev.clone();
        for stage in &self.stages {
            if let Some(sl) = &stage.sampling {
                let (next, g) = sl.forward(tape, &events, f)?;
                events = next;
                f = g;
            }
            f = stage.etb.forward(tape, &events, f)?;
        }
        let e = tape.constant(events.to_tensor());
        let output = tape.concat(&[e, f])?;
        Ok(BackboneOutput { events, features: f, output })
    }

    /// `1 × num_classes` logits.
    pub fn logits<T: Real>(&self, tape: &mut Tape<'_, T>, ev: &NormalizedEvents) -> Result<Var> {
        let out = self.backbone(tape, ev)?;
        self.classify(tape, out.output)
    }

    pub fn classify<T: Real>(&self, tape: &mut Tape<'_, T>, features: Var) -> Result<Var> {
        let pooled = tape.mean_rows(features)?;
        self.head.forward(tape, pooled)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.stages.iter().flat_map(|s| s.etb.blocks())
    }
}

fn build_block<T: Real>(
    b: &mut ParamBuilder<'_, T>,
    config: &ModelConfig,
    stage: usize,
    index: usize,
    kind: BlockKind,
) -> Result<Block> {
    let prefix = format!("stage{stage}.{index}{}", kind.letter());
    let cs = config.stage_channels()[stage];
    let att = &config.attention;
    Ok(match kind {
        BlockKind::Local => Block::Local(LxFormer::build(b, &prefix, cs, cs, att.neighbors)?),
        BlockKind::Sparse => Block::Sparse(ScFormer::build(
            b,
            &prefix,
            cs,
            config.spconv_width(stage),
            att.window,
            att.spconv_kernel,
        )?),
        BlockKind::Global => Block::Global(GxFormer::build(b, &prefix, cs, cs, att.rate)?),
    })
}

/// Normalized model input: streams shorter than [`MIN_EVENTS`] are padded
/// by repeating events.
pub fn prepare_input(stream: &EventStream) -> Result<NormalizedEvents> {
    if stream.is_empty() {
        return Err(Error::EmptyStream);
    }
    normalize_events(&pad_events(stream, MIN_EVENTS))
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub network: Network,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = rng_for(seed, streams::INIT);
        let network = Network::build(
            config,
            &mut ParamBuilder::new(&mut params, &mut rng).with_weight_gain(config.init.weight_gain()),
        )?;
        Ok(Model { network, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }

    pub fn logits(&self, ev: &NormalizedEvents) -> Result<Tensor<T>> {
        let mut tape = Tape::with_params(&self.params);
        let y = self.network.logits(&mut tape, ev)?;
        Ok(tape.value(y).clone())
    }

    /// `concat(E, F)` of the final stage.
    pub fn backbone_output(&self, ev: &NormalizedEvents) -> Result<Tensor<T>> {
        let mut tape = Tape::with_params(&self.params);
        let out = self.network.backbone(&mut tape, ev)?;
        Ok(tape.value(out.output).clone())
    }

    /// Zeroes the output layer of every attention block so each ETB is the
    /// identity.
    pub fn zero_block_outputs(&mut self) {
        for b in self.network.blocks() {
            b.zero_output(&mut self.params);
        }
        for st in &self.network.stages {
            for step in &st.etb.steps {
                if let EtbStep::Concat(_, _, mix) = step {
                    mix.zero_last_layer(&mut self.params);
                }
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { network: self.network.clone(), params: self.params.cast() }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
