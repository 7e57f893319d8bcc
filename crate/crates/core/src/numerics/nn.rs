use super::params::{ParamBuilder, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Identity => x,
        }
    }
}

/// Layer widths including the input width, so `[4, 32, 32]` is a two-layer
/// MLP from 4 to 32 channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        if widths.contains(&0) {
            return Err(Error::invalid(format!("MLP widths must be positive: {widths:?}")));
        }
        Ok(MlpSpec { widths: widths.to_vec(), activation })
    }

    /// Default shape used throughout the model: two affine layers with the
    /// hidden width equal to the output width.
    pub fn two_layer(input: usize, output: usize, activation: Activation) -> Result<Self> {
        Self::new(&[input, output, output], activation)
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Multiply-accumulates count as two FLOPs; the bias counts as one more
    /// input per output.
    pub fn flops_per_row(&self) -> u64 {
        self.widths.windows(2).map(|w| 2 * (w[0] as u64 + 1) * w[1] as u64).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// MLP whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, prefix: &str, spec: MlpSpec) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.widths.len() - 1);
        let last = spec.widths.len() - 2;
        for (i, w) in spec.widths.windows(2).enumerate() {
            let name = format!("{prefix}.{i}.weight");
            let weight = if i < last {
                b.weight(&name, &[w[0], w[1]], w[0])?
            } else {
                b.uniform(&name, &[w[0], w[1]], w[0])?
            };
            let bias = b.uniform(&format!("{prefix}.{i}.bias"), &[w[1]], w[0])?;
            layers.push(Linear { weight, bias });
        }
        Ok(Mlp { spec, layers })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.spec.input_width() {
            return Err(Error::shape(format!(
                "MLP expects {} input channels, got {width}",
                self.spec.input_width()
            )));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(layer.weight)?;
            let b = tape.param(layer.bias)?;
            h = tape.linear(h, w, Some(b))?;
            if i + 1 < self.layers.len() {
                h = self.spec.activation.apply(tape, h);
            }
        }
        Ok(h)
    }

    /// Sets the last layer's weight and bias to zero, making the MLP output
    /// exactly zero for any finite input.
    pub fn zero_last_layer<T: Real>(&self, store: &mut ParamStore<T>) {
        let last = self.layers.last().unwrap();
        for id in [last.weight, last.bias] {
            store.get_mut(id).data_mut().fill(T::ZERO);
        }
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}

/// Evaluates an MLP on a tensor without recording gradients.
pub fn mlp_forward<T: Real>(
    x: &Tensor<T>,
    mlp: &Mlp,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::with_params(params);
    let xv = tape.constant(x.clone());
    let y = mlp.forward(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}
