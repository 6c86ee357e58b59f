//! Fully connected networks recorded on a [`Tape`].

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softplus,
    Tanh,
    Silu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
    /// Raw logits to be interpreted through a softmax by the caller.
    SoftmaxLogits,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        hidden_activation: Activation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        let spec = MlpSpec {
            layer_widths,
            hidden_activation,
            output_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least input and output widths, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Config(format!("zero layer width in {:?}", self.layer_widths)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

/// An [`MlpSpec`] together with the location of its weights in a [`ParamSet`].
///
/// Layer `i` stores `"{prefix}.{i}.weight"` with shape `[in, out]` and
/// `"{prefix}.{i}.bias"` with shape `[out]`.
#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Registers freshly initialized weights (Glorot-uniform, zero biases).
    pub fn init(spec: MlpSpec, prefix: &str, params: &mut ParamSet, rng: &mut impl Rng) -> Result<Mlp> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.num_layers());
        for (i, w) in spec.layer_widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            let weights: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
            let wid = params.insert(format!("{prefix}.{i}.weight"), Tensor::matrix(fan_in, fan_out, weights)?)?;
            let bid = params.insert(format!("{prefix}.{i}.bias"), Tensor::zeros(&[fan_out]))?;
            layers.push((wid, bid));
        }
        Ok(Mlp { spec, layers })
    }

    /// Locates the weights of an already populated [`ParamSet`], checking shapes.
    pub fn attach(spec: MlpSpec, prefix: &str, params: &ParamSet) -> Result<Mlp> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.num_layers());
        for (i, w) in spec.layer_widths.windows(2).enumerate() {
            let lookup = |suffix: &str, shape: &[usize]| -> Result<ParamId> {
                let name = format!("{prefix}.{i}.{suffix}");
                let id = params.id(&name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
                if params.get(id).shape() != shape {
                    return Err(Error::CheckpointFormat(format!(
                        "{name} has shape {:?}, expected {shape:?}",
                        params.get(id).shape()
                    )));
                }
                Ok(id)
            };
            layers.push((lookup("weight", &[w[0], w[1]])?, lookup("bias", &[w[1]])?));
        }
        Ok(Mlp { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Weight and bias of layer `i`.
    pub fn layer(&self, i: usize) -> (ParamId, ParamId) {
        self.layers[i]
    }

    /// Sets the last layer's weights and biases to zero, so the network
    /// outputs zero for every input.
    pub fn zero_output_layer(&self, params: &mut ParamSet) {
        let &(w, b) = self.layers.last().expect("at least one layer");
        *params.get_mut(w) = Tensor::zeros_like(params.get(w));
        *params.get_mut(b) = Tensor::zeros_like(params.get(b));
    }

    /// Records the network on `tape` for a `[batch, in]` input.
    pub fn forward(&self, tape: &mut Tape<'_>, bound: &BoundParams, input: Var) -> Result<Var> {
        let shape = tape.shape(input).to_vec();
        let (batch, width) = match shape.as_slice() {
            &[b, w] => (b, w),
            other => {
                return Err(Error::Shape {
                    op: "mlp forward",
                    detail: format!("expected a [batch, features] input, got {other:?}"),
                })
            }
        };
        if width != self.spec.input_dim() {
            return Err(Error::LayerDimension {
                layer: 0,
                expected: self.spec.input_dim(),
                got: width,
            });
        }
        let last = self.layers.len() - 1;
        let mut h = input;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let pre = tape.matmul(h, bound.var(w))?;
            let bias = tape.broadcast_rows(bound.var(b), batch)?;
            let pre = tape.add(pre, bias)?;
            h = if i < last {
                match self.spec.hidden_activation {
                    Activation::Relu => tape.relu(pre),
                    Activation::Softplus => tape.softplus(pre),
                    Activation::Tanh => tape.tanh(pre),
                    Activation::Silu => tape.silu(pre),
                }
            } else {
                match self.spec.output_activation {
                    OutputActivation::Identity | OutputActivation::SoftmaxLogits => pre,
                    OutputActivation::Sigmoid => tape.sigmoid(pre),
                }
            };
        }
        Ok(h)
    }
}

/// Evaluates `spec` with weights `params` (laid out as in [`Mlp`]) on
/// `input`, recording every primitive on `tape`.
pub fn forward<'a>(
    spec: &MlpSpec,
    prefix: &str,
    params: &'a ParamSet,
    input: &Tensor,
    tape: &mut Tape<'a>,
) -> Result<Tensor> {
    let mlp = Mlp::attach(spec.clone(), prefix, params)?;
    let bound = tape.bind(params);
    let x = match input.rank() {
        1 => tape.constant(input.reshape(vec![1, input.len()])?),
        _ => tape.constant(input.clone()),
    };
    let out = mlp.forward(tape, &bound, x)?;
    let value = tape.value(out);
    if input.rank() == 1 {
        value.reshape(vec![value.len()])
    } else {
        Ok(value.clone())
    }
}
