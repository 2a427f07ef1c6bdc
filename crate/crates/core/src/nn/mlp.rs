//! Dense multi-layer perceptrons.
//!
//! Each layer computes `y = act(x W + b)` with `W` stored as `(in, out)` so a
//! batch of row vectors multiplies directly. Hidden layers share one
//! activation; the output layer is always linear.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use super::{NnError, Parameters, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn apply_var(self, v: Var<'_>) -> Var<'_> {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.relu(),
            Activation::Identity => v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<Layer>,
    activation: Activation,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        Self::validate_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
                Layer {
                    weight: Tensor::from_vec(fan_in, fan_out, data).expect("sized"),
                    bias: Tensor::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        Self::validate_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weight: Tensor::zeros(w[0], w[1]),
                bias: Tensor::zeros(1, w[1]),
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(NnError::InvalidArgument("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.out_dim()) {
                return Err(NnError::ShapeMismatch {
                    op: "layer bias",
                    left: l.weight.shape(),
                    right: l.bias.shape(),
                });
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(NnError::ShapeMismatch {
                    op: "layer chain",
                    left: layers[i - 1].weight.shape(),
                    right: l.weight.shape(),
                });
            }
        }
        Ok(Self { layers, activation })
    }

    fn validate_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NnError::InvalidArgument(format!(
                "layer sizes must have >= 2 positive entries, got {sizes:?}"
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Single-sample forward pass without recording a trace.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.in_dim() {
            return Err(NnError::ShapeMismatch {
                op: "mlp_forward",
                left: (1, input.len()),
                right: (self.in_dim(), self.out_dim()),
            });
        }
        let mut x = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (n_in, n_out) = layer.weight.shape();
            let w = layer.weight.data();
            let mut y = layer.bias.data().to_vec();
            for (k, &xk) in x.iter().enumerate().take(n_in) {
                let row = &w[k * n_out..(k + 1) * n_out];
                for (acc, wkj) in y.iter_mut().zip(row) {
                    *acc += xk * wkj;
                }
            }
            if i < last {
                y.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            x = y;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("mlp output"));
        }
        Ok(x)
    }

    /// Batched forward pass (one sample per row) without recording a trace.
    pub fn forward_batch(&self, input: &Tensor) -> Result<Tensor> {
        if input.cols() != self.in_dim() {
            return Err(NnError::ShapeMismatch {
                op: "mlp_forward",
                left: input.shape(),
                right: (self.in_dim(), self.out_dim()),
            });
        }
        let last = self.layers.len() - 1;
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = x.matmul(&layer.weight)?;
            let c = y.cols();
            for chunk in y.data_mut().chunks_mut(c) {
                for (v, b) in chunk.iter_mut().zip(layer.bias.data()) {
                    *v += b;
                    if i < last {
                        *v = self.activation.apply(*v);
                    }
                }
            }
            x = y;
        }
        if !x.is_finite() {
            return Err(NnError::NonFinite("mlp output"));
        }
        Ok(x)
    }

    /// Registers every weight and bias on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        self.bind_with(tape, true)
    }

    /// Registers the weights as constants: forward passes are traced but the
    /// network itself receives no gradient.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        let leaf = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        BoundMlp {
            layers: self.layers.iter().map(|l| (leaf(&l.weight), leaf(&l.bias))).collect(),
            activation: self.activation,
        }
    }
}

impl Parameters for MlpParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

/// An [`MlpParams`] whose tensors live on a tape.
pub struct BoundMlp<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
    activation: Activation,
}

impl<'t> BoundMlp<'t> {
    /// Rebuilds a bound network from vars in [`Parameters::tensors`] order.
    pub fn from_vars(vars: &[Var<'t>], activation: Activation) -> Result<Self> {
        if vars.is_empty() || vars.len() % 2 != 0 {
            return Err(NnError::InvalidArgument(format!(
                "expected weight/bias pairs, got {} vars",
                vars.len()
            )));
        }
        Ok(Self {
            layers: vars.chunks(2).map(|p| (p[0], p[1])).collect(),
            activation,
        })
    }

    pub fn forward(&self, input: Var<'t>) -> Result<Var<'t>> {
        let last = self.layers.len() - 1;
        let mut x = input;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            x = x.matmul(*w)?.add_row(*b)?;
            if i < last {
                x = self.activation.apply_var(x);
            }
        }
        Ok(x)
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }

    /// Gradients in [`Parameters::tensors`] order.
    pub fn grads(&self, grads: &Gradients) -> Result<Vec<Tensor>> {
        self.vars().into_iter().map(|v| grads.wrt(v)).collect()
    }
}
