use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
    Sigmoid,
}

/// Fully connected layer `act(x Wᵀ + b)`; `weights` is `out × in`, `biases` is `1 × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub weights: Array2<T>,
    pub biases: Array2<T>,
    pub activation: Activation,
}

impl<T: Real> Dense<T> {
    /// He-uniform initialization for ReLU layers, Xavier-uniform otherwise;
    /// zero biases.
    pub fn init<R: Rng>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = match activation {
            Activation::Relu => (6.0 / input as f64).sqrt(),
            _ => (6.0 / (input + output) as f64).sqrt(),
        };
        let weights = Array2::from_shape_fn((output, input), |_| T::of(rng.random_range(-limit..limit)));
        Self { weights, biases: Array2::zeros((1, output)), activation }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Sequence of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Real> DenseNet<T> {
    pub fn new(layers: Vec<Dense<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a network needs at least one layer".into()));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].output_dim(),
                    i + 1,
                    w[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// `hidden.len()` hidden layers of the given widths and activation,
    /// followed by an output layer.
    pub fn mlp<R: Rng>(input: usize, hidden: &[usize], hidden_act: Activation, output: usize, output_act: Activation, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for &h in hidden {
            layers.push(Dense::init(prev, h, hidden_act, rng));
            prev = h;
        }
        layers.push(Dense::init(prev, output, output_act, rng));
        Self { layers }
    }

    /// Geometric-shaping network: one-hot of size `2^m` in, 3 ReLU layers,
    /// linear output of the 4 real coordinates.
    pub fn geometric_shaping<R: Rng>(m: usize, width: usize, rng: &mut R) -> Self {
        Self::mlp(1 << m, &[width; 3], Activation::Relu, 4, Activation::Linear, rng)
    }

    /// Probabilistic-shaping network: one-hot of size `2^m` in, 2 ReLU
    /// layers, linear output of `2^m` logits.
    pub fn probabilistic_shaping<R: Rng>(m: usize, width: usize, rng: &mut R) -> Self {
        Self::mlp(1 << m, &[width; 2], Activation::Relu, 1 << m, Activation::Linear, rng)
    }

    /// Per-bit demapper: 4 received coordinates in, 3 ReLU layers, one
    /// sigmoid output estimating `p(b = 1 | y)`.
    pub fn demapper<R: Rng>(width: usize, rng: &mut R) -> Self {
        Self::mlp(4, &[width; 3], Activation::Relu, 1, Activation::Sigmoid, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Parameters in registration order `[W0, b0, W1, b1, ...]`.
    pub fn params(&self) -> Vec<&Array2<T>> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.biases]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.biases]).collect()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn register(&self, tape: &Tape<T>) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Forward pass on the tape using the registered parameter nodes. When
    /// `final_activation` is false the last layer's activation is skipped
    /// (used to feed sigmoid logits into a fused log-likelihood).
    pub fn forward_on(&self, tape: &Tape<T>, vars: &[Var], input: Var, final_activation: bool) -> Result<Var> {
        if vars.len() != 2 * self.layers.len() {
            return Err(Error::Shape(format!("{} parameter nodes for {} layers", vars.len(), self.layers.len())));
        }
        let (_, cols) = tape.shape(input);
        if cols != self.input_dim() {
            return Err(Error::Shape(format!("network expects width {}, input has {cols}", self.input_dim())));
        }
        let mut x = input;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = tape.matmul_nt(x, vars[2 * i])?;
            let z = tape.add_row(z, vars[2 * i + 1])?;
            x = if i == last && !final_activation {
                z
            } else {
                match layer.activation {
                    Activation::Relu => tape.relu(z),
                    Activation::Linear => z,
                    Activation::Sigmoid => tape.sigmoid(z),
                }
            };
        }
        Ok(x)
    }

    /// Registers the parameters and runs the full forward pass.
    pub fn forward(&self, tape: &Tape<T>, input: Var) -> Result<(Var, Vec<Var>)> {
        let vars = self.register(tape);
        let out = self.forward_on(tape, &vars, input, true)?;
        Ok((out, vars))
    }

    /// Forward pass without recording anything.
    pub fn predict(&self, input: &Array2<T>) -> Result<Array2<T>> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Shape(format!("network expects width {}, input has {}", self.input_dim(), input.ncols())));
        }
        let mut x = input.clone();
        for layer in &self.layers {
            let mut z = x.dot(&layer.weights.t()) + &layer.biases;
            match layer.activation {
                Activation::Relu => z.mapv_inplace(|v| v.max(T::zero())),
                Activation::Linear => {}
                Activation::Sigmoid => z.mapv_inplace(|v| T::one() / (T::one() + (-v).exp())),
            }
            x = z;
        }
        Ok(x)
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> DenseNet<U> {
        let conv = |a: &Array2<T>| a.mapv(|v| U::of(v.f64()));
        DenseNet {
            layers: self
                .layers
                .iter()
                .map(|l| Dense { weights: conv(&l.weights), biases: conv(&l.biases), activation: l.activation })
                .collect(),
        }
    }
}
