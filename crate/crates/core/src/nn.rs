//! Small dense networks shared by both training stages: a linear layer,
//! an MLP with a hidden activation, and the registration glue that puts
//! their parameters on a tape each step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ndgrad::{NdResult, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn gain(self) -> f64 {
        match self {
            // He init for relu, Xavier-ish for tanh.
            Activation::Relu => 2.0,
            Activation::Tanh => 1.0,
        }
    }
}

/// `y = x @ w + b` with `w: [fan_in, fan_out]`, `b: [fan_out]`.
#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        let std = (gain / fan_in as f64).sqrt();
        Self {
            w: Tensor::randn(&[fan_in, fan_out], std, rng),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Tensor::zeros(&[fan_in, fan_out]),
            b: Tensor::zeros(&[fan_out]),
        }
    }
}

/// Plain feed-forward stack. The activation sits between layers; the
/// last layer stays linear so heads can attach whatever they need
/// (softmax, mean/log-std split, ...).
#[derive(Clone, Debug)]
pub struct Mlp<F> {
    pub layers: Vec<Linear<F>>,
    pub activation: Activation,
}

/// Tape handles for one registered MLP, in layer order.
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl<F: Scalar> Mlp<F> {
    /// `dims` runs input to output, e.g. `[784, 512, 256, 64]`.
    pub fn init<R: Rng>(dims: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                // Hidden layers get the activation's gain, the linear
                // output layer gain 1.
                let gain = if i + 2 == dims.len() {
                    1.0
                } else {
                    activation.gain()
                };
                Linear::init(w[0], w[1], gain, rng)
            })
            .collect();
        Self { layers, activation }
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Self {
        let layers = dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        Self { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map(|l| l.w.shape()[0]).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.w.shape()[1]).unwrap_or(0)
    }

    /// Registers all parameters as trainable leaves.
    pub fn register(&self, tape: &mut Tape<F>) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.param(l.w.clone()), tape.param(l.b.clone())))
                .collect(),
        }
    }

    /// Registers all parameters as constants (frozen model).
    pub fn register_frozen(&self, tape: &mut Tape<F>) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.input(l.w.clone()), tape.input(l.b.clone())))
                .collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape<F>, vars: &MlpVars, x: Var) -> NdResult<Var> {
        let mut h = x;
        let last = vars.layers.len() - 1;
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            let lin = tape.matmul(h, w)?;
            h = tape.add(lin, b)?;
            if i != last {
                h = match self.activation {
                    Activation::Relu => tape.relu(h)?,
                    Activation::Tanh => tape.tanh(h)?,
                };
            }
        }
        Ok(h)
    }

    /// Inference pass without a tape.
    pub fn forward_value(&self, x: &Tensor<F>) -> NdResult<Tensor<F>> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut lin = h.matmul(&l.w)?;
            lin.add_row_inplace(l.b.data());
            h = if i != last {
                match self.activation {
                    Activation::Relu => lin.map(|v| v.max(F::zero())),
                    Activation::Tanh => lin.map(|v| v.tanh()),
                }
            } else {
                lin
            };
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<&Tensor<F>> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.{i}.w"), format!("{prefix}.{i}.b")])
            .collect()
    }
}

impl MlpVars {
    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Pulls gradient tensors for a registered var list, zeros where the
/// loss never touched a leaf.
pub fn grads_for<F: Scalar>(tape: &Tape<F>, vars: &[Var]) -> Vec<Tensor<F>> {
    vars.iter().map(|&v| tape.grad_tensor(v)).collect()
}
