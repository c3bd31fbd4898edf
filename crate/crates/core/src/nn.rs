//! Feed-forward building blocks and the Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numcore::{Rng, Tape, Tensor, Var};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<'t, T: Scalar>(self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Anything holding trainable tensors, visited in a fixed order.
pub trait Parameterized<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

/// `x · W + b` with `W: in×out` and `b: 1×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform init scaled for the activation that follows (He for relu,
    /// Glorot otherwise). `zero` gives an all-zero layer.
    pub fn new(inputs: usize, outputs: usize, act: Option<Activation>, zero: bool, rng: &mut Rng) -> Self {
        let bound = match act {
            Some(Activation::Relu) => (6.0 / inputs as f64).sqrt(),
            _ => (6.0 / (inputs + outputs) as f64).sqrt(),
        };
        let weight = if zero {
            Tensor::zeros([inputs, outputs])
        } else {
            let data = (0..inputs * outputs)
                .map(|_| T::of((2.0 * rng.uniform() - 1.0) * bound))
                .collect();
            Tensor::new([inputs, outputs], data).expect("consistent shape")
        };
        Self {
            weight,
            bias: Tensor::zeros([1, outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Multi-layer perceptron; the activation is applied after every layer but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
    pub activation: Activation,
}

/// An [`Mlp`] whose parameters are leaves on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp<'t, T> {
    layers: Vec<(Var<'t, T>, Var<'t, T>)>,
    activation: Activation,
}

impl<T: Scalar> Mlp<T> {
    /// `dims = [in, hidden..., out]`.
    pub fn new(dims: &[usize], activation: Activation, zero_last: bool, rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let last = i + 1 == n;
                Linear::new(
                    dims[i],
                    dims[i + 1],
                    (!last).then_some(activation),
                    last && zero_last,
                    rng,
                )
            })
            .collect();
        Self { layers, activation }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, Linear::outputs)
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BoundMlp<'t, T> {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf(l.weight.clone(), trainable),
                        tape.leaf(l.bias.clone(), trainable),
                    )
                })
                .collect(),
            activation: self.activation,
        }
    }

    /// Forward pass without gradients.
    pub fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let out = self.bind(&tape, false).forward(tape.constant(x.clone()))?;
        Ok(out.to_tensor())
    }
}

impl<'t, T: Scalar> BoundMlp<'t, T> {
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = x;
        let n = self.layers.len();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(*w)?.add_row(*b)?;
            if i + 1 < n {
                h = self.activation.apply(h)?;
            }
        }
        Ok(h)
    }

    /// Leaves in [`Parameterized::visit`] order.
    pub fn vars(&self) -> Vec<Var<'t, T>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl<T: Scalar> Parameterized<T> for Mlp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by visit order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self {
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update. `grads[i]` matches the i-th visited tensor; `None`
    /// means the tensor received no gradient this step.
    pub fn update(&mut self, params: &mut dyn Parameterized<T>, grads: &[Option<Tensor<T>>]) {
        let lr = self.lr;
        self.update_with(params, grads, &|_| lr);
    }

    /// As [`Adam::update`] with a per-tensor learning rate chosen by name.
    pub fn update_with(
        &mut self,
        params: &mut dyn Parameterized<T>,
        grads: &[Option<Tensor<T>>],
        lr_for: &dyn Fn(&str) -> T,
    ) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let eps = self.eps;
        let first = &mut self.first;
        let second = &mut self.second;
        let mut idx = 0;
        params.visit_mut("", &mut |name, p| {
            let lr = lr_for(&name);
            if first.len() <= idx {
                first.push(vec![T::zero(); p.len()]);
                second.push(vec![T::zero(); p.len()]);
            }
            if let Some(Some(g)) = grads.get(idx) {
                let (m, v) = (&mut first[idx], &mut second[idx]);
                for (((w, &g), m), v) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
            idx += 1;
        });
    }
}
