//! Invertible residual property head `f(w′) = w′ + f̄(w′)`.
//!
//! Every layer of `f̄` is rescaled to spectral norm `c < 1`, so `f̄` is a
//! contraction for 1-Lipschitz activations and `f` can be inverted exactly
//! by the fixed-point iteration `w′ ← y − f̄(w′)`.

use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Parameterized};
use crate::numcore::linalg::{cholesky_solve, orthonormalize_columns, symmetric_eigenvalues};
use crate::numcore::{Rng, Tape, Tensor, Var};
use crate::Scalar;

/// Largest block used by the power iteration.
const POWER_BLOCK: usize = 4;

/// Warm-started block power iteration for the top singular value of a
/// weight matrix `W` (`in×out`). `left` is `in×b`, `right` is `out×b`,
/// both with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerIteration<T> {
    pub left: Tensor<T>,
    pub right: Tensor<T>,
}

impl<T: Scalar> PowerIteration<T> {
    pub fn random(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let b = POWER_BLOCK.min(inputs).min(outputs).max(1);
        let mut draw = |n: usize| {
            let mut d: Vec<T> = (0..n * b).map(|_| T::of(rng.normal())).collect();
            orthonormalize_columns(&mut d, n, b);
            Tensor::new([n, b], d).expect("consistent shape")
        };
        let left = draw(inputs);
        let right = draw(outputs);
        Self { left, right }
    }

    /// Runs `iters` sweeps and returns the Rayleigh–Ritz estimate of `σ₁(W)`.
    pub fn estimate(&mut self, w: &Tensor<T>, iters: usize) -> T {
        let b = self.right.cols();
        let (n_in, n_out) = (w.rows(), w.cols());
        let wt = w.transpose();
        for _ in 0..iters {
            let mut u = w.matmul(&self.right).expect("power iteration shapes");
            orthonormalize_columns(u.data_mut(), n_in, b);
            let mut v = wt.matmul(&u).expect("power iteration shapes");
            orthonormalize_columns(v.data_mut(), n_out, b);
            self.left = u;
            self.right = v;
        }
        // B = Uᵀ W V, σ̂ = sqrt(λ_max(Bᵀ B)).
        let small = self
            .left
            .transpose()
            .matmul(w)
            .and_then(|t| t.matmul(&self.right))
            .expect("power iteration shapes");
        let gram = small.transpose().matmul(&small).expect("square");
        let top = symmetric_eigenvalues(gram.data(), b)
            .into_iter()
            .fold(T::zero(), T::max);
        top.max(T::zero()).sqrt()
    }
}

/// `c · W / σ̂₁(W)`, with `σ̂₁` from `iters` warm-started power-iteration sweeps.
/// A zero matrix is returned unchanged.
pub fn spectral_normalize<T: Scalar>(
    w: &Tensor<T>,
    c: T,
    state: &mut PowerIteration<T>,
    iters: usize,
) -> Result<Tensor<T>> {
    if iters == 0 {
        return Err(Error::InvalidArgument(
            "spectral normalization needs at least one iteration".into(),
        ));
    }
    let sigma = state.estimate(w, iters);
    Ok(scaled(w, c, sigma))
}

fn scaled<T: Scalar>(w: &Tensor<T>, c: T, sigma: T) -> Tensor<T> {
    if sigma <= T::zero() {
        Tensor::zeros(w.shape().to_vec())
    } else {
        let s = c / sigma;
        w.map(|v| v * s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayer<T> {
    pub linear: Linear<T>,
    pub power: PowerIteration<T>,
    pub sigma_hat: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertibleHead<T> {
    pub layers: Vec<HeadLayer<T>>,
    pub lip_target: T,
    pub activation: Activation,
    /// Property noise covariance; the identity everywhere in training and generation.
    pub sigma: Tensor<T>,
}

/// Result of [`InvertibleHead::invert`].
#[derive(Debug, Clone)]
pub struct Inversion<T> {
    pub w_prime: Tensor<T>,
    pub iterations: usize,
    /// Largest per-row `‖f(w′_k) − y‖₂` at each iteration.
    pub residuals: Vec<T>,
}

/// Head bound to a tape: normalized weights are `scale(raw)` so gradients
/// reach the raw weights.
#[derive(Debug, Clone)]
pub struct BoundHead<'t, T> {
    raw: Vec<(Var<'t, T>, Var<'t, T>)>,
    normalized: Vec<Var<'t, T>>,
    activation: Activation,
}

impl<T: Scalar> InvertibleHead<T> {
    /// `f̄: m → hidden… → m`.
    pub fn new(properties: usize, hidden: &[usize], lip_target: T, activation: Activation, rng: &mut Rng) -> Self {
        let mut dims = vec![properties];
        dims.extend_from_slice(hidden);
        dims.push(properties);
        let layers = dims
            .windows(2)
            .map(|d| {
                let linear = Linear::new(d[0], d[1], Some(Activation::Tanh), false, rng);
                let mut power = PowerIteration::random(d[0], d[1], rng);
                let sigma_hat = power.estimate(&linear.weight, 50);
                HeadLayer {
                    linear,
                    power,
                    sigma_hat,
                }
            })
            .collect();
        Self {
            layers,
            lip_target,
            activation,
            sigma: Tensor::eye(properties),
        }
    }

    pub fn properties(&self) -> usize {
        self.layers[0].linear.inputs()
    }

    /// Refreshes every layer's `σ̂` with `iters` warm-started sweeps.
    pub fn refresh_spectral(&mut self, iters: usize) {
        for layer in &mut self.layers {
            layer.sigma_hat = layer.power.estimate(&layer.linear.weight, iters);
        }
    }

    /// At least `min_iters` sweeps per layer, continuing until the estimate
    /// changes by less than `rtol` (relative) or `max_iters` is reached.
    pub fn refresh_spectral_until(&mut self, min_iters: usize, max_iters: usize, rtol: T) {
        for layer in &mut self.layers {
            let w = &layer.linear.weight;
            let mut sigma = layer.power.estimate(w, min_iters.max(1));
            for _ in min_iters.max(1)..max_iters {
                let next = layer.power.estimate(w, 1);
                let done = (next - sigma).abs() <= rtol * next.abs();
                sigma = next;
                if done {
                    break;
                }
            }
            layer.sigma_hat = sigma;
        }
    }

    pub fn normalized_weight(&self, i: usize) -> Tensor<T> {
        let l = &self.layers[i];
        scaled(&l.linear.weight, self.lip_target, l.sigma_hat)
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Result<BoundHead<'t, T>> {
        let mut raw = Vec::new();
        let mut normalized = Vec::new();
        for l in &self.layers {
            let w = tape.leaf(l.linear.weight.clone(), trainable);
            let b = tape.leaf(l.linear.bias.clone(), trainable);
            let s = if l.sigma_hat > T::zero() {
                self.lip_target / l.sigma_hat
            } else {
                T::zero()
            };
            normalized.push(w.scale(s)?);
            raw.push((w, b));
        }
        Ok(BoundHead {
            raw,
            normalized,
            activation: self.activation,
        })
    }

    fn check_width(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.properties() {
            return Err(Error::ShapeMismatch {
                op: "invertible head",
                lhs: x.shape().to_vec(),
                rhs: vec![self.properties()],
            });
        }
        Ok(())
    }

    /// `f̄(w′)` without gradients.
    pub fn residual(&self, w_prime: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_width(w_prime)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false)?;
        Ok(bound.residual(tape.constant(w_prime.clone()))?.to_tensor())
    }

    /// `y = w′ + f̄(w′)` without gradients.
    pub fn predict(&self, w_prime: &Tensor<T>) -> Result<Tensor<T>> {
        let r = self.residual(w_prime)?;
        w_prime.zip_map(&r, |a, b| a + b)
    }

    /// Solves `f(w′) = y` row-wise by `w′ ← y − f̄(w′)` from `w′₀ = y`.
    pub fn invert(&self, y: &Tensor<T>, tol: T, max_iter: usize) -> Result<Inversion<T>> {
        self.check_width(y)?;
        let mut w = y.clone();
        let mut residuals = Vec::new();
        let m = y.cols();
        for k in 1..=max_iter {
            let fb = self.residual(&w)?;
            let r = w.zip_map(&fb, |a, b| a + b)?.zip_map(y, |a, b| a - b)?;
            let worst_l2 = (0..r.rows())
                .map(|i| r.row(i).iter().map(|&v| v * v).sum::<T>().sqrt())
                .fold(T::zero(), T::max);
            residuals.push(worst_l2);
            if r.max_abs() <= tol {
                return Ok(Inversion {
                    w_prime: w,
                    iterations: k,
                    residuals,
                });
            }
            w = y.zip_map(&fb, |a, b| a - b)?;
            debug_assert_eq!(w.cols(), m);
        }
        Err(Error::InversionDiverged {
            tol: tol.as_f64(),
            max_iter,
            residual: residuals.last().map_or(f64::NAN, |r| r.as_f64()),
        })
    }

    /// The two misfit objectives compared by the Σ-independence argument:
    /// `g₁ = −(ŷ − f)ᵀ Σ⁻¹ (ŷ − f)` and `g₂ = −‖ŷ − f‖²` for a single `w′` row.
    pub fn misfit_objectives(&self, w_prime: &Tensor<T>, target: &Tensor<T>, sigma: &Tensor<T>) -> Result<(T, T)> {
        let f = self.predict(w_prime)?;
        let m = self.properties();
        if target.len() != m || sigma.shape() != [m, m] || f.rows() != 1 {
            return Err(Error::InvalidArgument(
                "misfit objectives take one row and an m×m covariance".into(),
            ));
        }
        let r: Vec<T> = target.data().iter().zip(f.data()).map(|(&a, &b)| a - b).collect();
        let solved = cholesky_solve(sigma.data(), &r, m)
            .ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?;
        let g1 = -r.iter().zip(&solved).map(|(&a, &b)| a * b).sum::<T>();
        let g2 = -r.iter().map(|&a| a * a).sum::<T>();
        Ok((g1, g2))
    }
}

impl<'t, T: Scalar> BoundHead<'t, T> {
    pub fn residual(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let n = self.normalized.len();
        let mut h = x;
        for (i, (&w, &(_, b))) in self.normalized.iter().zip(&self.raw).enumerate() {
            h = h.matmul(w)?.add_row(b)?;
            if i + 1 < n {
                h = self.activation.apply(h)?;
            }
        }
        Ok(h)
    }

    pub fn predict(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.add(self.residual(x)?)
    }

    /// Negative log-likelihood of `y` under `N(f(w′), I)`, averaged over rows.
    pub fn l3_loss(&self, w_prime: Var<'t, T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = y.shape();
        if shape != w_prime.shape() || shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "l3_loss",
                lhs: w_prime.shape(),
                rhs: shape,
            });
        }
        let (rows, m) = (shape[0], shape[1]);
        let constant = T::of(0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln());
        y.sub(self.predict(w_prime)?)?
            .square()?
            .sum()?
            .scale(T::of(0.5) / T::of(rows as f64))?
            .offset(constant)
    }

    /// Raw weight and bias leaves in [`Parameterized::visit`] order.
    pub fn vars(&self) -> Vec<Var<'t, T>> {
        self.raw.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl<T: Scalar> Parameterized<T> for InvertibleHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.linear.visit(&format!("{prefix}.{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.linear.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}
