//! Diagonal Gaussians and minibatch total-correlation estimators.

use crate::error::{Error, Result};
use crate::numcore::{Tensor, Var};
use crate::Scalar;

fn ln_2pi<T: Scalar>() -> T {
    T::of((2.0 * std::f64::consts::PI).ln())
}

/// Batch of diagonal Gaussians, one per row: `mu`, `logvar` are `B×d`.
#[derive(Debug, Clone, Copy)]
pub struct DiagGaussian<'t, T> {
    pub mu: Var<'t, T>,
    pub logvar: Var<'t, T>,
}

impl<'t, T: Scalar> DiagGaussian<'t, T> {
    pub fn new(mu: Var<'t, T>, logvar: Var<'t, T>) -> Result<Self> {
        if mu.shape() != logvar.shape() {
            return Err(Error::ShapeMismatch {
                op: "DiagGaussian::new",
                lhs: mu.shape(),
                rhs: logvar.shape(),
            });
        }
        Ok(Self { mu, logvar })
    }

    pub fn batch(&self) -> usize {
        self.mu.value().rows()
    }

    pub fn dim(&self) -> usize {
        self.mu.value().cols()
    }

    /// `mu + exp(logvar / 2) ⊙ eps`.
    pub fn reparameterize(&self, eps: Var<'t, T>) -> Result<Var<'t, T>> {
        if eps.shape() != self.mu.shape() {
            return Err(Error::ShapeMismatch {
                op: "reparameterize",
                lhs: self.mu.shape(),
                rhs: eps.shape(),
            });
        }
        let std = self.logvar.scale(T::of(0.5))?.exp()?;
        self.mu.add(std.mul(eps)?)
    }

    /// `KL(q ‖ N(0, I))` summed over every row and dimension.
    pub fn kl_to_standard(&self) -> Result<Var<'t, T>> {
        let var = self.logvar.exp()?;
        self.mu
            .square()?
            .add(var)?
            .sub(self.logvar)?
            .offset(-T::one())?
            .sum()?
            .scale(T::of(0.5))
    }

    /// Log-density of each row of `x` under its own row's Gaussian, `B×1`.
    pub fn log_prob(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        if x.shape() != self.mu.shape() {
            return Err(Error::ShapeMismatch {
                op: "log_prob",
                lhs: self.mu.shape(),
                rhs: x.shape(),
            });
        }
        let prec = self.logvar.neg()?.exp()?;
        x.sub(self.mu)?
            .square()?
            .mul(prec)?
            .add(self.logvar)?
            .offset(ln_2pi())?
            .scale(T::of(-0.5))?
            .sum_axis(1)
    }
}

/// Sum of the `d` blocks of width `n` in a `B×(d·n)` matrix.
fn sum_blocks<'t, T: Scalar>(m: Var<'t, T>, d: usize, n: usize) -> Result<Var<'t, T>> {
    let mut acc = m.slice(1, 0, n)?;
    for k in 1..d {
        acc = acc.add(m.slice(1, k * n, n)?)?;
    }
    Ok(acc)
}

/// Estimates `(KL(q(z,w) ‖ q(z)q(w)), KL(q(w) ‖ ∏ q(wᵢ)))` on a minibatch.
///
/// Aggregate densities are replaced by their batch Monte-Carlo average,
/// `log q(s) ≈ logsumexp_j log q(s | x_j) − log B`, with `w_samples[i]` drawn
/// from posterior row `i`.
pub fn total_correlation_terms<'t, T: Scalar>(
    w_samples: Var<'t, T>,
    z_samples: Var<'t, T>,
    w_post: &DiagGaussian<'t, T>,
    z_post: &DiagGaussian<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let b = w_samples.value().rows();
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "total correlation needs a batch of at least 2, got {b}"
        )));
    }
    if z_samples.value().rows() != b || w_post.batch() != b || z_post.batch() != b {
        return Err(Error::ShapeMismatch {
            op: "total_correlation_terms",
            lhs: w_samples.shape(),
            rhs: z_samples.shape(),
        });
    }
    let (l, d) = (w_post.dim(), z_post.dim());
    let log_b = T::of((b as f64).ln());

    let lw = w_samples.pairwise_log_normal(w_post.mu, w_post.logvar)?;
    let lz = z_samples.pairwise_log_normal(z_post.mu, z_post.logvar)?;
    let joint_w = sum_blocks(lw, l, b)?;
    let joint_z = sum_blocks(lz, d, b)?;

    let log_qw = joint_w.logsumexp(1)?.offset(-log_b)?;
    let log_qz = joint_z.logsumexp(1)?.offset(-log_b)?;
    let log_qzw = joint_w.add(joint_z)?.logsumexp(1)?.offset(-log_b)?;

    let log_qw_marginals = lw
        .reshape(&[b * l, b])?
        .logsumexp(1)?
        .reshape(&[b, l])?
        .sum_axis(1)?
        .offset(-log_b * T::of(l as f64))?;

    let tc_zw = log_qzw.sub(log_qz)?.sub(log_qw)?.mean()?;
    let tc_w = log_qw.sub(log_qw_marginals)?.mean()?;
    Ok((tc_zw, tc_w))
}

/// Closed-form KL of a single diagonal Gaussian to the standard normal.
pub fn kl_standard_closed_form<T: Scalar>(mu: &Tensor<T>, logvar: &Tensor<T>) -> T {
    mu.data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| T::of(0.5) * (m * m + lv.exp() - lv - T::one()))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Rng, SampleKind, Tape};

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::row_vector(v.to_vec())
    }

    #[test]
    fn reparameterize_cases() {
        let tape = Tape::new();
        let g = DiagGaussian::new(tape.constant(row(&[1.5, -2.0])), tape.constant(row(&[0.3, 0.1]))).unwrap();
        let z = g.reparameterize(tape.constant(row(&[0.0, 0.0]))).unwrap();
        assert_eq!(z.value().data(), &[1.5, -2.0]);
        let g = DiagGaussian::new(tape.constant(row(&[0.0])), tape.constant(row(&[0.0]))).unwrap();
        assert_eq!(g.reparameterize(tape.constant(row(&[1.0]))).unwrap().item(), 1.0);
        assert!(g.reparameterize(tape.constant(row(&[1.0, 2.0]))).is_err());
    }

    #[test]
    fn reparameterized_moments() {
        let n = 65536;
        let tape = Tape::new();
        let mu = tape.constant(Tensor::full([n, 1], 2.0));
        let lv = tape.constant(Tensor::full([n, 1], 4.0f64.ln()));
        let eps = tape.constant(Rng::new(9).sample(SampleKind::StandardNormal, &[n, 1]).unwrap());
        let s = DiagGaussian::new(mu, lv)
            .unwrap()
            .reparameterize(eps)
            .unwrap()
            .to_tensor();
        let mean = s.sum() / n as f64;
        let var = s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 2.0).abs() < 0.05);
        assert!((var - 4.0).abs() < 0.1);
    }

    #[test]
    fn kl_closed_forms() {
        let tape = Tape::new();
        let kl = |mu: f64, lv: f64| {
            DiagGaussian::new(tape.constant(row(&[mu])), tape.constant(row(&[lv])))
                .unwrap()
                .kl_to_standard()
                .unwrap()
                .item()
        };
        assert_eq!(kl(0.0, 0.0), 0.0);
        assert!((kl(1.0, 0.0) - 0.5).abs() < 1e-12);
        assert!((kl(0.0, 1.0) - (std::f64::consts::E - 2.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn log_prob_values() {
        let tape = Tape::new();
        let g = DiagGaussian::new(tape.constant(row(&[0.0])), tape.constant(row(&[0.0]))).unwrap();
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((g.log_prob(tape.constant(row(&[0.0]))).unwrap().item() + half_ln_2pi).abs() < 1e-12);
        assert!((g.log_prob(tape.constant(row(&[1.0]))).unwrap().item() + half_ln_2pi + 0.5).abs() < 1e-12);

        let mu = [0.5, -1.0, 2.0];
        let lv = [0.2, -0.3, 1.1];
        let x = [1.0, 0.0, -1.0];
        let g3 = DiagGaussian::new(tape.constant(row(&mu)), tape.constant(row(&lv))).unwrap();
        let joint = g3.log_prob(tape.constant(row(&x))).unwrap().item();
        let separate: f64 = (0..3)
            .map(|k| {
                let gk = DiagGaussian::new(tape.constant(row(&[mu[k]])), tape.constant(row(&[lv[k]]))).unwrap();
                gk.log_prob(tape.constant(row(&[x[k]]))).unwrap().item()
            })
            .sum();
        assert!((joint - separate).abs() < 1e-12);
    }

    #[test]
    fn tc_needs_two_samples() {
        let tape = Tape::new();
        let one = tape.constant(Tensor::<f64>::zeros([1, 2]));
        let g = DiagGaussian::new(one, one).unwrap();
        assert!(total_correlation_terms(one, one, &g, &g).is_err());
    }
}
