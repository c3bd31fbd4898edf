//! Mask pooling: a learnable binary matrix `M` (latents × properties) and one
//! aggregation network per property that turns the masked latent code into a
//! single bridging coordinate `w′_j = h_j(w ⊙ M[:, j])`.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Activation, BoundMlp, Mlp, Parameterized};
use crate::numcore::{concat, Rng, Tape, Tensor, Var};
use crate::Scalar;

/// Trainable relaxed-binary mask with `l` rows (latents) and `m` columns (properties).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix<T> {
    pub logits: Tensor<T>,
    pub tau: T,
    pub hard: bool,
}

impl<T: Scalar> MaskMatrix<T> {
    pub fn new(latents: usize, properties: usize, tau: T) -> Self {
        Self {
            logits: Tensor::zeros([latents, properties]),
            tau,
            hard: false,
        }
    }

    /// Fixed mask: entries map to saturated logits of ±`sat`.
    pub fn from_binary(mask: &Tensor<T>, sat: T) -> Self {
        Self {
            logits: mask.map(|v| if v > T::of(0.5) { sat } else { -sat }),
            tau: T::one(),
            hard: true,
        }
    }

    pub fn latents(&self) -> usize {
        self.logits.rows()
    }

    pub fn properties(&self) -> usize {
        self.logits.cols()
    }

    /// `σ(logits)`, the expected mask.
    pub fn probabilities(&self) -> Tensor<T> {
        self.logits.map(|v| T::one() / (T::one() + (-v).exp()))
    }

    /// Deterministic evaluation mask: `1[σ(logit) > ½]`.
    pub fn hard_mask(&self) -> Tensor<T> {
        self.logits.map(|v| if v > T::zero() { T::one() } else { T::zero() })
    }

    /// Logistic noise `g₁ − g₀` for every entry.
    pub fn draw_noise(&self, rng: &mut Rng) -> Tensor<T> {
        let data = (0..self.logits.len())
            .map(|_| T::of(rng.gumbel() - rng.gumbel()))
            .collect();
        Tensor::new(self.logits.shape().to_vec(), data).expect("same shape as logits")
    }

    /// Binary-concrete sample `σ((logits + g₁ − g₀) / τ)` on the tape; rounded
    /// straight-through when `hard`.
    pub fn sample<'t>(&self, logits: Var<'t, T>, rng: &mut Rng) -> Result<Var<'t, T>> {
        let noise = self.draw_noise(rng);
        self.sample_with_noise(logits, noise)
    }

    pub fn sample_with_noise<'t>(&self, logits: Var<'t, T>, noise: Tensor<T>) -> Result<Var<'t, T>> {
        if !(self.tau > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "mask temperature must be positive, got {}",
                self.tau
            )));
        }
        let tape = logits.tape();
        let relaxed = logits
            .add(tape.constant(noise))?
            .scale(T::one() / self.tau)?
            .sigmoid()?;
        if self.hard {
            relaxed.straight_through_round()
        } else {
            Ok(relaxed)
        }
    }

    /// Sampled mask as a plain tensor.
    pub fn sample_tensor(&self, rng: &mut Rng) -> Result<Tensor<T>> {
        let tape = Tape::new();
        Ok(self.sample(tape.constant(self.logits.clone()), rng)?.to_tensor())
    }

    /// L1 norm of the expected mask.
    pub fn sparsity_loss<'t>(&self, logits: Var<'t, T>) -> Result<Var<'t, T>> {
        logits.sigmoid()?.sum()
    }

    /// Writes the hard mask and `σ(logits)` as CSV (rows = latents, columns = properties).
    pub fn export_csv(&self, names: &[String], hard_path: &Path, prob_path: &Path) -> Result<()> {
        write_matrix_csv(&self.hard_mask(), names, hard_path)?;
        write_matrix_csv(&self.probabilities(), names, prob_path)
    }
}

pub(crate) fn write_matrix_csv<T: Scalar>(m: &Tensor<T>, columns: &[String], path: &Path) -> Result<()> {
    let mut out = String::from("latent");
    for c in columns {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for i in 0..m.rows() {
        out.push_str(&format!("w{}", i + 1));
        for j in 0..m.cols() {
            out.push_str(&format!(",{}", m.get(i, j)));
        }
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Unordered property pairs `(i, j)`, `i < j`, whose mask columns share a latent.
pub fn correlation_pairs<T: Scalar>(mask: &Tensor<T>) -> Result<BTreeSet<(usize, usize)>> {
    if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::InvalidArgument("correlation_pairs needs a binary mask".into()));
    }
    let (l, m) = (mask.rows(), mask.cols());
    let mut pairs = BTreeSet::new();
    for i in 0..m {
        for j in i + 1..m {
            if (0..l).any(|r| mask.get(r, i) == T::one() && mask.get(r, j) == T::one()) {
                pairs.insert((i, j));
            }
        }
    }
    Ok(pairs)
}

/// One small network per property, each mapping an `l`-vector to a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregator<T> {
    pub nets: Vec<Mlp<T>>,
}

/// An [`Aggregator`] bound to a tape.
#[derive(Debug, Clone)]
pub struct BoundAggregator<'t, T> {
    nets: Vec<BoundMlp<'t, T>>,
}

impl<T: Scalar> Aggregator<T> {
    /// `l → hidden → 1` tanh networks.
    pub fn mlp(latents: usize, properties: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            nets: (0..properties)
                .map(|_| Mlp::new(&[latents, hidden, 1], Activation::Tanh, false, rng))
                .collect(),
        }
    }

    /// Linear `l → 1` maps.
    pub fn linear(latents: usize, properties: usize, rng: &mut Rng) -> Self {
        Self {
            nets: (0..properties)
                .map(|_| Mlp::new(&[latents, 1], Activation::Tanh, false, rng))
                .collect(),
        }
    }

    pub fn properties(&self) -> usize {
        self.nets.len()
    }

    pub fn latents(&self) -> usize {
        self.nets.first().map_or(0, Mlp::inputs)
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BoundAggregator<'t, T> {
        BoundAggregator {
            nets: self.nets.iter().map(|n| n.bind(tape, trainable)).collect(),
        }
    }

    /// `w′` for a batch of `w` under a fixed mask, without gradients.
    pub fn eval(&self, w: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        Ok(bound
            .aggregate(tape.constant(w.clone()), tape.constant(mask.clone()))?
            .to_tensor())
    }
}

impl<'t, T: Scalar> BoundAggregator<'t, T> {
    /// `w: B×l`, `mask: l×m` → `w′: B×m` with `w′_j = h_j(w ⊙ M[:, j])`.
    pub fn aggregate(&self, w: Var<'t, T>, mask: Var<'t, T>) -> Result<Var<'t, T>> {
        let (ws, ms) = (w.shape(), mask.shape());
        if ws.len() != 2 || ms.len() != 2 || ws[1] != ms[0] || ms[1] != self.nets.len() {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                lhs: ws,
                rhs: ms,
            });
        }
        let cols = self
            .nets
            .iter()
            .enumerate()
            .map(|(j, net)| {
                let column = mask.slice(1, j, 1)?.transpose()?;
                net.forward(w.mul_row(column)?)
            })
            .collect::<Result<Vec<_>>>()?;
        concat(&cols, 1)
    }

    pub fn vars(&self) -> Vec<Var<'t, T>> {
        self.nets.iter().flat_map(BoundMlp::vars).collect()
    }
}

impl<T: Scalar> Parameterized<T> for Aggregator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (j, n) in self.nets.iter().enumerate() {
            n.visit(&format!("{prefix}.h{j}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (j, n) in self.nets.iter_mut().enumerate() {
            n.visit_mut(&format!("{prefix}.h{j}"), f);
        }
    }
}

impl<T: Scalar> Parameterized<T> for MaskMatrix<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.logits"), &self.logits);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.logits"), &mut self.logits);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_of(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn saturated_logit_samples_one() {
        for tau in [0.1, 0.5, 1.0] {
            let mut m = MaskMatrix::<f64>::new(2, 2, tau);
            m.logits = Tensor::full([2, 2], 20.0);
            let s = m.sample_tensor(&mut Rng::new(1)).unwrap();
            assert!(s.data().iter().all(|&v| (v - 1.0).abs() < 1e-6), "tau {tau}: {s:?}");
        }
    }

    #[test]
    fn hard_samples_are_binary() {
        let mut m = MaskMatrix::<f64>::new(8, 3, 0.5);
        m.hard = true;
        let s = m.sample_tensor(&mut Rng::new(2)).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let m = MaskMatrix::<f64>::new(2, 2, 0.0);
        assert!(m.sample_tensor(&mut Rng::new(0)).is_err());
    }

    #[test]
    fn zero_logit_sample_mean_half() {
        let m = MaskMatrix::<f64>::new(2, 2, 1.0);
        let mut rng = Rng::new(3);
        let draws = 10_000;
        let mut acc = vec![0.0; 4];
        for _ in 0..draws {
            let s = m.sample_tensor(&mut rng).unwrap();
            acc.iter_mut().zip(s.data()).for_each(|(a, v)| *a += v);
        }
        for a in acc {
            assert!((a / draws as f64 - 0.5).abs() < 0.02);
        }
    }

    #[test]
    fn sparsity_values() {
        let tape = Tape::new();
        let m = MaskMatrix::<f64>::new(8, 3, 1.0);
        let v = m.sparsity_loss(tape.constant(m.logits.clone())).unwrap().item();
        assert_eq!(v, 12.0);

        let mut logits = Tensor::full([8, 3], -1e4);
        logits.set(2, 1, 3f64.ln());
        let v = m.sparsity_loss(tape.constant(logits)).unwrap().item();
        assert!((v - 0.75).abs() < 1e-12);

        let v = m
            .sparsity_loss(tape.constant(Tensor::full([8, 3], -1e4)))
            .unwrap()
            .item();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn pairs_from_masks() {
        let disjoint = mask_of(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert!(correlation_pairs(&disjoint).unwrap().is_empty());

        let mut shared = Tensor::<f64>::zeros([5, 4]);
        shared.set(3, 1, 1.0);
        shared.set(3, 2, 1.0);
        shared.set(0, 0, 1.0);
        assert_eq!(correlation_pairs(&shared).unwrap(), BTreeSet::from([(1, 2)]));

        assert!(correlation_pairs(&mask_of(&[&[0.5]])).is_err());
    }

    #[test]
    fn zero_column_gives_constant() {
        let mut rng = Rng::new(4);
        let agg = Aggregator::<f64>::mlp(3, 2, 8, &mut rng);
        let mask = mask_of(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 0.0]]);
        let w1 = Tensor::new([1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        let w2 = Tensor::new([1, 3], vec![-4.0, 0.5, 1.0]).unwrap();
        let a = agg.eval(&w1, &mask).unwrap();
        let b = agg.eval(&w2, &mask).unwrap();
        assert_eq!(a.get(0, 1), b.get(0, 1));
        let h0 = agg.nets[1].eval(&Tensor::zeros([1, 3])).unwrap().item();
        assert_eq!(a.get(0, 1), h0);
    }

    #[test]
    fn linear_all_ones_is_dot_product() {
        let mut rng = Rng::new(5);
        let mut agg = Aggregator::<f64>::linear(3, 2, &mut rng);
        agg.nets[0].layers[0].weight = Tensor::col_vector(vec![1.0, 2.0, 3.0]);
        agg.nets[0].layers[0].bias = Tensor::scalar(0.5).reshape([1, 1]).unwrap();
        agg.nets[1].layers[0].weight = Tensor::col_vector(vec![-1.0, 0.0, 0.25]);
        let w = Tensor::new([2, 3], vec![1.0, 1.0, 1.0, 2.0, -1.0, 4.0]).unwrap();
        let out = agg.eval(&w, &Tensor::ones([3, 2])).unwrap();
        assert_eq!(out.data(), &[6.5, -0.75, 12.5, -1.0]);
    }
}
