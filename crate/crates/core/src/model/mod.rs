//! The full model: property encoder `q(w|x)`, object encoder `q(z|x)`,
//! Bernoulli decoder `p(x|w,z)`, mask pooling and the invertible head,
//! together with the training objective and loop.

mod checkpoint;
mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::CHECKPOINT_MAGIC;
pub use train::{metrics_csv, tau_schedule, train, EpochRecord, METRICS_HEADER};

use crate::config::{AggregatorKind, MaskMode, RunConfig};
use crate::distributions::{total_correlation_terms, DiagGaussian};
use crate::error::{Error, Result};
use crate::invhead::{BoundHead, InvertibleHead};
use crate::maskpool::{Aggregator, BoundAggregator, MaskMatrix};
use crate::nn::{Activation, BoundMlp, Mlp, Parameterized};
use crate::numcore::{concat, Rng, SampleKind, Tape, Tensor, Var};
use crate::Scalar;

/// Architecture and dataset description stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub side: usize,
    pub latents: usize,
    pub residual: usize,
    pub hidden: usize,
    pub depth: usize,
    pub aggregator: AggregatorKind,
    pub aggregator_hidden: usize,
    pub mask_mode: MaskMode,
    #[serde(default)]
    pub mask_init: f64,
    pub head_hidden: usize,
    pub head_depth: usize,
    pub head_activation: Activation,
    pub lip_target: f64,
    pub property_names: Vec<String>,
    pub property_ranges: Vec<(f64, f64)>,
    /// Ground-truth latent mask, required when `mask_mode` is `GroundTruth`.
    pub fixed_mask: Option<Vec<Vec<f64>>>,
}

impl ModelSpec {
    pub fn from_config(cfg: &RunConfig, names: Vec<String>, ranges: Vec<(f64, f64)>) -> Result<Self> {
        let m = &cfg.model;
        let fixed_mask = match m.mask {
            MaskMode::Learned => None,
            MaskMode::GroundTruth => {
                let t = crate::datagen::ground_truth_mask(m.latents, names.last().is_some_and(|n| n == "shape"))?;
                Some((0..t.rows()).map(|i| t.row(i).to_vec()).collect())
            }
        };
        Ok(Self {
            side: cfg.data.side,
            latents: m.latents,
            residual: m.residual,
            hidden: m.hidden,
            depth: m.depth,
            aggregator: m.aggregator,
            aggregator_hidden: m.aggregator_hidden,
            mask_mode: m.mask,
            mask_init: m.mask_init,
            head_hidden: m.head_hidden,
            head_depth: m.head_depth,
            head_activation: m.head_activation,
            lip_target: m.lip_target,
            property_names: names,
            property_ranges: ranges,
            fixed_mask,
        })
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn properties(&self) -> usize {
        self.property_names.len()
    }

    /// Maps raw property values to the `[0, 1]` training scale.
    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(&self.property_ranges)
            .map(|(&v, &(lo, hi))| (v - lo) / (hi - lo))
            .collect()
    }

    /// [`ModelSpec::normalize`] for property `j` alone.
    pub fn normalize_one(&self, j: usize, raw: f64) -> f64 {
        let (lo, hi) = self.property_ranges[j];
        (raw - lo) / (hi - lo)
    }

    pub fn denormalize(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(&self.property_ranges)
            .map(|(&v, &(lo, hi))| lo + v * (hi - lo))
            .collect()
    }

    pub fn property_index(&self, name: &str) -> Option<usize> {
        self.property_names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrVae<T> {
    pub spec: ModelSpec,
    pub property_encoder: Mlp<T>,
    pub object_encoder: Mlp<T>,
    pub decoder: Mlp<T>,
    pub mask: MaskMatrix<T>,
    pub aggregator: Aggregator<T>,
    pub head: InvertibleHead<T>,
}

/// Objective coefficients `ρ₁, ρ₂, λ₃, λ_mask`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights<T> {
    pub rho1: T,
    pub rho2: T,
    pub lambda3: T,
    pub lambda_mask: T,
}

impl<T: Scalar> ObjectiveWeights<T> {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let o = &cfg.objective;
        Self {
            rho1: T::of(o.rho1),
            rho2: T::of(o.rho2),
            lambda3: T::of(o.lambda3),
            lambda_mask: T::of(o.lambda_mask),
        }
    }
}

/// Every random draw one objective evaluation consumes; fixing it freezes
/// the objective into a deterministic function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveNoise<T> {
    pub eps_w: Tensor<T>,
    pub eps_z: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Scalar> ObjectiveNoise<T> {
    pub fn draw(model: &CorrVae<T>, batch: usize, rng: &mut Rng) -> Result<Self> {
        let eps_w = rng.sample(SampleKind::StandardNormal, &[batch, model.spec.latents])?;
        let eps_z = rng.sample(SampleKind::StandardNormal, &[batch, model.spec.residual])?;
        let mask = model.mask.draw_noise(rng);
        Ok(Self { eps_w, eps_z, mask })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub recon: T,
    pub prop_nll: T,
    pub kl: T,
    pub tc_zw: T,
    pub tc_w: T,
    pub l3: T,
    pub mask_l1: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub const FIELDS: [&'static str; 8] = ["recon", "prop_nll", "kl", "tc_zw", "tc_w", "l3", "mask_l1", "total"];

    pub fn values(&self) -> [T; 8] {
        [
            self.recon,
            self.prop_nll,
            self.kl,
            self.tc_zw,
            self.tc_w,
            self.l3,
            self.mask_l1,
            self.total,
        ]
    }

    /// `recon + prop_nll + kl + ρ₁·tc_zw + ρ₂·tc_w + λ₃·l3 + λ_mask·mask_l1`.
    pub fn weighted_total(&self, w: &ObjectiveWeights<T>) -> T {
        self.recon
            + self.prop_nll
            + self.kl
            + w.rho1 * self.tc_zw
            + w.rho2 * self.tc_w
            + w.lambda3 * self.l3
            + w.lambda_mask * self.mask_l1
    }
}

/// Objective value on the tape plus its parts.
pub struct Objective<'t, T> {
    pub total: Var<'t, T>,
    pub parts: LossBreakdown<T>,
}

/// Model parameters bound to one tape.
pub struct BoundCorrVae<'t, T> {
    property_encoder: BoundMlp<'t, T>,
    object_encoder: BoundMlp<'t, T>,
    decoder: BoundMlp<'t, T>,
    logits: Var<'t, T>,
    aggregator: BoundAggregator<'t, T>,
    head: BoundHead<'t, T>,
}

impl<'t, T: Scalar> BoundCorrVae<'t, T> {
    /// Gradients in [`Parameterized::visit`] order; the mask entry is `None`
    /// when the mask is frozen.
    pub fn grads(&self) -> Vec<Option<Tensor<T>>> {
        let mut g: Vec<Option<Tensor<T>>> = Vec::new();
        let mut push = |vars: Vec<Var<'t, T>>| g.extend(vars.iter().map(|v| v.grad()));
        push(self.property_encoder.vars());
        push(self.object_encoder.vars());
        push(self.decoder.vars());
        push(vec![self.logits]);
        push(self.aggregator.vars());
        push(self.head.vars());
        g
    }

    pub fn head(&self) -> &BoundHead<'t, T> {
        &self.head
    }

    pub fn aggregator(&self) -> &BoundAggregator<'t, T> {
        &self.aggregator
    }
}

fn gaussian_halves<'t, T: Scalar>(out: Var<'t, T>, d: usize) -> Result<DiagGaussian<'t, T>> {
    DiagGaussian::new(out.slice(1, 0, d)?, out.slice(1, d, d)?)
}

fn nonfinite_as<T>(term: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss {
            term,
            epoch: 0,
            step: 0,
        },
        other => other,
    })
}

impl<T: Scalar> CorrVae<T> {
    pub fn new(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        let (d, l, dz, m, h) = (
            spec.pixels(),
            spec.latents,
            spec.residual,
            spec.properties(),
            spec.hidden,
        );
        if m == 0 || l == 0 || dz == 0 || spec.depth == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if spec.property_ranges.len() != m || spec.property_ranges.iter().any(|&(lo, hi)| !(hi > lo)) {
            return Err(Error::InvalidArgument(
                "every property needs a range with hi > lo".into(),
            ));
        }
        let widths = |input: usize, output: usize| {
            let mut v = vec![input];
            v.extend(std::iter::repeat_n(h, spec.depth));
            v.push(output);
            v
        };
        let property_encoder = Mlp::new(&widths(d, 2 * l), Activation::Relu, true, rng);
        let object_encoder = Mlp::new(&widths(d, 2 * dz), Activation::Relu, true, rng);
        let decoder = Mlp::new(&widths(l + dz, d), Activation::Relu, true, rng);
        let mask = match (&spec.mask_mode, &spec.fixed_mask) {
            (MaskMode::Learned, _) => {
                let mut mask = MaskMatrix::new(l, m, T::one());
                mask.logits = Tensor::full([l, m], T::of(spec.mask_init));
                mask
            }
            (MaskMode::GroundTruth, Some(rows)) => {
                let rows: Vec<Vec<T>> = rows.iter().map(|r| r.iter().map(|&v| T::of(v)).collect()).collect();
                let t = Tensor::from_rows(&rows)?;
                if t.shape() != [l, m] {
                    return Err(Error::InvalidArgument(
                        "fixed mask does not match latents × properties".into(),
                    ));
                }
                MaskMatrix::from_binary(&t, T::of(30.0))
            }
            (MaskMode::GroundTruth, None) => {
                return Err(Error::InvalidArgument(
                    "ground-truth mask mode needs a fixed mask".into(),
                ))
            }
        };
        let aggregator = match spec.aggregator {
            AggregatorKind::Mlp => Aggregator::mlp(l, m, spec.aggregator_hidden, rng),
            AggregatorKind::Linear => Aggregator::linear(l, m, rng),
        };
        let hidden = vec![spec.head_hidden; spec.head_depth];
        let head = InvertibleHead::new(m, &hidden, T::of(spec.lip_target), spec.head_activation, rng);
        Ok(Self {
            spec,
            property_encoder,
            object_encoder,
            decoder,
            mask,
            aggregator,
            head,
        })
    }

    pub fn mask_frozen(&self) -> bool {
        self.spec.mask_mode == MaskMode::GroundTruth
    }

    /// Mask used at evaluation and generation time.
    pub fn hard_mask(&self) -> Tensor<T> {
        self.mask.hard_mask()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Result<BoundCorrVae<'t, T>> {
        Ok(BoundCorrVae {
            property_encoder: self.property_encoder.bind(tape, true),
            object_encoder: self.object_encoder.bind(tape, true),
            decoder: self.decoder.bind(tape, true),
            logits: tape.leaf(self.mask.logits.clone(), !self.mask_frozen()),
            aggregator: self.aggregator.bind(tape, true),
            head: self.head.bind(tape, true)?,
        })
    }

    fn check_images(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.spec.pixels() {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: x.shape().to_vec(),
                rhs: vec![self.spec.pixels()],
            });
        }
        if x.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::InvalidArgument("image values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Full objective for a batch with all randomness supplied in `noise`.
    pub fn objective<'t>(
        &self,
        bound: &BoundCorrVae<'t, T>,
        x: &Tensor<T>,
        y: &Tensor<T>,
        noise: &ObjectiveNoise<T>,
        weights: &ObjectiveWeights<T>,
    ) -> Result<Objective<'t, T>> {
        self.check_images(x)?;
        let b = x.rows();
        if b < 2 {
            return Err(Error::InvalidArgument(
                "the objective needs a batch of at least 2".into(),
            ));
        }
        if y.shape() != [b, self.spec.properties()] {
            return Err(Error::ShapeMismatch {
                op: "objective",
                lhs: y.shape().to_vec(),
                rhs: vec![b, self.spec.properties()],
            });
        }
        let tape = bound.logits.tape();
        let (l, dz) = (self.spec.latents, self.spec.residual);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let inv_b = T::one() / T::of(b as f64);

        let qw = gaussian_halves(bound.property_encoder.forward(xv)?, l)?;
        let qz = gaussian_halves(bound.object_encoder.forward(xv)?, dz)?;
        let w = qw.reparameterize(tape.constant(noise.eps_w.clone()))?;
        let z = qz.reparameterize(tape.constant(noise.eps_z.clone()))?;

        let recon = nonfinite_as(
            "recon",
            (|| {
                let logits = bound.decoder.forward(concat(&[w, z], 1)?)?;
                logits.softplus()?.sub(logits.mul(xv)?)?.sum()?.scale(inv_b)
            })(),
        )?;

        let mask = if self.mask_frozen() {
            tape.constant(self.hard_mask())
        } else {
            self.mask.sample_with_noise(bound.logits, noise.mask.clone())?
        };
        let prop_nll = nonfinite_as(
            "prop_nll",
            (|| {
                let w_prime = bound.aggregator.aggregate(w, mask)?;
                bound.head.l3_loss(w_prime, yv)
            })(),
        )?;
        // Both terms score the head on the sampled w, so λ₃ only reweights it.
        let l3 = prop_nll;
        let kl = nonfinite_as(
            "kl",
            (|| qw.kl_to_standard()?.add(qz.kl_to_standard()?)?.scale(inv_b))(),
        )?;
        let (tc_zw, tc_w) = nonfinite_as("tc", total_correlation_terms(w, z, &qw, &qz))?;
        let mask_l1 = self.mask.sparsity_loss(bound.logits)?;

        let total = recon
            .add(prop_nll)?
            .add(kl)?
            .add(tc_zw.scale(weights.rho1)?)?
            .add(tc_w.scale(weights.rho2)?)?
            .add(l3.scale(weights.lambda3)?)?
            .add(mask_l1.scale(weights.lambda_mask)?)?;
        let parts = LossBreakdown {
            recon: recon.item(),
            prop_nll: prop_nll.item(),
            kl: kl.item(),
            tc_zw: tc_zw.item(),
            tc_w: tc_w.item(),
            l3: l3.item(),
            mask_l1: mask_l1.item(),
            total: total.item(),
        };
        Ok(Objective { total, parts })
    }

    /// Posterior parameters `(mu_w, logvar_w, mu_z, logvar_z)` for a batch of images.
    pub fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
        self.check_images(x)?;
        let (l, dz) = (self.spec.latents, self.spec.residual);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let qw = gaussian_halves(self.property_encoder.bind(&tape, false).forward(xv)?, l)?;
        let qz = gaussian_halves(self.object_encoder.bind(&tape, false).forward(xv)?, dz)?;
        Ok((
            qw.mu.to_tensor(),
            qw.logvar.to_tensor(),
            qz.mu.to_tensor(),
            qz.logvar.to_tensor(),
        ))
    }

    /// Per-pixel Bernoulli probabilities for latent codes `w: B×l`, `z: B×d_z`.
    pub fn decode(&self, w: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let (l, dz) = (self.spec.latents, self.spec.residual);
        if w.shape().len() != 2 || z.shape().len() != 2 || w.cols() != l || z.cols() != dz || w.rows() != z.rows() {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: w.shape().to_vec(),
                rhs: z.shape().to_vec(),
            });
        }
        let tape = Tape::new();
        let input = concat(&[tape.constant(w.clone()), tape.constant(z.clone())], 1)?;
        Ok(self.decoder.bind(&tape, false).forward(input)?.sigmoid()?.to_tensor())
    }

    /// `w′ = h(w ⊙ M_hard)`.
    pub fn bridge(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        self.aggregator.eval(w, &self.hard_mask())
    }

    /// `f(h(w ⊙ M_hard))` on the `[0, 1]` property scale.
    pub fn properties_from_w(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        self.head.predict(&self.bridge(w)?)
    }

    /// Property prediction from images through the posterior mean of `w`.
    pub fn predict_properties(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (mu_w, ..) = self.encode(x)?;
        self.properties_from_w(&mu_w)
    }
}

impl<T: Scalar> Parameterized<T> for CorrVae<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.property_encoder.visit(&p("enc_w"), f);
        self.object_encoder.visit(&p("enc_z"), f);
        self.decoder.visit(&p("dec"), f);
        self.mask.visit(&p("mask"), f);
        self.aggregator.visit(&p("agg"), f);
        self.head.visit(&p("head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.property_encoder.visit_mut(&p("enc_w"), f);
        self.object_encoder.visit_mut(&p("enc_z"), f);
        self.decoder.visit_mut(&p("dec"), f);
        self.mask.visit_mut(&p("mask"), f);
        self.aggregator.visit_mut(&p("agg"), f);
        self.head.visit_mut(&p("head"), f);
    }
}
