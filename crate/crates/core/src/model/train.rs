use super::{CorrVae, LossBreakdown, ObjectiveNoise, ObjectiveWeights};
use crate::config::RunConfig;
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::numcore::{Rng, Tape};
use crate::Scalar;

/// Stop refining a spectral estimate once it moves by less than this.
const SPECTRAL_RTOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub tau: f64,
    /// Mean over the epoch's steps.
    pub loss: LossBreakdown<f64>,
}

pub const METRICS_HEADER: &str = "epoch,tau,recon,prop_nll,kl,tc_zw,tc_w,l3,mask_l1,total";

pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        out.push_str(&format!("{},{}", r.epoch, r.tau));
        for v in r.loss.values() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Geometric interpolation from `start` (step 0) to `end` (last step).
pub fn tau_schedule(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return start;
    }
    start * (end / start).powf(step as f64 / (total - 1) as f64)
}

/// Adam training on `data` as configured. Calls `on_epoch` after every
/// epoch and returns the per-epoch history. The head is certified with
/// `train.certify_iters` power-iteration sweeps at the end.
pub fn train<T: Scalar>(
    model: &mut CorrVae<T>,
    data: &Dataset,
    cfg: &RunConfig,
    rng: &mut Rng,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::InvalidArgument("training needs at least two samples".into()));
    }
    if data.properties() != model.spec.properties() || data.pixels() != model.spec.pixels() {
        return Err(Error::InvalidArgument(
            "dataset does not match the model dimensions".into(),
        ));
    }
    let t = &cfg.train;
    let weights = ObjectiveWeights::<T>::from_config(cfg);
    let (lr, mask_lr) = (T::of(t.lr), T::of(t.mask_lr));
    let mut opt = Adam::new(lr);
    let batches_per_epoch = data.len().div_ceil(t.batch);
    let total_steps = t.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(t.epochs);
    let mut step = 0;
    for epoch in 1..=t.epochs {
        rng.shuffle(&mut order);
        let mut sum = [0.0f64; 8];
        let mut count = 0usize;
        for idx in order.chunks(t.batch).filter(|c| c.len() >= 2) {
            let tau = tau_schedule(t.tau_start, t.tau_end, step, total_steps);
            model.mask.tau = T::of(tau);
            model
                .head
                .refresh_spectral_until(t.power_iters, t.certify_iters, T::of(SPECTRAL_RTOL));
            let x = data.images::<T>(idx);
            let y = data.targets::<T>(idx);
            let noise = ObjectiveNoise::draw(model, idx.len(), rng)?;
            let tape = Tape::new();
            let bound = model.bind(&tape)?;
            let obj = model.objective(&bound, &x, &y, &noise, &weights).map_err(|e| match e {
                Error::NonFiniteLoss { term, .. } => Error::NonFiniteLoss { term, epoch, step },
                other => other,
            })?;
            obj.total.backward()?;
            let grads = bound.grads();
            drop(bound);
            opt.update_with(model, &grads, &|name| if name == "mask.logits" { mask_lr } else { lr });
            for (s, v) in sum.iter_mut().zip(obj.parts.values()) {
                *s += v.as_f64();
            }
            count += 1;
            step += 1;
        }
        let mean = sum.map(|s| s / count.max(1) as f64);
        let record = EpochRecord {
            epoch,
            tau: model.mask.tau.as_f64(),
            loss: LossBreakdown {
                recon: mean[0],
                prop_nll: mean[1],
                kl: mean[2],
                tc_zw: mean[3],
                tc_w: mean[4],
                l3: mean[5],
                mask_l1: mean[6],
                total: mean[7],
            },
        };
        on_epoch(&record);
        history.push(record);
    }
    model.head.refresh_spectral(t.certify_iters);
    model.mask.hard = true;
    Ok(history)
}
