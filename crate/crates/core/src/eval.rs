//! Evaluation of a trained model: property prediction error, control error
//! of generated images under the analytic oracle, a histogram mutual
//! information score and recovery of the correlated property pairs.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::config::RunConfig;
use crate::datagen::{sample_at, DataOptions, Dataset};
use crate::error::{Error, Result};
use crate::maskpool::correlation_pairs;
use crate::model::CorrVae;
use crate::moo::{generate, ConstraintSpec, Requirement, SolverOptions};
use crate::numcore::{Rng, Tensor};
use crate::Scalar;

/// Slack around a requested range when judging it by oracle measurement
/// (raw units, about half a pixel at `N = 16`).
pub const RANGE_SLACK: f64 = 0.03;

/// Stream offset for battery draws, far from any training or test index.
const BATTERY_STREAM: u64 = 1 << 40;

fn squared_errors(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Vec<f64> {
    let (n, m) = (truth.rows(), truth.cols());
    (0..m)
        .map(|j| (0..n).map(|i| (pred.get(i, j) - truth.get(i, j)).powi(2)).sum::<f64>() / n as f64)
        .collect()
}

/// Per-property MSE of `f(h(mu_w(x) ⊙ M))` against the truth, on the `[0, 1]` scale.
pub fn prediction_mse<T: Scalar>(model: &CorrVae<T>, test: &Dataset) -> Result<Vec<f64>> {
    if test.is_empty() {
        return Err(Error::InvalidArgument(
            "prediction_mse needs a non-empty test set".into(),
        ));
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let pred = model.predict_properties(&test.images::<T>(&idx))?.cast::<f64>();
    Ok(squared_errors(&pred, &test.targets::<f64>(&idx)))
}

fn battery_sample(opts: &DataOptions, seed: u64, k: usize) -> Result<Vec<f64>> {
    Ok(sample_at(opts, seed, BATTERY_STREAM + k as u64)?.properties)
}

/// `n` all-value specs, each the property vector of a freshly drawn shape.
pub fn value_battery(opts: &DataOptions, n: usize, seed: u64) -> Result<Vec<ConstraintSpec>> {
    let names = opts.property_names();
    (0..n)
        .map(|k| ConstraintSpec::values(&names, &battery_sample(opts, seed, k)?))
        .collect()
}

/// `n` mixed specs: size and one position pinned to a drawn shape's values,
/// the other position (alternating x and y) asked to lie in a window of
/// width 0.1 around its drawn value, `x+y` left free.
pub fn range_battery(opts: &DataOptions, n: usize, seed: u64) -> Result<Vec<ConstraintSpec>> {
    let names = opts.property_names();
    let ranges = opts.property_ranges();
    (0..n)
        .map(|k| {
            let p = battery_sample(opts, seed, k)?;
            let (pinned, ranged) = if k % 2 == 0 { (1, 2) } else { (2, 1) };
            let (lo, hi) = ranges[ranged];
            let a = (p[ranged] - 0.05).clamp(lo, hi - 0.1);
            let mut spec = ConstraintSpec::free(&names);
            spec.requirements[0] = Requirement::Value(p[0]);
            spec.requirements[pinned] = Requirement::Value(p[pinned]);
            spec.requirements[ranged] = Requirement::Range { lo: a, hi: a + 0.1 };
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlResult {
    /// Per property, `[0, 1]` scale, over value entries only.
    pub mse: Vec<f64>,
    /// Images that came out blank; each is scored as an error of 1 per property.
    pub blank: usize,
}

/// One generated image per spec, measured by the oracle and compared with
/// the requested values.
pub fn control_mse<T: Scalar>(
    model: &CorrVae<T>,
    battery: &[ConstraintSpec],
    rng: &mut Rng,
    opts: &SolverOptions,
) -> Result<ControlResult> {
    if battery.is_empty() {
        return Err(Error::InvalidArgument("control battery is empty".into()));
    }
    let m = model.spec.properties();
    let mut sum = vec![0.0; m];
    let mut count = vec![0usize; m];
    let mut blank = 0;
    for (k, spec) in battery.iter().enumerate() {
        let g = generate(model, spec, 1, &mut rng.split(k as u64), opts)
            .map_err(|e| Error::InvalidArgument(format!("control spec {k}: {e}")))?;
        let report = &g.reports[0];
        let measured = report.achieved_oracle.as_ref().map(|o| model.spec.normalize(o));
        if measured.is_none() {
            blank += 1;
        }
        for (j, req) in spec.requirements.iter().enumerate() {
            if let Requirement::Value(c) = *req {
                let c = model.spec.normalize_one(j, c);
                sum[j] += measured.as_ref().map_or(1.0, |o| (o[j] - c).powi(2));
                count[j] += 1;
            }
        }
    }
    Ok(ControlResult {
        mse: sum
            .iter()
            .zip(&count)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect(),
        blank,
    })
}

/// Fraction of generated images whose oracle measurement satisfies every
/// range entry of its spec within [`RANGE_SLACK`].
pub fn range_satisfaction<T: Scalar>(
    model: &CorrVae<T>,
    battery: &[ConstraintSpec],
    batch: usize,
    rng: &mut Rng,
    opts: &SolverOptions,
) -> Result<f64> {
    if battery.is_empty() || batch == 0 {
        return Err(Error::InvalidArgument("range battery is empty".into()));
    }
    let mut ok = 0usize;
    for (k, spec) in battery.iter().enumerate() {
        let g = generate(model, spec, batch, &mut rng.split(k as u64), opts)?;
        for r in &g.reports {
            let Some(o) = &r.achieved_oracle else { continue };
            let inside = spec.requirements.iter().zip(o).all(|(req, &v)| match *req {
                Requirement::Range { lo, hi } => v >= lo - RANGE_SLACK && v <= hi + RANGE_SLACK,
                _ => true,
            });
            ok += inside as usize;
        }
    }
    Ok(ok as f64 / (battery.len() * batch) as f64)
}

/// Pairwise normalized mutual information, `values[i][j] = NMI(a_i, b_j)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiMatrix {
    pub values: Vec<Vec<f64>>,
    /// Entries set to 0 because one side was constant.
    pub degenerate: Vec<(usize, usize)>,
}

/// Equal-frequency bins: a value lands in bin `⌊bins · #{v' < v} / n⌋`, so ties
/// share a bin and any strictly increasing transform leaves the binning unchanged.
fn bin_indices(col: &[f64], bins: usize) -> Option<Vec<usize>> {
    if col.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let n = col.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
    let mut out = vec![0; n];
    let mut below = 0;
    for k in 0..n {
        if k > 0 && col[order[k]] != col[order[k - 1]] {
            below = k;
        }
        out[order[k]] = (bins * below / n).min(bins - 1);
    }
    if out.iter().all(|&b| b == 0) {
        return None;
    }
    Some(out)
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Histogram MI between two binned columns, divided by the
/// smaller marginal entropy.
fn normalized_mi(a: &[usize], b: &[usize], bins: usize) -> f64 {
    let n = a.len() as f64;
    let mut joint = vec![0usize; bins * bins];
    let mut ca = vec![0usize; bins];
    let mut cb = vec![0usize; bins];
    for (&i, &j) in a.iter().zip(b) {
        joint[i * bins + j] += 1;
        ca[i] += 1;
        cb[j] += 1;
    }
    let (ha, hb) = (entropy(&ca, n), entropy(&cb, n));
    let mi = ha + hb - entropy(&joint, n);
    let denom = ha.min(hb);
    if denom <= 0.0 {
        return 0.0;
    }
    (mi / denom).clamp(0.0, 1.0)
}

fn columns(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.cols())
        .map(|j| (0..t.rows()).map(|i| t.get(i, j)).collect())
        .collect()
}

/// NMI between every column of `a` and every column of `b` (same rows).
pub fn mi_matrix(a: &Tensor<f64>, b: &Tensor<f64>, bins: usize) -> Result<MiMatrix> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "mi_matrix",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.rows() < 1000 || bins < 8 {
        return Err(Error::InvalidArgument(
            "MI estimation needs at least 1000 samples and 8 bins".into(),
        ));
    }
    let ba: Vec<_> = columns(a).iter().map(|c| bin_indices(c, bins)).collect();
    let bb: Vec<_> = columns(b).iter().map(|c| bin_indices(c, bins)).collect();
    let mut degenerate = Vec::new();
    let values = ba
        .iter()
        .enumerate()
        .map(|(i, x)| {
            bb.iter()
                .enumerate()
                .map(|(j, y)| match (x, y) {
                    (Some(x), Some(y)) => normalized_mi(x, y, bins),
                    _ => {
                        degenerate.push((i, j));
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    Ok(MiMatrix { values, degenerate })
}

/// `‖NMI(w′, y) − target‖²_F` together with the matrix itself.
pub fn avg_mi(w_prime: &Tensor<f64>, y: &Tensor<f64>, bins: usize, target: &[Vec<f64>]) -> Result<(f64, MiMatrix)> {
    let mi = mi_matrix(w_prime, y, bins)?;
    let m = mi.values.len();
    if target.len() != m || target.iter().any(|r| r.len() != y.cols()) {
        return Err(Error::InvalidArgument("avgMI target has the wrong shape".into()));
    }
    let score = mi
        .values
        .iter()
        .zip(target)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, t)| (x - t).powi(2)))
        .sum();
    Ok((score, mi))
}

/// Binary property-level target: ones on the diagonal and on the given pairs.
pub fn binary_target(m: usize, pairs: &BTreeSet<(usize, usize)>) -> Vec<Vec<f64>> {
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| (i == j || pairs.contains(&(i.min(j), i.max(j)))) as u8 as f64)
                .collect()
        })
        .collect()
}

/// Graded property-level target: the NMI the properties have with each
/// other, i.e. the score a bridge code equal to `y` would get.
pub fn data_target(y: &Tensor<f64>, bins: usize) -> Result<Vec<Vec<f64>>> {
    Ok(mi_matrix(y, y, bins)?.values)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskRecovery {
    pub precision: f64,
    pub recall: f64,
    pub recovered: BTreeSet<(usize, usize)>,
    pub expected: BTreeSet<(usize, usize)>,
}

/// Pair-level comparison of a hard mask with the expected correlated pairs.
/// An empty recovered set has precision 1 by convention.
pub fn mask_recovery<T: Scalar>(hard: &Tensor<T>, expected: &BTreeSet<(usize, usize)>) -> Result<MaskRecovery> {
    let recovered = correlation_pairs(hard)?;
    let hits = recovered.intersection(expected).count() as f64;
    let precision = if recovered.is_empty() {
        1.0
    } else {
        hits / recovered.len() as f64
    };
    let recall = if expected.is_empty() {
        1.0
    } else {
        hits / expected.len() as f64
    };
    Ok(MaskRecovery {
        precision,
        recall,
        recovered,
        expected: expected.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub names: Vec<String>,
    pub prediction_mse: Vec<f64>,
    pub control_mse: Vec<f64>,
    pub control_blank: usize,
    pub range_satisfaction: f64,
    /// Against the graded target of [`data_target`].
    pub avg_mi: f64,
    /// Against the binary target of [`binary_target`].
    pub avg_mi_binary: f64,
    pub mi: MiMatrix,
    pub mask_precision: f64,
    pub mask_recall: f64,
    pub recovered_pairs: BTreeSet<(usize, usize)>,
    pub expected_pairs: BTreeSet<(usize, usize)>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `metric,property,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,property,value\n");
        for (name, (p, c)) in self.names.iter().zip(self.prediction_mse.iter().zip(&self.control_mse)) {
            out.push_str(&format!("prediction_mse,{name},{p}\ncontrol_mse,{name},{c}\n"));
        }
        for (k, v) in [
            ("range_satisfaction", self.range_satisfaction),
            ("avg_mi", self.avg_mi),
            ("avg_mi_binary", self.avg_mi_binary),
            ("mask_precision", self.mask_precision),
            ("mask_recall", self.mask_recall),
            ("control_blank", self.control_blank as f64),
        ] {
            out.push_str(&format!("{k},,{v}\n"));
        }
        out
    }

    /// MI matrix with `w′` rows and property columns.
    pub fn mi_csv(&self) -> String {
        let mut out = format!("w_prime,{}\n", self.names.join(","));
        for (name, row) in self.names.iter().zip(&self.mi.values) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }
}

/// Runs every metric. `expected` are the correlated pairs of the data.
pub fn evaluate<T: Scalar>(
    model: &CorrVae<T>,
    test: &Dataset,
    expected: &BTreeSet<(usize, usize)>,
    cfg: &RunConfig,
    rng: &mut Rng,
) -> Result<EvalReport> {
    let opts = SolverOptions::from(&cfg.generate);
    let data_opts = DataOptions {
        side: model.spec.side,
        with_shape: test.with_shape(),
    };
    let bins = cfg.eval.bins;
    let prediction = prediction_mse(model, test)?;

    let idx: Vec<usize> = (0..test.len()).collect();
    let (mu_w, ..) = model.encode(&test.images::<T>(&idx))?;
    let w_prime = model.bridge(&mu_w)?.cast::<f64>();
    let y = test.targets::<f64>(&idx);
    let (avg, mi) = avg_mi(&w_prime, &y, bins, &data_target(&y, bins)?)?;
    let (avg_binary, _) = avg_mi(&w_prime, &y, bins, &binary_target(y.cols(), expected))?;

    let recovery = mask_recovery(&model.hard_mask(), expected)?;
    let values = value_battery(&data_opts, cfg.eval.battery, cfg.seed)?;
    let control = control_mse(model, &values, &mut rng.split(1), &opts)?;
    let ranges = range_battery(
        &data_opts,
        cfg.eval.battery.div_ceil(8).max(1),
        cfg.seed.wrapping_add(1),
    )?;
    let satisfied = range_satisfaction(model, &ranges, 8, &mut rng.split(2), &opts)?;
    Ok(EvalReport {
        names: model.spec.property_names.clone(),
        prediction_mse: prediction,
        control_mse: control.mse,
        control_blank: control.blank,
        range_satisfaction: satisfied,
        avg_mi: avg,
        avg_mi_binary: avg_binary,
        mi,
        mask_precision: recovery.precision,
        mask_recall: recovery.recall,
        recovered_pairs: recovery.recovered,
        expected_pairs: recovery.expected,
    })
}
