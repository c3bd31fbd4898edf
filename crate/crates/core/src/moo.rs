//! Generation: turn property requirements into a latent code.
//!
//! Exact targets go through the head inverse and a regularized fit of `w`;
//! mixed requirements (values, ranges, max/min) are scalarized into one
//! weighted objective over `w` whose quadratic penalties are tightened by a
//! factor of ten per outer round. All searches run on the hard mask.

use std::path::Path;

use serde::{Serialize, Serializer};
use serde_json::{json, Map, Value};

use crate::config::{GenerateConfig, ZPolicy};
use crate::datagen::{measure, Image};
use crate::error::{Error, Result};
use crate::invhead::InvertibleHead;
use crate::maskpool::Aggregator;
use crate::model::CorrVae;
use crate::numcore::{Rng, Tape, Tensor};
use crate::Scalar;

/// What is asked of one property.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Requirement {
    Value(f64),
    /// Either bound may be infinite.
    Range {
        lo: f64,
        hi: f64,
    },
    Maximize,
    Minimize,
    Free,
}

impl Requirement {
    /// Distance of `f` from the feasible set; zero for the open-ended kinds.
    pub fn violation(&self, f: f64) -> f64 {
        match *self {
            Requirement::Value(c) => (f - c).abs(),
            Requirement::Range { lo, hi } => (f - hi).max(lo - f).max(0.0),
            _ => 0.0,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Requirement::Value(_) => "value",
            Requirement::Range { .. } => "range",
            Requirement::Maximize => "max",
            Requirement::Minimize => "min",
            Requirement::Free => "free",
        }
    }

    /// Same requirement after the affine map `v ↦ (v − lo) / (hi − lo)`.
    fn rescaled(&self, (lo, hi): (f64, f64)) -> Self {
        let span = hi - lo;
        let u = |v: f64| (v - lo) / span;
        match *self {
            Requirement::Value(c) => Requirement::Value(u(c)),
            Requirement::Range { lo: a, hi: b } => Requirement::Range { lo: u(a), hi: u(b) },
            other => other,
        }
    }
}

/// One requirement and one weight per property, plus the residual-code policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    pub names: Vec<String>,
    pub requirements: Vec<Requirement>,
    pub weights: Vec<f64>,
    /// Overrides `SolverOptions::z_policy` when set.
    pub z_policy: Option<ZPolicy>,
}

fn bound_from_json(v: Option<&Value>, default: f64, what: &str) -> Result<f64> {
    match v {
        None | Some(Value::Null) => Ok(default),
        Some(Value::Number(n)) => n
            .as_f64()
            .ok_or_else(|| Error::format("constraint spec", format!("bad number for {what}"))),
        Some(Value::String(s)) => match s.as_str() {
            "inf" | "+inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            other => other
                .parse()
                .map_err(|_| Error::format("constraint spec", format!("cannot parse {what} = `{other}`"))),
        },
        Some(other) => Err(Error::format(
            "constraint spec",
            format!("{what} must be a number, got {other}"),
        )),
    }
}

fn bound_to_json(v: f64) -> Value {
    if v == f64::INFINITY {
        json!("inf")
    } else if v == f64::NEG_INFINITY {
        json!("-inf")
    } else {
        json!(v)
    }
}

impl ConstraintSpec {
    /// All properties free, unit weights, the solver's `z` policy.
    pub fn free(names: &[String]) -> Self {
        Self {
            names: names.to_vec(),
            requirements: vec![Requirement::Free; names.len()],
            weights: vec![1.0; names.len()],
            z_policy: None,
        }
    }

    /// Every property pinned to a value.
    pub fn values(names: &[String], targets: &[f64]) -> Result<Self> {
        if names.len() != targets.len() {
            return Err(Error::InvalidArgument("one target per property is required".into()));
        }
        let mut spec = Self::free(names);
        spec.requirements = targets.iter().map(|&c| Requirement::Value(c)).collect();
        spec.validate()?;
        Ok(spec)
    }

    pub fn set(&mut self, name: &str, req: Requirement) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown property `{name}`")))?;
        self.requirements[i] = req;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.names.len();
        if self.requirements.len() != m || self.weights.len() != m {
            return Err(Error::InvalidArgument(
                "constraint spec needs one entry and one weight per property".into(),
            ));
        }
        if self.requirements.iter().all(|r| *r == Requirement::Free) {
            return Err(Error::InvalidArgument("constraint spec has no non-free entry".into()));
        }
        for (name, (req, &a)) in self.names.iter().zip(self.requirements.iter().zip(&self.weights)) {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "weight for `{name}` must be finite and non-negative"
                )));
            }
            match *req {
                Requirement::Value(c) if !c.is_finite() => {
                    return Err(Error::InvalidArgument(format!("value for `{name}` must be finite")));
                }
                Requirement::Range { lo, hi }
                    if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY =>
                {
                    return Err(Error::InvalidArgument(format!(
                        "range for `{name}` needs lo ≤ hi, got [{lo}, {hi}]"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Parses `{"z_policy": .., "properties": {"<name>": {"type": .., "c"|"lo"|"hi"|"weight": ..}}}`.
    /// Properties that are not mentioned are free.
    pub fn from_json_value(v: &Value, names: &[String]) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::format("constraint spec", "top level must be an object"))?;
        for k in obj.keys() {
            if k != "properties" && k != "z_policy" {
                return Err(Error::format("constraint spec", format!("unknown key `{k}`")));
            }
        }
        let mut spec = Self::free(names);
        if let Some(z) = obj.get("z_policy") {
            spec.z_policy = Some(serde_json::from_value(z.clone())?);
        }
        let props = obj
            .get("properties")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::format("constraint spec", "`properties` must be an object"))?;
        for (name, entry) in props {
            let i = names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::format("constraint spec", format!("unknown property `{name}`")))?;
            let e = entry
                .as_object()
                .ok_or_else(|| Error::format("constraint spec", format!("entry for `{name}` must be an object")))?;
            let kind = e
                .get("type")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::format("constraint spec", format!("entry for `{name}` needs a string `type`")))?;
            spec.requirements[i] = match kind {
                "value" => {
                    let c = e.get("c").ok_or_else(|| {
                        Error::format("constraint spec", format!("value entry for `{name}` needs `c`"))
                    })?;
                    Requirement::Value(bound_from_json(Some(c), f64::NAN, "c")?)
                }
                "range" => Requirement::Range {
                    lo: bound_from_json(e.get("lo"), f64::NEG_INFINITY, "lo")?,
                    hi: bound_from_json(e.get("hi"), f64::INFINITY, "hi")?,
                },
                "max" => Requirement::Maximize,
                "min" => Requirement::Minimize,
                "free" => Requirement::Free,
                other => {
                    return Err(Error::format(
                        "constraint spec",
                        format!("unknown type `{other}` for `{name}`"),
                    ))
                }
            };
            if let Some(w) = e.get("weight") {
                spec.weights[i] = bound_from_json(Some(w), 1.0, "weight")?;
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_json_str(s: &str, names: &[String]) -> Result<Self> {
        Self::from_json_value(&serde_json::from_str(s)?, names)
    }

    pub fn load(path: &Path, names: &[String]) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s, names)
    }

    pub fn to_json_value(&self) -> Value {
        let mut props = Map::new();
        for (name, (req, &a)) in self.names.iter().zip(self.requirements.iter().zip(&self.weights)) {
            let mut e = Map::new();
            e.insert("type".into(), json!(req.kind()));
            match *req {
                Requirement::Value(c) => {
                    e.insert("c".into(), json!(c));
                }
                Requirement::Range { lo, hi } => {
                    e.insert("lo".into(), bound_to_json(lo));
                    e.insert("hi".into(), bound_to_json(hi));
                }
                _ => {}
            }
            e.insert("weight".into(), json!(a));
            props.insert(name.clone(), Value::Object(e));
        }
        match self.z_policy {
            Some(z) => json!({"z_policy": z, "properties": props}),
            None => json!({"properties": props}),
        }
    }

    /// The spec in the model's `[0, 1]` property units.
    pub fn to_unit(&self, ranges: &[(f64, f64)]) -> Result<Self> {
        if ranges.len() != self.requirements.len() {
            return Err(Error::InvalidArgument("one range per property is required".into()));
        }
        let mut out = self.clone();
        for (r, &range) in out.requirements.iter_mut().zip(ranges) {
            *r = r.rescaled(range);
        }
        Ok(out)
    }

    pub fn violations(&self, achieved: &[f64]) -> Vec<f64> {
        self.requirements
            .iter()
            .zip(achieved)
            .map(|(r, &f)| r.violation(f))
            .collect()
    }
}

impl Serialize for ConstraintSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json_value().serialize(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub mu: f64,
    pub restarts: usize,
    /// Inner quasi-Newton iterations per restart and round.
    pub steps: usize,
    /// Length of the first trial step of every inner run.
    pub lr: f64,
    pub rounds: usize,
    pub invert_tol: f64,
    pub invert_max_iter: usize,
    /// Largest per-property violation, in solver units, still counted as converged.
    pub tol: f64,
    /// Residual code for specs that do not choose one.
    pub z_policy: ZPolicy,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self::from(&GenerateConfig::default())
    }
}

impl From<&GenerateConfig> for SolverOptions {
    fn from(g: &GenerateConfig) -> Self {
        Self {
            mu: g.mu,
            restarts: g.restarts,
            steps: g.steps,
            lr: g.lr,
            rounds: g.rounds,
            invert_tol: g.invert_tol,
            invert_max_iter: g.invert_max_iter,
            tol: 1e-2,
            z_policy: g.z_policy,
        }
    }
}

impl SolverOptions {
    fn check(&self) -> Result<()> {
        if self.restarts == 0 || self.rounds == 0 || self.steps == 0 {
            return Err(Error::InvalidArgument(
                "restarts, rounds and steps must be positive".into(),
            ));
        }
        if !(self.mu >= 0.0 && self.lr > 0.0 && self.tol >= 0.0) {
            return Err(Error::InvalidArgument(
                "mu, lr and tol must be non-negative (lr positive)".into(),
            ));
        }
        Ok(())
    }

    /// Penalty weight of outer round `k`.
    pub fn penalty(k: usize) -> f64 {
        10f64.powi(k as i32)
    }
}

/// Outcome of [`solve_exact`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExactSolution<T> {
    pub w_prime: Vec<T>,
    pub w_star: Vec<T>,
    /// `max |h(w* ⊙ M) − w′*|`.
    pub fit_error: T,
    /// Whether the fit error is below the solver tolerance.
    pub fit_converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationReport {
    pub w_star: Vec<f64>,
    pub w_prime: Vec<f64>,
    pub requested: ConstraintSpec,
    pub achieved_model: Vec<f64>,
    pub achieved_oracle: Option<Vec<f64>>,
    /// Per property, against `achieved_oracle` when present.
    pub violation: Vec<f64>,
    /// Weighted squared range violation `Σ αᵢ·dᵢ²` after each outer round, in solver units.
    pub round_violations: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

pub fn reports_csv(reports: &[GenerationReport]) -> String {
    let mut out = String::from("image,property,type,lo,hi,model,oracle,violation,converged\n");
    for (k, r) in reports.iter().enumerate() {
        for (i, name) in r.requested.names.iter().enumerate() {
            let req = r.requested.requirements[i];
            let (lo, hi) = match req {
                Requirement::Value(c) => (c, c),
                Requirement::Range { lo, hi } => (lo, hi),
                Requirement::Maximize => (f64::NAN, f64::INFINITY),
                Requirement::Minimize => (f64::NEG_INFINITY, f64::NAN),
                Requirement::Free => (f64::NEG_INFINITY, f64::INFINITY),
            };
            let oracle = r.achieved_oracle.as_ref().map_or(String::new(), |o| o[i].to_string());
            out.push_str(&format!(
                "{k},{name},{},{lo},{hi},{},{oracle},{},{}\n",
                req.kind(),
                r.achieved_model[i],
                r.violation[i],
                r.converged
            ));
        }
    }
    out
}

enum Goal<'a> {
    /// `‖h(w ⊙ M) − target‖²`.
    Fit(&'a [f64]),
    Spec(&'a ConstraintSpec),
}

struct Problem<'a, T> {
    head: &'a InvertibleHead<T>,
    aggregator: &'a Aggregator<T>,
    mask: &'a Tensor<T>,
    mu: T,
}

impl<T: Scalar> Problem<'_, T> {
    fn new<'a>(
        head: &'a InvertibleHead<T>,
        aggregator: &'a Aggregator<T>,
        mask: &'a Tensor<T>,
        mu: f64,
    ) -> Result<Problem<'a, T>> {
        let (l, m) = (aggregator.latents(), aggregator.properties());
        if mask.shape() != [l, m] || head.properties() != m {
            return Err(Error::ShapeMismatch {
                op: "generation problem",
                lhs: mask.shape().to_vec(),
                rhs: vec![l, m],
            });
        }
        if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::InvalidArgument("generation needs a hard (binary) mask".into()));
        }
        Ok(Problem {
            head,
            aggregator,
            mask,
            mu: T::of(mu),
        })
    }

    fn latents(&self) -> usize {
        self.aggregator.latents()
    }

    fn bridge(&self, w: &[T]) -> Result<Vec<T>> {
        Ok(self
            .aggregator
            .eval(&Tensor::row_vector(w.to_vec()), self.mask)?
            .into_data())
    }

    fn properties(&self, w: &[T]) -> Result<Vec<T>> {
        Ok(self.head.predict(&Tensor::row_vector(self.bridge(w)?))?.into_data())
    }

    fn value_and_grad(&self, goal: &Goal, w: &[T], kappa: T) -> Result<(T, Vec<T>)> {
        let tape = Tape::new();
        let wv = tape.param(Tensor::row_vector(w.to_vec()));
        let w_prime = self
            .aggregator
            .bind(&tape, false)
            .aggregate(wv, tape.constant(self.mask.clone()))?;
        let mut total = wv.square()?.sum()?.scale(self.mu)?;
        match goal {
            Goal::Fit(target) => {
                let t = Tensor::row_vector(target.iter().map(|&v| T::of(v)).collect());
                let fit = w_prime.sub(tape.constant(t))?.square()?.sum()?;
                total = total.add(fit.scale(kappa)?)?;
            }
            Goal::Spec(spec) => {
                let f = self.head.bind(&tape, false)?.predict(w_prime)?;
                for (j, (req, &a)) in spec.requirements.iter().zip(&spec.weights).enumerate() {
                    let a = T::of(a);
                    let fj = f.slice(1, j, 1)?;
                    let term = match *req {
                        Requirement::Value(c) => fj.offset(T::of(-c))?.square()?.scale(kappa * a)?,
                        Requirement::Range { lo, hi } => {
                            let mut pen = tape.constant(Tensor::zeros([1, 1]));
                            if hi.is_finite() {
                                pen = pen.add(fj.offset(T::of(-hi))?.relu()?.square()?)?;
                            }
                            if lo.is_finite() {
                                pen = pen.add(fj.neg()?.offset(T::of(lo))?.relu()?.square()?)?;
                            }
                            pen.scale(kappa * a)?
                        }
                        Requirement::Maximize => fj.scale(-a)?,
                        Requirement::Minimize => fj.scale(a)?,
                        Requirement::Free => continue,
                    };
                    total = total.add(term.sum()?)?;
                }
            }
        }
        total.backward()?;
        let g = wv.grad().unwrap_or_else(|| Tensor::zeros([1, w.len()]));
        Ok((total.item(), g.into_data()))
    }

    /// One restart: `rounds` inner runs with the penalty raised tenfold each time.
    fn run(&self, goal: &Goal, start: Vec<T>, opts: &SolverOptions) -> Result<Trajectory<T>> {
        let mut w = start;
        let mut iterations = 0;
        let mut round_violations = Vec::with_capacity(opts.rounds);
        let mut value = T::zero();
        for k in 0..opts.rounds {
            let kappa = T::of(SolverOptions::penalty(k));
            let mut f = |x: &[T]| self.value_and_grad(goal, x, kappa);
            let out = lbfgs(&mut f, w, opts.steps, T::of(opts.lr))?;
            w = out.x;
            value = out.value;
            iterations += out.iterations;
            if let Goal::Spec(spec) = goal {
                let f = self.properties(&w)?;
                round_violations.push(range_penalty(spec, &f));
            }
        }
        Ok(Trajectory {
            w,
            value,
            iterations,
            round_violations,
        })
    }

    fn best_of_restarts(&self, goal: &Goal, rng: &mut Rng, opts: &SolverOptions) -> Result<Trajectory<T>> {
        let l = self.latents();
        let mut best: Option<Trajectory<T>> = None;
        for r in 0..opts.restarts {
            let mut stream = rng.split(r as u64);
            let start = (0..l).map(|_| T::of(stream.normal())).collect();
            let t = self.run(goal, start, opts)?;
            if best.as_ref().is_none_or(|b| t.value < b.value) {
                best = Some(t);
            }
        }
        Ok(best.expect("at least one restart"))
    }
}

struct Trajectory<T> {
    w: Vec<T>,
    value: T,
    iterations: usize,
    round_violations: Vec<f64>,
}

/// `Σ αᵢ·dᵢ²` over range requirements, `dᵢ` the distance to the interval.
fn range_penalty<T: Scalar>(spec: &ConstraintSpec, f: &[T]) -> f64 {
    spec.requirements
        .iter()
        .zip(&spec.weights)
        .zip(f)
        .filter(|((r, _), _)| matches!(r, Requirement::Range { .. }))
        .map(|((r, a), &v)| a * r.violation(v.as_f64()).powi(2))
        .sum()
}

struct Minimum<T> {
    x: Vec<T>,
    value: T,
    iterations: usize,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Limited-memory BFGS with Armijo backtracking. Evaluation failures during
/// the line search (overflow far from the start) count as rejected steps.
fn lbfgs<T: Scalar>(
    f: &mut dyn FnMut(&[T]) -> Result<(T, Vec<T>)>,
    x0: Vec<T>,
    max_iter: usize,
    first_step: T,
) -> Result<Minimum<T>> {
    const MEMORY: usize = 8;
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    let mut hist: Vec<(Vec<T>, Vec<T>, T)> = Vec::new();
    let mut iterations = 0;
    let c1 = T::of(1e-4);
    while iterations < max_iter {
        let gnorm = dot(&g, &g).sqrt();
        if gnorm <= T::of(1e-12) {
            break;
        }
        // two-loop recursion
        let mut d: Vec<T> = g.iter().map(|&v| -v).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = *rho * dot(s, &d);
            for (di, &yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.last() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
            let b = *rho * dot(y, &d);
            for (di, &si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }
        let mut slope = dot(&g, &d);
        if slope >= T::zero() {
            hist.clear();
            d = g.iter().map(|&v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut step = if hist.is_empty() {
            first_step / d.iter().fold(T::zero(), |m, v| m.max(v.abs())).max(T::of(1e-300))
        } else {
            T::one()
        };
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<T> = x.iter().zip(&d).map(|(&a, &b)| a + step * b).collect();
            if let Ok((fn_, gn)) = f(&xn) {
                if fn_.is_finite() && fn_ <= fx + c1 * step * slope {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
            }
            step *= T::of(0.5);
        }
        iterations += 1;
        let Some((xn, fn_, gn)) = accepted else { break };
        let s: Vec<T> = xn.iter().zip(&x).map(|(&a, &b)| a - b).collect();
        let y: Vec<T> = gn.iter().zip(&g).map(|(&a, &b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > T::of(1e-12) * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > T::zero() {
            if hist.len() == MEMORY {
                hist.remove(0);
            }
            hist.push((s, y, T::one() / sy));
        }
        let decrease = fx - fn_;
        x = xn;
        g = gn;
        let scale = fx.abs().max(T::one());
        fx = fn_;
        if decrease <= T::epsilon() * scale && hist.is_empty() {
            break;
        }
    }
    debug_assert_eq!(x.len(), n);
    Ok(Minimum {
        x,
        value: fx,
        iterations,
    })
}

/// Exact targets `ŷ` (all `m` properties, solver units): `w′* = f⁻¹(ŷ)` by
/// fixed-point inversion, then `w* = argmin κ‖h(w ⊙ M) − w′*‖² + μ‖w‖²`
/// over restarts, with `κ = 10^k` in outer round `k`.
pub fn solve_exact<T: Scalar>(
    head: &InvertibleHead<T>,
    aggregator: &Aggregator<T>,
    mask_hard: &Tensor<T>,
    targets: &[f64],
    rng: &mut Rng,
    opts: &SolverOptions,
) -> Result<ExactSolution<T>> {
    opts.check()?;
    let problem = Problem::new(head, aggregator, mask_hard, opts.mu)?;
    if targets.len() != head.properties() || targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "solve_exact needs one finite target per property".into(),
        ));
    }
    let y = Tensor::row_vector(targets.iter().map(|&v| T::of(v)).collect());
    let inv = head.invert(&y, T::of(opts.invert_tol), opts.invert_max_iter)?;
    let w_prime = inv.w_prime.into_data();
    let target: Vec<f64> = w_prime.iter().map(|v| v.as_f64()).collect();
    let best = problem.best_of_restarts(&Goal::Fit(&target), rng, opts)?;
    let fit = problem.bridge(&best.w)?;
    let fit_error = fit
        .iter()
        .zip(&w_prime)
        .map(|(&a, &b)| (a - b).abs())
        .fold(T::zero(), T::max);
    Ok(ExactSolution {
        fit_converged: fit_error.as_f64() <= opts.tol,
        w_prime,
        w_star: best.w,
        fit_error,
        iterations: best.iterations,
    })
}

/// Weighted-sum search over `w` for a mixed spec (solver units). Value and
/// range penalties carry `κ = 10^k` in outer round `k`; max/min terms are
/// linear; `μ‖w‖²` keeps `w` near the prior.
pub fn solve_constrained<T: Scalar>(
    head: &InvertibleHead<T>,
    aggregator: &Aggregator<T>,
    mask_hard: &Tensor<T>,
    spec: &ConstraintSpec,
    rng: &mut Rng,
    opts: &SolverOptions,
) -> Result<GenerationReport> {
    opts.check()?;
    spec.validate()?;
    let problem = Problem::new(head, aggregator, mask_hard, opts.mu)?;
    if spec.requirements.len() != head.properties() {
        return Err(Error::InvalidArgument(
            "spec and head disagree on the number of properties".into(),
        ));
    }
    let best = problem.best_of_restarts(&Goal::Spec(spec), rng, opts)?;
    let w_prime = problem.bridge(&best.w)?;
    let achieved = head.predict(&Tensor::row_vector(w_prime.clone()))?.into_data();
    let achieved: Vec<f64> = achieved.iter().map(|v| v.as_f64()).collect();
    let violation = spec.violations(&achieved);
    if !best.value.is_finite() {
        return Err(Error::NonFinite {
            op: "solve_constrained",
        });
    }
    Ok(GenerationReport {
        w_star: best.w.iter().map(|v| v.as_f64()).collect(),
        w_prime: w_prime.iter().map(|v| v.as_f64()).collect(),
        requested: spec.clone(),
        converged: violation.iter().all(|&v| v <= opts.tol),
        achieved_model: achieved,
        achieved_oracle: None,
        violation,
        round_violations: best.round_violations,
        objective: best.value.as_f64(),
        iterations: best.iterations,
    })
}

pub struct Generation {
    pub images: Vec<Image>,
    pub reports: Vec<GenerationReport>,
}

fn residual_code(policy: ZPolicy, dz: usize, rng: &mut Rng) -> Vec<f64> {
    match policy {
        ZPolicy::Fixed => vec![0.0; dz],
        ZPolicy::Sampled => (0..dz).map(|_| rng.normal()).collect(),
    }
}

fn decode_image<T: Scalar>(model: &CorrVae<T>, w: &[f64], z: &[f64]) -> Result<Image> {
    let w = Tensor::row_vector(w.iter().map(|&v| T::of(v)).collect());
    let z = Tensor::row_vector(z.iter().map(|&v| T::of(v)).collect());
    let probs = model.decode(&w, &z)?;
    Image::from_probabilities(model.spec.side, probs.data())
}

fn oracle<T: Scalar>(model: &CorrVae<T>, img: &Image) -> Option<Vec<f64>> {
    let with_shape = model.spec.properties() == 5;
    measure(img).ok().map(|m| m.properties(with_shape))
}

/// Solves `spec` (raw property units) `batch` times on independent streams,
/// decodes each `w*` and measures it with the analytic oracle. Reported
/// values are in raw units. An image only counts as converged when the
/// model and the oracle (within two pixels, `2 / side`) both satisfy the spec.
pub fn generate<T: Scalar>(
    model: &CorrVae<T>,
    spec: &ConstraintSpec,
    batch: usize,
    rng: &mut Rng,
    opts: &SolverOptions,
) -> Result<Generation> {
    if spec.names != model.spec.property_names {
        return Err(Error::InvalidArgument("spec properties do not match the model".into()));
    }
    let ranges = &model.spec.property_ranges;
    let unit = spec.to_unit(ranges)?;
    let mask = model.hard_mask();
    let oracle_tol = 2.0 / model.spec.side as f64;
    let mut images = Vec::with_capacity(batch);
    let mut reports = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut stream = rng.split(b as u64);
        let mut r = solve_constrained(&model.head, &model.aggregator, &mask, &unit, &mut stream, opts)?;
        let z = residual_code(spec.z_policy.unwrap_or(opts.z_policy), model.spec.residual, &mut stream);
        let img = decode_image(model, &r.w_star, &z)?;
        r.requested = spec.clone();
        r.achieved_model = model.spec.denormalize(&r.achieved_model);
        r.achieved_oracle = oracle(model, &img);
        r.violation = spec.violations(r.achieved_oracle.as_ref().unwrap_or(&r.achieved_model));
        if r.achieved_oracle.is_none() || r.violation.iter().any(|&v| v > oracle_tol) {
            r.converged = false;
        }
        images.push(img);
        reports.push(r);
    }
    Ok(Generation { images, reports })
}

/// Which coordinate a traversal sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraverseTarget {
    W(usize),
    WPrime(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraversalStep {
    pub value: f64,
    pub w: Vec<f64>,
    pub image: Image,
    pub oracle: Option<Vec<f64>>,
}

/// Sweeps one coordinate over `[lo, hi]` in `steps` points from the base code
/// `w = base` (zeros if `None`), `z = 0`. A `w′` coordinate is moved by
/// refitting `w` to the shifted bridge vector, warm-started from the base.
pub fn traverse<T: Scalar>(
    model: &CorrVae<T>,
    target: TraverseTarget,
    (lo, hi): (f64, f64),
    steps: usize,
    base: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<Vec<TraversalStep>> {
    opts.check()?;
    let (l, m) = (model.spec.latents, model.spec.properties());
    match target {
        TraverseTarget::W(i) if i >= l => {
            return Err(Error::InvalidArgument(format!("w index {i} out of bounds (l = {l})")))
        }
        TraverseTarget::WPrime(j) if j >= m => {
            return Err(Error::InvalidArgument(format!("w′ index {j} out of bounds (m = {m})")))
        }
        _ => {}
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidArgument("traversal range must be finite".into()));
    }
    let base: Vec<f64> = match base {
        Some(b) if b.len() != l => return Err(Error::InvalidArgument("base code has the wrong length".into())),
        Some(b) => b.to_vec(),
        None => vec![0.0; l],
    };
    let points: Vec<f64> = if lo == hi || steps <= 1 {
        vec![lo]
    } else {
        (0..steps)
            .map(|k| lo + (hi - lo) * k as f64 / (steps - 1) as f64)
            .collect()
    };
    let mask = model.hard_mask();
    let problem = Problem::new(&model.head, &model.aggregator, &mask, opts.mu)?;
    let base_t: Vec<T> = base.iter().map(|&v| T::of(v)).collect();
    let base_prime: Vec<f64> = problem.bridge(&base_t)?.iter().map(|v| v.as_f64()).collect();
    let z = vec![0.0; model.spec.residual];
    points
        .into_iter()
        .map(|v| {
            let w = match target {
                TraverseTarget::W(i) => {
                    let mut w = base.clone();
                    w[i] = v;
                    w
                }
                TraverseTarget::WPrime(j) => {
                    let mut t = base_prime.clone();
                    t[j] = v;
                    let traj = problem.run(&Goal::Fit(&t), base_t.clone(), opts)?;
                    traj.w.iter().map(|x| x.as_f64()).collect()
                }
            };
            let image = decode_image(model, &w, &z)?;
            Ok(TraversalStep {
                value: v,
                oracle: oracle(model, &image),
                w,
                image,
            })
        })
        .collect()
}
