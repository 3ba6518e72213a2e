//! Falsification checks for the dissipation and growth hypotheses, and the
//! closed-form constants that follow from them.
//!
//! A check evaluates the residual of an inequality on `budget` sampled pairs
//! (φ, v) and reports the most violating one. A verdict of
//! [`Verdict::NoViolationFound`] is evidence, never proof.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::format::{sig17, ReportRow};
use crate::functionals::{Functional, Gain, GrowthMatrix, HypothesisConstants};
use crate::histories::{norm, random_history, HistoryFunction};
use crate::mix_seed;
use crate::systems::DelaySystem;

/// Normalized residuals above this value count as violations.
pub const CHECK_TOLERANCE: f64 = 1e-9;

pub const EVIDENCE_NOTE: &str = "no violation found is evidence, not proof";

/// History sup-norm scales of the stratified sampler.
pub const NORM_SCALES: [f64; 3] = [0.1, 1.0, 10.0];
/// Input magnitudes of the stratified sampler.
pub const INPUT_SCALES: [f64; 4] = [0.0, 0.1, 1.0, 10.0];
/// Fourier mode counts (roughness) of the stratified sampler.
pub const MODE_COUNTS: [usize; 3] = [0, 2, 8];
pub const STRATA: usize = NORM_SCALES.len() * INPUT_SCALES.len() * MODE_COUNTS.len();

/// A sampled history and input value.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub phi: HistoryFunction,
    pub v: Vec<f64>,
}

/// Deterministic source of samples: `sample(i)` depends only on `i` and the
/// sampler's own parameters.
pub trait Sampler: Sync {
    fn sample(&self, index: usize) -> Sample;

    fn describe(&self) -> String;
}

/// Cycles through every combination of norm scale, input scale and mode
/// count; within a stratum the history shape and input direction are random.
#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedSampler {
    seed: u64,
    dim: usize,
    input_dim: usize,
    delay: f64,
}

impl StratifiedSampler {
    pub fn new(seed: u64, dim: usize, input_dim: usize, delay: f64) -> Self {
        Self {
            seed,
            dim,
            input_dim,
            delay,
        }
    }

    pub fn for_system(seed: u64, sys: &DelaySystem) -> Self {
        Self::new(seed, sys.state_dim(), sys.input_dim(), sys.delay())
    }

    /// (history norm, input norm, modes) of the stratum containing `index`.
    pub fn stratum(index: usize) -> (f64, f64, usize) {
        let j = index % STRATA;
        let n = NORM_SCALES.len();
        let m = INPUT_SCALES.len();
        (NORM_SCALES[j % n], INPUT_SCALES[(j / n) % m], MODE_COUNTS[j / (n * m)])
    }
}

impl Sampler for StratifiedSampler {
    fn sample(&self, index: usize) -> Sample {
        let (scale, input, modes) = Self::stratum(index);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, index as u64));
        let phi = random_history(rng.gen(), self.dim, self.delay, scale, modes);
        let mut v: Vec<f64> = (0..self.input_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let len = norm(&v);
        if input == 0.0 || len == 0.0 {
            v.iter_mut().for_each(|x| *x = 0.0);
        } else {
            v.iter_mut().for_each(|x| *x *= input / len);
        }
        Sample { phi, v }
    }

    fn describe(&self) -> String {
        format!("stratified(seed={}, strata={STRATA})", self.seed)
    }
}

/// s·φ for s on a geometric ladder from `s_min` to `s_max`, with a fixed
/// input value. Index i uses rung i mod `steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFamily {
    base: HistoryFunction,
    input: Vec<f64>,
    s_min: f64,
    s_max: f64,
    steps: usize,
}

impl ScalingFamily {
    pub fn new(base: HistoryFunction, input: Vec<f64>, s_min: f64, s_max: f64, steps: usize) -> Result<Self> {
        if !(s_min > 0.0 && s_max >= s_min && s_max.is_finite()) || steps == 0 {
            return Err(Error::Contract(format!(
                "scaling ladder needs 0 < s_min ≤ s_max and steps ≥ 1, got {s_min}, {s_max}, {steps}"
            )));
        }
        Ok(Self {
            base,
            input,
            s_min,
            s_max,
            steps,
        })
    }

    pub fn scale(&self, index: usize) -> f64 {
        if self.steps == 1 {
            return self.s_min;
        }
        let k = (index % self.steps) as f64 / (self.steps - 1) as f64;
        self.s_min * (self.s_max / self.s_min).powf(k)
    }
}

impl Sampler for ScalingFamily {
    fn sample(&self, index: usize) -> Sample {
        Sample {
            phi: self.base.scaled(self.scale(index)),
            v: self.input.clone(),
        }
    }

    fn describe(&self) -> String {
        format!("scaling(s∈[{}, {}], steps={})", self.s_min, self.s_max, self.steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hypothesis {
    /// a̲|φ(0)|^ρ ≤ V(φ) ≤ ā‖φ‖^ρ
    Sandwich,
    /// D⁺V(φ, f(φ,v)) ≤ −a|φ(0)|² + c‖φ‖² + γ(|v|)
    PointwiseDissipation,
    /// φ(0)ᵀP f(φ,v) ≤ σ(‖φ‖² + γ(|v|))
    RightGrowth,
    /// φ(0)ᵀP f(φ,v) ≥ −σ(‖φ‖² + γ(|v|))
    LeftGrowth,
    /// D⁺V(φ, f(φ,v)) ≤ a·α(‖φ‖) + γ(|v|) + c
    RfcGrowth,
}

impl Hypothesis {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Sandwich => "sandwich",
            Self::PointwiseDissipation => "pointwise-dissipation",
            Self::RightGrowth => "right-growth",
            Self::LeftGrowth => "left-growth",
            Self::RfcGrowth => "rfc-growth",
        }
    }

    pub fn inequality(self) -> &'static str {
        match self {
            Self::Sandwich => "a̲|φ(0)|^ρ ≤ V(φ) ≤ ā‖φ‖^ρ",
            Self::PointwiseDissipation => "D⁺V(φ,f(φ,v)) ≤ −a|φ(0)|² + c‖φ‖² + γ(|v|)",
            Self::RightGrowth => "φ(0)ᵀPf(φ,v) ≤ σ(‖φ‖² + γ(|v|))",
            Self::LeftGrowth => "φ(0)ᵀPf(φ,v) ≥ −σ(‖φ‖² + γ(|v|))",
            Self::RfcGrowth => "D⁺V(φ,f(φ,v)) ≤ a·α(‖φ‖) + γ(|v|) + c",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    NoViolationFound,
    Violated,
}

impl Verdict {
    pub fn tag(self) -> &'static str {
        match self {
            Self::NoViolationFound => "no-violation-found",
            Self::Violated => "violated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub index: usize,
    pub phi: HistoryFunction,
    pub v: Vec<f64>,
    /// Raw (unnormalized) residual at the witness.
    pub residual: f64,
}

/// Outcome of a falsification check.
///
/// The margin of a sample is its residual divided by one plus the sum of the
/// magnitudes of the compared terms, so that the tolerance is meaningful
/// across the norm scales of the sampler. `violated ⇔ worst_margin >
/// tolerance`.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub hypothesis: Hypothesis,
    pub sampler: String,
    pub budget: usize,
    pub samples: usize,
    pub skipped: usize,
    pub worst_margin: f64,
    pub worst_residual: f64,
    pub worst_index: Option<usize>,
    pub tolerance: f64,
    pub witness: Option<Witness>,
    pub verdict: Verdict,
}

impl CheckReport {
    pub fn violated(&self) -> bool {
        self.verdict == Verdict::Violated
    }

    pub fn rows(&self, item: &str) -> Vec<ReportRow> {
        let sec = "check";
        let item = format!("{item}:{}", self.hypothesis.tag());
        let mut rows = vec![
            ReportRow::new(sec, &item, "inequality", self.hypothesis.inequality()),
            ReportRow::new(sec, &item, "sampler", self.sampler.clone()),
            ReportRow::new(sec, &item, "budget", self.budget.to_string()),
            ReportRow::new(sec, &item, "samples", self.samples.to_string()),
            ReportRow::new(sec, &item, "skipped", self.skipped.to_string()),
            ReportRow::number(sec, &item, "worst_margin", self.worst_margin),
            ReportRow::number(sec, &item, "worst_residual", self.worst_residual),
            ReportRow::number(sec, &item, "tolerance", self.tolerance),
            ReportRow::new(sec, &item, "verdict", self.verdict.tag()),
            ReportRow::new(sec, &item, "note", EVIDENCE_NOTE),
        ];
        if let Some(w) = &self.witness {
            rows.push(ReportRow::new(sec, &item, "witness_index", w.index.to_string()));
            rows.push(ReportRow::new(sec, &item, "witness_phi0", join(w.phi.node_value(w.phi.len() - 1))));
            rows.push(ReportRow::number(sec, &item, "witness_norm", w.phi.sup_norm()));
            rows.push(ReportRow::new(sec, &item, "witness_v", join(&w.v)));
        }
        rows
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[{}] {}", self.hypothesis.tag(), self.hypothesis.inequality());
        let _ = writeln!(
            s,
            "  sampler {} budget {} samples {} skipped {}",
            self.sampler, self.budget, self.samples, self.skipped
        );
        let _ = writeln!(
            s,
            "  worst margin {} (residual {}), tolerance {}",
            sig17(self.worst_margin),
            sig17(self.worst_residual),
            self.tolerance
        );
        let _ = writeln!(s, "  verdict: {}", self.verdict.tag());
        if let Some(w) = &self.witness {
            let _ = writeln!(
                s,
                "  witness #{}: φ(0) = [{}], ‖φ‖ = {}, v = [{}]",
                w.index,
                join(w.phi.node_value(w.phi.len() - 1)),
                sig17(w.phi.sup_norm()),
                join(&w.v)
            );
        }
        let _ = writeln!(s, "  ({EVIDENCE_NOTE})");
        s
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| sig17(*x)).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone)]
struct Acc {
    samples: usize,
    skipped: usize,
    // (normalized margin, index, raw residual)
    best: Option<(f64, usize, f64)>,
    error: Option<(usize, Error)>,
}

impl Acc {
    fn empty() -> Self {
        Self {
            samples: 0,
            skipped: 0,
            best: None,
            error: None,
        }
    }

    fn merge(mut self, other: Self) -> Self {
        self.samples += other.samples;
        self.skipped += other.skipped;
        self.best = match (self.best, other.best) {
            (Some(a), Some(b)) => Some(if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a }),
            (a, b) => a.or(b),
        };
        self.error = match (self.error, other.error) {
            (Some(a), Some(b)) => Some(if b.0 < a.0 { b } else { a }),
            (a, b) => a.or(b),
        };
        self
    }
}

/// Evaluates `residual` on samples 0..budget in parallel. The closure
/// returns (residual, scale), or `None` to skip a sample.
fn run_check<F>(hypothesis: Hypothesis, sampler: &dyn Sampler, budget: usize, residual: F) -> Result<CheckReport>
where
    F: Fn(&Sample) -> Result<Option<(f64, f64)>> + Sync,
{
    if budget == 0 {
        return Err(Error::Contract("budget must be ≥ 1".into()));
    }
    let acc = (0..budget)
        .into_par_iter()
        .map(|i| {
            let s = sampler.sample(i);
            let mut acc = Acc::empty();
            match residual(&s) {
                Ok(Some((r, scale))) if r.is_finite() && scale.is_finite() => {
                    acc.samples = 1;
                    acc.best = Some((r / (1.0 + scale.abs()), i, r));
                }
                Ok(_) => acc.skipped = 1,
                Err(e) => acc.error = Some((i, e)),
            }
            acc
        })
        .reduce(Acc::empty, Acc::merge);
    if let Some((_, e)) = acc.error {
        return Err(e);
    }
    let (worst_margin, worst_index, worst_residual) = match acc.best {
        Some((m, i, r)) => (m, Some(i), r),
        None => (f64::NEG_INFINITY, None, f64::NEG_INFINITY),
    };
    let verdict = if worst_margin > CHECK_TOLERANCE {
        Verdict::Violated
    } else {
        Verdict::NoViolationFound
    };
    let witness = match (verdict, worst_index) {
        (Verdict::Violated, Some(index)) => {
            let s = sampler.sample(index);
            Some(Witness {
                index,
                phi: s.phi,
                v: s.v,
                residual: worst_residual,
            })
        }
        _ => None,
    };
    Ok(CheckReport {
        hypothesis,
        sampler: sampler.describe(),
        budget,
        samples: acc.samples,
        skipped: acc.skipped,
        worst_margin,
        worst_residual,
        worst_index,
        tolerance: CHECK_TOLERANCE,
        witness,
        verdict,
    })
}

fn current(phi: &HistoryFunction) -> &[f64] {
    phi.node_value(phi.len() - 1)
}

// f(φ, v), or None when the field is non-finite (the sample is skipped).
fn field(sys: &DelaySystem, s: &Sample) -> Option<Vec<f64>> {
    let w = sys.eval(&s.phi, &s.v);
    (w.len() == sys.state_dim() && w.iter().all(|x| x.is_finite())).then_some(w)
}

/// Residual max{a̲|φ(0)|^ρ − V(φ), V(φ) − ā‖φ‖^ρ}; the lower part is
/// skipped when `a_lower` is `None`.
pub fn check_sandwich(
    v: &Functional,
    a_lower: Option<f64>,
    a_upper: f64,
    rho: f64,
    sampler: &dyn Sampler,
    budget: usize,
) -> Result<CheckReport> {
    run_check(Hypothesis::Sandwich, sampler, budget, |s| {
        let val = v.eval(&s.phi)?;
        let upper = a_upper * s.phi.sup_norm().powf(rho);
        let lower = a_lower.map(|lo| lo * norm(current(&s.phi)).powf(rho)).unwrap_or(0.0);
        let mut r = val - upper;
        if a_lower.is_some() {
            r = r.max(lower - val);
        }
        Ok(Some((r, val.abs() + upper + lower)))
    })
}

/// Residual D⁺V(φ, f(φ,v)) + a|φ(0)|² − c‖φ‖² − γ(|v|). Samples whose field
/// value is not finite are skipped.
#[allow(clippy::too_many_arguments)]
pub fn check_pointwise_dissipation(
    sys: &DelaySystem,
    v: &Functional,
    a: f64,
    c: f64,
    gamma: &Gain,
    sampler: &dyn Sampler,
    budget: usize,
) -> Result<CheckReport> {
    run_check(Hypothesis::PointwiseDissipation, sampler, budget, |s| {
        let Some(w) = field(sys, s) else { return Ok(None) };
        let d = v.driver_derivative(&s.phi, &w)?;
        let x0 = norm(current(&s.phi)).powi(2);
        let sup = s.phi.sup_norm().powi(2);
        let g = gamma.eval(norm(&s.v));
        Ok(Some((d + a * x0 - c * sup - g, d.abs() + a * x0 + c * sup + g)))
    })
}

fn growth_terms(sys: &DelaySystem, p: &GrowthMatrix, sigma: f64, gamma: &Gain, s: &Sample) -> Option<(f64, f64)> {
    let w = field(sys, s)?;
    let form = p.form(current(&s.phi), &w);
    let bound = sigma * (s.phi.sup_norm().powi(2) + gamma.eval(norm(&s.v)));
    Some((form, bound))
}

/// Residual φ(0)ᵀPf(φ,v) − σ(‖φ‖² + γ(|v|)).
pub fn check_right_growth(
    sys: &DelaySystem,
    p: &GrowthMatrix,
    sigma: f64,
    gamma: &Gain,
    sampler: &dyn Sampler,
    budget: usize,
) -> Result<CheckReport> {
    run_check(Hypothesis::RightGrowth, sampler, budget, |s| {
        Ok(growth_terms(sys, p, sigma, gamma, s).map(|(form, bound)| (form - bound, form.abs() + bound)))
    })
}

/// Residual −σ(‖φ‖² + γ(|v|)) − φ(0)ᵀPf(φ,v).
pub fn check_left_growth(
    sys: &DelaySystem,
    p: &GrowthMatrix,
    sigma: f64,
    gamma: &Gain,
    sampler: &dyn Sampler,
    budget: usize,
) -> Result<CheckReport> {
    run_check(Hypothesis::LeftGrowth, sampler, budget, |s| {
        Ok(growth_terms(sys, p, sigma, gamma, s).map(|(form, bound)| (-bound - form, form.abs() + bound)))
    })
}

/// Residual D⁺V(φ, f(φ,v)) − a·α(‖φ‖) − γ(|v|) − c.
#[allow(clippy::too_many_arguments)]
pub fn check_rfc_growth(
    sys: &DelaySystem,
    v: &Functional,
    alpha: &Gain,
    a: f64,
    gamma: &Gain,
    c: f64,
    sampler: &dyn Sampler,
    budget: usize,
) -> Result<CheckReport> {
    run_check(Hypothesis::RfcGrowth, sampler, budget, |s| {
        let Some(w) = field(sys, s) else { return Ok(None) };
        let d = v.driver_derivative(&s.phi, &w)?;
        let growth = a * alpha.eval(s.phi.sup_norm());
        let g = gamma.eval(norm(&s.v));
        Ok(Some((d - growth - g - c, d.abs() + growth + g + c)))
    })
}

/// Sampled estimate of the smallest a for which D⁺V ≤ a·α(‖φ‖) + γ(|v|) + c.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEstimate {
    /// max over samples of (D⁺V − γ(|v|) − c)/α(‖φ‖); may be negative.
    pub rate: f64,
    pub samples: usize,
    pub skipped: usize,
}

impl RateEstimate {
    /// A positive rate usable in [`rfc_bound`]: the estimate, slightly
    /// inflated, but never below `floor`.
    pub fn admissible(&self, floor: f64) -> f64 {
        (self.rate.abs() * 1e-6 + self.rate).max(floor)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_rfc_rate(
    sys: &DelaySystem,
    v: &Functional,
    alpha: &Gain,
    gamma: &Gain,
    c: f64,
    sampler: &dyn Sampler,
    budget: usize,
) -> Result<RateEstimate> {
    let r = run_check(Hypothesis::RfcGrowth, sampler, budget, |s| {
        let growth = alpha.eval(s.phi.sup_norm());
        if !(growth > 0.0) {
            return Ok(None);
        }
        let Some(w) = field(sys, s) else { return Ok(None) };
        let d = v.driver_derivative(&s.phi, &w)?;
        let ratio = (d - gamma.eval(norm(&s.v)) - c) / growth;
        // Scale 0 keeps the ratio itself as the margin.
        Ok(Some((ratio, 0.0)))
    })?;
    Ok(RateEstimate {
        rate: r.worst_residual,
        samples: r.samples,
        skipped: r.skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginKind {
    /// LKF-wise dissipation with a history term c‖φ‖^ρ.
    LkfWise,
    RightGrowth,
    LeftGrowth,
}

impl MarginKind {
    pub fn tag(self) -> &'static str {
        match self {
            Self::LkfWise => "lkf-wise",
            Self::RightGrowth => "right-growth",
            Self::LeftGrowth => "left-growth",
        }
    }
}

/// Closed-form constants for one hypothesis set. Fields that do not apply to
/// `kind` are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginReport {
    pub kind: MarginKind,
    pub delay: f64,
    /// Echo of the constants the margin was computed from.
    pub inputs: Vec<(&'static str, f64)>,
    /// Largest admissible history-term strength c.
    pub c_bar: f64,
    pub epsilon: Option<f64>,
    /// Factor multiplying γ in the dissipation of W = V + εV₀.
    pub gamma_factor: Option<f64>,
    /// Decay rate (c̄ − c)/(ā + εp_M) of W.
    pub w_rate: Option<f64>,
    pub q: Option<u64>,
    pub horizon: Option<f64>,
    pub lambda_min: Option<f64>,
    pub lambda_star: Option<f64>,
    /// Factor multiplying √γ(s) in the ISS gain.
    pub mu_coefficient: Option<f64>,
    /// ln(1/λ*)/T.
    pub decay: Option<f64>,
    /// 1 − c·e^{aΔ}(1+ε)/(a̲a).
    pub xi: Option<f64>,
}

impl MarginReport {
    fn empty(kind: MarginKind, delay: f64, inputs: Vec<(&'static str, f64)>, c_bar: f64) -> Self {
        Self {
            kind,
            delay,
            inputs,
            c_bar,
            epsilon: None,
            gamma_factor: None,
            w_rate: None,
            q: None,
            horizon: None,
            lambda_min: None,
            lambda_star: None,
            mu_coefficient: None,
            decay: None,
            xi: None,
        }
    }

    /// Computed outputs as (name, value) pairs, in a fixed order.
    pub fn outputs(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("c_bar", self.c_bar)];
        let optional = [
            ("epsilon", self.epsilon),
            ("gamma_factor", self.gamma_factor),
            ("w_rate", self.w_rate),
            ("q", self.q.map(|q| q as f64)),
            ("T", self.horizon),
            ("lambda_min", self.lambda_min),
            ("lambda_star", self.lambda_star),
            ("mu_coefficient", self.mu_coefficient),
            ("decay", self.decay),
            ("xi", self.xi),
        ];
        out.extend(optional.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        out
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        let item = self.kind.tag();
        let mut rows = vec![ReportRow::number("margin", item, "delay", self.delay)];
        for (k, v) in &self.inputs {
            rows.push(ReportRow::number("margin", item, &format!("input.{k}"), *v));
        }
        for (k, v) in self.outputs() {
            if k == "q" {
                rows.push(ReportRow::new("margin", item, k, self.q.unwrap_or(0).to_string()));
            } else {
                rows.push(ReportRow::number("margin", item, k, v));
            }
        }
        rows
    }

    pub fn text(&self) -> String {
        let mut s = format!("[margin {}] Δ = {}\n", self.kind.tag(), self.delay);
        let inputs: Vec<String> = self.inputs.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(s, "  inputs: {}", inputs.join(", "));
        for (k, v) in self.outputs() {
            if k == "q" {
                let _ = writeln!(s, "  {k:<15} {}", self.q.unwrap_or(0));
            } else {
                let _ = writeln!(s, "  {k:<15} {}", sig17(v));
            }
        }
        s
    }
}

fn require_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be positive and finite, got {v}")))
    }
}

fn require_delay(delay: f64) -> Result<()> {
    if delay >= 0.0 && delay.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("Δ must be finite and ≥ 0, got {delay}")))
    }
}

/// c̄ = a̲·a·e^{−aΔ}: LKF-wise dissipation tolerates a history term c‖φ‖^ρ
/// for every c < c̄.
pub fn margin_lkf_wise(a_lower: f64, a: f64, delay: f64) -> Result<f64> {
    require_positive("a̲", a_lower)?;
    require_positive("a", a)?;
    require_delay(delay)?;
    Ok(a_lower * a * (-a * delay).exp())
}

/// ξ = 1 − c·e^{aΔ}(1+ε)/(a̲a), positive when c(1+ε) < c̄.
pub fn lkf_wise_xi(a_lower: f64, a: f64, c: f64, delay: f64, epsilon: f64) -> Result<f64> {
    require_positive("a̲", a_lower)?;
    require_positive("a", a)?;
    require_delay(delay)?;
    if !(c >= 0.0 && epsilon >= 0.0) {
        return Err(Error::Domain(format!("c and ε must be ≥ 0, got {c}, {epsilon}")));
    }
    Ok(1.0 - c * (a * delay).exp() * (1.0 + epsilon) / (a_lower * a))
}

/// Margin report for LKF-wise dissipation: c̄ and ξ. No decay rate is
/// produced; it has no closed form and is estimated empirically.
pub fn margin_lkf_wise_report(a_lower: f64, a: f64, c: f64, delay: f64, epsilon: f64) -> Result<MarginReport> {
    let c_bar = margin_lkf_wise(a_lower, a, delay)?;
    let mut r = MarginReport::empty(
        MarginKind::LkfWise,
        delay,
        vec![("a_lower", a_lower), ("a", a), ("c", c), ("epsilon", epsilon)],
        c_bar,
    );
    r.xi = Some(lkf_wise_xi(a_lower, a, c, delay, epsilon)?);
    Ok(r)
}

/// (ε, c̄) of the right-growth margin:
/// ε = a·p_m·e^{−2Δ}/(4σp_M), c̄ = min{2ε, a/(2p_M)}·p_m·e^{−2Δ}.
pub fn right_margin_parts(a: f64, sigma: f64, p_min: f64, p_max: f64, delay: f64) -> Result<(f64, f64)> {
    require_positive("a", a)?;
    require_positive("σ", sigma)?;
    require_positive("p_m", p_min)?;
    require_positive("p_M", p_max)?;
    require_delay(delay)?;
    let decay = (-2.0 * delay).exp();
    let epsilon = a * p_min * decay / (4.0 * sigma * p_max);
    let c_bar = (2.0 * epsilon).min(a / (2.0 * p_max)) * p_min * decay;
    Ok((epsilon, c_bar))
}

/// The same c̄ in composite form min{(p_m/σ)e^{−2Δ}, 1}·(a·p_m/(2p_M))e^{−2Δ}.
pub fn right_margin_composite(a: f64, sigma: f64, p_min: f64, p_max: f64, delay: f64) -> f64 {
    let decay = (-2.0 * delay).exp();
    (p_min / sigma * decay).min(1.0) * (a * p_min / (2.0 * p_max)) * decay
}

/// Right-growth margin: ε, c̄, the γ factor 1 + 2εσ and the W decay rate
/// (c̄ − c)/(ā + εp_M). Uses a, σ, P and, for the rate, ā and c.
pub fn margin_right(h: &HypothesisConstants, delay: f64) -> Result<MarginReport> {
    h.validate()?;
    let (pm, pmax) = (h.p.p_min(), h.p.p_max());
    let (epsilon, c_bar) = right_margin_parts(h.a, h.sigma, pm, pmax, delay)?;
    let mut r = MarginReport::empty(
        MarginKind::RightGrowth,
        delay,
        vec![
            ("a_upper", h.a_upper),
            ("a", h.a),
            ("c", h.c),
            ("sigma", h.sigma),
            ("p_min", pm),
            ("p_max", pmax),
        ],
        c_bar,
    );
    r.epsilon = Some(epsilon);
    r.gamma_factor = Some(1.0 + 2.0 * epsilon * h.sigma);
    r.w_rate = Some((c_bar - h.c) / (h.a_upper + epsilon * pmax));
    Ok(r)
}

/// ⌈x⌉, except that values within 1e−12 (relative) of an integer snap to it,
/// so that exact products computed with rounding error are not bumped up.
pub fn snapped_ceil(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-12 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// Contraction residual (qε/p_M)(p_m·a̲·λ²/(2ā) − 4εσā/a̲) − 2ā/a̲ of the
/// left-growth argument; λ is admissible when it is positive.
#[allow(clippy::too_many_arguments)]
pub fn left_contraction_residual(
    a_lower: f64,
    a_upper: f64,
    sigma: f64,
    p_min: f64,
    p_max: f64,
    q: f64,
    epsilon: f64,
    lambda: f64,
) -> f64 {
    let qe = q * epsilon / p_max;
    qe * (p_min * a_lower * lambda * lambda / (2.0 * a_upper) - 4.0 * epsilon * sigma * a_upper / a_lower)
        - 2.0 * a_upper / a_lower
}

/// Left-growth margin. ε = p_m·a̲²/(16ā²σ), q = ⌈p_M/(σε²)⌉, T = q(Δ+ε),
/// c̄ = a̲/(2T); λ_min is the root of the contraction residual,
/// λ* = (λ_min + 1)/2 and the decay is ln(1/λ*)/T. c̄ does not depend on γ.
pub fn margin_left(h: &HypothesisConstants, delay: f64) -> Result<MarginReport> {
    h.validate()?;
    require_delay(delay)?;
    let a_lower = h
        .a_lower
        .ok_or_else(|| Error::Contract("the left-growth margin needs the lower sandwich constant a̲".into()))?;
    let (al, au, sigma) = (a_lower, h.a_upper, h.sigma);
    let (pm, pmax) = (h.p.p_min(), h.p.p_max());

    let epsilon = pm * al * al / (16.0 * au * au * sigma);
    let q = snapped_ceil(pmax / (sigma * epsilon * epsilon));
    if !(1.0..=9.007_199_254_740_992e15).contains(&q) {
        return Err(Error::Domain(format!("q = {q} is outside the exactly representable integers")));
    }
    let horizon = q * (delay + epsilon);
    let c_bar = al / (2.0 * horizon);

    let qe = q * epsilon;
    let lambda_min_sq = (2.0 * au / al + qe / pmax * (4.0 * epsilon * sigma * au / al)) * 2.0 * au * pmax / (qe * pm * al);
    let lambda_min = lambda_min_sq.sqrt();
    if !(lambda_min < 1.0) {
        return Err(Error::Infeasible(format!("no contraction factor below 1: λ_min = {lambda_min}")));
    }
    let lambda_star = 0.5 * (lambda_min + 1.0);
    let mu_coefficient = 4.0 / al.sqrt()
        * (2.0 * horizon)
            .sqrt()
            .max((au / pm * (pmax * horizon / (h.a * qe) + sigma * epsilon * (1.0 + 2.0 * horizon / al))).sqrt());

    let mut r = MarginReport::empty(
        MarginKind::LeftGrowth,
        delay,
        vec![
            ("a_lower", al),
            ("a_upper", au),
            ("a", h.a),
            ("sigma", sigma),
            ("p_min", pm),
            ("p_max", pmax),
        ],
        c_bar,
    );
    r.epsilon = Some(epsilon);
    r.q = Some(q as u64);
    r.horizon = Some(horizon);
    r.lambda_min = Some(lambda_min);
    r.lambda_star = Some(lambda_star);
    r.mu_coefficient = Some(mu_coefficient);
    r.decay = Some((1.0 / lambda_star).ln() / horizon);
    Ok(r)
}

/// Robustness margins of the uncertain two-state benchmark, where the
/// uncertainty adds at most 4|ε|‖φ‖² to D⁺V, so each margin is c̄/4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example2Margins {
    pub delay: f64,
    /// From the right-growth margin: e^{−4Δ}/16.
    pub eps1: f64,
    /// From the left-growth margin, q = ⌈768(1+2Δ)⁴⌉.
    pub eps2_left_margin: f64,
    /// Reference closed form 1/(8⌈2304(1+2Δ)⁴⌉(Δ + 1/(48(1+2Δ)²))).
    pub eps2_reference: f64,
    /// max{ε̄₁, ε̄₂} with ε̄₂ from the left-growth margin.
    pub combined: f64,
    /// ε̄₂ (reference closed form) exceeds ε̄₁.
    pub crossover: bool,
}

impl Example2Margins {
    pub const CSV_HEADER: [&'static str; 6] = ["delay", "eps1", "eps2_reference", "eps2_left_margin", "max", "crossover"];

    pub fn csv_record(&self) -> [String; 6] {
        [
            sig17(self.delay),
            sig17(self.eps1),
            sig17(self.eps2_reference),
            sig17(self.eps2_left_margin),
            sig17(self.combined),
            self.crossover.to_string(),
        ]
    }

    /// ε̄₂ from the left-growth margin over the reference closed form (≈ 3).
    pub fn discrepancy_ratio(&self) -> f64 {
        self.eps2_left_margin / self.eps2_reference
    }
}

/// Constants of the benchmark: a = 1/2, σ = 1 (right), σ = 3 (left),
/// a̲ = 1, ā = 1 + 2Δ, P = I.
pub fn robustness_margin_example2(delay: f64) -> Result<Example2Margins> {
    require_delay(delay)?;
    let au = 1.0 + 2.0 * delay;
    let right = HypothesisConstants::new(au, 0.5, 1.0, GrowthMatrix::identity(2), Gain::square())?;
    let left = HypothesisConstants::new(au, 0.5, 3.0, GrowthMatrix::identity(2), Gain::square())?.with_a_lower(1.0)?;
    let eps1 = margin_right(&right, delay)?.c_bar / 4.0;
    let eps2_left_margin = margin_left(&left, delay)?.c_bar / 4.0;
    let b = 1.0 + 2.0 * delay;
    let q_ref = snapped_ceil(2304.0 * b.powi(4));
    let eps2_reference = 1.0 / (8.0 * q_ref * (delay + 1.0 / (48.0 * b * b)));
    Ok(Example2Margins {
        delay,
        eps1,
        eps2_left_margin,
        eps2_reference,
        combined: eps1.max(eps2_left_margin),
        crossover: eps2_reference > eps1,
    })
}

/// Reach radius R = α⁻¹((ᾱ(r) + c̄)e^{aT} + (γ(r) + c)e^{aT}/a): solutions with
/// ‖x₀‖ ≤ r and ‖u‖ ≤ r stay within |x(t)| ≤ R on [0, T]. α must be a power
/// gain with positive coefficient.
#[allow(clippy::too_many_arguments)]
pub fn rfc_bound(
    alpha: &Gain,
    alpha_bar: &Gain,
    c_bar: f64,
    a: f64,
    gamma: &Gain,
    c: f64,
    r: f64,
    horizon: f64,
) -> Result<f64> {
    if !matches!(alpha, Gain::Power { coef, .. } if *coef > 0.0) {
        return Err(Error::Unsupported("α must be a power gain α₀s^ρ with α₀ > 0".into()));
    }
    if a == 0.0 {
        return Err(Error::Unsupported("a = 0 is not supported by the reach bound".into()));
    }
    require_positive("a", a)?;
    for (name, v) in [("c̄", c_bar), ("c", c), ("r", r), ("T", horizon)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Domain(format!("{name} must be finite and ≥ 0, got {v}")));
        }
    }
    let growth = (a * horizon).exp();
    let y = (alpha_bar.eval(r) + c_bar) * growth + (gamma.eval(r) + c) * growth / a;
    alpha.inverse(y)
}

/// Constants (ℓ, T) of the two-inequality characterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoInequality {
    pub ell: f64,
    pub horizon: f64,
}

/// Envelope constants |x(t)| ≤ k‖x₀‖e^{−ηt} + gain_factor·μ(‖u‖).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpIssEnvelope {
    pub k: f64,
    pub eta: f64,
    pub gain_factor: f64,
}

/// From exp-ISS constants (k, η) to ‖x_t‖ ≤ ℓ‖x₀‖ + μ and ‖x_T‖ ≤ λ‖x₀‖ + μ,
/// with ℓ = k·e^{ηΔ} and T = Δ + ln(k/λ)/η. The gain μ carries over unchanged.
pub fn expiss_to_two_inequality(k: f64, eta: f64, delay: f64, lambda: f64) -> Result<TwoInequality> {
    if !(k >= 1.0) {
        return Err(Error::Contract(format!("k must be ≥ 1, got {k}")));
    }
    require_positive("η", eta)?;
    require_delay(delay)?;
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Domain(format!("λ must lie in (0, 1), got {lambda}")));
    }
    Ok(TwoInequality {
        ell: k * (eta * delay).exp(),
        horizon: delay + (k / lambda).ln() / eta,
    })
}

/// From the two inequalities back to an exp-ISS envelope: η = ln(1/λ)/T,
/// k = ℓ/λ and the gain factor ℓ/(1−λ) + 1.
pub fn two_inequality_to_expiss(ell: f64, horizon: f64, lambda: f64) -> Result<ExpIssEnvelope> {
    require_positive("ℓ", ell)?;
    require_positive("T", horizon)?;
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Domain(format!("λ must lie in (0, 1), got {lambda}")));
    }
    Ok(ExpIssEnvelope {
        k: ell / lambda,
        eta: (1.0 / lambda).ln() / horizon,
        gain_factor: ell / (1.0 - lambda) + 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{make_example1, make_example3};

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn strata_cover_every_combination() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..STRATA {
            let (n, u, m) = StratifiedSampler::stratum(i);
            seen.insert(((n * 10.0) as i64, (u * 10.0) as i64, m));
        }
        assert_eq!(seen.len(), STRATA);
    }

    #[test]
    fn stratified_samples_have_requested_scales() {
        let s = StratifiedSampler::new(7, 2, 1, 1.0);
        for i in 0..72 {
            let (n, u, _) = StratifiedSampler::stratum(i);
            let x = s.sample(i);
            assert!(rel(x.phi.sup_norm(), n) < 1e-12);
            assert!((norm(&x.v) - u).abs() < 1e-12);
            assert_eq!(x, s.sample(i));
        }
    }

    #[test]
    fn lkf_wise_values() {
        assert_eq!(margin_lkf_wise(1.0, 0.5, 0.0).unwrap(), 0.5);
        assert!(rel(margin_lkf_wise(1.0, 0.5, 1.0).unwrap(), 0.303_265_329_856_316_7) < 1e-12);
        assert!(rel(margin_lkf_wise(2.0, 1.0, 2.0).unwrap(), 0.270_670_566_473_225_4) < 1e-12);
        assert!(lkf_wise_xi(1.0, 0.5, 0.0, 1.0, 0.1).unwrap() == 1.0);
    }

    #[test]
    fn right_margin_values() {
        let (e, c) = right_margin_parts(0.5, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert!(rel(e, 0.125 * (-2.0f64).exp()) < 1e-14);
        assert!(rel(c, 0.25 * (-4.0f64).exp()) < 1e-14);
        let (e, c) = right_margin_parts(2.0, 1.0, 1.0, 1.0, 0.0).unwrap();
        assert_eq!((e, c), (0.5, 1.0));
    }

    #[test]
    fn left_margin_worked_values() {
        let h = HypothesisConstants::new(3.0, 0.5, 3.0, GrowthMatrix::identity(2), Gain::square())
            .unwrap()
            .with_a_lower(1.0)
            .unwrap();
        let r = margin_left(&h, 1.0).unwrap();
        assert!(rel(r.epsilon.unwrap(), 1.0 / 432.0) < 1e-12);
        assert_eq!(r.q, Some(62208));
        assert!(rel(r.horizon.unwrap(), 62352.0) < 1e-12);
        assert!(rel(r.c_bar, 1.0 / 124_704.0) < 1e-12);
        assert!(rel(r.lambda_min.unwrap().powi(2), 0.75) < 1e-12);
    }

    #[test]
    fn left_margin_needs_lower_constant() {
        let h = HypothesisConstants::new(3.0, 0.5, 3.0, GrowthMatrix::identity(2), Gain::square()).unwrap();
        assert!(matches!(margin_left(&h, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn snapped_ceil_behaviour() {
        assert_eq!(snapped_ceil(62_208.000_000_000_01), 62208.0);
        assert_eq!(snapped_ceil(2.5), 3.0);
        assert_eq!(snapped_ceil(3.0), 3.0);
    }

    #[test]
    fn rfc_worked_value() {
        let r = rfc_bound(&Gain::square(), &Gain::power(3.0, 2.0).unwrap(), 0.0, 1.0, &Gain::square(), 0.0, 1.0, 1.0).unwrap();
        assert!(rel(r, (4.0 * std::f64::consts::E).sqrt()) < 1e-12);
        let zero = rfc_bound(&Gain::square(), &Gain::square(), 0.0, 1.0, &Gain::square(), 0.0, 0.0, 1.0).unwrap();
        assert_eq!(zero, 0.0);
        let unsup = rfc_bound(&Gain::square(), &Gain::square(), 0.0, 0.0, &Gain::square(), 0.0, 1.0, 1.0);
        assert!(matches!(unsup, Err(Error::Unsupported(_))));
    }

    #[test]
    fn conversions_worked_values() {
        let t = expiss_to_two_inequality(2.0, 1.0, 1.0, 0.5).unwrap();
        assert!(rel(t.ell, 2.0 * std::f64::consts::E) < 1e-12);
        assert!(rel(t.horizon, 1.0 + 4f64.ln()) < 1e-12);
        let e = two_inequality_to_expiss(2.0, 2.0, 0.5).unwrap();
        assert!(rel(e.eta, 2f64.ln() / 2.0) < 1e-12);
        assert!(rel(e.k, 4.0) < 1e-12);
        assert!(rel(e.gain_factor, 5.0) < 1e-12);
        assert!(matches!(expiss_to_two_inequality(0.5, 1.0, 1.0, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn growth_checks_on_benchmarks() {
        let sys = make_example1(1.0).unwrap();
        let s = StratifiedSampler::for_system(3, &sys);
        let p = GrowthMatrix::identity(2);
        let r = check_right_growth(&sys, &p, 1.0, &Gain::square(), &s, 720).unwrap();
        assert_eq!(r.verdict, Verdict::NoViolationFound);
        assert!(r.witness.is_none());
        let r = check_right_growth(&sys, &p, 0.1, &Gain::square(), &s, 720).unwrap();
        assert!(r.violated());
        assert!(r.witness.as_ref().unwrap().residual > 0.0);

        let sys3 = make_example3(1.0).unwrap();
        let r = check_left_growth(&sys3, &p, 3.0, &Gain::square(), &StratifiedSampler::for_system(3, &sys3), 360).unwrap();
        assert!(r.violated());
    }

    #[test]
    fn zero_budget_is_rejected() {
        let s = StratifiedSampler::new(1, 2, 1, 1.0);
        let v = Functional::benchmark_lkf();
        assert!(check_sandwich(&v, None, 3.0, 2.0, &s, 0).is_err());
    }

    #[test]
    fn reports_render() {
        let s = StratifiedSampler::new(1, 2, 1, 1.0);
        let v = Functional::benchmark_lkf();
        let r = check_sandwich(&v, Some(1.0), 0.5, 2.0, &s, 36).unwrap();
        assert!(r.violated());
        assert!(r.text().contains(EVIDENCE_NOTE));
        assert!(r.rows("v").iter().any(|row| row.quantity == "witness_phi0"));
    }
}
