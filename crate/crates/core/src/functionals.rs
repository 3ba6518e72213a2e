//! Lyapunov–Krasovskii functionals and their Driver derivatives.
//!
//! A [`Functional`] is an expression tree over four quadratic term kinds.
//! The Driver derivative
//!
//! ```text
//! D⁺V(φ, w) = limsup_{h→0⁺} (V(φ_{h,w}) − V(φ)) / h
//! ```
//!
//! is available in closed form for every term except the max-type one, and
//! numerically (as the maximum of difference quotients over a finite
//! h-schedule) for all of them. The numeric value is an estimate: for the
//! max-type term it can miss the limsup near points where the maximizer
//! switches.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::histories::{History, HistoryFunction, Interpolation, CUBIC_SUP_OVERSAMPLING};

const SYMMETRY_TOL: f64 = 1e-12;

fn quad(q: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += q[(i, j)] * x[j];
        }
        s += x[i] * row;
    }
    s
}

fn bilinear(q: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += x[i] * q[(i, j)] * y[j];
        }
    }
    s
}

fn check_symmetric(q: &DMatrix<f64>) -> Result<()> {
    if !q.is_square() {
        return Err(Error::Contract(format!("matrix must be square, got {}×{}", q.nrows(), q.ncols())));
    }
    let scale = q.amax().max(1.0);
    for i in 0..q.nrows() {
        for j in 0..i {
            if (q[(i, j)] - q[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::Contract("matrix must be symmetric".into()));
            }
        }
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("matrix entries must be finite".into()));
    }
    Ok(())
}

/// Smallest and largest eigenvalues of a symmetric matrix.
pub fn eigen_extremes(q: &DMatrix<f64>) -> Result<(f64, f64)> {
    check_symmetric(q)?;
    let eig = SymmetricEigen::new(q.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((min, max))
}

/// Weight w(τ) under an integral term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weight {
    Constant(f64),
    /// scale · e^{rate·τ}
    Exponential { scale: f64, rate: f64 },
}

impl Weight {
    pub fn value(&self, tau: f64) -> f64 {
        match *self {
            Self::Constant(c) => c,
            Self::Exponential { scale, rate } => scale * (rate * tau).exp(),
        }
    }

    pub fn derivative(&self, tau: f64) -> f64 {
        match *self {
            Self::Constant(_) => 0.0,
            Self::Exponential { scale, rate } => scale * rate * (rate * tau).exp(),
        }
    }

    fn is_polynomial(&self) -> bool {
        matches!(self, Self::Constant(_)) || matches!(self, Self::Exponential { rate, .. } if *rate == 0.0)
    }

    fn min_value(&self, delay: f64) -> f64 {
        self.value(0.0).min(self.value(-delay))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Functional {
    /// φ(0)ᵀQφ(0)
    PointQuadratic(DMatrix<f64>),
    /// φ(τ₀)ᵀQφ(τ₀)
    DelayedQuadratic { q: DMatrix<f64>, at: f64 },
    /// ∫_{−Δ}^0 w(τ)φ(τ)ᵀQφ(τ)dτ
    IntegralQuadratic { q: DMatrix<f64>, weight: Weight },
    /// max_{τ∈[−Δ,0]} e^{2τ}φ(τ)ᵀPφ(τ), P positive definite.
    MaxExp(DMatrix<f64>),
    Scale(f64, Box<Functional>),
    Sum(Box<Functional>, Box<Functional>),
}

impl Functional {
    pub fn point_quadratic(q: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&q)?;
        Ok(Self::PointQuadratic(q))
    }

    pub fn delayed_quadratic(q: DMatrix<f64>, at: f64) -> Result<Self> {
        check_symmetric(&q)?;
        if !(at <= 0.0) {
            return Err(Error::Domain(format!("evaluation point τ₀ = {at} must be ≤ 0")));
        }
        Ok(Self::DelayedQuadratic { q, at })
    }

    pub fn integral_quadratic(q: DMatrix<f64>, weight: Weight) -> Result<Self> {
        check_symmetric(&q)?;
        Ok(Self::IntegralQuadratic { q, weight })
    }

    pub fn max_exp(p: DMatrix<f64>) -> Result<Self> {
        let (pmin, _) = eigen_extremes(&p)?;
        if !(pmin > 0.0) {
            return Err(Error::Contract("max-type term requires a positive definite matrix".into()));
        }
        Ok(Self::MaxExp(p))
    }

    pub fn scale(k: f64, f: Functional) -> Self {
        Self::Scale(k, Box::new(f))
    }

    pub fn sum(a: Functional, b: Functional) -> Self {
        Self::Sum(Box::new(a), Box::new(b))
    }

    /// Sum of a non-empty list of terms.
    pub fn sum_all(terms: Vec<Functional>) -> Result<Self> {
        let mut it = terms.into_iter();
        let first = it.next().ok_or_else(|| Error::Contract("empty functional".into()))?;
        Ok(it.fold(first, Self::sum))
    }

    /// V(φ) = φ₁(0)² + φ₂(0)² + 2∫_{−Δ}^0 φ₂(τ)²dτ, the two-state benchmark LKF.
    pub fn benchmark_lkf() -> Self {
        let mut q = DMatrix::zeros(2, 2);
        q[(1, 1)] = 1.0;
        Self::sum(
            Self::PointQuadratic(DMatrix::identity(2, 2)),
            Self::IntegralQuadratic {
                q,
                weight: Weight::Constant(2.0),
            },
        )
    }

    pub fn contains_max_exp(&self) -> bool {
        match self {
            Self::MaxExp(_) => true,
            Self::Scale(_, f) => f.contains_max_exp(),
            Self::Sum(a, b) => a.contains_max_exp() || b.contains_max_exp(),
            _ => false,
        }
    }

    /// True when every matrix is positive semidefinite, every scale and
    /// weight nonnegative, so that V ≥ 0.
    pub fn is_nonnegative(&self, delay: f64) -> bool {
        let psd = |q: &DMatrix<f64>| eigen_extremes(q).map(|(m, _)| m >= -1e-12).unwrap_or(false);
        match self {
            Self::PointQuadratic(q) | Self::DelayedQuadratic { q, .. } | Self::MaxExp(q) => psd(q),
            Self::IntegralQuadratic { q, weight } => psd(q) && weight.min_value(delay) >= 0.0,
            Self::Scale(k, f) => *k >= 0.0 && f.is_nonnegative(delay),
            Self::Sum(a, b) => a.is_nonnegative(delay) && b.is_nonnegative(delay),
        }
    }

    fn check_dims(&self, n: usize) -> Result<()> {
        match self {
            Self::PointQuadratic(q) | Self::DelayedQuadratic { q, .. } | Self::IntegralQuadratic { q, .. } | Self::MaxExp(q) => {
                check_dim(q.nrows(), n)
            }
            Self::Scale(_, f) => f.check_dims(n),
            Self::Sum(a, b) => a.check_dims(n).and(b.check_dims(n)),
        }
    }

    /// V(φ).
    pub fn eval(&self, phi: &HistoryFunction) -> Result<f64> {
        self.check_dims(phi.dim())?;
        self.eval_unchecked(phi)
    }

    fn eval_unchecked(&self, phi: &HistoryFunction) -> Result<f64> {
        Ok(match self {
            Self::PointQuadratic(q) => quad(q, phi.node_value(phi.len() - 1)),
            Self::DelayedQuadratic { q, at } => quad(q, &phi.eval(*at)?),
            Self::IntegralQuadratic { q, weight } => integrate_weighted(phi, |tau, x| weight.value(tau) * quad(q, x), weight.is_polynomial()),
            Self::MaxExp(p) => max_exp_value(p, phi),
            Self::Scale(k, f) => k * f.eval_unchecked(phi)?,
            Self::Sum(a, b) => a.eval_unchecked(phi)? + b.eval_unchecked(phi)?,
        })
    }

    /// Exact Driver derivative for functionals without a max-type term.
    pub fn driver_derivative_closed(&self, phi: &HistoryFunction, w: &[f64]) -> Result<f64> {
        self.check_dims(phi.dim())?;
        check_dim(phi.dim(), w.len())?;
        self.closed_unchecked(phi, w)
    }

    fn closed_unchecked(&self, phi: &HistoryFunction, w: &[f64]) -> Result<f64> {
        let x0 = phi.node_value(phi.len() - 1);
        Ok(match self {
            Self::PointQuadratic(q) => 2.0 * bilinear(q, x0, w),
            Self::DelayedQuadratic { q, at } => {
                if *at == 0.0 || phi.delay() == 0.0 {
                    2.0 * bilinear(q, x0, w)
                } else {
                    let x = phi.eval(*at)?;
                    let dx = phi.right_derivative(*at)?;
                    2.0 * bilinear(q, &x, &dx)
                }
            }
            Self::IntegralQuadratic { q, weight } => {
                if phi.delay() == 0.0 {
                    0.0
                } else {
                    let delay = phi.delay();
                    let xd = phi.node_value(0);
                    let interior = match weight {
                        Weight::Constant(_) => 0.0,
                        _ => integrate_weighted(phi, |tau, x| weight.derivative(tau) * quad(q, x), weight.is_polynomial()),
                    };
                    weight.value(0.0) * quad(q, x0) - weight.value(-delay) * quad(q, xd) - interior
                }
            }
            Self::MaxExp(_) => {
                return Err(Error::Unsupported(
                    "no closed-form Driver derivative for the max-type term; use the numeric estimate".into(),
                ))
            }
            Self::Scale(k, f) => k * f.closed_unchecked(phi, w)?,
            Self::Sum(a, b) => a.closed_unchecked(phi, w)? + b.closed_unchecked(phi, w)?,
        })
    }

    /// max over `schedule` of (V(φ_{h,w}) − V(φ)) / h.
    pub fn driver_derivative_numeric(&self, phi: &HistoryFunction, w: &[f64], schedule: &[f64]) -> Result<f64> {
        self.check_dims(phi.dim())?;
        check_dim(phi.dim(), w.len())?;
        if schedule.is_empty() {
            return Err(Error::Contract("empty h-schedule".into()));
        }
        let base = self.eval_unchecked(phi)?;
        let mut best = f64::NEG_INFINITY;
        for &h in schedule {
            if !(h > 0.0) || h >= phi.delay() {
                return Err(Error::Domain(format!("schedule step h = {h} must lie in (0, Δ)")));
            }
            let ext = phi.driver_extension(h, w)?;
            best = best.max((self.eval_unchecked(&ext)? - base) / h);
        }
        Ok(best)
    }

    /// One Richardson step on the difference quotient, 2Q(h/2) − Q(h), which
    /// removes the O(h) bias. Only meaningful where V(φ_{h,w}) is smooth in
    /// h, so not at switching points of a max-type term.
    pub fn driver_derivative_richardson(&self, phi: &HistoryFunction, w: &[f64], h: f64) -> Result<f64> {
        let coarse = self.driver_derivative_numeric(phi, w, &[h])?;
        let fine = self.driver_derivative_numeric(phi, w, &[0.5 * h])?;
        Ok(2.0 * fine - coarse)
    }

    /// Closed form when available, otherwise the numeric estimate on the
    /// default schedule.
    pub fn driver_derivative(&self, phi: &HistoryFunction, w: &[f64]) -> Result<f64> {
        if self.contains_max_exp() {
            self.driver_derivative_numeric(phi, w, &default_schedule(phi.delay()))
        } else {
            self.driver_derivative_closed(phi, w)
        }
    }
}

/// {1e−2, 1e−3, 1e−4}·Δ
pub fn default_schedule(delay: f64) -> Vec<f64> {
    vec![1e-2 * delay, 1e-3 * delay, 1e-4 * delay]
}

// Composite Simpson over the history grid. One panel per segment is exact
// when the integrand is a quadratic polynomial on each segment (linear
// history, polynomial weight); otherwise segments are subdivided.
fn integrate_weighted<F>(phi: &HistoryFunction, g: F, polynomial_weight: bool) -> f64
where
    F: Fn(f64, &[f64]) -> f64,
{
    if phi.delay() == 0.0 {
        return 0.0;
    }
    let exact = polynomial_weight && phi.interpolation() == Interpolation::Linear;
    let grid = phi.grid();
    let delay = phi.delay();
    let mut buf = vec![0.0; phi.dim()];
    let mut total = 0.0;
    for i in 0..grid.len() - 1 {
        let (t0, t1) = (grid[i], grid[i + 1]);
        let panels = if exact {
            1
        } else {
            (64.0 * (t1 - t0) / delay).ceil().max(4.0) as usize
        };
        let width = (t1 - t0) / panels as f64;
        for p in 0..panels {
            let a = t0 + width * p as f64;
            let b = if p + 1 == panels { t1 } else { a + width };
            let m = 0.5 * (a + b);
            let mut acc = 0.0;
            for (tau, c) in [(a, 1.0), (m, 4.0), (b, 1.0)] {
                phi.eval_into(tau, &mut buf);
                acc += c * g(tau, &buf);
            }
            total += (b - a) / 6.0 * acc;
        }
    }
    total
}

// Largest real root(s) of α + βs + γs² = 0 lying in (0, len).
fn quadratic_roots_in(c0: f64, c1: f64, c2: f64, len: f64) -> Vec<f64> {
    let mut roots = Vec::new();
    if c2.abs() <= 1e-300 {
        if c1 != 0.0 {
            roots.push(-c0 / c1);
        }
    } else {
        let disc = c1 * c1 - 4.0 * c2 * c0;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            let qv = -0.5 * (c1 + c1.signum() * sq);
            if qv != 0.0 {
                roots.push(qv / c2);
                roots.push(c0 / qv);
            } else {
                roots.push(0.0);
            }
        }
    }
    roots.retain(|s| *s > 0.0 && *s < len);
    roots
}

fn max_exp_value(p: &DMatrix<f64>, phi: &HistoryFunction) -> f64 {
    let grid = phi.grid();
    let mut best = f64::NEG_INFINITY;
    for (i, &g) in grid.iter().enumerate() {
        best = best.max((2.0 * g).exp() * quad(p, phi.node_value(i)));
    }
    let dim = phi.dim();
    let mut buf = vec![0.0; dim];
    match phi.interpolation() {
        Interpolation::Linear => {
            // On a linear segment φ = A + sB, e^{2τ}q(s) with q quadratic;
            // stationary points solve γs² + (2β+γ)s + (α+β) = 0.
            for i in 0..grid.len().saturating_sub(1) {
                let (t0, t1) = (grid[i], grid[i + 1]);
                let len = t1 - t0;
                let a = phi.node_value(i);
                let b: Vec<f64> = phi.node_value(i + 1).iter().zip(a).map(|(y, x)| (y - x) / len).collect();
                let alpha = quad(p, a);
                let beta = bilinear(p, a, &b);
                let gamma = quad(p, &b);
                for s in quadratic_roots_in(alpha + beta, 2.0 * beta + gamma, gamma, len) {
                    let x: Vec<f64> = a.iter().zip(&b).map(|(x, d)| x + s * d).collect();
                    best = best.max((2.0 * (t0 + s)).exp() * quad(p, &x));
                }
            }
        }
        Interpolation::CubicHermite => {
            for i in 0..grid.len().saturating_sub(1) {
                let (t0, t1) = (grid[i], grid[i + 1]);
                for j in 1..CUBIC_SUP_OVERSAMPLING {
                    let tau = t0 + (t1 - t0) * j as f64 / CUBIC_SUP_OVERSAMPLING as f64;
                    phi.eval_into(tau, &mut buf);
                    best = best.max((2.0 * tau).exp() * quad(p, &buf));
                }
            }
        }
    }
    best.max(0.0)
}

/// V₀(φ) = max_{τ∈[−Δ,0]} e^{2τ}φ(τ)ᵀPφ(τ).
pub fn v0_max(p: &DMatrix<f64>, phi: &HistoryFunction) -> Result<f64> {
    check_dim(p.nrows(), phi.dim())?;
    let v = max_exp_value(p, phi);
    #[cfg(debug_assertions)]
    {
        if let Ok((pm, pmax)) = eigen_extremes(p) {
            let s = phi.sup_norm().powi(2);
            let tol = 1e-9 * (1.0 + pmax * s);
            debug_assert!((-2.0 * phi.delay()).exp() * pm * s <= v + tol, "lower sandwich violated");
            debug_assert!(v <= pmax * s + tol, "upper sandwich violated");
        }
    }
    Ok(v)
}

/// W = V + ε·V₀, the coercive functional built from V and a max-type term.
pub fn combine_w(v: Functional, epsilon: f64, p: DMatrix<f64>) -> Result<Functional> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("ε must be positive, got {epsilon}")));
    }
    Ok(Functional::sum(v, Functional::scale(epsilon, Functional::max_exp(p)?)))
}

/// A gain function of class 𝒩 (continuous, nondecreasing, zero at zero).
#[derive(Clone)]
pub enum Gain {
    /// coef · s^exponent
    Power { coef: f64, exponent: f64 },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Gain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Power { coef, exponent } => write!(f, "Power({coef}·s^{exponent})"),
            Self::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl Gain {
    pub fn power(coef: f64, exponent: f64) -> Result<Self> {
        if !(coef >= 0.0) || !(exponent > 0.0) {
            return Err(Error::Contract(format!(
                "power gain needs coef ≥ 0 and exponent > 0, got {coef}, {exponent}"
            )));
        }
        Ok(Self::Power { coef, exponent })
    }

    /// γ(s) = s².
    pub fn square() -> Self {
        Self::Power { coef: 1.0, exponent: 2.0 }
    }

    pub fn zero() -> Self {
        Self::Power { coef: 0.0, exponent: 1.0 }
    }

    /// A user gain, probed for γ(0) = 0 and monotonicity on a grid.
    pub fn custom<F>(f: F) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        if f(0.0) != 0.0 {
            return Err(Error::Contract("gain must vanish at zero".into()));
        }
        let mut prev = 0.0;
        for i in 1..=200 {
            let s = 1e-3 * 1.1f64.powi(i);
            let v = f(s);
            if !(v >= prev) {
                return Err(Error::Contract(format!("gain decreases near s = {s}")));
            }
            prev = v;
        }
        Ok(Self::Custom(Arc::new(f)))
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self {
            Self::Power { coef, exponent } => {
                if *coef == 0.0 {
                    0.0
                } else {
                    coef * s.powf(*exponent)
                }
            }
            Self::Custom(f) => f(s),
        }
    }

    /// γ₀ when γ(s) = γ₀·s^ρ for the given ρ.
    pub fn power_coefficient(&self, rho: f64) -> Option<f64> {
        match self {
            Self::Power { coef, .. } if *coef == 0.0 => Some(0.0),
            Self::Power { coef, exponent } if *exponent == rho => Some(*coef),
            _ => None,
        }
    }

    /// Inverse of a power gain with positive coefficient.
    pub fn inverse(&self, y: f64) -> Result<f64> {
        match self {
            Self::Power { coef, exponent } if *coef > 0.0 => Ok((y / coef).powf(1.0 / exponent)),
            _ => Err(Error::Unsupported("only power gains with positive coefficient are inverted".into())),
        }
    }
}

/// Symmetric positive definite P with cached extreme eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthMatrix {
    matrix: DMatrix<f64>,
    p_min: f64,
    p_max: f64,
}

impl GrowthMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let (p_min, p_max) = eigen_extremes(&matrix)?;
        if !(p_min > 0.0) {
            return Err(Error::Contract(format!("P must be positive definite, smallest eigenvalue {p_min}")));
        }
        Ok(Self { matrix, p_min, p_max })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            matrix: DMatrix::identity(n, n),
            p_min: 1.0,
            p_max: 1.0,
        }
    }

    /// A matrix with prescribed extreme eigenvalues, for margin formulas
    /// that only depend on p_m and p_M.
    pub fn with_extremes(p_min: f64, p_max: f64) -> Result<Self> {
        if !(p_min > 0.0 && p_max >= p_min) {
            return Err(Error::Contract(format!("need 0 < p_m ≤ p_M, got {p_min}, {p_max}")));
        }
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![p_min, p_max]));
        Ok(Self { matrix: m, p_min, p_max })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn p_min(&self) -> f64 {
        self.p_min
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    /// φ(0)ᵀP w
    pub fn form(&self, x: &[f64], w: &[f64]) -> f64 {
        bilinear(&self.matrix, x, w)
    }
}

/// Constants of a point-wise dissipation hypothesis set.
#[derive(Debug, Clone)]
pub struct HypothesisConstants {
    /// a̲ in a̲|φ(0)|^ρ ≤ V(φ); absent when only the upper bound is assumed.
    pub a_lower: Option<f64>,
    /// ā in V(φ) ≤ ā‖φ‖^ρ.
    pub a_upper: f64,
    /// Dissipation rate.
    pub a: f64,
    /// Strength of the history term c‖φ‖^ρ.
    pub c: f64,
    pub rho: f64,
    pub sigma: f64,
    pub p: GrowthMatrix,
    pub gamma: Gain,
}

impl HypothesisConstants {
    pub fn new(a_upper: f64, a: f64, sigma: f64, p: GrowthMatrix, gamma: Gain) -> Result<Self> {
        let h = Self {
            a_lower: None,
            a_upper,
            a,
            c: 0.0,
            rho: 2.0,
            sigma,
            p,
            gamma,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn with_a_lower(mut self, a_lower: f64) -> Result<Self> {
        self.a_lower = Some(a_lower);
        self.validate()?;
        Ok(self)
    }

    pub fn with_c(mut self, c: f64) -> Result<Self> {
        self.c = c;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("ā", self.a_upper), ("a", self.a), ("ρ", self.rho), ("σ", self.sigma)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Contract(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.c >= 0.0) {
            return Err(Error::Contract(format!("c must be ≥ 0, got {}", self.c)));
        }
        if let Some(lo) = self.a_lower {
            if !(lo > 0.0) {
                return Err(Error::Contract(format!("a̲ must be positive, got {lo}")));
            }
            if lo > self.a_upper {
                return Err(Error::Contract(format!("a̲ = {lo} exceeds ā = {}", self.a_upper)));
            }
        }
        if self.gamma.eval(0.0) != 0.0 {
            return Err(Error::Contract("γ must vanish at zero".into()));
        }
        Ok(())
    }

    /// γ₀ when γ(s) = γ₀s^ρ, which makes the resulting ISS gain linear.
    pub fn linear_gain_coefficient(&self) -> Option<f64> {
        self.gamma.power_coefficient(self.rho)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::histories::random_history;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(v))
    }

    #[test]
    fn benchmark_lkf_values() {
        let v = Functional::benchmark_lkf();
        assert_eq!(v.eval(&HistoryFunction::zero(2, 1.0)).unwrap(), 0.0);
        let phi = HistoryFunction::constant(1.0, &[1.0, 1.0]);
        assert!((v.eval(&phi).unwrap() - 4.0).abs() < 1e-14);
    }

    #[test]
    fn max_exp_constant_history() {
        let v = Functional::max_exp(DMatrix::identity(2, 2)).unwrap();
        let phi = HistoryFunction::constant(1.5, &[3.0, -4.0]);
        assert!((v.eval(&phi).unwrap() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn max_exp_interior_maximizer_is_exact() {
        // φ(τ) = 1 − τ on [−2, 0]: e^{2τ}(1 − τ)² peaks at τ = 0... and
        // φ(τ) = e^{−2τ}: e^{2τ}e^{−4τ} = e^{−2τ} peaks at τ = −Δ.
        let phi = HistoryFunction::sample(1, 1.0, 200, |t| vec![(-2.0 * t).exp()]).unwrap();
        let v = v0_max(&DMatrix::identity(1, 1), &phi).unwrap();
        assert!((v - 2f64.exp()).abs() < 1e-12);
        // A single linear segment with an interior stationary point:
        // φ(τ) = 2 + 3τ on [−1, 0] → stationary points of e^{2τ}(2+3τ)²
        // solve 2(2+3τ) + 6 = 0 → τ = −5/3 (outside) and 2+3τ = 0.
        let phi = HistoryFunction::new(1.0, vec![-1.0, 0.0], vec![vec![-1.0], vec![2.0]]).unwrap();
        let brute = (0..=100_000)
            .map(|i| {
                let t = -1.0 + i as f64 / 100_000.0;
                (2.0 * t).exp() * (2.0 + 3.0 * t).powi(2)
            })
            .fold(0.0, f64::max);
        assert!((v0_max(&DMatrix::identity(1, 1), &phi).unwrap() - brute).abs() < 1e-9);
    }

    #[test]
    fn max_exp_segment_interior_root() {
        // e^{2τ}(τ + 0.8)² on [−1, 0] via one segment φ = τ + 0.8; the
        // interior stationary point τ = −1.3 is outside, the root τ = −0.8
        // is a minimum, so the maximum sits at τ = 0.
        let phi = HistoryFunction::new(1.0, vec![-1.0, 0.0], vec![vec![-0.2], vec![0.8]]).unwrap();
        assert!((v0_max(&DMatrix::identity(1, 1), &phi).unwrap() - 0.64).abs() < 1e-14);
        // φ = −(τ + 0.3)·4 on [−1, 0]: stationary points at τ = −0.3
        // (minimum) and τ = −1.3 … use a steep decreasing profile instead.
        let phi = HistoryFunction::new(2.0, vec![-2.0, 0.0], vec![vec![3.0], vec![0.1]]).unwrap();
        let brute = (0..=200_000)
            .map(|i| {
                let t = -2.0 + 2.0 * i as f64 / 200_000.0;
                let x = 3.0 + (0.1 - 3.0) * (t + 2.0) / 2.0;
                (2.0 * t).exp() * x * x
            })
            .fold(0.0, f64::max);
        let exact = v0_max(&DMatrix::identity(1, 1), &phi).unwrap();
        assert!((exact - brute).abs() < 1e-9, "{exact} vs {brute}");
        assert!(exact > (2.0f64 * -2.0).exp() * 9.0 && exact > 0.01);
    }

    #[test]
    fn closed_form_benchmark() {
        let v = Functional::benchmark_lkf();
        let phi = random_history(3, 2, 1.0, 1.0, 3);
        let w = [0.3, -1.2];
        let x0 = phi.eval(0.0).unwrap();
        let xd = phi.eval(-1.0).unwrap();
        let expect = 2.0 * x0[0] * w[0] + 2.0 * x0[1] * w[1] + 2.0 * (x0[1] * x0[1] - xd[1] * xd[1]);
        assert!((v.driver_derivative_closed(&phi, &w).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn closed_form_simple_cases() {
        let pq = Functional::point_quadratic(DMatrix::identity(2, 2)).unwrap();
        assert_eq!(pq.driver_derivative_closed(&HistoryFunction::zero(2, 1.0), &[4.0, 5.0]).unwrap(), 0.0);
        let iq = Functional::integral_quadratic(DMatrix::identity(2, 2), Weight::Constant(2.0)).unwrap();
        let phi = HistoryFunction::constant(1.0, &[0.0, 1.0]);
        assert_eq!(iq.driver_derivative_closed(&phi, &[1.0, 1.0]).unwrap(), 0.0);
        let m = Functional::max_exp(DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(m.driver_derivative_closed(&phi, &[0.0, 0.0]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn numeric_matches_quadratic_derivative() {
        let pq = Functional::point_quadratic(DMatrix::identity(2, 2)).unwrap();
        let phi = HistoryFunction::constant(1.0, &[1.0, 2.0]);
        let w = [0.5, -0.25];
        let d = pq.driver_derivative_numeric(&phi, &w, &[1e-4]).unwrap();
        let exact = 2.0 * (1.0 * 0.5 + 2.0 * -0.25);
        assert!((d - exact).abs() < 1e-4 * 2.0);
    }

    #[test]
    fn numeric_first_order_agreement_all_term_kinds() {
        let q = diag(&[1.0, 2.0]);
        let v = Functional::sum_all(vec![
            Functional::point_quadratic(q.clone()).unwrap(),
            Functional::delayed_quadratic(q.clone(), -0.37).unwrap(),
            Functional::integral_quadratic(q.clone(), Weight::Exponential { scale: 1.5, rate: 0.7 }).unwrap(),
            Functional::scale(0.5, Functional::integral_quadratic(q, Weight::Constant(1.0)).unwrap()),
        ])
        .unwrap();
        let phi = random_history(21, 2, 1.0, 1.0, 2);
        let w = [0.4, 0.9];
        let exact = v.driver_derivative_closed(&phi, &w).unwrap();
        let e1 = (v.driver_derivative_numeric(&phi, &w, &[1e-3]).unwrap() - exact).abs();
        let e2 = (v.driver_derivative_numeric(&phi, &w, &[1e-4]).unwrap() - exact).abs();
        assert!(e2 < 1e-2, "error {e2}");
        // First order: the error shrinks roughly tenfold with h.
        assert!(e2 < e1 / 5.0, "e1={e1} e2={e2}");
    }

    #[test]
    fn schedule_must_fit_in_delay() {
        let v = Functional::benchmark_lkf();
        let phi = HistoryFunction::constant(1.0, &[1.0, 1.0]);
        assert!(v.driver_derivative_numeric(&phi, &[0.0, 0.0], &[1.0]).is_err());
        assert!(v.driver_derivative_numeric(&phi, &[0.0, 0.0], &[]).is_err());
    }

    #[test]
    fn v0_sandwich_and_combine() {
        let p = diag(&[0.5, 2.0]);
        for i in 0..50u64 {
            let phi = random_history(i, 2, 1.3, 3.0, (i % 4) as usize);
            let v0 = v0_max(&p, &phi).unwrap();
            let s = phi.sup_norm().powi(2);
            assert!((-2.6f64).exp() * 0.5 * s <= v0 + 1e-9);
            assert!(v0 <= 2.0 * s + 1e-9);
        }
        let phi = random_history(99, 2, 1.0, 1.0, 2);
        let w = combine_w(Functional::benchmark_lkf(), 0.25, DMatrix::identity(2, 2)).unwrap();
        let expect = Functional::benchmark_lkf().eval(&phi).unwrap() + 0.25 * v0_max(&DMatrix::identity(2, 2), &phi).unwrap();
        assert!((w.eval(&phi).unwrap() - expect).abs() < 1e-14);
        assert_eq!(v0_max(&p, &HistoryFunction::zero(2, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn validation() {
        let mut q = DMatrix::identity(2, 2);
        q[(0, 1)] = 1.0;
        assert!(Functional::point_quadratic(q).is_err());
        assert!(Functional::max_exp(diag(&[1.0, 0.0])).is_err());
        assert!(GrowthMatrix::new(diag(&[1.0, -1.0])).is_err());
        let g = GrowthMatrix::new(diag(&[0.5, 3.0])).unwrap();
        assert!((g.p_min() - 0.5).abs() < 1e-15 && (g.p_max() - 3.0).abs() < 1e-15);
        assert!(HypothesisConstants::new(1.0, 0.5, 1.0, GrowthMatrix::identity(2), Gain::square())
            .unwrap()
            .with_a_lower(2.0)
            .is_err());
        assert!(Gain::custom(|s| -s).is_err());
        assert!(Functional::benchmark_lkf().eval(&HistoryFunction::zero(3, 1.0)).is_err());
    }

    #[test]
    fn gains() {
        let h = HypothesisConstants::new(3.0, 0.5, 1.0, GrowthMatrix::identity(2), Gain::square()).unwrap();
        assert_eq!(h.linear_gain_coefficient(), Some(1.0));
        let h = HypothesisConstants { gamma: Gain::power(2.0, 1.0).unwrap(), ..h };
        assert_eq!(h.linear_gain_coefficient(), None);
        assert!((Gain::square().inverse(9.0).unwrap() - 3.0).abs() < 1e-15);
        assert!(Gain::zero().inverse(1.0).is_err());
    }

    #[test]
    fn nonnegativity() {
        let phi = random_history(1, 2, 1.0, 2.0, 3);
        let v = Functional::benchmark_lkf();
        assert!(v.is_nonnegative(1.0));
        assert!(v.eval(&phi).unwrap() >= 0.0);
        assert!(!Functional::scale(-1.0, v).is_nonnegative(1.0));
    }
}
