//! History functions φ : [−Δ, 0] → ℝⁿ.
//!
//! A [`HistoryFunction`] is a sampled curve on a strictly increasing grid
//! whose first node is −Δ and whose last node is 0. Between nodes it is
//! either piecewise linear (the default, for which the sup-norm is exact at
//! the nodes) or cubic Hermite with explicit per-segment tangents.
//!
//! The [`History`] trait is the read-only view the vector fields and
//! functionals consume; the solver implements it for in-step views of a
//! trajectory so that field evaluations do not allocate a full history.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::solver::Trajectory;

/// Oversampling factor used for the sup-norm of cubic Hermite histories.
pub const CUBIC_SUP_OVERSAMPLING: usize = 8;

/// Read-only access to a state history.
pub trait History: Sync {
    fn dim(&self) -> usize;

    fn delay(&self) -> f64;

    /// Writes φ(τ) into `out`. τ is clamped to [−Δ, 0].
    fn eval_into(&self, tau: f64, out: &mut [f64]);

    /// ‖φ‖ = sup over [−Δ, 0] of the Euclidean norm.
    fn sup_norm(&self) -> f64;

    fn at(&self, tau: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(tau, &mut out);
        out
    }

    /// φ(0).
    fn current(&self) -> Vec<f64> {
        self.at(0.0)
    }

    /// φ(−Δ).
    fn delayed(&self) -> Vec<f64> {
        self.at(-self.delay())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Linear,
    CubicHermite,
}

/// A sampled history on [−Δ, 0].
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryFunction {
    dim: usize,
    delay: f64,
    grid: Vec<f64>,
    values: Vec<f64>,
    // Cubic Hermite only: for each segment, the tangent at its left end
    // followed by the tangent at its right end (2·dim entries per segment).
    // Storing tangents per segment lets a history carry a kink.
    tangents: Option<Vec<f64>>,
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn range_tol(delay: f64) -> f64 {
    1e-12 * delay.max(1.0)
}

fn hermite_basis(s: f64) -> [f64; 4] {
    let s2 = s * s;
    let s3 = s2 * s;
    [
        2.0 * s3 - 3.0 * s2 + 1.0,
        s3 - 2.0 * s2 + s,
        -2.0 * s3 + 3.0 * s2,
        s3 - s2,
    ]
}

fn hermite_basis_deriv(s: f64) -> [f64; 4] {
    let s2 = s * s;
    [
        6.0 * s2 - 6.0 * s,
        3.0 * s2 - 4.0 * s + 1.0,
        -6.0 * s2 + 6.0 * s,
        3.0 * s2 - 2.0 * s,
    ]
}

/// Uniform grid with exact endpoints −Δ and 0.
pub(crate) fn uniform_grid(delay: f64, segments: usize) -> Vec<f64> {
    if delay == 0.0 || segments == 0 {
        return vec![0.0];
    }
    let mut grid: Vec<f64> = (0..=segments)
        .map(|i| -delay + delay * i as f64 / segments as f64)
        .collect();
    grid[0] = -delay;
    grid[segments] = 0.0;
    grid
}

impl HistoryFunction {
    /// Piecewise-linear history from one vector per grid node.
    pub fn new(delay: f64, grid: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        let dim = values.first().map(Vec::len).unwrap_or(0);
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::Contract("history values have unequal lengths".into()));
        }
        let flat = values.into_iter().flatten().collect();
        Self::from_flat(dim, delay, grid, flat)
    }

    /// Piecewise-linear history from row-major node values.
    pub fn from_flat(dim: usize, delay: f64, grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let h = Self {
            dim,
            delay,
            grid,
            values,
            tangents: None,
        };
        h.validate()?;
        Ok(h)
    }

    /// Cubic Hermite history with one derivative per node (no kinks).
    pub fn cubic_from_nodes(
        delay: f64,
        grid: Vec<f64>,
        values: Vec<Vec<f64>>,
        derivatives: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let mut h = Self::new(delay, grid, values)?;
        if derivatives.len() != h.grid.len() || derivatives.iter().any(|d| d.len() != h.dim) {
            return Err(Error::Contract("one derivative per node is required".into()));
        }
        let mut tangents = Vec::with_capacity(2 * h.dim * h.segments());
        for i in 0..h.segments() {
            tangents.extend_from_slice(&derivatives[i]);
            tangents.extend_from_slice(&derivatives[i + 1]);
        }
        h.tangents = Some(tangents);
        Ok(h)
    }

    /// The constant history φ ≡ `value`, on the two-node grid {−Δ, 0}.
    pub fn constant(delay: f64, value: &[f64]) -> Self {
        let grid = uniform_grid(delay, 1);
        let values = grid.iter().flat_map(|_| value.iter().copied()).collect();
        Self {
            dim: value.len(),
            delay,
            grid,
            values,
            tangents: None,
        }
    }

    pub fn zero(dim: usize, delay: f64) -> Self {
        Self::constant(delay, &vec![0.0; dim])
    }

    /// Samples `f` on a uniform grid with `segments` segments.
    pub fn sample<F>(dim: usize, delay: f64, segments: usize, f: F) -> Result<Self>
    where
        F: Fn(f64) -> Vec<f64>,
    {
        let grid = uniform_grid(delay, segments);
        let mut values = Vec::with_capacity(grid.len() * dim);
        for &tau in &grid {
            let v = f(tau);
            check_dim(dim, v.len())?;
            values.extend(v);
        }
        Self::from_flat(dim, delay, grid, values)
    }

    /// Converts to cubic Hermite interpolation, estimating node derivatives
    /// by finite differences of the node values.
    pub fn into_cubic(mut self) -> Self {
        if self.tangents.is_some() || self.grid.len() < 2 {
            return self;
        }
        let n = self.grid.len();
        let dim = self.dim;
        let mut node_deriv = vec![0.0; n * dim];
        for i in 0..n {
            let (a, b) = if i == 0 {
                (0, 1)
            } else if i == n - 1 {
                (n - 2, n - 1)
            } else {
                (i - 1, i + 1)
            };
            let dt = self.grid[b] - self.grid[a];
            for k in 0..dim {
                node_deriv[i * dim + k] = (self.values[b * dim + k] - self.values[a * dim + k]) / dt;
            }
        }
        let mut tangents = Vec::with_capacity(2 * dim * (n - 1));
        for i in 0..n - 1 {
            tangents.extend_from_slice(&node_deriv[i * dim..(i + 1) * dim]);
            tangents.extend_from_slice(&node_deriv[(i + 1) * dim..(i + 2) * dim]);
        }
        self.tangents = Some(tangents);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.delay >= 0.0) || !self.delay.is_finite() {
            return Err(Error::Domain(format!("delay must be finite and ≥ 0, got {}", self.delay)));
        }
        let n = self.grid.len();
        if n == 0 {
            return Err(Error::Contract("empty grid".into()));
        }
        if self.delay == 0.0 {
            if n != 1 || self.grid[0] != 0.0 {
                return Err(Error::Contract("a zero-delay history has the single node 0".into()));
            }
        } else {
            if n < 2 {
                return Err(Error::Contract("grid must contain −Δ and 0".into()));
            }
            if self.grid[0] != -self.delay || self.grid[n - 1] != 0.0 {
                return Err(Error::Contract(format!(
                    "grid must span exactly [−Δ, 0] = [{}, 0], got [{}, {}]",
                    -self.delay,
                    self.grid[0],
                    self.grid[n - 1]
                )));
            }
            if self.grid.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Contract("grid must be strictly increasing".into()));
            }
        }
        check_dim(n * self.dim, self.values.len())?;
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("history values must be finite".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    pub fn interpolation(&self) -> Interpolation {
        if self.tangents.is_some() {
            Interpolation::CubicHermite
        } else {
            Interpolation::Linear
        }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn segments(&self) -> usize {
        self.grid.len().saturating_sub(1)
    }

    pub fn node_value(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    fn tangent(&self, segment: usize, end: usize) -> Option<&[f64]> {
        let d = self.dim;
        self.tangents
            .as_ref()
            .map(|t| &t[(2 * segment + end) * d..(2 * segment + end + 1) * d])
    }

    /// Node index for an exact hit, otherwise the segment containing τ.
    fn locate(&self, tau: f64) -> Located {
        let n = self.grid.len();
        if n == 1 {
            return Located::Node(0);
        }
        let idx = self.grid.partition_point(|&g| g <= tau);
        if idx == 0 {
            return Located::Node(0);
        }
        if idx == n {
            return Located::Node(n - 1);
        }
        if self.grid[idx - 1] == tau {
            Located::Node(idx - 1)
        } else {
            Located::Segment(idx - 1)
        }
    }

    fn check_range(&self, tau: f64) -> Result<f64> {
        let tol = range_tol(self.delay);
        if !tau.is_finite() || tau < -self.delay - tol || tau > tol {
            return Err(Error::Domain(format!(
                "τ = {tau} outside [−Δ, 0] = [{}, 0]",
                -self.delay
            )));
        }
        Ok(tau.clamp(-self.delay, 0.0))
    }

    /// φ(τ); exact at grid nodes.
    pub fn eval(&self, tau: f64) -> Result<Vec<f64>> {
        let tau = self.check_range(tau)?;
        let mut out = vec![0.0; self.dim];
        self.eval_clamped(tau, &mut out);
        Ok(out)
    }

    fn eval_clamped(&self, tau: f64, out: &mut [f64]) {
        match self.locate(tau) {
            Located::Node(i) => out.copy_from_slice(self.node_value(i)),
            Located::Segment(i) => self.eval_segment(i, tau, out),
        }
    }

    fn eval_segment(&self, i: usize, tau: f64, out: &mut [f64]) {
        let (t0, t1) = (self.grid[i], self.grid[i + 1]);
        let len = t1 - t0;
        let s = (tau - t0) / len;
        let v0 = self.node_value(i);
        let v1 = self.node_value(i + 1);
        match (self.tangent(i, 0), self.tangent(i, 1)) {
            (Some(m0), Some(m1)) => {
                let b = hermite_basis(s);
                for k in 0..self.dim {
                    out[k] = b[0] * v0[k] + b[1] * len * m0[k] + b[2] * v1[k] + b[3] * len * m1[k];
                }
            }
            _ => {
                for k in 0..self.dim {
                    out[k] = v0[k] + s * (v1[k] - v0[k]);
                }
            }
        }
    }

    fn segment_derivative(&self, i: usize, tau: f64, out: &mut [f64]) {
        let (t0, t1) = (self.grid[i], self.grid[i + 1]);
        let len = t1 - t0;
        let v0 = self.node_value(i);
        let v1 = self.node_value(i + 1);
        match (self.tangent(i, 0), self.tangent(i, 1)) {
            (Some(m0), Some(m1)) => {
                let b = hermite_basis_deriv((tau - t0) / len);
                for k in 0..self.dim {
                    out[k] = (b[0] * v0[k] + b[2] * v1[k]) / len + b[1] * m0[k] + b[3] * m1[k];
                }
            }
            _ => {
                for k in 0..self.dim {
                    out[k] = (v1[k] - v0[k]) / len;
                }
            }
        }
    }

    /// Right derivative φ̇(τ⁺) for τ ∈ [−Δ, 0). At τ = 0 the left derivative
    /// is returned; a zero-delay history has derivative 0.
    pub fn right_derivative(&self, tau: f64) -> Result<Vec<f64>> {
        let tau = self.check_range(tau)?;
        let mut out = vec![0.0; self.dim];
        if self.grid.len() < 2 {
            return Ok(out);
        }
        let seg = match self.locate(tau) {
            Located::Node(i) => i.min(self.segments() - 1),
            Located::Segment(i) => i,
        };
        self.segment_derivative(seg, tau, &mut out);
        Ok(out)
    }

    /// ‖φ‖. Exact for piecewise-linear histories; cubic Hermite segments are
    /// sampled at [`CUBIC_SUP_OVERSAMPLING`] points each.
    pub fn sup_norm(&self) -> f64 {
        let mut best = (0..self.grid.len())
            .map(|i| norm(self.node_value(i)))
            .fold(0.0, f64::max);
        if self.tangents.is_some() {
            let mut buf = vec![0.0; self.dim];
            for i in 0..self.segments() {
                let (t0, t1) = (self.grid[i], self.grid[i + 1]);
                for j in 1..CUBIC_SUP_OVERSAMPLING {
                    let tau = t0 + (t1 - t0) * j as f64 / CUBIC_SUP_OVERSAMPLING as f64;
                    self.eval_segment(i, tau, &mut buf);
                    best = best.max(norm(&buf));
                }
            }
        }
        best
    }

    /// The history s·φ.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        if let Some(t) = out.tangents.as_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
        out
    }

    /// φ + ψ for histories sharing the same grid and interpolation.
    pub fn add(&self, other: &Self) -> Result<Self> {
        check_dim(self.dim, other.dim)?;
        if self.grid != other.grid || self.interpolation() != other.interpolation() {
            return Err(Error::Contract("histories must share grid and interpolation".into()));
        }
        let mut out = self.clone();
        out.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a += b);
        if let (Some(a), Some(b)) = (out.tangents.as_mut(), other.tangents.as_ref()) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
        Ok(out)
    }

    /// The Driver extension φ_{h,w}: φ shifted left by h on [−Δ, −h) and
    /// continued linearly with slope `w` from φ(0) on [−h, 0].
    ///
    /// The result lives on the shifted grid plus the breakpoint −h, so the
    /// kink is represented exactly.
    pub fn driver_extension(&self, h: f64, w: &[f64]) -> Result<Self> {
        check_dim(self.dim, w.len())?;
        if !(h >= 0.0) || h >= self.delay {
            return Err(Error::Domain(format!(
                "extension step h = {h} must lie in [0, Δ) = [0, {})",
                self.delay
            )));
        }
        if h == 0.0 {
            return Ok(self.clone());
        }
        let dim = self.dim;
        let cubic = self.tangents.is_some();
        let eps = 1e-13 * self.delay.max(1.0);
        let cut = -self.delay + h;
        let last = self.grid.len() - 1;

        let mut grid = Vec::with_capacity(self.grid.len() + 2);
        let mut values = Vec::with_capacity((self.grid.len() + 2) * dim);
        let mut tangents: Vec<f64> = Vec::new();

        // First retained original node strictly beyond the cut.
        let seg = match self.locate(cut) {
            Located::Node(i) => i.min(last - 1),
            Located::Segment(i) => i,
        };
        grid.push(-self.delay);
        let mut next = seg + 1;
        if cut - self.grid[seg] <= eps {
            values.extend_from_slice(self.node_value(seg));
            if cubic {
                tangents.extend_from_slice(self.tangent(seg, 0).unwrap());
                tangents.extend_from_slice(self.tangent(seg, 1).unwrap());
            }
        } else if self.grid[seg + 1] - cut <= eps {
            values.extend_from_slice(self.node_value(seg + 1));
            next = seg + 2;
            if cubic && next <= last {
                tangents.extend_from_slice(self.tangent(seg + 1, 0).unwrap());
                tangents.extend_from_slice(self.tangent(seg + 1, 1).unwrap());
            }
        } else {
            let mut buf = vec![0.0; dim];
            self.eval_segment(seg, cut, &mut buf);
            values.extend_from_slice(&buf);
            if cubic {
                self.segment_derivative(seg, cut, &mut buf);
                tangents.extend_from_slice(&buf);
                tangents.extend_from_slice(self.tangent(seg, 1).unwrap());
            }
        }
        for i in next..=last {
            grid.push(self.grid[i] - h);
            values.extend_from_slice(self.node_value(i));
            if cubic && i < last {
                tangents.extend_from_slice(self.tangent(i, 0).unwrap());
                tangents.extend_from_slice(self.tangent(i, 1).unwrap());
            }
        }
        // The shifted last node sits at −h (up to rounding); pin it.
        let n = grid.len();
        if n < 2 {
            return Err(Error::Domain(format!("extension step h = {h} too close to Δ")));
        }
        grid[n - 1] = -h;
        if !(grid[n - 1] > grid[n - 2]) {
            return Err(Error::Domain(format!("extension step h = {h} too close to Δ")));
        }
        grid.push(0.0);
        let x0 = self.node_value(last);
        values.extend(x0.iter().zip(w).map(|(x, w)| x + h * w));
        if cubic {
            tangents.extend_from_slice(w);
            tangents.extend_from_slice(w);
        }
        let out = Self {
            dim,
            delay: self.delay,
            grid,
            values,
            tangents: cubic.then_some(tangents),
        };
        out.validate()?;
        Ok(out)
    }
}

enum Located {
    Node(usize),
    Segment(usize),
}

impl History for HistoryFunction {
    fn dim(&self) -> usize {
        self.dim
    }

    fn delay(&self) -> f64 {
        self.delay
    }

    fn eval_into(&self, tau: f64, out: &mut [f64]) {
        self.eval_clamped(tau.clamp(-self.delay, 0.0), out);
    }

    fn sup_norm(&self) -> f64 {
        HistoryFunction::sup_norm(self)
    }
}

/// x_t as a history: τ ↦ x(t + τ) on [−Δ, 0].
pub fn window(x: &Trajectory, t: f64) -> Result<HistoryFunction> {
    let t_end = x.t_end();
    let tol = 1e-9 * x.dt();
    if !t.is_finite() || t < -tol || t > t_end + tol {
        return Err(Error::Domain(format!("t = {t} outside trajectory domain [0, {t_end}]")));
    }
    let t = t.clamp(0.0, t_end);
    if t == 0.0 {
        return Ok(x.initial().clone());
    }
    let delay = x.delay();
    let dim = x.dim();
    if delay == 0.0 {
        return HistoryFunction::from_flat(dim, 0.0, vec![0.0], x.eval(t)?);
    }
    let start = t - delay;
    let mut grid = vec![-delay];
    let mut values = x.eval(start)?;
    let push = |tau: f64, v: &[f64], grid: &mut Vec<f64>, values: &mut Vec<f64>| {
        if tau > *grid.last().unwrap() + 1e-12 * delay && tau < -1e-12 * delay {
            grid.push(tau);
            values.extend_from_slice(v);
        }
    };
    if start < 0.0 {
        let init = x.initial();
        for (i, &g) in init.grid().iter().enumerate() {
            if g > start && g < 0.0 {
                push(g - t, init.node_value(i), &mut grid, &mut values);
            }
        }
    }
    let dt = x.dt();
    let k_first = ((start.max(0.0)) / dt).ceil() as usize;
    let k_last = ((t / dt).floor() as usize).min(x.len() - 1);
    for k in k_first..=k_last {
        let tk = k as f64 * dt;
        push(tk - t, x.state(k), &mut grid, &mut values);
    }
    grid.push(0.0);
    values.extend(x.eval(t)?);
    HistoryFunction::from_flat(dim, delay, grid, values)
}

/// Deterministic random history: a random constant plus `modes` Fourier
/// modes on [−Δ, 0], rescaled so that ‖φ‖ = `norm_bound`.
pub fn random_history(seed: u64, dim: usize, delay: f64, norm_bound: f64, modes: usize) -> HistoryFunction {
    if norm_bound <= 0.0 {
        return HistoryFunction::zero(dim, delay);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segments = if delay == 0.0 { 0 } else { 64.max(16 * modes) };
    let grid = uniform_grid(delay, segments);
    let constant: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let coeffs: Vec<(f64, f64)> = (0..dim * modes)
        .map(|_| (rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)))
        .collect();
    let mut values = Vec::with_capacity(grid.len() * dim);
    for &tau in &grid {
        let s = if delay > 0.0 { (tau + delay) / delay } else { 0.0 };
        for k in 0..dim {
            let mut v = constant[k];
            for j in 0..modes {
                let (a, b) = coeffs[k * modes + j];
                let freq = std::f64::consts::PI * (j + 1) as f64;
                v += (a * (freq * s).cos() + b * (freq * s).sin()) / (j + 1) as f64;
            }
            values.push(v);
        }
    }
    let mut h = HistoryFunction {
        dim,
        delay,
        grid,
        values,
        tangents: None,
    };
    for _ in 0..2 {
        let sup = h.sup_norm();
        if sup == 0.0 {
            return HistoryFunction::zero(dim, delay);
        }
        if sup <= norm_bound && sup >= norm_bound * (1.0 - 1e-15) {
            break;
        }
        h = h.scaled(norm_bound / sup);
    }
    h
}
