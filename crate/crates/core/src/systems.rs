//! Delay systems ẋ(t) = f(x_t, u(t)), input signals, and the built-in
//! benchmark systems.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::histories::{norm, random_history, History, HistoryFunction};
use crate::mix_seed;

/// A right-hand side f(φ, v). Implementations must be pure.
pub trait VectorField: Send + Sync {
    fn eval(&self, phi: &dyn History, v: &[f64]) -> Vec<f64>;
}

impl<F> VectorField for F
where
    F: Fn(&dyn History, &[f64]) -> Vec<f64> + Send + Sync,
{
    fn eval(&self, phi: &dyn History, v: &[f64]) -> Vec<f64> {
        self(phi, v)
    }
}

#[derive(Clone)]
pub struct DelaySystem {
    name: String,
    n: usize,
    m: usize,
    delay: f64,
    field: Arc<dyn VectorField>,
}

impl fmt::Debug for DelaySystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DelaySystem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("delay", &self.delay)
            .finish_non_exhaustive()
    }
}

impl DelaySystem {
    /// Builds a system and checks f(0, 0) = 0 with one evaluation.
    pub fn new<F>(name: impl Into<String>, n: usize, m: usize, delay: f64, field: F) -> Result<Self>
    where
        F: VectorField + 'static,
    {
        if !(delay >= 0.0) || !delay.is_finite() {
            return Err(Error::Domain(format!("delay must be finite and ≥ 0, got {delay}")));
        }
        let sys = Self {
            name: name.into(),
            n,
            m,
            delay,
            field: Arc::new(field),
        };
        let at_origin = sys.field.eval(&HistoryFunction::zero(n, delay), &vec![0.0; m]);
        check_dim(n, at_origin.len())?;
        if norm(&at_origin) > 1e-12 {
            return Err(Error::Contract(format!(
                "f(0, 0) must vanish, got |f(0, 0)| = {}",
                norm(&at_origin)
            )));
        }
        Ok(sys)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    pub fn eval(&self, phi: &dyn History, v: &[f64]) -> Vec<f64> {
        self.field.eval(phi, v)
    }
}

/// Exogenous input u : ℝ≥0 → ℝᵐ.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSignal {
    Constant(Vec<f64>),
    Step {
        at: f64,
        before: Vec<f64>,
        after: Vec<f64>,
    },
    /// amplitude · sin(ω t + phase), componentwise.
    Sinusoid {
        amplitude: Vec<f64>,
        omega: f64,
        phase: f64,
    },
    /// Piecewise-constant values, uniform in [−amplitude, amplitude]ᵐ on
    /// each interval of length `hold`.
    Noise {
        seed: u64,
        dim: usize,
        amplitude: f64,
        hold: f64,
    },
    /// t ↦ inner(t + offset).
    Shifted { inner: Box<InputSignal>, offset: f64 },
}

impl InputSignal {
    pub fn zero(m: usize) -> Self {
        Self::Constant(vec![0.0; m])
    }

    pub fn shifted(self, offset: f64) -> Self {
        Self::Shifted {
            inner: Box::new(self),
            offset,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Constant(v) => v.len(),
            Self::Step { before, .. } => before.len(),
            Self::Sinusoid { amplitude, .. } => amplitude.len(),
            Self::Noise { dim, .. } => *dim,
            Self::Shifted { inner, .. } => inner.dim(),
        }
    }

    fn noise_value(seed: u64, dim: usize, amplitude: f64, j: i64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, j as u64));
        (0..dim).map(|_| amplitude * rng.gen_range(-1.0..=1.0)).collect()
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        match self {
            Self::Constant(v) => v.clone(),
            Self::Step { at, before, after } => {
                if t < *at {
                    before.clone()
                } else {
                    after.clone()
                }
            }
            Self::Sinusoid {
                amplitude,
                omega,
                phase,
            } => {
                let s = (omega * t + phase).sin();
                amplitude.iter().map(|a| a * s).collect()
            }
            Self::Noise {
                seed,
                dim,
                amplitude,
                hold,
            } => Self::noise_value(*seed, *dim, *amplitude, (t / hold).floor() as i64),
            Self::Shifted { inner, offset } => inner.eval(t + offset),
        }
    }

    /// ess-sup of |u| over [t1, t2].
    pub fn window_sup(&self, t1: f64, t2: f64) -> f64 {
        let (t1, t2) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        match self {
            Self::Constant(v) => norm(v),
            Self::Step { at, before, after } => {
                let mut s: f64 = 0.0;
                if t1 < *at {
                    s = s.max(norm(before));
                }
                if t2 >= *at {
                    s = s.max(norm(after));
                }
                s
            }
            Self::Sinusoid {
                amplitude,
                omega,
                phase,
            } => {
                let a = norm(amplitude);
                if *omega == 0.0 {
                    return a * phase.sin().abs();
                }
                let (th1, th2) = {
                    let x = omega * t1 + phase;
                    let y = omega * t2 + phase;
                    (x.min(y), x.max(y))
                };
                // |sin| peaks at π/2 + kπ.
                let half_pi = std::f64::consts::FRAC_PI_2;
                let k = ((th1 - half_pi) / std::f64::consts::PI).ceil();
                if half_pi + k * std::f64::consts::PI <= th2 {
                    a
                } else {
                    a * th1.sin().abs().max(th2.sin().abs())
                }
            }
            Self::Noise {
                seed,
                dim,
                amplitude,
                hold,
            } => {
                let j1 = (t1 / hold).floor() as i64;
                let j2 = (t2 / hold).floor() as i64;
                (j1..=j2)
                    .map(|j| norm(&Self::noise_value(*seed, *dim, *amplitude, j)))
                    .fold(0.0, f64::max)
            }
            Self::Shifted { inner, offset } => inner.window_sup(t1 + offset, t2 + offset),
        }
    }
}

type Uncertainty = Arc<dyn Fn(&dyn History) -> f64 + Send + Sync>;

/// Modeling uncertainties (d₁, d₂) with |dᵢ(φ)| ≤ ‖φ‖.
#[derive(Clone)]
pub struct UncertaintyPair {
    d1: Uncertainty,
    d2: Uncertainty,
}

impl fmt::Debug for UncertaintyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("UncertaintyPair")
    }
}

/// Number of seeded histories probed when an uncertainty pair is built.
pub const UNCERTAINTY_PROBES: usize = 100;

impl UncertaintyPair {
    pub fn new<F1, F2>(d1: F1, d2: F2) -> Self
    where
        F1: Fn(&dyn History) -> f64 + Send + Sync + 'static,
        F2: Fn(&dyn History) -> f64 + Send + Sync + 'static,
    {
        Self {
            d1: Arc::new(d1),
            d2: Arc::new(d2),
        }
    }

    pub fn zero() -> Self {
        Self::new(|_| 0.0, |_| 0.0)
    }

    pub fn eval(&self, phi: &dyn History) -> (f64, f64) {
        ((self.d1)(phi), (self.d2)(phi))
    }

    /// Probes |dᵢ(φ)| ≤ ‖φ‖ on seeded random two-dimensional histories.
    /// This is a contract check, not a proof.
    pub fn check_bound(&self, delay: f64) -> Result<()> {
        for i in 0..UNCERTAINTY_PROBES {
            let bound = [0.1, 1.0, 10.0][i % 3];
            let modes = [0, 2, 8][(i / 3) % 3];
            let phi = random_history(mix_seed(0x5eed_d1d2, i as u64), 2, delay, bound, modes);
            let sup = phi.sup_norm();
            let (a, b) = self.eval(&phi);
            let limit = sup * (1.0 + 1e-12) + 1e-15;
            if !(a.abs() <= limit && b.abs() <= limit) {
                return Err(Error::Contract(format!(
                    "uncertainty exceeds the history norm: |d| = ({}, {}) > ‖φ‖ = {sup}",
                    a.abs(),
                    b.abs()
                )));
            }
        }
        Ok(())
    }
}

/// Two-state benchmark with a cubic coupling through x₂(t−Δ):
///
/// ```text
/// ẋ₁ = −½x₁(t) + x₂(t−Δ) + x₂(t)(x₁(t)² + x₂(t−Δ)²)
/// ẋ₂ = −2x₂(t) − x₁(t)(x₁(t)² + x₂(t−Δ)²) + u(t)
/// ```
pub fn make_example1(delay: f64) -> Result<DelaySystem> {
    DelaySystem::new("example1", 2, 1, delay, |phi: &dyn History, v: &[f64]| {
        let x = phi.current();
        let xd = phi.delayed();
        let r = x[0] * x[0] + xd[1] * xd[1];
        vec![
            -0.5 * x[0] + xd[1] + x[1] * r,
            -2.0 * x[1] - x[0] * r + v[0],
        ]
    })
}

/// Uncertain variant of [`make_example1`]: the first line reads the delayed
/// x₁ instead of x₂, and ε·d₁(x_t), ε·d₂(x_t) are added.
pub fn make_example2(delay: f64, epsilon: f64, d: UncertaintyPair) -> Result<DelaySystem> {
    d.check_bound(delay)?;
    DelaySystem::new("example2", 2, 1, delay, move |phi: &dyn History, v: &[f64]| {
        let x = phi.current();
        let xd = phi.delayed();
        let r = x[0] * x[0] + xd[1] * xd[1];
        let (d1, d2) = if epsilon == 0.0 { (0.0, 0.0) } else { d.eval(phi) };
        vec![
            -0.5 * x[0] + xd[0] + x[1] * r + epsilon * d1,
            -2.0 * x[1] - x[0] * r + v[0] + epsilon * d2,
        ]
    })
}

/// [`make_example2`] with ε = 0 and an extra −x₂(t)³ damping in the second
/// line.
pub fn make_example3(delay: f64) -> Result<DelaySystem> {
    DelaySystem::new("example3", 2, 1, delay, |phi: &dyn History, v: &[f64]| {
        let x = phi.current();
        let xd = phi.delayed();
        let r = x[0] * x[0] + xd[1] * xd[1];
        vec![
            -0.5 * x[0] + xd[0] + x[1] * r,
            -2.0 * x[1] - x[1] * x[1] * x[1] - x[0] * r + v[0],
        ]
    })
}

/// Scalar ẋ = −a·x(t) + b·x(t−Δ) + u(t).
pub fn make_linear_baseline(a: f64, b: f64, delay: f64) -> Result<DelaySystem> {
    DelaySystem::new("linear", 1, 1, delay, move |phi: &dyn History, v: &[f64]| {
        let x = phi.current()[0];
        let xd = phi.delayed()[0];
        vec![-a * x + b * xd + v[0]]
    })
}
