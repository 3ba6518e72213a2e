//! Empirical counterparts of the stability estimates: seeded ensembles,
//! exponential envelope fits, linear ISS gain fits and the empirical
//! two-inequality test.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::certify::MODE_COUNTS;
use crate::error::{Error, Result};
use crate::format::sig17;
use crate::histories::{norm, random_history, HistoryFunction};
use crate::mix_seed;
use crate::solver::{integrate, Trajectory};
use crate::systems::{DelaySystem, InputSignal};

/// Produces the initial history of ensemble member `index`.
pub trait HistorySampler: Sync {
    fn history(&self, index: usize) -> HistoryFunction;
}

impl<F: Fn(usize) -> HistoryFunction + Sync> HistorySampler for F {
    fn history(&self, index: usize) -> HistoryFunction {
        self(index)
    }
}

/// Produces the input of ensemble member `index`.
pub trait InputSampler: Sync {
    fn input(&self, index: usize) -> InputSignal;
}

impl<F: Fn(usize) -> InputSignal + Sync> InputSampler for F {
    fn input(&self, index: usize) -> InputSignal {
        self(index)
    }
}

/// Random histories with sup-norm exactly `norm_bound`, cycling through the
/// mode counts {0, 2, 8}.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomHistories {
    pub seed: u64,
    pub dim: usize,
    pub delay: f64,
    pub norm_bound: f64,
}

impl RandomHistories {
    pub fn new(seed: u64, dim: usize, delay: f64, norm_bound: f64) -> Self {
        Self {
            seed,
            dim,
            delay,
            norm_bound,
        }
    }
}

impl HistorySampler for RandomHistories {
    fn history(&self, index: usize) -> HistoryFunction {
        let modes = MODE_COUNTS[index % MODE_COUNTS.len()];
        random_history(mix_seed(self.seed, index as u64), self.dim, self.delay, self.norm_bound, modes)
    }
}

/// u ≡ 0 for every member.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroInput(pub usize);

impl InputSampler for ZeroInput {
    fn input(&self, _: usize) -> InputSignal {
        InputSignal::zero(self.0)
    }
}

/// A seeded set of trajectories. Blow-ups are kept and reported.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub trajectories: Vec<Trajectory>,
    pub inputs: Vec<InputSignal>,
    pub horizon: f64,
    pub dt: f64,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Indices of members that blew up.
    pub fn blown_up(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.trajectories[i].completed()).collect()
    }

    pub fn all_completed(&self) -> bool {
        self.trajectories.iter().all(Trajectory::completed)
    }
}

/// Integrates `n` members in parallel; member i uses `histories.history(i)`
/// and `inputs.input(i)`.
pub fn run_ensemble(
    sys: &DelaySystem,
    histories: &dyn HistorySampler,
    inputs: &dyn InputSampler,
    n: usize,
    horizon: f64,
    dt: f64,
) -> Result<Ensemble> {
    if n == 0 {
        return Err(Error::Contract("ensemble size must be ≥ 1".into()));
    }
    let members: Vec<(Trajectory, InputSignal)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let u = inputs.input(i);
            integrate(sys, &histories.history(i), &u, horizon, dt).map(|x| (x, u))
        })
        .collect::<Result<_>>()?;
    let (trajectories, inputs) = members.into_iter().unzip();
    Ok(Ensemble {
        trajectories,
        inputs,
        horizon,
        dt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeOptions {
    pub eta_min: f64,
    pub eta_max: f64,
    pub grid_points: usize,
    pub k_cap: f64,
    /// Fraction of the horizon forming the tail: an η is rejected when
    /// max |x(t)|e^{ηt} over the tail exceeds its max over the rest.
    pub tail_fraction: f64,
}

impl Default for EnvelopeOptions {
    fn default() -> Self {
        Self {
            eta_min: 1e-3,
            eta_max: 10.0,
            grid_points: 200,
            k_cap: 1e3,
            tail_fraction: 0.25,
        }
    }
}

impl EnvelopeOptions {
    /// log-spaced η grid from `eta_min` to `eta_max`.
    pub fn eta_grid(&self) -> Vec<f64> {
        let n = self.grid_points.max(2);
        let (l0, l1) = (self.eta_min.ln(), self.eta_max.ln());
        (0..n).map(|i| (l0 + (l1 - l0) * i as f64 / (n - 1) as f64).exp()).collect()
    }
}

/// |x(t)| ≤ k‖x₀‖e^{−ηt} on every fitted sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeFit {
    pub k: f64,
    pub eta: f64,
    /// min over samples and grid times of k‖x₀‖e^{−ηt} − |x(t)|.
    pub slack: f64,
    pub trajectories: usize,
    pub options: EnvelopeOptions,
}

impl EnvelopeFit {
    pub fn envelope(&self, norm0: f64, t: f64) -> f64 {
        self.k * norm0 * (-self.eta * t).exp()
    }

    /// Slack of this envelope on other trajectories.
    pub fn slack_on(&self, trajs: &[Trajectory]) -> f64 {
        trajs.iter().map(|x| envelope_slack(x, self.k, self.eta)).fold(f64::INFINITY, f64::min)
    }
}

fn envelope_slack(x: &Trajectory, k: f64, eta: f64) -> f64 {
    let n0 = x.initial().sup_norm();
    (0..x.len())
        .map(|i| k * n0 * (-eta * x.time(i)).exp() - norm(x.state(i)))
        .fold(f64::INFINITY, f64::min)
}

// (max over the head, max over the tail) of |x(t)|e^{ηt}/‖x₀‖.
fn weighted_maxima(x: &Trajectory, eta: f64, tail_start: f64) -> (f64, f64) {
    let n0 = x.initial().sup_norm();
    let mut head: f64 = 0.0;
    let mut tail: f64 = 0.0;
    for i in 0..x.len() {
        let t = x.time(i);
        let r = norm(x.state(i)) * (eta * t).exp() / n0;
        if t >= tail_start && i > 0 {
            tail = tail.max(r);
        } else {
            head = head.max(r);
        }
    }
    (head, tail)
}

/// Fits a decay envelope to zero-input trajectories. For each η on the grid,
/// k(η) = max(1, max |x(t)|e^{ηt}/‖x₀‖); the largest η with k(η) ≤ k_cap whose
/// weighted maximum is not reached in the tail of the horizon is returned.
/// k is inflated by a relative 1e−12 so that the slack is nonnegative after
/// rounding.
pub fn fit_envelope(trajs: &[Trajectory], options: &EnvelopeOptions) -> Result<EnvelopeFit> {
    if trajs.is_empty() {
        return Err(Error::Contract("no trajectories to fit".into()));
    }
    for (i, x) in trajs.iter().enumerate() {
        if !x.completed() {
            return Err(Error::Contract(format!("trajectory {i} did not complete")));
        }
        if !(x.initial().sup_norm() > 0.0) {
            return Err(Error::Contract(format!("trajectory {i} starts from the zero history")));
        }
    }
    let horizon = trajs.iter().map(Trajectory::t_end).fold(f64::INFINITY, f64::min);
    let tail_start = horizon * (1.0 - options.tail_fraction);
    let mut best: Option<(f64, f64)> = None;
    for eta in options.eta_grid() {
        let (head, tail) = trajs
            .par_iter()
            .map(|x| weighted_maxima(x, eta, tail_start))
            .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
        let k = head.max(tail).max(1.0) * (1.0 + 1e-12);
        if k <= options.k_cap && tail <= head {
            best = Some((eta, k));
        }
    }
    let (eta, k) = best.ok_or_else(|| {
        Error::FitFailure(format!(
            "no η in [{}, {}] admits k ≤ {} with a decaying weighted tail",
            options.eta_min, options.eta_max, options.k_cap
        ))
    })?;
    let fit = EnvelopeFit {
        k,
        eta,
        slack: 0.0,
        trajectories: trajs.len(),
        options: *options,
    };
    Ok(EnvelopeFit {
        slack: fit.slack_on(trajs),
        ..fit
    })
}

/// Plot data: one `traj t abs_x envelope` line per stored state, every
/// `stride`-th state of each trajectory.
pub fn write_envelope_data<W: Write>(fit: &EnvelopeFit, trajs: &[Trajectory], stride: usize, mut out: W) -> Result<()> {
    let stride = stride.max(1);
    writeln!(out, "# k = {}  eta = {}  grid_points = {}", sig17(fit.k), sig17(fit.eta), fit.options.grid_points)?;
    writeln!(out, "# traj t abs_x envelope")?;
    for (j, x) in trajs.iter().enumerate() {
        let n0 = x.initial().sup_norm();
        for i in (0..x.len()).step_by(stride) {
            let t = x.time(i);
            writeln!(out, "{j} {} {} {}", sig17(t), sig17(norm(x.state(i))), sig17(fit.envelope(n0, t)))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainOptions {
    pub seed: u64,
    /// Random histories per amplitude and input direction, in addition to the
    /// zero history.
    pub histories: usize,
    pub history_norm: f64,
    /// Input directions per amplitude (each used with both signs).
    pub directions: usize,
}

impl Default for GainOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            histories: 4,
            history_norm: 1.0,
            directions: 1,
        }
    }
}

/// Tail statistics for one input amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeTail {
    pub amplitude: f64,
    /// max over runs of sup |x(t)| on the tail window.
    pub tail: f64,
    pub runs: usize,
    pub blown_up: usize,
    /// True when some run blew up; the amplitude is then left out of μ₀.
    pub excluded: bool,
}

/// Linear-gain estimate μ₀ = max over positive, non-excluded amplitudes of
/// tail/amplitude. Zero amplitudes are reported but do not enter μ₀; their
/// tails measure the residual transient.
#[derive(Debug, Clone, PartialEq)]
pub struct GainFit {
    pub mu0: f64,
    pub tail_fraction: f64,
    pub amplitudes: Vec<AmplitudeTail>,
}

impl GainFit {
    /// μ₀·s with the convention 0·∞ = 0.
    pub fn gain(&self, s: f64) -> f64 {
        if s == 0.0 {
            0.0
        } else {
            self.mu0 * s
        }
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let n = norm(&v);
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Runs constant-input ensembles for each amplitude from the zero history and
/// from random histories, and records the sup of |x(t)| over the last
/// `tail_fraction` of [0, T].
pub fn fit_iss_gain(
    sys: &DelaySystem,
    amplitudes: &[f64],
    horizon: f64,
    dt: f64,
    tail_fraction: f64,
    options: &GainOptions,
) -> Result<GainFit> {
    if amplitudes.is_empty() {
        return Err(Error::Contract("at least one amplitude is required".into()));
    }
    if amplitudes.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
        return Err(Error::Contract("amplitudes must be finite and ≥ 0".into()));
    }
    if !(tail_fraction > 0.0 && tail_fraction < 1.0) {
        return Err(Error::Contract(format!("tail fraction must lie in (0, 1), got {tail_fraction}")));
    }
    let (n, m) = (sys.state_dim(), sys.input_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(options.seed, 0x6a1));
    let directions: Vec<Vec<f64>> = (0..options.directions.max(1)).map(|_| unit_direction(&mut rng, m)).collect();
    let randoms = RandomHistories::new(mix_seed(options.seed, 0x415), n, sys.delay(), options.history_norm);
    let mut starts = vec![HistoryFunction::zero(n, sys.delay())];
    starts.extend((0..options.histories).map(|i| randoms.history(i)));
    let tail_start = horizon * (1.0 - tail_fraction);

    let mut tails = Vec::with_capacity(amplitudes.len());
    for &amp in amplitudes {
        let mut cases = Vec::new();
        for d in &directions {
            for sign in [1.0, -1.0] {
                let u = InputSignal::Constant(d.iter().map(|x| sign * amp * x).collect());
                for h in &starts {
                    cases.push((h, u.clone()));
                }
                if amp == 0.0 {
                    break;
                }
            }
        }
        let results: Vec<Trajectory> = cases
            .par_iter()
            .map(|(h, u)| integrate(sys, h, u, horizon, dt))
            .collect::<Result<_>>()?;
        let blown_up = results.iter().filter(|x| !x.completed()).count();
        let tail = results
            .iter()
            .filter(|x| x.completed())
            .flat_map(|x| (0..x.len()).filter(move |&i| x.time(i) >= tail_start).map(move |i| norm(x.state(i))))
            .fold(0.0, f64::max);
        tails.push(AmplitudeTail {
            amplitude: amp,
            tail: if blown_up > 0 { f64::INFINITY } else { tail },
            runs: results.len(),
            blown_up,
            excluded: blown_up > 0,
        });
    }
    let usable: Vec<&AmplitudeTail> = tails.iter().filter(|t| t.amplitude > 0.0 && !t.excluded).collect();
    let mu0 = if usable.is_empty() && tails.iter().any(|t| t.amplitude > 0.0) {
        f64::INFINITY
    } else {
        usable.iter().map(|t| t.tail / t.amplitude).fold(0.0, f64::max)
    };
    Ok(GainFit {
        mu0,
        tail_fraction,
        amplitudes: tails,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoInequalityOptions {
    pub seed: u64,
    pub dt: f64,
    /// Amplitudes used to fit μ̂₀.
    pub gain_amplitudes: Vec<f64>,
    pub tail_fraction: f64,
    /// Constant-input amplitudes cycled through the ensemble members.
    pub input_amplitudes: Vec<f64>,
    pub history_norm: f64,
}

impl Default for TwoInequalityOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            dt: 1e-2,
            gain_amplitudes: vec![0.1, 1.0],
            tail_fraction: 0.25,
            input_amplitudes: vec![0.0],
            history_norm: 1.0,
        }
    }
}

/// Empirical constants of ‖x_t‖ ≤ ℓ‖x₀‖ + μ₀‖u‖ on [0, T] and
/// ‖x_T‖ ≤ λ‖x₀‖ + μ₀‖u‖.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoInequalityEstimate {
    pub ell: f64,
    pub lambda: f64,
    pub mu0: f64,
    pub horizon: f64,
    pub samples: usize,
    pub blown_up: usize,
    /// λ̂ < 1 and no member blew up.
    pub contraction: bool,
}

/// Estimates (ℓ̂, λ̂, μ̂₀) from `budget` seeded members; μ̂₀ comes from
/// [`fit_iss_gain`]. A blow-up sets ℓ̂ = λ̂ = ∞ (a refutation).
pub fn empirical_two_inequality(
    sys: &DelaySystem,
    horizon: f64,
    budget: usize,
    options: &TwoInequalityOptions,
) -> Result<TwoInequalityEstimate> {
    if !(horizon > 0.0) {
        return Err(Error::Contract(format!("T must be positive, got {horizon}")));
    }
    if options.input_amplitudes.is_empty() {
        return Err(Error::Contract("at least one input amplitude is required".into()));
    }
    let gain = fit_iss_gain(
        sys,
        &options.gain_amplitudes,
        horizon,
        options.dt,
        options.tail_fraction,
        &GainOptions {
            seed: options.seed,
            ..GainOptions::default()
        },
    )?;
    let m = sys.input_dim();
    let histories = RandomHistories::new(mix_seed(options.seed, 0x2e1), sys.state_dim(), sys.delay(), options.history_norm);
    let amps = &options.input_amplitudes;
    let seed = options.seed;
    let inputs = move |i: usize| {
        let amp = amps[i % amps.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1_0000 + i as u64));
        InputSignal::Constant(unit_direction(&mut rng, m).into_iter().map(|x| amp * x).collect())
    };
    let ens = run_ensemble(sys, &histories, &inputs, budget, horizon, options.dt)?;
    let blown_up = ens.blown_up().len();
    let (mut ell, mut lambda) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    if blown_up > 0 {
        ell = f64::INFINITY;
        lambda = f64::INFINITY;
    } else {
        for (x, u) in ens.trajectories.iter().zip(&ens.inputs) {
            let n0 = x.initial().sup_norm();
            let g = gain.gain(u.window_sup(0.0, horizon));
            let wn = x.window_norms();
            for &w in &wn {
                ell = ell.max((w - g) / n0);
            }
            lambda = lambda.max((wn[wn.len() - 1] - g) / n0);
        }
    }
    Ok(TwoInequalityEstimate {
        ell,
        lambda,
        mu0: gain.mu0,
        horizon,
        samples: ens.len(),
        blown_up,
        contraction: blown_up == 0 && lambda < 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::make_linear_baseline;

    #[test]
    fn zero_ensemble() {
        let sys = make_linear_baseline(1.0, 0.0, 1.0).unwrap();
        let zero = |_: usize| HistoryFunction::zero(1, 1.0);
        let e = run_ensemble(&sys, &zero, &ZeroInput(1), 1, 2.0, 0.25).unwrap();
        assert_eq!(e.len(), 1);
        assert!(e.trajectories[0].state_norms().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn decaying_exponential_envelope() {
        let sys = make_linear_baseline(1.0, 0.0, 0.1).unwrap();
        let one = |_: usize| HistoryFunction::constant(0.1, &[1.0]);
        let e = run_ensemble(&sys, &one, &ZeroInput(1), 1, 20.0, 0.01).unwrap();
        let fit = fit_envelope(&e.trajectories, &EnvelopeOptions::default()).unwrap();
        assert!((fit.eta - 1.0).abs() < 0.05, "η = {}", fit.eta);
        assert!((fit.k - 1.0).abs() < 1e-6);
        assert!(fit.slack >= 0.0);
    }

    #[test]
    fn zero_history_is_rejected() {
        let sys = make_linear_baseline(1.0, 0.0, 1.0).unwrap();
        let zero = |_: usize| HistoryFunction::zero(1, 1.0);
        let e = run_ensemble(&sys, &zero, &ZeroInput(1), 1, 2.0, 0.25).unwrap();
        assert!(matches!(fit_envelope(&e.trajectories, &EnvelopeOptions::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_amplitude_gain() {
        let sys = make_linear_baseline(1.0, 0.0, 1.0).unwrap();
        let g = fit_iss_gain(&sys, &[0.0], 20.0, 0.05, 0.25, &GainOptions::default()).unwrap();
        assert_eq!(g.mu0, 0.0);
        assert!(g.amplitudes[0].tail < 1e-3);
    }
}
