//! Method-of-steps integration with fixed-step RK4.
//!
//! Delayed arguments are read from the already-computed trajectory through
//! piecewise-linear dense output. The step must satisfy dt ≤ Δ/4 and divide
//! Δ, so every delayed read at a stage time lands on a completed segment.

use std::collections::VecDeque;
use std::io::Write;

use crate::error::{check_dim, Error, Result};
use crate::format::sig17;
use crate::histories::{norm, window, History, HistoryFunction};
use crate::systems::{DelaySystem, InputSignal};

pub const DEFAULT_BLOWUP_THRESHOLD: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Status {
    Completed,
    /// |x| exceeded the blow-up threshold (or became non-finite) at `t_escape`.
    BlewUp { t_escape: f64 },
}

/// Dense solution on [−Δ, T_end]: the initial history on [−Δ, 0] and
/// uniformly spaced states t_k = k·dt on [0, T_end].
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    system: String,
    dim: usize,
    delay: f64,
    dt: f64,
    initial: HistoryFunction,
    states: Vec<f64>,
    status: Status,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub dt: f64,
    pub horizon: f64,
    pub blowup_threshold: f64,
}

impl SolverOptions {
    pub fn new(horizon: f64, dt: f64) -> Self {
        Self {
            dt,
            horizon,
            blowup_threshold: DEFAULT_BLOWUP_THRESHOLD,
        }
    }
}

/// Integrates `sys` from `x0` under `u` up to `horizon` with step `dt`.
pub fn integrate(sys: &DelaySystem, x0: &HistoryFunction, u: &InputSignal, horizon: f64, dt: f64) -> Result<Trajectory> {
    integrate_with(sys, x0, u, &SolverOptions::new(horizon, dt))
}

pub fn integrate_with(sys: &DelaySystem, x0: &HistoryFunction, u: &InputSignal, opts: &SolverOptions) -> Result<Trajectory> {
    let n = sys.state_dim();
    check_dim(n, x0.dim())?;
    check_dim(sys.input_dim(), u.dim())?;
    let delay = sys.delay();
    if (x0.delay() - delay).abs() > 1e-12 * delay.max(1.0) {
        return Err(Error::Contract(format!(
            "initial history delay {} does not match system delay {delay}",
            x0.delay()
        )));
    }
    let dt = opts.dt;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Contract(format!("step must be positive, got {dt}")));
    }
    if !(opts.horizon >= 0.0) || !opts.horizon.is_finite() {
        return Err(Error::Contract(format!("horizon must be ≥ 0, got {}", opts.horizon)));
    }
    if delay > 0.0 {
        let ratio = delay / dt;
        if ratio < 4.0 - 1e-9 {
            return Err(Error::Contract(format!("step {dt} exceeds Δ/4 = {}", delay / 4.0)));
        }
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(Error::Contract(format!("step {dt} does not divide Δ = {delay}")));
        }
    }
    let steps = (opts.horizon / dt - 1e-9).ceil().max(0.0) as usize;

    let mut traj = Trajectory {
        system: sys.name().to_string(),
        dim: n,
        delay,
        dt,
        initial: x0.clone(),
        states: Vec::with_capacity((steps + 1) * n),
        status: Status::Completed,
    };
    traj.states.extend_from_slice(x0.node_value(x0.len() - 1));

    let mut xk = vec![0.0; n];
    let mut stage = vec![0.0; n];
    let mut acc = vec![0.0; n];
    for k in 0..steps {
        let tk = k as f64 * dt;
        xk.copy_from_slice(traj.state(k));
        acc.copy_from_slice(&xk);

        let mut blew_up = false;
        let mut slope = vec![0.0; n];
        for (c, weight) in [(0.0, 1.0), (0.5, 2.0), (0.5, 2.0), (1.0, 1.0)] {
            for i in 0..n {
                stage[i] = xk[i] + c * dt * slope[i];
            }
            let ts = tk + c * dt;
            let view = StageView {
                traj: &traj,
                base: k,
                t: ts,
                stage: &stage,
            };
            slope = sys.eval(&view, &u.eval(ts));
            if slope.len() != n || slope.iter().any(|s| !s.is_finite()) {
                blew_up = true;
                break;
            }
            for i in 0..n {
                acc[i] += dt / 6.0 * weight * slope[i];
            }
        }
        let t_next = (k + 1) as f64 * dt;
        if blew_up || acc.iter().any(|x| !x.is_finite()) || norm(&acc) > opts.blowup_threshold {
            traj.status = Status::BlewUp { t_escape: t_next };
            break;
        }
        traj.states.extend_from_slice(&acc);
    }
    Ok(traj)
}

/// x_t during an RK stage: the stage value at τ = 0, a linear bridge back to
/// the last completed state, and the dense trajectory before that.
struct StageView<'a> {
    traj: &'a Trajectory,
    base: usize,
    t: f64,
    stage: &'a [f64],
}

impl History for StageView<'_> {
    fn dim(&self) -> usize {
        self.traj.dim
    }

    fn delay(&self) -> f64 {
        self.traj.delay
    }

    fn eval_into(&self, tau: f64, out: &mut [f64]) {
        let tau = tau.clamp(-self.traj.delay, 0.0);
        if tau == 0.0 {
            out.copy_from_slice(self.stage);
            return;
        }
        let tb = self.base as f64 * self.traj.dt;
        let s = self.t + tau;
        if s > tb {
            let theta = (s - tb) / (self.t - tb);
            let xb = self.traj.state(self.base);
            for i in 0..out.len() {
                out[i] = xb[i] + theta * (self.stage[i] - xb[i]);
            }
        } else {
            self.traj.eval_into_unchecked(s, out);
        }
    }

    fn sup_norm(&self) -> f64 {
        let traj = self.traj;
        let start = self.t - traj.delay;
        let mut best = norm(self.stage).max(norm(traj.state(self.base)));
        let mut buf = vec![0.0; traj.dim];
        traj.eval_into_unchecked(start.min(self.base as f64 * traj.dt), &mut buf);
        best = best.max(norm(&buf));
        if start < 0.0 {
            for (i, &g) in traj.initial.grid().iter().enumerate() {
                if g > start {
                    best = best.max(norm(traj.initial.node_value(i)));
                }
            }
        }
        let k0 = (start.max(0.0) / traj.dt).ceil() as usize;
        for k in k0..=self.base {
            best = best.max(norm(traj.state(k)));
        }
        best
    }
}

impl Trajectory {
    pub fn system_name(&self) -> &str {
        &self.system
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn completed(&self) -> bool {
        self.status == Status::Completed
    }

    pub fn initial(&self) -> &HistoryFunction {
        &self.initial
    }

    /// Number of stored forward states (t_0 = 0 included).
    pub fn len(&self) -> usize {
        self.states.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.len() - 1)
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    fn eval_into_unchecked(&self, s: f64, out: &mut [f64]) {
        if s <= 0.0 {
            self.initial.eval_into(s, out);
            return;
        }
        let pos = s / self.dt;
        let k = (pos.floor() as usize).min(self.len() - 1);
        if k + 1 >= self.len() {
            out.copy_from_slice(self.state(self.len() - 1));
            return;
        }
        let theta = pos - k as f64;
        let (a, b) = (self.state(k), self.state(k + 1));
        for i in 0..out.len() {
            out[i] = a[i] + theta * (b[i] - a[i]);
        }
    }

    /// x(t) for t ∈ [−Δ, T_end].
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let tol = 1e-9 * self.dt;
        if !t.is_finite() || t < -self.delay - tol || t > self.t_end() + tol {
            return Err(Error::Domain(format!(
                "t = {t} outside [{}, {}]",
                -self.delay,
                self.t_end()
            )));
        }
        let mut out = vec![0.0; self.dim];
        let k = (t / self.dt).round();
        if t >= 0.0 && (t - k * self.dt).abs() <= tol {
            out.copy_from_slice(self.state((k as usize).min(self.len() - 1)));
        } else {
            self.eval_into_unchecked(t.max(-self.delay), &mut out);
        }
        Ok(out)
    }

    /// x_t as a history function.
    pub fn history_at(&self, t: f64) -> Result<HistoryFunction> {
        window(self, t)
    }

    /// |x(t_k)| for every stored state.
    pub fn state_norms(&self) -> Vec<f64> {
        (0..self.len()).map(|k| norm(self.state(k))).collect()
    }

    /// ‖x_{t_k}‖ for every stored state, by a sliding maximum over the
    /// piecewise-linear dense output.
    pub fn window_norms(&self) -> Vec<f64> {
        let len = self.len();
        let norms = self.state_norms();
        if self.delay == 0.0 {
            return norms;
        }
        let lag = (self.delay / self.dt).round() as usize;
        let init = &self.initial;
        // suffix[i] = max over initial nodes j ≥ i of |φ(g_j)|.
        let mut suffix = vec![0.0_f64; init.len() + 1];
        for i in (0..init.len()).rev() {
            suffix[i] = suffix[i + 1].max(norm(init.node_value(i)));
        }
        let mut out = Vec::with_capacity(len);
        let mut deque: VecDeque<usize> = VecDeque::new();
        let mut buf = vec![0.0; self.dim];
        for k in 0..len {
            while deque.back().is_some_and(|&j| norms[j] <= norms[k]) {
                deque.pop_back();
            }
            deque.push_back(k);
            if k >= lag {
                while deque.front().is_some_and(|&j| j + lag < k) {
                    deque.pop_front();
                }
                out.push(norms[deque[0]]);
            } else {
                let start = self.time(k) - self.delay;
                init.eval_into(start, &mut buf);
                let first = init.grid().partition_point(|&g| g <= start);
                let pre = suffix[first].max(norm(&buf));
                out.push(pre.max(norms[deque[0]]));
            }
        }
        out
    }

    /// CSV with columns t, x_1..x_n, |x(t)|, ‖x_t‖ over the forward grid.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x_{i}")));
        header.push("abs_x".into());
        header.push("history_norm".into());
        w.write_record(&header)?;
        let wn = self.window_norms();
        for (k, wk) in wn.iter().enumerate() {
            let mut row = vec![sig17(self.time(k))];
            row.extend(self.state(k).iter().map(|&x| sig17(x)));
            row.push(sig17(norm(self.state(k))));
            row.push(sig17(*wk));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
