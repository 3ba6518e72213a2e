//! Batch experiment runner behind the `krasovskii` binary.
//!
//! An experiment is described by a TOML file of dotted keys
//! (`system.name`, `lkf.term.1.kind`, ...); the grammar is documented in the
//! repository README. Exit codes: 0 when every check passed or every margin
//! was computed, 1 when a violation or refutation was found, 2 on a
//! configuration error.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use toml::{Table, Value};

use crate::certify::{
    check_left_growth, check_pointwise_dissipation, check_right_growth, check_sandwich, margin_left,
    margin_lkf_wise_report, margin_right, robustness_margin_example2, CheckReport, Example2Margins, Sampler,
    ScalingFamily, StratifiedSampler,
};
use crate::error::Error;
use crate::estimate::{
    empirical_two_inequality, fit_envelope, run_ensemble, write_envelope_data, EnvelopeOptions, RandomHistories,
    TwoInequalityOptions,
};
use crate::format::{sig17, write_rows, ReportRow};
use crate::functionals::{Functional, Gain, GrowthMatrix, HypothesisConstants, Weight};
use crate::histories::{norm, HistoryFunction};
use crate::solver::Status;
use crate::systems::{
    make_example1, make_example2, make_example3, make_linear_baseline, DelaySystem, InputSignal, UncertaintyPair,
};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "KRASOVSKII_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Certify,
    Margin,
    Envelope,
    Falsify,
    Example2Margins,
}

impl Command {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Certify => "certify",
            Self::Margin => "margin",
            Self::Envelope => "envelope",
            Self::Falsify => "falsify",
            Self::Example2Margins => "example2-margins",
        }
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "simulate" => Self::Simulate,
            "certify" => Self::Certify,
            "margin" => Self::Margin,
            "envelope" => Self::Envelope,
            "falsify" => Self::Falsify,
            "example2-margins" => Self::Example2Margins,
            _ => return Err(format!("unknown command `{s}`")),
        })
    }
}

/// A configuration problem, tied to the offending key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error in `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

type ConfigResult<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub enum SystemSpec {
    Example1 { delay: f64 },
    Example2 { delay: f64, epsilon: f64, uncertainty: String },
    Example3 { delay: f64 },
    Linear { a: f64, b: f64, delay: f64 },
}

impl SystemSpec {
    pub fn delay(&self) -> f64 {
        match self {
            Self::Example1 { delay } | Self::Example2 { delay, .. } | Self::Example3 { delay } | Self::Linear { delay, .. } => {
                *delay
            }
        }
    }

    pub fn build(&self) -> crate::Result<DelaySystem> {
        match self {
            Self::Example1 { delay } => make_example1(*delay),
            Self::Example2 {
                delay,
                epsilon,
                uncertainty,
            } => {
                let d = match uncertainty.as_str() {
                    "current" => UncertaintyPair::new(|p| p.current()[0], |p| p.current()[1]),
                    "delayed" => UncertaintyPair::new(|p| p.delayed()[0], |p| p.delayed()[1]),
                    _ => UncertaintyPair::zero(),
                };
                make_example2(*delay, *epsilon, d)
            }
            Self::Example3 { delay } => make_example3(*delay),
            Self::Linear { a, b, delay } => make_linear_baseline(*a, *b, *delay),
        }
    }
}

/// Optional hypothesis constants; each check or margin runs only when the
/// constants it needs are present.
#[derive(Debug, Clone)]
pub struct HypSpec {
    pub a_lower: Option<f64>,
    pub a_upper: Option<f64>,
    pub a: Option<f64>,
    pub c: f64,
    pub sigma_right: Option<f64>,
    pub sigma_left: Option<f64>,
    pub p: GrowthMatrix,
    pub gamma: Gain,
    pub xi_epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Stratified,
    Scaling,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSpec {
    pub budget: usize,
    /// Unset: stratified for `certify`, scaling for `falsify`.
    pub sampler: Option<SamplerKind>,
    pub scaling_base: Vec<f64>,
    pub scaling_input: Vec<f64>,
    pub s_min: f64,
    pub s_max: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub horizon: f64,
    pub dt: f64,
    pub histories: usize,
    pub history_norm: f64,
    pub input: InputSignal,
    pub stride: usize,
    pub gain_amplitudes: Vec<f64>,
}

/// A validated experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub command: Option<Command>,
    pub system: SystemSpec,
    pub lkf: Option<Functional>,
    pub hyp: HypSpec,
    pub sampling: SamplingSpec,
    pub sim: SimSpec,
    pub output_dir: PathBuf,
    pub margin_delays: Vec<f64>,
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "command",
    "system.name",
    "system.delay",
    "system.epsilon",
    "system.uncertainty",
    "system.a",
    "system.b",
    "lkf.delay",
    "lkf.term.#.kind",
    "lkf.term.#.matrix",
    "lkf.term.#.scale",
    "lkf.term.#.at",
    "lkf.term.#.weight",
    "lkf.term.#.weight_rate",
    "hyp.a_lower",
    "hyp.a_upper",
    "hyp.a",
    "hyp.c",
    "hyp.sigma_right",
    "hyp.sigma_left",
    "hyp.p",
    "hyp.gamma.coef",
    "hyp.gamma.exponent",
    "hyp.xi_epsilon",
    "sampling.budget",
    "sampling.sampler",
    "sampling.scaling.base",
    "sampling.scaling.input",
    "sampling.scaling.s_min",
    "sampling.scaling.s_max",
    "sampling.scaling.steps",
    "sim.horizon",
    "sim.dt",
    "sim.histories",
    "sim.history_norm",
    "sim.stride",
    "sim.gain_amplitudes",
    "sim.input.kind",
    "sim.input.value",
    "sim.input.omega",
    "sim.input.phase",
    "sim.input.at",
    "sim.input.before",
    "sim.input.amplitude",
    "sim.input.hold",
    "output.dir",
    "margins.delays",
];

fn leaf_paths(prefix: &str, table: &Table, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => leaf_paths(&path, t, out),
            _ => out.push(path),
        }
    }
}

fn key_known(path: &str) -> bool {
    let parts: Vec<&str> = path.split('.').collect();
    KNOWN_KEYS.iter().any(|k| {
        let pat: Vec<&str> = k.split('.').collect();
        pat.len() == parts.len() && pat.iter().zip(&parts).all(|(p, s)| *p == *s || (*p == "#" && s.parse::<u32>().is_ok()))
    })
}

struct Reader<'a> {
    root: &'a Table,
}

impl<'a> Reader<'a> {
    fn get(&self, path: &str) -> Option<&'a Value> {
        let mut parts = path.split('.');
        let mut cur = self.root.get(parts.next()?)?;
        for p in parts {
            cur = cur.as_table()?.get(p)?;
        }
        Some(cur)
    }

    fn f64_opt(&self, path: &str) -> ConfigResult<Option<f64>> {
        match self.get(path) {
            None => Ok(None),
            Some(v) => as_f64(v).map(Some).ok_or_else(|| ConfigError::new(path, "expected a number")),
        }
    }

    fn f64_or(&self, path: &str, default: f64) -> ConfigResult<f64> {
        Ok(self.f64_opt(path)?.unwrap_or(default))
    }

    fn positive_opt(&self, path: &str) -> ConfigResult<Option<f64>> {
        match self.f64_opt(path)? {
            Some(x) if !(x > 0.0 && x.is_finite()) => Err(ConfigError::new(path, format!("must be positive, got {x}"))),
            v => Ok(v),
        }
    }

    fn usize_or(&self, path: &str, default: usize) -> ConfigResult<usize> {
        match self.get(path) {
            None => Ok(default),
            Some(Value::Integer(i)) if *i >= 0 => Ok(*i as usize),
            Some(_) => Err(ConfigError::new(path, "expected a nonnegative integer")),
        }
    }

    fn str_opt(&self, path: &str) -> ConfigResult<Option<&'a str>> {
        match self.get(path) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.as_str())),
            Some(_) => Err(ConfigError::new(path, "expected a string")),
        }
    }

    fn vec_opt(&self, path: &str) -> ConfigResult<Option<Vec<f64>>> {
        match self.get(path) {
            None => Ok(None),
            Some(Value::Array(a)) => a
                .iter()
                .map(as_f64)
                .collect::<Option<Vec<f64>>>()
                .map(Some)
                .ok_or_else(|| ConfigError::new(path, "expected an array of numbers")),
            Some(v) => as_f64(v).map(|x| Some(vec![x])).ok_or_else(|| ConfigError::new(path, "expected an array of numbers")),
        }
    }

    fn matrix_opt(&self, path: &str, n: usize) -> ConfigResult<Option<DMatrix<f64>>> {
        let Some(v) = self.get(path) else { return Ok(None) };
        let bad = || ConfigError::new(path, format!("expected a {n}×{n} array of arrays of numbers"));
        let rows = v.as_array().ok_or_else(bad)?;
        if rows.len() != n {
            return Err(bad());
        }
        let mut m = DMatrix::zeros(n, n);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_array().ok_or_else(bad)?;
            if r.len() != n {
                return Err(bad());
            }
            for (j, x) in r.iter().enumerate() {
                m[(i, j)] = as_f64(x).ok_or_else(bad)?;
            }
        }
        Ok(Some(m))
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(x) => Some(*x),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn lib_err(field: &str) -> impl Fn(Error) -> ConfigError + '_ {
    move |e| ConfigError::new(field, e.to_string())
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> ConfigResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::new("--config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> ConfigResult<Self> {
        let root: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::new("<syntax>", e.to_string()))?;
        let mut leaves = Vec::new();
        leaf_paths("", &root, &mut leaves);
        if let Some(k) = leaves.iter().find(|k| !key_known(k)) {
            return Err(ConfigError::new(k, "unknown key"));
        }
        let r = Reader { root: &root };

        let seed = match r.get("seed") {
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(_) => return Err(ConfigError::new("seed", "expected a nonnegative integer")),
            None => return Err(ConfigError::new("seed", "a seed is mandatory")),
        };
        let command = r
            .str_opt("command")?
            .map(|s| s.parse::<Command>().map_err(|e| ConfigError::new("command", e)))
            .transpose()?;

        let delay = r.f64_opt("system.delay")?.ok_or_else(|| ConfigError::new("system.delay", "missing"))?;
        if !(delay > 0.0 && delay.is_finite()) {
            return Err(ConfigError::new("system.delay", format!("must be positive, got {delay}")));
        }
        let name = r.str_opt("system.name")?.ok_or_else(|| ConfigError::new("system.name", "missing"))?;
        let system = match name {
            "example1" => SystemSpec::Example1 { delay },
            "example2" => {
                let uncertainty = r.str_opt("system.uncertainty")?.unwrap_or("zero").to_string();
                if !["zero", "current", "delayed"].contains(&uncertainty.as_str()) {
                    return Err(ConfigError::new(
                        "system.uncertainty",
                        format!("unknown uncertainty `{uncertainty}` (zero | current | delayed)"),
                    ));
                }
                SystemSpec::Example2 {
                    delay,
                    epsilon: r.f64_or("system.epsilon", 0.0)?,
                    uncertainty,
                }
            }
            "example3" => SystemSpec::Example3 { delay },
            "linear" => SystemSpec::Linear {
                a: r.f64_or("system.a", 1.0)?,
                b: r.f64_or("system.b", 0.0)?,
                delay,
            },
            other => {
                return Err(ConfigError::new(
                    "system.name",
                    format!("unknown system `{other}` (example1 | example2 | example3 | linear)"),
                ))
            }
        };
        let sys = system.build().map_err(lib_err("system.name"))?;
        let (n, m) = (sys.state_dim(), sys.input_dim());

        if let Some(d) = r.f64_opt("lkf.delay")? {
            if (d - delay).abs() > 1e-12 * delay {
                return Err(ConfigError::new("lkf.delay", format!("{d} differs from system.delay = {delay}")));
            }
        }
        let lkf = parse_lkf(&r, n, delay)?;

        let p = match r.matrix_opt("hyp.p", n)? {
            Some(mat) => GrowthMatrix::new(mat).map_err(lib_err("hyp.p"))?,
            None => GrowthMatrix::identity(n),
        };
        let gamma = Gain::power(r.f64_or("hyp.gamma.coef", 1.0)?, r.f64_or("hyp.gamma.exponent", 2.0)?)
            .map_err(lib_err("hyp.gamma"))?;
        let c = r.f64_or("hyp.c", 0.0)?;
        if !(c >= 0.0) {
            return Err(ConfigError::new("hyp.c", format!("must be ≥ 0, got {c}")));
        }
        let hyp = HypSpec {
            a_lower: r.positive_opt("hyp.a_lower")?,
            a_upper: r.positive_opt("hyp.a_upper")?,
            a: r.positive_opt("hyp.a")?,
            c,
            sigma_right: r.positive_opt("hyp.sigma_right")?,
            sigma_left: r.positive_opt("hyp.sigma_left")?,
            p,
            gamma,
            xi_epsilon: r.f64_or("hyp.xi_epsilon", 0.0)?,
        };
        if let (Some(lo), Some(hi)) = (hyp.a_lower, hyp.a_upper) {
            if lo > hi {
                return Err(ConfigError::new("hyp.a_lower", format!("a_lower = {lo} exceeds a_upper = {hi}")));
            }
        }

        let sampler = match r.str_opt("sampling.sampler")? {
            None => None,
            Some("stratified") => Some(SamplerKind::Stratified),
            Some("scaling") => Some(SamplerKind::Scaling),
            Some(other) => {
                return Err(ConfigError::new(
                    "sampling.sampler",
                    format!("unknown sampler `{other}` (stratified | scaling)"),
                ))
            }
        };
        let mut default_base = vec![0.0; n];
        default_base[n - 1] = 1.0;
        let scaling_base = r.vec_opt("sampling.scaling.base")?.unwrap_or(default_base);
        if scaling_base.len() != n {
            return Err(ConfigError::new("sampling.scaling.base", format!("expected {n} entries")));
        }
        let scaling_input = r.vec_opt("sampling.scaling.input")?.unwrap_or_else(|| vec![0.0; m]);
        if scaling_input.len() != m {
            return Err(ConfigError::new("sampling.scaling.input", format!("expected {m} entries")));
        }
        let sampling = SamplingSpec {
            budget: r.usize_or("sampling.budget", 10_000)?,
            sampler,
            scaling_base,
            scaling_input,
            s_min: r.f64_or("sampling.scaling.s_min", 1e-2)?,
            s_max: r.f64_or("sampling.scaling.s_max", 1e3)?,
            steps: r.usize_or("sampling.scaling.steps", 200)?,
        };
        if sampling.budget == 0 {
            return Err(ConfigError::new("sampling.budget", "must be ≥ 1"));
        }
        if !(sampling.s_min > 0.0 && sampling.s_max >= sampling.s_min) || sampling.steps == 0 {
            return Err(ConfigError::new("sampling.scaling", "need 0 < s_min ≤ s_max and steps ≥ 1"));
        }

        let sim = SimSpec {
            horizon: r.f64_or("sim.horizon", 20.0)?,
            dt: r.f64_or("sim.dt", 1e-2)?,
            histories: r.usize_or("sim.histories", 50)?,
            history_norm: r.f64_or("sim.history_norm", 1.0)?,
            input: parse_input(&r, m, seed)?,
            stride: r.usize_or("sim.stride", 10)?.max(1),
            gain_amplitudes: r.vec_opt("sim.gain_amplitudes")?.unwrap_or_else(|| vec![0.1, 1.0]),
        };
        if !(sim.horizon > 0.0 && sim.horizon.is_finite()) {
            return Err(ConfigError::new("sim.horizon", "must be positive"));
        }
        let ratio = delay / sim.dt;
        if !(sim.dt > 0.0) || ratio < 4.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(ConfigError::new("sim.dt", format!("must be positive, at most Δ/4 and divide Δ = {delay}")));
        }
        if sim.histories == 0 {
            return Err(ConfigError::new("sim.histories", "must be ≥ 1"));
        }
        if !(sim.history_norm > 0.0) {
            return Err(ConfigError::new("sim.history_norm", "must be positive"));
        }
        if sim.gain_amplitudes.iter().any(|a| !(*a >= 0.0)) {
            return Err(ConfigError::new("sim.gain_amplitudes", "amplitudes must be ≥ 0"));
        }

        let margin_delays = r
            .vec_opt("margins.delays")?
            .unwrap_or_else(|| vec![0.0, 0.5, 1.0, 2.0, 4.0, 4.5]);
        if margin_delays.is_empty() || margin_delays.iter().any(|d| !(*d >= 0.0)) {
            return Err(ConfigError::new("margins.delays", "need a nonempty list of delays ≥ 0"));
        }

        Ok(Self {
            seed,
            command,
            system,
            lkf,
            hyp,
            sampling,
            sim,
            output_dir: PathBuf::from(r.str_opt("output.dir")?.unwrap_or("out")),
            margin_delays,
        })
    }
}

fn parse_lkf(r: &Reader, n: usize, delay: f64) -> ConfigResult<Option<Functional>> {
    let Some(terms) = r.get("lkf.term") else { return Ok(None) };
    let terms = terms.as_table().ok_or_else(|| ConfigError::new("lkf.term", "expected numbered terms"))?;
    let mut ordered = BTreeMap::new();
    for k in terms.keys() {
        let i: u32 = k
            .parse()
            .map_err(|_| ConfigError::new(&format!("lkf.term.{k}"), "term labels must be integers"))?;
        ordered.insert(i, k.clone());
    }
    let mut out = Vec::new();
    for key in ordered.values() {
        let base = format!("lkf.term.{key}");
        let field = |s: &str| format!("{base}.{s}");
        let kind = r.str_opt(&field("kind"))?.ok_or_else(|| ConfigError::new(&field("kind"), "missing"))?;
        let matrix = r
            .matrix_opt(&field("matrix"), n)?
            .ok_or_else(|| ConfigError::new(&field("matrix"), "missing"))?;
        let mf = field("matrix");
        let term = match kind {
            "point_quadratic" => Functional::point_quadratic(matrix).map_err(lib_err(&mf))?,
            "delayed_quadratic" => {
                let af = field("at");
                let at = r.f64_opt(&af)?.unwrap_or(-delay);
                if !(at >= -delay && at <= 0.0) {
                    return Err(ConfigError::new(&af, format!("must lie in [−Δ, 0] = [{}, 0]", -delay)));
                }
                Functional::delayed_quadratic(matrix, at).map_err(lib_err(&af))?
            }
            "integral_quadratic" => {
                let scale = r.f64_or(&field("weight"), 1.0)?;
                let weight = match r.f64_opt(&field("weight_rate"))? {
                    Some(rate) => Weight::Exponential { scale, rate },
                    None => Weight::Constant(scale),
                };
                Functional::integral_quadratic(matrix, weight).map_err(lib_err(&mf))?
            }
            "max_exp" => Functional::max_exp(matrix).map_err(lib_err(&mf))?,
            other => {
                return Err(ConfigError::new(
                    &field("kind"),
                    format!("unknown term `{other}` (point_quadratic | delayed_quadratic | integral_quadratic | max_exp)"),
                ))
            }
        };
        let scale = r.f64_or(&field("scale"), 1.0)?;
        out.push(if scale == 1.0 { term } else { Functional::scale(scale, term) });
    }
    Functional::sum_all(out).map(Some).map_err(lib_err("lkf.term"))
}

fn parse_input(r: &Reader, m: usize, seed: u64) -> ConfigResult<InputSignal> {
    let vector = |path: &str| -> ConfigResult<Vec<f64>> {
        let v = r.vec_opt(path)?.ok_or_else(|| ConfigError::new(path, "missing"))?;
        if v.len() != m {
            return Err(ConfigError::new(path, format!("expected {m} entries")));
        }
        Ok(v)
    };
    Ok(match r.str_opt("sim.input.kind")?.unwrap_or("zero") {
        "zero" => InputSignal::zero(m),
        "constant" => InputSignal::Constant(vector("sim.input.value")?),
        "sinusoid" => InputSignal::Sinusoid {
            amplitude: vector("sim.input.value")?,
            omega: r.f64_or("sim.input.omega", 1.0)?,
            phase: r.f64_or("sim.input.phase", 0.0)?,
        },
        "step" => InputSignal::Step {
            at: r.f64_or("sim.input.at", 0.0)?,
            before: r.vec_opt("sim.input.before")?.unwrap_or_else(|| vec![0.0; m]),
            after: vector("sim.input.value")?,
        },
        "noise" => InputSignal::Noise {
            seed,
            dim: m,
            amplitude: r.f64_or("sim.input.amplitude", 1.0)?,
            hold: r.positive_opt("sim.input.hold")?.unwrap_or(0.1),
        },
        other => {
            return Err(ConfigError::new(
                "sim.input.kind",
                format!("unknown input `{other}` (zero | constant | sinusoid | step | noise)"),
            ))
        }
    })
}

/// Per-invocation settings that override the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub budget: Option<usize>,
}

/// Result of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub exit_code: i32,
    pub rows: Vec<ReportRow>,
    /// Human-readable summary.
    pub text: String,
    pub files: Vec<PathBuf>,
}

/// Fatal failures of a run: configuration problems (exit 2) or library
/// errors that abort it.
#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Library(Error),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(e) => e.fmt(f),
            Self::Library(e) => e.fmt(f),
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e)
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        Self::Library(e)
    }
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    sys: DelaySystem,
    rows: Vec<ReportRow>,
    text: String,
    violation: bool,
    files: Vec<PathBuf>,
    out: PathBuf,
}

/// Runs `command` with `cfg`, writing artifacts into the output directory.
pub fn run(cfg: &ExperimentConfig, command: Command, overrides: &Overrides) -> Result<Outcome, RunError> {
    let mut cfg = cfg.clone();
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(b) = overrides.budget {
        if b == 0 {
            return Err(ConfigError::new("--budget", "must be ≥ 1").into());
        }
        cfg.sampling.budget = b;
    }
    let out = overrides.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out).map_err(Error::from)?;
    let sys = cfg.system.build()?;
    let mut run = Run {
        cfg: &cfg,
        sys,
        rows: Vec::new(),
        text: String::new(),
        violation: false,
        files: Vec::new(),
        out,
    };
    run.rows.push(ReportRow::new("run", command.tag(), "system", run.sys.name()));
    run.rows.push(ReportRow::number("run", command.tag(), "delay", run.sys.delay()));
    run.rows.push(ReportRow::new("run", command.tag(), "seed", cfg.seed.to_string()));
    match command {
        Command::Simulate => run.simulate()?,
        Command::Certify => run.checks(false)?,
        Command::Falsify => run.checks(true)?,
        Command::Margin => run.margins()?,
        Command::Envelope => run.envelope()?,
        Command::Example2Margins => run.example2_margins()?,
    }
    let exit_code = if run.violation { EXIT_VIOLATION } else { EXIT_OK };
    run.rows
        .push(ReportRow::new("run", command.tag(), "exit_code", exit_code.to_string()));
    let report = run.out.join("report.csv");
    let mut buf = Vec::new();
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    writeln!(buf, "# generated_unix={stamp}").map_err(Error::from)?;
    write_rows(&run.rows, &mut buf)?;
    fs::write(&report, buf).map_err(Error::from)?;
    run.files.insert(0, report);
    Ok(Outcome {
        exit_code,
        rows: run.rows,
        text: run.text,
        files: run.files,
    })
}

impl Run<'_> {
    fn histories(&self) -> RandomHistories {
        RandomHistories::new(self.cfg.seed, self.sys.state_dim(), self.sys.delay(), self.cfg.sim.history_norm)
    }

    fn lkf(&self, field: &str) -> ConfigResult<&Functional> {
        self.cfg
            .lkf
            .as_ref()
            .ok_or_else(|| ConfigError::new(field, "this check needs an LKF (lkf.term.N.*)"))
    }

    fn simulate(&mut self) -> Result<(), RunError> {
        let sim = &self.cfg.sim;
        let input = sim.input.clone();
        let inputs = move |_: usize| input.clone();
        let ens = run_ensemble(&self.sys, &self.histories(), &inputs, sim.histories, sim.horizon, sim.dt)?;
        let path = self.out.join("trajectories.csv");
        let mut w = csv::Writer::from_path(&path).map_err(Error::from)?;
        let n = self.sys.state_dim();
        let mut header = vec!["traj".to_string(), "t".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend(["abs_x".to_string(), "history_norm".to_string()]);
        w.write_record(&header).map_err(Error::from)?;
        for (j, x) in ens.trajectories.iter().enumerate() {
            let wn = x.window_norms();
            for i in (0..x.len()).step_by(sim.stride) {
                let mut rec = vec![j.to_string(), sig17(x.time(i))];
                rec.extend(x.state(i).iter().map(|v| sig17(*v)));
                rec.push(sig17(norm(x.state(i))));
                rec.push(sig17(wn[i]));
                w.write_record(&rec).map_err(Error::from)?;
            }
            let item = format!("traj{j}");
            let status = match x.status() {
                Status::Completed => "completed".to_string(),
                Status::BlewUp { t_escape } => format!("blew-up at t={}", sig17(t_escape)),
            };
            self.rows.push(ReportRow::new("simulate", &item, "status", status));
            self.rows.push(ReportRow::number("simulate", &item, "initial_norm", x.initial().sup_norm()));
            self.rows.push(ReportRow::number("simulate", &item, "t_end", x.t_end()));
            self.rows
                .push(ReportRow::number("simulate", &item, "final_abs_x", norm(x.state(x.len() - 1))));
        }
        w.flush().map_err(Error::from)?;
        self.files.push(path);
        self.text += &format!(
            "simulated {} trajectories of {} on [0, {}] ({} blew up)\n",
            ens.len(),
            self.sys.name(),
            sim.horizon,
            ens.blown_up().len()
        );
        Ok(())
    }

    fn record(&mut self, item: &str, report: CheckReport) {
        self.violation |= report.violated();
        self.text += &report.text();
        self.rows.extend(report.rows(item));
    }

    /// The four hypothesis checks, each run when its constants are given.
    fn checks(&mut self, targeted: bool) -> Result<(), RunError> {
        let cfg = self.cfg;
        let sp = &cfg.sampling;
        let scaling;
        let stratified = StratifiedSampler::for_system(cfg.seed, &self.sys);
        let default = if targeted { SamplerKind::Scaling } else { SamplerKind::Stratified };
        let sampler: &dyn Sampler = if sp.sampler.unwrap_or(default) == SamplerKind::Scaling {
            let base = HistoryFunction::constant(self.sys.delay(), &sp.scaling_base);
            scaling = ScalingFamily::new(base, sp.scaling_input.clone(), sp.s_min, sp.s_max, sp.steps)
                .map_err(|e| ConfigError::new("sampling.scaling", e.to_string()))?;
            &scaling
        } else {
            &stratified
        };
        let h = &cfg.hyp;
        let budget = sp.budget;
        let mut ran = 0;
        if let Some(au) = h.a_upper {
            let v = self.lkf("hyp.a_upper")?;
            let r = check_sandwich(v, h.a_lower, au, 2.0, sampler, budget)?;
            self.record("sandwich", r);
            ran += 1;
        }
        if let Some(a) = h.a {
            let v = self.lkf("hyp.a")?;
            let r = check_pointwise_dissipation(&self.sys, v, a, h.c, &h.gamma, sampler, budget)?;
            self.record("dissipation", r);
            ran += 1;
        }
        if let Some(s) = h.sigma_right {
            let r = check_right_growth(&self.sys, &h.p, s, &h.gamma, sampler, budget)?;
            self.record("growth", r);
            ran += 1;
        }
        if let Some(s) = h.sigma_left {
            let r = check_left_growth(&self.sys, &h.p, s, &h.gamma, sampler, budget)?;
            self.record("growth", r);
            ran += 1;
        }
        if ran == 0 {
            return Err(ConfigError::new("hyp", "no check selected: give hyp.a_upper, hyp.a, hyp.sigma_right or hyp.sigma_left").into());
        }
        Ok(())
    }

    fn margins(&mut self) -> Result<(), RunError> {
        let h = &self.cfg.hyp;
        let delay = self.sys.delay();
        let mut ran = 0;
        if let (Some(lo), Some(a)) = (h.a_lower, h.a) {
            let r = margin_lkf_wise_report(lo, a, h.c, delay, h.xi_epsilon)?;
            self.text += &r.text();
            self.rows.extend(r.rows());
            ran += 1;
        }
        let constants = |sigma: f64| -> Result<HypothesisConstants, RunError> {
            let au = h.a_upper.ok_or_else(|| ConfigError::new("hyp.a_upper", "needed for growth margins"))?;
            let a = h.a.ok_or_else(|| ConfigError::new("hyp.a", "needed for growth margins"))?;
            let mut k = HypothesisConstants::new(au, a, sigma, h.p.clone(), h.gamma.clone())
                .and_then(|k| k.with_c(h.c))
                .map_err(|e| ConfigError::new("hyp", e.to_string()))?;
            if let Some(lo) = h.a_lower {
                k = k.with_a_lower(lo).map_err(|e| ConfigError::new("hyp.a_lower", e.to_string()))?;
            }
            Ok(k)
        };
        if let Some(s) = h.sigma_right {
            let r = margin_right(&constants(s)?, delay)?;
            self.text += &r.text();
            self.rows.extend(r.rows());
            ran += 1;
        }
        if let Some(s) = h.sigma_left {
            let k = constants(s)?;
            if k.a_lower.is_none() {
                return Err(ConfigError::new("hyp.a_lower", "needed for the left-growth margin").into());
            }
            match margin_left(&k, delay) {
                Ok(r) => {
                    self.text += &r.text();
                    self.rows.extend(r.rows());
                }
                Err(Error::Infeasible(msg)) => {
                    self.violation = true;
                    self.text += &format!("[margin left-growth] infeasible: {msg}\n");
                    self.rows.push(ReportRow::new("margin", "left-growth", "infeasible", msg));
                }
                Err(e) => return Err(e.into()),
            }
            ran += 1;
        }
        if ran == 0 {
            return Err(ConfigError::new("hyp", "no margin selected: give hyp.a with hyp.a_lower, hyp.sigma_right or hyp.sigma_left").into());
        }
        Ok(())
    }

    fn envelope(&mut self) -> Result<(), RunError> {
        let sim = &self.cfg.sim;
        if sim.input.window_sup(0.0, sim.horizon) != 0.0 {
            return Err(ConfigError::new("sim.input.kind", "the envelope fit needs u ≡ 0").into());
        }
        let m = self.sys.input_dim();
        let zero = move |_: usize| InputSignal::zero(m);
        let ens = run_ensemble(&self.sys, &self.histories(), &zero, sim.histories, sim.horizon, sim.dt)?;
        let blown = ens.blown_up();
        let item = "envelope";
        self.rows
            .push(ReportRow::new("envelope", item, "trajectories", ens.len().to_string()));
        self.rows.push(ReportRow::new("envelope", item, "blown_up", blown.len().to_string()));
        if !blown.is_empty() {
            self.violation = true;
            self.text += &format!("envelope: {} trajectories blew up; no fit\n", blown.len());
            return Ok(());
        }
        let opts = EnvelopeOptions::default();
        match fit_envelope(&ens.trajectories, &opts) {
            Ok(fit) => {
                self.rows.push(ReportRow::number("envelope", item, "k", fit.k));
                self.rows.push(ReportRow::number("envelope", item, "eta", fit.eta));
                self.rows.push(ReportRow::number("envelope", item, "slack", fit.slack));
                self.rows
                    .push(ReportRow::new("envelope", item, "grid_points", opts.grid_points.to_string()));
                self.rows.push(ReportRow::number("envelope", item, "k_cap", opts.k_cap));
                self.text += &format!("envelope: k = {}, η = {}, slack = {}\n", sig17(fit.k), sig17(fit.eta), sig17(fit.slack));
                let path = self.out.join("envelope.dat");
                let file = fs::File::create(&path).map_err(Error::from)?;
                write_envelope_data(&fit, &ens.trajectories, sim.stride, std::io::BufWriter::new(file))?;
                self.files.push(path);
            }
            Err(Error::FitFailure(msg)) => {
                self.violation = true;
                self.text += &format!("envelope: fit failed: {msg}\n");
                self.rows.push(ReportRow::new("envelope", item, "fit_failure", msg));
            }
            Err(e) => return Err(e.into()),
        }
        let opts = TwoInequalityOptions {
            seed: self.cfg.seed,
            dt: sim.dt,
            gain_amplitudes: sim.gain_amplitudes.clone(),
            ..TwoInequalityOptions::default()
        };
        let est = empirical_two_inequality(&self.sys, sim.horizon, sim.histories, &opts)?;
        let item = "two-inequality";
        self.rows.push(ReportRow::number("envelope", item, "T", est.horizon));
        self.rows.push(ReportRow::number("envelope", item, "ell", est.ell));
        self.rows.push(ReportRow::number("envelope", item, "lambda", est.lambda));
        self.rows.push(ReportRow::number("envelope", item, "mu0", est.mu0));
        self.rows
            .push(ReportRow::new("envelope", item, "contraction", est.contraction.to_string()));
        self.text += &format!(
            "two-inequality at T = {}: ℓ = {}, λ = {}, μ₀ = {} ({})\n",
            est.horizon,
            sig17(est.ell),
            sig17(est.lambda),
            sig17(est.mu0),
            if est.contraction { "contraction" } else { "refuted" }
        );
        self.violation |= !est.contraction;
        Ok(())
    }

    fn example2_margins(&mut self) -> Result<(), RunError> {
        let path = self.out.join("example2_margins.csv");
        let mut w = csv::Writer::from_path(&path).map_err(Error::from)?;
        w.write_record(Example2Margins::CSV_HEADER).map_err(Error::from)?;
        self.text += "Δ  ε̄₁  ε̄₂(reference)  ε̄₂(left margin)  max  crossover\n";
        for &d in &self.cfg.margin_delays {
            let e = robustness_margin_example2(d)?;
            let rec = e.csv_record();
            w.write_record(&rec).map_err(Error::from)?;
            self.text += &format!("{}\n", rec.join("  "));
            let item = format!("delay={}", sig17(d));
            for (k, v) in Example2Margins::CSV_HEADER.iter().zip(&rec).skip(1) {
                self.rows.push(ReportRow::new("example2-margins", &item, k, v.clone()));
            }
            self.rows
                .push(ReportRow::number("example2-margins", &item, "discrepancy_ratio", e.discrepancy_ratio()));
        }
        w.flush().map_err(Error::from)?;
        self.files.push(path);
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "krasovskii", version, about = "Simulation and stability certification for time-delay systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// Experiment configuration (TOML with dotted keys).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides output.dir).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Sampling budget (overrides sampling.budget).
    #[arg(long)]
    pub budget: Option<usize>,
    /// Suppress the human-readable summary.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Integrate an ensemble and write trajectories.csv.
    Simulate(CommonArgs),
    /// Falsification checks (stratified sampler unless configured otherwise).
    Certify(CommonArgs),
    /// Closed-form margins from the hypothesis constants.
    Margin(CommonArgs),
    /// Envelope fit and empirical two-inequality test under u ≡ 0.
    Envelope(CommonArgs),
    /// Falsification checks (scaling family unless configured otherwise).
    Falsify(CommonArgs),
    /// Robustness margins of the uncertain benchmark over margins.delays.
    #[command(name = "example2-margins")]
    Example2Margins(CommonArgs),
    /// Runs the command named in the config.
    Run(CommonArgs),
}

/// Parses arguments, runs the experiment and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let (fixed, args) = match cli.command {
        CliCommand::Simulate(a) => (Some(Command::Simulate), a),
        CliCommand::Certify(a) => (Some(Command::Certify), a),
        CliCommand::Margin(a) => (Some(Command::Margin), a),
        CliCommand::Envelope(a) => (Some(Command::Envelope), a),
        CliCommand::Falsify(a) => (Some(Command::Falsify), a),
        CliCommand::Example2Margins(a) => (Some(Command::Example2Margins), a),
        CliCommand::Run(a) => (None, a),
    };
    let threads = match std::env::var(THREADS_ENV) {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Some(n),
            _ => {
                eprintln!("{}", ConfigError::new(THREADS_ENV, format!("expected a positive integer, got `{s}`")));
                return EXIT_CONFIG;
            }
        },
        Err(_) => None,
    };
    let go = || -> i32 {
        let cfg = match ExperimentConfig::from_path(&args.config) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("{e}");
                return EXIT_CONFIG;
            }
        };
        let Some(command) = fixed.or(cfg.command) else {
            eprintln!("{}", ConfigError::new("command", "`run` needs a command in the config"));
            return EXIT_CONFIG;
        };
        let overrides = Overrides {
            seed: args.seed,
            out: args.out.clone(),
            budget: args.budget,
        };
        match run(&cfg, command, &overrides) {
            Ok(outcome) => {
                if !args.quiet {
                    print!("{}", outcome.text);
                    for f in &outcome.files {
                        println!("wrote {}", f.display());
                    }
                }
                outcome.exit_code
            }
            Err(RunError::Config(e)) => {
                eprintln!("{e}");
                EXIT_CONFIG
            }
            Err(RunError::Library(e)) => {
                eprintln!("error: {e}");
                EXIT_VIOLATION
            }
        }
    };
    match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(go),
            Err(e) => {
                eprintln!("error: cannot build thread pool: {e}");
                EXIT_CONFIG
            }
        },
        None => go(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 1\nsystem.name = \"example1\"\nsystem.delay = 1.0\n";

    #[test]
    fn minimal_config_parses() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.seed, 1);
        assert_eq!(c.system, SystemSpec::Example1 { delay: 1.0 });
        assert!(c.lkf.is_none());
        assert_eq!(c.sampling.budget, 10_000);
    }

    #[test]
    fn missing_seed_names_field() {
        let e = ExperimentConfig::parse("system.name = \"example1\"\nsystem.delay = 1.0\n").unwrap_err();
        assert_eq!(e.field, "seed");
    }

    #[test]
    fn unknown_system_and_term_name_field() {
        let e = ExperimentConfig::parse("seed = 1\nsystem.name = \"nope\"\nsystem.delay = 1.0\n").unwrap_err();
        assert_eq!(e.field, "system.name");
        let text = format!("{MINIMAL}lkf.term.1.kind = \"cubic\"\nlkf.term.1.matrix = [[1,0],[0,1]]\n");
        let e = ExperimentConfig::parse(&text).unwrap_err();
        assert_eq!(e.field, "lkf.term.1.kind");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = ExperimentConfig::parse(&format!("{MINIMAL}sim.horizn = 3\n")).unwrap_err();
        assert_eq!(e.field, "sim.horizn");
    }

    #[test]
    fn lkf_terms_build_the_benchmark() {
        let text = format!(
            "{MINIMAL}lkf.term.1.kind = \"point_quadratic\"\nlkf.term.1.matrix = [[1,0],[0,1]]\n\
             lkf.term.2.kind = \"integral_quadratic\"\nlkf.term.2.matrix = [[0,0],[0,1]]\nlkf.term.2.weight = 2\n"
        );
        let c = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(c.lkf.unwrap(), Functional::benchmark_lkf());
    }

    #[test]
    fn matrix_dimension_is_checked() {
        let text = format!("{MINIMAL}lkf.term.1.kind = \"point_quadratic\"\nlkf.term.1.matrix = [[1]]\n");
        assert_eq!(ExperimentConfig::parse(&text).unwrap_err().field, "lkf.term.1.matrix");
    }

    #[test]
    fn step_must_divide_delay() {
        let e = ExperimentConfig::parse(&format!("{MINIMAL}sim.dt = 0.3\n")).unwrap_err();
        assert_eq!(e.field, "sim.dt");
    }

    #[test]
    fn commands_round_trip() {
        for c in [
            Command::Simulate,
            Command::Certify,
            Command::Margin,
            Command::Envelope,
            Command::Falsify,
            Command::Example2Margins,
        ] {
            assert_eq!(c.tag().parse::<Command>().unwrap(), c);
        }
    }
}
