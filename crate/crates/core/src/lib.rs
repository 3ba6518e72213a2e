//! Simulation and stability certification for time-delay systems
//! ẋ(t) = f(x_t, u(t)).
//!
//! * [`histories`]: history functions, sup-norms, the Driver extension.
//! * [`systems`]: delay systems, inputs and the built-in benchmarks.
//! * [`solver`]: method-of-steps RK4 with dense output.
//! * [`functionals`]: Lyapunov–Krasovskii functionals and Driver derivatives.
//! * [`certify`]: falsification checks and closed-form stability margins.
//! * [`estimate`]: ensemble simulation and empirical envelope/gain fits.
//! * [`cli`]: the batch experiment runner behind the `krasovskii` binary.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certify;
pub mod cli;
pub mod error;
pub mod estimate;
pub mod format;
pub mod functionals;
pub mod histories;
pub mod solver;
pub mod systems;

pub use error::{Error, Result};
pub use histories::{History, HistoryFunction, Interpolation};
pub use solver::{integrate, Status, Trajectory};
pub use systems::{DelaySystem, InputSignal, UncertaintyPair};

/// SplitMix64 mixing of a base seed with a stream index, so that per-sample
/// generators are independent of evaluation order.
pub(crate) fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
