//! Greybox optimal control of a single qubit under classical dephasing noise.
//!
//! The crate is organised bottom-up:
//!
//! - [`qcore`]: 2×2 operators, SU(2) propagators, Pauli transfer matrices and
//!   average gate fidelity.
//! - [`noise`]: random telegraph and Ornstein-Uhlenbeck trajectories plus
//!   autocorrelation / spectral estimators.
//! - [`control`]: five Gaussian pulses per drive axis.
//! - [`dynamics`]: the Monte Carlo ground truth (per-realization unitary
//!   propagation, tomography, fidelities).
//! - [`dataset`]: synthetic supervised data on disk.
//! - [`autodiff`] and [`greybox`]: the differentiable hybrid model and its
//!   training loop.
//! - [`optctrl`]: pulse design through the trained model, verified against
//!   the simulator.

pub mod autodiff;
pub mod control;
pub mod dataset;
pub mod dynamics;
pub mod encoder;
pub mod error;
pub mod greybox;
pub mod noise;
pub mod optctrl;
pub mod qcore;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};

/// How per-item results are combined.
///
/// `Sequential` folds results in index order and is bit-reproducible.
/// `Parallel` lets rayon pick the reduction tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sequential,
    Parallel,
}
