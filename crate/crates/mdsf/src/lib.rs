//! Numerical kernels for small-target sonar detection: selective state-space
//! scans, multi-scale dilated attention, cross-scale gated fusion, pyramid
//! enhancement blocks and a scale-adaptive box-loss family, all running on a
//! 64-bit tape-based autodiff engine with finite-difference and brute-force
//! oracles.
//!
//! Start with the runnable programs in `examples/`; the `mdsf` binary drives
//! benchmarks, oracle checks and smoke training from the command line.

pub mod error;
pub mod tensor;

pub mod ssm;

pub mod attention;

pub mod fusion;

pub mod losses;

pub mod synth;

pub mod model;

pub mod pyramid;

pub mod checks;

pub use error::{Error, Result};
