//! Dense f64 N-D arrays with tape-based reverse-mode differentiation.

mod gradcheck;
mod graph;
mod ops;
mod params;
pub mod scalar_math;

pub mod io;

pub use gradcheck::{fd_step, gradcheck, rel_err};
pub use graph::{Graph, Tensor, LN_EPS};
pub use params::{Bound, ParamId, ParamSet};

pub(crate) use graph::{Op, ScanRecord};

#[cfg(test)]
mod tests;
