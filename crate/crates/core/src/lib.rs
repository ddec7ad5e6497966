//! Two-layer quasi-geostrophic ocean simulation with nonlinear filtering,
//! randomized POD compression of snapshot ensembles, and LSTM forecasting of
//! the reduced modal coefficients.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod archive;
pub mod error;
pub mod grid;
pub mod lstm;
pub mod pipeline;
pub mod reduction;
pub mod snapshots;
pub mod solver;

pub use archive::write_atomic;
pub use error::{Error, Result};
pub use grid::{build_grid, eval_on_cells, l2_norm, Field, StructuredGrid};
pub use snapshots::{assemble_matrix, fluctuations, time_average, SnapshotMatrix, SnapshotSeries, Variable};
