//! Full order model: finite-volume two-layer QG solver.

pub mod linear;
pub mod operators;
pub mod qg;

pub use linear::{sparse_solve, sparse_solve_from, SolveReport, SparseSystem, Stencil};
pub use operators::{face_fluxes, indicator, FaceFluxes};
pub use qg::{
    advance_vorticity, apply_filter, run_simulation, solve_stream, step, Forcing, Layer, LayerState,
    PhysParams, QgSolver, RunSummary, SnapshotRecord, SolverSettings, TimeWindow,
};
