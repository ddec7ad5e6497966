//! Two-layer quasi-geostrophic model with nonlinear Helmholtz filtering,
//! advanced with a segregated BDF1 scheme.

use std::f64::consts::PI;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{eval_on_cells, Field, StructuredGrid};
use crate::solver::linear::{sparse_solve_from, SparseSystem, Stencil, DEFAULT_TOLERANCE};
use crate::solver::operators::{assemble_convection, assemble_diffusion, face_fluxes, indicator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Forcing {
    Zero,
    /// `F = amplitude * sin(pi y)`.
    DoubleGyre { amplitude: f64 },
}

impl Forcing {
    pub fn eval(&self, _x: f64, y: f64) -> f64 {
        match *self {
            Forcing::Zero => 0.0,
            Forcing::DoubleGyre { amplitude } => amplitude * (PI * y).sin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysParams {
    pub re: f64,
    pub ro: f64,
    pub fr: f64,
    pub delta: f64,
    pub sigma: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub forcing: Forcing,
}

impl PhysParams {
    /// Double-gyre defaults: Re = 450, Ro = 0.001, Fr = 0.1, sigma = 0.006,
    /// delta = 0.5 and filter radii equal to the grid spacing.
    pub fn double_gyre(grid: &StructuredGrid) -> Self {
        Self {
            re: 450.0,
            ro: 0.001,
            fr: 0.1,
            delta: 0.5,
            sigma: 0.006,
            alpha1: grid.h_max(),
            alpha2: grid.h_max(),
            forcing: Forcing::DoubleGyre { amplitude: 1.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.re,
            self.ro,
            self.fr,
            self.delta,
            self.sigma,
            self.alpha1,
            self.alpha2,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("physical parameters must be finite"));
        }
        if !(self.re > 0.0) || !(self.ro > 0.0) {
            return Err(Error::invalid(format!(
                "Re and Ro must be positive (Re={}, Ro={})",
                self.re, self.ro
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!(
                "layer aspect ratio must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if self.fr < 0.0 || self.sigma < 0.0 || self.alpha1 < 0.0 || self.alpha2 < 0.0 {
            return Err(Error::invalid("Fr, sigma and filter radii must be non-negative"));
        }
        if let Forcing::DoubleGyre { amplitude } = self.forcing {
            if !amplitude.is_finite() {
                return Err(Error::invalid("forcing amplitude must be finite"));
            }
        }
        Ok(())
    }

    /// Munk boundary-layer width `(Ro / Re)^(1/3)` for unit basin length.
    pub fn munk_scale(&self) -> f64 {
        (self.ro / self.re).cbrt()
    }

    fn layer_depth_ratio(&self, layer: Layer) -> f64 {
        match layer {
            Layer::Top => self.delta,
            Layer::Bottom => 1.0 - self.delta,
        }
    }

    fn filter_radius(&self, layer: Layer) -> f64 {
        match layer {
            Layer::Top => self.alpha1,
            Layer::Bottom => self.alpha2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    Top,
    Bottom,
}

impl Layer {
    pub fn from_index(l: u8) -> Result<Self> {
        match l {
            1 => Ok(Layer::Top),
            2 => Ok(Layer::Bottom),
            other => Err(Error::invalid(format!("layer must be 1 or 2, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub q1: Field,
    pub q2: Field,
    pub qbar1: Field,
    pub qbar2: Field,
    pub psi1: Field,
    pub psi2: Field,
    pub t: f64,
}

impl LayerState {
    /// Rest state: `q = qbar = y`, `psi = 0`.
    pub fn rest(grid: &StructuredGrid) -> Self {
        let y = Field::y_coordinate(grid);
        let zero = Field::zeros(grid);
        Self {
            q1: y.clone(),
            q2: y.clone(),
            qbar1: y.clone(),
            qbar2: y,
            psi1: zero.clone(),
            psi2: zero,
            t: 0.0,
        }
    }

    pub fn grid(&self) -> &StructuredGrid {
        self.q1.grid()
    }

    pub fn q(&self, layer: Layer) -> &Field {
        match layer {
            Layer::Top => &self.q1,
            Layer::Bottom => &self.q2,
        }
    }

    pub fn psi(&self, layer: Layer) -> &Field {
        match layer {
            Layer::Top => &self.psi1,
            Layer::Bottom => &self.psi2,
        }
    }

    fn check_grid(&self) -> Result<()> {
        let g = self.grid();
        let all = [&self.q2, &self.qbar1, &self.qbar2, &self.psi1, &self.psi2];
        if all.iter().any(|f| f.grid() != g) {
            return Err(Error::invalid("layer state fields live on different grids"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub tolerance: f64,
    /// Defaults to `10 * N_C` when absent.
    pub max_iterations: Option<usize>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: None,
        }
    }
}

impl SolverSettings {
    pub fn max_iter(&self, grid: &StructuredGrid) -> usize {
        self.max_iterations.unwrap_or(10 * grid.n_cells())
    }
}

/// Precomputed operators for one grid and parameter set.
#[derive(Debug, Clone)]
pub struct QgSolver {
    grid: StructuredGrid,
    params: PhysParams,
    settings: SolverSettings,
    forcing: Field,
    y: Field,
    /// Unit Laplacian with homogeneous Dirichlet data.
    laplacian: Stencil,
    /// Boundary lift of the unit Laplacian for `q = y` data.
    laplacian_lift_y: Vec<f64>,
}

impl QgSolver {
    pub fn new(grid: &StructuredGrid, params: PhysParams, settings: SolverSettings) -> Result<Self> {
        params.validate()?;
        if !(settings.tolerance > 0.0) {
            return Err(Error::invalid("solver tolerance must be positive"));
        }
        let forcing = eval_on_cells(grid, |x, y| params.forcing.eval(x, y))?;
        let laplacian = assemble_diffusion(grid, None, |_, _| 0.0).stencil;
        let laplacian_lift_y = assemble_diffusion(grid, None, |_, y| y).lift;
        Ok(Self {
            grid: *grid,
            params,
            settings,
            forcing,
            y: Field::y_coordinate(grid),
            laplacian,
            laplacian_lift_y,
        })
    }

    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    pub fn params(&self) -> &PhysParams {
        &self.params
    }

    /// Discrete Laplacian of a field with zero boundary data.
    pub fn laplacian(&self, f: &Field) -> Vec<f64> {
        self.laplacian.apply(&self.grid, f.values())
    }

    fn solve(&self, stencil: Stencil, rhs: Vec<f64>, guess: Option<&[f64]>) -> Result<Field> {
        let system = SparseSystem {
            grid: self.grid,
            stencil,
            rhs,
        };
        debug_assert!(system.validate().is_ok());
        let report = sparse_solve_from(
            &system,
            guess,
            self.settings.tolerance,
            self.settings.max_iter(&self.grid),
        )?;
        Ok(report.solution)
    }

    /// Implicit convection-diffusion solve for one layer's vorticity.
    ///
    /// For the bottom layer `state.psi1` must already hold the new top-layer
    /// stream function.
    pub fn advance_vorticity(&self, layer: Layer, state: &LayerState, dt: f64) -> Result<Field> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid(format!("time step must be positive, got {dt}")));
        }
        let p = &self.params;
        let g = &self.grid;
        let n = g.n_cells();
        let inv_dt = 1.0 / dt;

        let q_old = state.q(layer);
        let lap_psi1 = self.laplacian(&state.psi1);
        let lap_psi2 = self.laplacian(&state.psi2);
        let mut rhs: Vec<f64> = match layer {
            Layer::Top => {
                let c = p.fr / (p.re * p.delta);
                (0..n)
                    .map(|k| {
                        self.forcing.values()[k] + q_old.values()[k] * inv_dt
                            - c * (lap_psi2[k] - lap_psi1[k])
                    })
                    .collect()
            }
            Layer::Bottom => {
                let c = p.fr / (p.re * (1.0 - p.delta));
                (0..n)
                    .map(|k| {
                        q_old.values()[k] * inv_dt - p.sigma * lap_psi2[k]
                            - c * (lap_psi1[k] - lap_psi2[k])
                    })
                    .collect()
            }
        };

        let fluxes = face_fluxes(state.psi(layer));
        let (convection, conv_boundary) = assemble_convection(&fluxes, |_, y| y);
        let diffusivity = 1.0 / p.re;

        // (1/dt) q - C q - (1/Re) L q = rhs
        let mut stencil = convection;
        stencil.scale(-1.0);
        stencil.add_scaled(-diffusivity, &self.laplacian);
        stencil.add_diagonal(inv_dt);
        for k in 0..n {
            rhs[k] += conv_boundary[k] + diffusivity * self.laplacian_lift_y[k];
        }
        self.solve(stencil, rhs, Some(q_old.values()))
    }

    /// Solves `-alpha^2 div(a(q) grad qbar) + qbar = q` with `qbar = y` on the boundary.
    pub fn apply_filter(&self, q: &Field, alpha: f64) -> Result<Field> {
        apply_filter_with(q, alpha, &self.settings)
    }

    /// Solves `Ro L psi - (Fr/delta_l) psi = qbar - y - (Fr/delta_l) psi_other`.
    pub fn solve_stream(&self, layer: Layer, qbar: &Field, psi_other: &Field) -> Result<Field> {
        self.solve_stream_from(layer, qbar, psi_other, None)
    }

    fn solve_stream_from(
        &self,
        layer: Layer,
        qbar: &Field,
        psi_other: &Field,
        guess: Option<&Field>,
    ) -> Result<Field> {
        let p = &self.params;
        let coupling = p.fr / p.layer_depth_ratio(layer);
        let mut stencil = self.laplacian.clone();
        stencil.scale(p.ro);
        stencil.add_diagonal(-coupling);
        let rhs: Vec<f64> = qbar
            .values()
            .iter()
            .zip(self.y.values())
            .zip(psi_other.values())
            .map(|((qb, y), po)| qb - y - coupling * po)
            .collect();
        self.solve(stencil, rhs, guess.map(|f| f.values()))
    }

    /// One segregated time step (six sub-steps).
    pub fn step(&self, state: &LayerState, dt: f64) -> Result<LayerState> {
        state.check_grid()?;
        let tag = |stage: &'static str| {
            move |e: Error| Error::Step {
                step: 0,
                stage,
                source: Box::new(e),
            }
        };
        let p = &self.params;
        let q1 = self
            .advance_vorticity(Layer::Top, state, dt)
            .map_err(tag("top-layer vorticity"))?;
        let qbar1 = self.apply_filter(&q1, p.alpha1).map_err(tag("top-layer filter"))?;
        let psi1 = self
            .solve_stream_from(Layer::Top, &qbar1, &state.psi2, Some(&state.psi1))
            .map_err(tag("top-layer stream function"))?;

        let mid = LayerState {
            q1,
            qbar1,
            psi1,
            q2: state.q2.clone(),
            qbar2: state.qbar2.clone(),
            psi2: state.psi2.clone(),
            t: state.t,
        };
        let q2 = self
            .advance_vorticity(Layer::Bottom, &mid, dt)
            .map_err(tag("bottom-layer vorticity"))?;
        let qbar2 = self
            .apply_filter(&q2, p.alpha2)
            .map_err(tag("bottom-layer filter"))?;
        let psi2 = self
            .solve_stream_from(Layer::Bottom, &qbar2, &mid.psi1, Some(&state.psi2))
            .map_err(tag("bottom-layer stream function"))?;

        Ok(LayerState {
            q1: mid.q1,
            q2,
            qbar1: mid.qbar1,
            qbar2,
            psi1: mid.psi1,
            psi2,
            t: state.t + dt,
        })
    }

    pub fn filter_radius(&self, layer: Layer) -> f64 {
        self.params.filter_radius(layer)
    }
}

pub fn apply_filter_with(q: &Field, alpha: f64, settings: &SolverSettings) -> Result<Field> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("filter radius must be non-negative, got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(q.clone());
    }
    let grid = q.grid();
    let a = indicator(q);
    let op = assemble_diffusion(grid, Some(a.values()), |_, y| y);
    let a2 = alpha * alpha;
    // (I - alpha^2 L_a) qbar = q + alpha^2 lift
    let mut stencil = op.stencil;
    stencil.scale(-a2);
    stencil.add_diagonal(1.0);
    let rhs: Vec<f64> = q
        .values()
        .iter()
        .zip(&op.lift)
        .map(|(qk, l)| qk + a2 * l)
        .collect();
    let system = SparseSystem {
        grid: *grid,
        stencil,
        rhs,
    };
    let report = sparse_solve_from(
        &system,
        Some(q.values()),
        settings.tolerance,
        settings.max_iter(grid),
    )?;
    Ok(report.solution)
}

pub fn advance_vorticity(layer: Layer, state: &LayerState, params: &PhysParams, dt: f64) -> Result<Field> {
    QgSolver::new(state.grid(), *params, SolverSettings::default())?.advance_vorticity(layer, state, dt)
}

pub fn apply_filter(q: &Field, alpha: f64) -> Result<Field> {
    apply_filter_with(q, alpha, &SolverSettings::default())
}

pub fn solve_stream(layer: Layer, qbar: &Field, psi_other: &Field, params: &PhysParams) -> Result<Field> {
    QgSolver::new(qbar.grid(), *params, SolverSettings::default())?.solve_stream(layer, qbar, psi_other)
}

pub fn step(state: &LayerState, params: &PhysParams, dt: f64) -> Result<LayerState> {
    QgSolver::new(state.grid(), *params, SolverSettings::default())?.step(state, dt)
}

/// One emitted snapshot.
#[derive(Debug, Clone)]
pub struct SnapshotRecord {
    pub step: usize,
    pub t: f64,
    pub q1: Field,
    pub q2: Field,
    pub psi1: Field,
    pub psi2: Field,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeWindow {
    pub start: f64,
    pub stride: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub snapshots: usize,
    pub wall_seconds: f64,
    pub final_time: f64,
}

/// Whether the grid resolves the Munk layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Resolved,
    Stabilized,
}

pub fn resolution_regime(grid: &StructuredGrid, params: &PhysParams) -> Resolution {
    if grid.h_max() < params.munk_scale() {
        Resolution::Resolved
    } else {
        Resolution::Stabilized
    }
}

fn steps_for(span: f64, dt: f64, what: &str) -> Result<usize> {
    let n = (span / dt).round();
    if n < 1.0 || (n * dt - span).abs() > 1e-12 * span.abs() {
        return Err(Error::invalid(format!(
            "{what} ({span}) is not an integer multiple of dt ({dt})"
        )));
    }
    Ok(n as usize)
}

/// Integrates from rest to `t_end`, handing a snapshot to `sink` at the
/// window start and every `stride` afterwards.
pub fn run_simulation<S>(
    solver: &QgSolver,
    dt: f64,
    t_end: f64,
    window: TimeWindow,
    mut sink: S,
) -> Result<RunSummary>
where
    S: FnMut(SnapshotRecord) -> Result<()>,
{
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("time step must be positive, got {dt}")));
    }
    if !(window.stride > 0.0) || window.start < 0.0 || !t_end.is_finite() {
        return Err(Error::invalid("snapshot stride must be positive and window start non-negative"));
    }
    let stride_steps = steps_for(window.stride, dt, "snapshot stride")?;
    let start_step = (window.start / dt - 1e-9).ceil().max(0.0) as usize;
    let n_steps = ((t_end / dt) + 1e-9).floor().max(0.0) as usize;

    let grid = solver.grid();
    let params = solver.params();
    let delta_m = params.munk_scale();
    match resolution_regime(grid, params) {
        Resolution::Resolved => log::info!(
            "h={:.5} < munk scale {:.5}: resolved regime",
            grid.h_max(),
            delta_m
        ),
        Resolution::Stabilized => log::info!(
            "h={:.5} >= munk scale {:.5}: stabilized regime",
            grid.h_max(),
            delta_m
        ),
    }

    let clock = Instant::now();
    let mut state = LayerState::rest(grid);
    let mut emitted = 0;
    let emit = |n: usize, state: &LayerState, sink: &mut S| -> Result<bool> {
        if n >= start_step && (n - start_step).is_multiple_of(stride_steps) {
            sink(SnapshotRecord {
                step: n,
                t: n as f64 * dt,
                q1: state.q1.clone(),
                q2: state.q2.clone(),
                psi1: state.psi1.clone(),
                psi2: state.psi2.clone(),
            })?;
            log::debug!(
                "t={:.6} step={} wall={:.3}",
                n as f64 * dt,
                n,
                clock.elapsed().as_secs_f64()
            );
            return Ok(true);
        }
        Ok(false)
    };
    if emit(0, &state, &mut sink)? {
        emitted += 1;
    }
    for n in 1..=n_steps {
        let next = solver.step(&state, dt).map_err(|e| match e {
            Error::Step { stage, source, .. } => {
                if matches!(*source, Error::NonConvergence { residual, .. } if !residual.is_finite()) {
                    Error::BlowUp {
                        time: n as f64 * dt,
                        step: n,
                        field: stage,
                    }
                } else {
                    Error::Step { step: n, stage, source }
                }
            }
            other => other,
        })?;
        state = next;
        state.t = n as f64 * dt;
        for (name, f) in [("q1", &state.q1), ("q2", &state.q2), ("psi1", &state.psi1), ("psi2", &state.psi2)] {
            if !f.is_finite() {
                return Err(Error::BlowUp {
                    time: state.t,
                    step: n,
                    field: name,
                });
            }
        }
        if emit(n, &state, &mut sink)? {
            emitted += 1;
        }
    }
    Ok(RunSummary {
        steps: n_steps,
        snapshots: emitted,
        wall_seconds: clock.elapsed().as_secs_f64(),
        final_time: n_steps as f64 * dt,
    })
}
