//! Uniform cell-centred grids and the scalar fields that live on them.
//!
//! Cells are stored row-major with the x index fastest: cell `(i, j)` has
//! linear index `j * nx + i`. Every file format in the crate relies on this
//! ordering.

use std::io::Write;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredGrid {
    pub nx: usize,
    pub ny: usize,
    pub x0: f64,
    pub xf: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

impl StructuredGrid {
    pub fn new(nx: usize, ny: usize, x0: f64, xf: f64, y_lo: f64, y_hi: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::invalid(format!(
                "grid needs at least 2 cells per direction, got {nx}x{ny}"
            )));
        }
        if !(xf > x0) || !(y_hi > y_lo) || ![x0, xf, y_lo, y_hi].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "grid extent must be positive and finite: [{x0}, {xf}] x [{y_lo}, {y_hi}]"
            )));
        }
        Ok(Self {
            nx,
            ny,
            x0,
            xf,
            y_lo,
            y_hi,
        })
    }

    /// The double-gyre basin `[0, 1] x [-1, 1]` with `n` cells per unit length.
    pub fn double_gyre(n: usize) -> Result<Self> {
        Self::new(n, 2 * n, 0.0, 1.0, -1.0, 1.0)
    }

    /// Re-checks the invariants, for grids that arrived through deserialization.
    pub fn validate(&self) -> Result<()> {
        Self::new(self.nx, self.ny, self.x0, self.xf, self.y_lo, self.y_hi).map(|_| ())
    }

    #[inline]
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn hx(&self) -> f64 {
        (self.xf - self.x0) / self.nx as f64
    }

    #[inline]
    pub fn hy(&self) -> f64 {
        (self.y_hi - self.y_lo) / self.ny as f64
    }

    #[inline]
    pub fn cell_area(&self) -> f64 {
        self.hx() * self.hy()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    #[inline]
    pub fn cell_x(&self, i: usize) -> f64 {
        self.x0 + (i as f64 + 0.5) * self.hx()
    }

    #[inline]
    pub fn cell_y(&self, j: usize) -> f64 {
        self.y_lo + (j as f64 + 0.5) * self.hy()
    }

    #[inline]
    pub fn center(&self, k: usize) -> (f64, f64) {
        let (i, j) = self.ij(k);
        (self.cell_x(i), self.cell_y(j))
    }

    /// Largest cell width, used for resolution checks.
    pub fn h_max(&self) -> f64 {
        self.hx().max(self.hy())
    }
}

/// Convenience wrapper mirroring the other free-function operations.
pub fn build_grid(
    nx: usize,
    ny: usize,
    x0: f64,
    xf: f64,
    y_lo: f64,
    y_hi: f64,
) -> Result<StructuredGrid> {
    StructuredGrid::new(nx, ny, x0, xf, y_lo, y_hi)
}

/// Cell-averaged scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: StructuredGrid,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: &StructuredGrid) -> Self {
        Self {
            grid: *grid,
            values: vec![0.0; grid.n_cells()],
        }
    }

    pub fn constant(grid: &StructuredGrid, value: f64) -> Self {
        Self {
            grid: *grid,
            values: vec![value; grid.n_cells()],
        }
    }

    pub fn from_values(grid: &StructuredGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::invalid(format!(
                "field has {} values but grid has {} cells",
                values.len(),
                grid.n_cells()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            let (i, j) = grid.ij(k);
            return Err(Error::Evaluation {
                i,
                j,
                value: values[k],
            });
        }
        Ok(Self {
            grid: *grid,
            values,
        })
    }

    /// Builds a field without the finiteness scan. Callers guarantee the invariant.
    pub(crate) fn from_values_unchecked(grid: &StructuredGrid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.n_cells());
        Self {
            grid: *grid,
            values,
        }
    }

    /// The planetary vorticity profile `q = y` (rest state and boundary data).
    pub fn y_coordinate(grid: &StructuredGrid) -> Self {
        let values = (0..grid.n_cells()).map(|k| grid.center(k).1).collect();
        Self::from_values_unchecked(grid, values)
    }

    #[inline]
    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::from_values_unchecked(&self.grid, self.values.iter().map(|v| c * v).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn check_same_grid(&self, other: &Field) {
        assert_eq!(
            self.grid, other.grid,
            "field arithmetic requires a shared grid"
        );
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(self)
    }

    /// CSV with header `x,y,value`, one row per cell in storage order.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,y,value")?;
        for (k, v) in self.values.iter().enumerate() {
            let (x, y) = self.grid.center(k);
            writeln!(out, "{},{},{}", fmt_real(x), fmt_real(y), fmt_real(*v))?;
        }
        Ok(())
    }
}

impl Add for &Field {
    type Output = Field;
    fn add(self, rhs: &Field) -> Field {
        self.check_same_grid(rhs);
        let values = self.values.iter().zip(&rhs.values).map(|(a, b)| a + b).collect();
        Field::from_values_unchecked(&self.grid, values)
    }
}

impl Sub for &Field {
    type Output = Field;
    fn sub(self, rhs: &Field) -> Field {
        self.check_same_grid(rhs);
        let values = self.values.iter().zip(&rhs.values).map(|(a, b)| a - b).collect();
        Field::from_values_unchecked(&self.grid, values)
    }
}

/// Samples `f` at every cell centre.
pub fn eval_on_cells<F>(grid: &StructuredGrid, f: F) -> Result<Field>
where
    F: Fn(f64, f64) -> f64,
{
    let mut values = Vec::with_capacity(grid.n_cells());
    for j in 0..grid.ny {
        let y = grid.cell_y(j);
        for i in 0..grid.nx {
            let value = f(grid.cell_x(i), y);
            if !value.is_finite() {
                return Err(Error::Evaluation { i, j, value });
            }
            values.push(value);
        }
    }
    Ok(Field::from_values_unchecked(grid, values))
}

/// Discrete L2 norm with midpoint quadrature: `sqrt(sum v_k^2 hx hy)`.
pub fn l2_norm(field: &Field) -> f64 {
    let sum_sq: f64 = field.values.iter().map(|v| v * v).sum();
    (sum_sq * field.grid.cell_area()).sqrt()
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}
