//! Five-point stencil systems and a Jacobi-preconditioned BiCGStab solver.

use crate::error::{Error, Result};
use crate::grid::{Field, StructuredGrid};

pub const DEFAULT_TOLERANCE: f64 = 1e-8;

/// Per-cell coefficients of a five-point operator. Neighbour coefficients that
/// would reach outside the grid must be zero; boundary data lives in the rhs.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    pub center: Vec<f64>,
    pub east: Vec<f64>,
    pub west: Vec<f64>,
    pub north: Vec<f64>,
    pub south: Vec<f64>,
}

impl Stencil {
    pub fn zeros(n: usize) -> Self {
        Self {
            center: vec![0.0; n],
            east: vec![0.0; n],
            west: vec![0.0; n],
            north: vec![0.0; n],
            south: vec![0.0; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut s = Self::zeros(n);
        s.center.fill(1.0);
        s
    }

    pub fn len(&self) -> usize {
        self.center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }

    pub fn add_diagonal(&mut self, value: f64) {
        self.center.iter_mut().for_each(|c| *c += value);
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &Stencil) {
        let pairs = [
            (&mut self.center, &other.center),
            (&mut self.east, &other.east),
            (&mut self.west, &other.west),
            (&mut self.north, &other.north),
            (&mut self.south, &other.south),
        ];
        for (dst, src) in pairs {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in [
            &mut self.center,
            &mut self.east,
            &mut self.west,
            &mut self.north,
            &mut self.south,
        ] {
            v.iter_mut().for_each(|c| *c *= factor);
        }
    }

    /// `out = A x`.
    pub fn apply_into(&self, grid: &StructuredGrid, x: &[f64], out: &mut [f64]) {
        let (nx, ny) = (grid.nx, grid.ny);
        for j in 0..ny {
            for i in 0..nx {
                let k = j * nx + i;
                let mut acc = self.center[k] * x[k];
                if i + 1 < nx {
                    acc += self.east[k] * x[k + 1];
                }
                if i > 0 {
                    acc += self.west[k] * x[k - 1];
                }
                if j + 1 < ny {
                    acc += self.north[k] * x[k + nx];
                }
                if j > 0 {
                    acc += self.south[k] * x[k - nx];
                }
                out[k] = acc;
            }
        }
    }

    pub fn apply(&self, grid: &StructuredGrid, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_into(grid, x, &mut out);
        out
    }
}

#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub grid: StructuredGrid,
    pub stencil: Stencil,
    pub rhs: Vec<f64>,
}

impl SparseSystem {
    pub fn new(grid: &StructuredGrid, stencil: Stencil, rhs: Vec<f64>) -> Result<Self> {
        let system = Self {
            grid: *grid,
            stencil,
            rhs,
        };
        system.validate()?;
        Ok(system)
    }

    pub fn dimension(&self) -> usize {
        self.grid.n_cells()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.n_cells();
        let s = &self.stencil;
        if [s.center.len(), s.east.len(), s.west.len(), s.north.len(), s.south.len(), self.rhs.len()]
            .iter()
            .any(|&len| len != n)
        {
            return Err(Error::invalid("stencil or rhs length differs from cell count"));
        }
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        for k in 0..n {
            let (i, j) = (k % nx, k / nx);
            let entries = [s.center[k], s.east[k], s.west[k], s.north[k], s.south[k], self.rhs[k]];
            if entries.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("non-finite system entry in row {k}")));
            }
            if s.center[k] == 0.0 {
                return Err(Error::invalid(format!("zero diagonal in row {k}")));
            }
            let outside = (i + 1 == nx && s.east[k] != 0.0)
                || (i == 0 && s.west[k] != 0.0)
                || (j + 1 == ny && s.north[k] != 0.0)
                || (j == 0 && s.south[k] != 0.0);
            if outside {
                return Err(Error::invalid(format!(
                    "row {k} couples to a cell outside the grid"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: Field,
    pub iterations: usize,
    /// Relative residual `|b - Ax| / |b|`, starting with the initial guess.
    pub residual_history: Vec<f64>,
}

/// Solves from a zero initial guess.
pub fn sparse_solve(system: &SparseSystem, tol: f64, max_iter: usize) -> Result<SolveReport> {
    sparse_solve_from(system, None, tol, max_iter)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// BiCGStab with right Jacobi preconditioning, optionally warm-started.
pub fn sparse_solve_from(
    system: &SparseSystem,
    initial: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport> {
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("solver tolerance must be positive, got {tol}")));
    }
    let grid = &system.grid;
    let n = grid.n_cells();
    let a = &system.stencil;
    let b = &system.rhs;
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok(SolveReport {
            solution: Field::zeros(grid),
            iterations: 0,
            residual_history: vec![0.0],
        });
    }

    let inv_diag: Vec<f64> = a.center.iter().map(|c| 1.0 / c).collect();
    let mut x = match initial {
        Some(x0) if x0.len() == n => x0.to_vec(),
        Some(_) => return Err(Error::invalid("initial guess length differs from cell count")),
        None => vec![0.0; n],
    };
    let mut r = vec![0.0; n];
    a.apply_into(grid, &x, &mut r);
    r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);

    let mut history = vec![norm(&r) / b_norm];
    if history[0] <= tol {
        return finish(grid, x, 0, history);
    }

    let mut r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut t = vec![0.0; n];

    for iter in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 || omega == 0.0 {
            // breakdown: restart the shadow residual
            r_hat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            p.fill(0.0);
            v.fill(0.0);
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for k in 0..n {
            p[k] = r[k] + beta * (p[k] - omega * v[k]);
            y[k] = inv_diag[k] * p[k];
        }
        a.apply_into(grid, &y, &mut v);
        let denom = dot(&r_hat, &v);
        if denom == 0.0 {
            r_hat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            p.fill(0.0);
            v.fill(0.0);
            continue;
        }
        alpha = rho / denom;
        for k in 0..n {
            s[k] = r[k] - alpha * v[k];
        }
        let s_rel = norm(&s) / b_norm;
        if s_rel <= tol {
            for k in 0..n {
                x[k] += alpha * y[k];
            }
            history.push(s_rel);
            return finish(grid, x, iter, history);
        }
        for k in 0..n {
            z[k] = inv_diag[k] * s[k];
        }
        a.apply_into(grid, &z, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for k in 0..n {
            x[k] += alpha * y[k] + omega * z[k];
            r[k] = s[k] - omega * t[k];
        }
        let rel = norm(&r) / b_norm;
        history.push(rel);
        if !rel.is_finite() {
            break;
        }
        if rel <= tol {
            // confirm against the true residual; recurrences drift
            a.apply_into(grid, &x, &mut t);
            let true_rel = t
                .iter()
                .zip(b)
                .map(|(ax, bk)| (bk - ax) * (bk - ax))
                .sum::<f64>()
                .sqrt()
                / b_norm;
            if true_rel <= tol {
                *history.last_mut().unwrap() = true_rel;
                return finish(grid, x, iter, history);
            }
            for k in 0..n {
                r[k] = b[k] - t[k];
            }
        }
    }

    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

fn finish(grid: &StructuredGrid, x: Vec<f64>, iterations: usize, history: Vec<f64>) -> Result<SolveReport> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonConvergence {
            iterations,
            residual: f64::NAN,
            history,
        });
    }
    Ok(SolveReport {
        solution: Field::from_values_unchecked(grid, x),
        iterations,
        residual_history: history,
    })
}
