//! Independent reference implementations used as test oracles. None of these
//! call into the library's numerics.
#![allow(dead_code)]

use std::f64::consts::PI;

use qgrom::lstm::LstmModel;
use qgrom::solver::linear::{sparse_solve, SparseSystem};
use qgrom::solver::operators::{assemble_convection, assemble_diffusion, face_fluxes};
use qgrom::solver::{Layer, PhysParams, QgSolver, SolverSettings, Stencil};
use qgrom::{eval_on_cells, StructuredGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense row-major matrix.
pub type Dense = Vec<Vec<f64>>;

pub fn dense_from_stencil(grid: &StructuredGrid, st: &Stencil) -> Dense {
    let n = grid.n_cells();
    let nx = grid.nx;
    let mut a = vec![vec![0.0; n]; n];
    for k in 0..n {
        let (i, j) = (k % nx, k / nx);
        a[k][k] = st.center[k];
        if i + 1 < nx {
            a[k][k + 1] = st.east[k];
        }
        if i > 0 {
            a[k][k - 1] = st.west[k];
        }
        if j + 1 < grid.ny {
            a[k][k + nx] = st.north[k];
        }
        if j > 0 {
            a[k][k - nx] = st.south[k];
        }
    }
    a
}

/// Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Dense, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        let d = a[col][col];
        assert!(d != 0.0, "singular matrix");
        let pivot = a[col].clone();
        for r in col + 1..n {
            let f = a[r][col] / d;
            if f == 0.0 {
                continue;
            }
            for (x, p) in a[r][col..].iter_mut().zip(&pivot[col..]) {
                *x -= f * p;
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

pub fn mat_vec(a: &Dense, x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rms(a: &[f64]) -> f64 {
    (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt()
}

/// One-sided Jacobi SVD of an `m x n` matrix (`m >= n`, given as columns).
/// Returns singular values in decreasing order with matching left vectors
/// (as columns) and right vectors (as columns).
pub fn jacobi_svd(cols: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = cols.len();
    let mut u: Vec<Vec<f64>> = cols.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&u[p], &u[p]);
                let beta = dot(&u[q], &u[q]);
                let gamma = dot(&u[p], &u[q]);
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for vecs in [&mut u, &mut v] {
                    let (lo, hi) = vecs.split_at_mut(q);
                    for (a, b) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let (x, y) = (*a, *b);
                        *a = c * x - s * y;
                        *b = s * x + c * y;
                    }
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sig: Vec<(f64, usize)> = u.iter().enumerate().map(|(i, c)| (dot(c, c).sqrt(), i)).collect();
    sig.sort_by(|a, b| b.0.total_cmp(&a.0));
    let sigma: Vec<f64> = sig.iter().map(|s| s.0).collect();
    let left = sig
        .iter()
        .map(|&(s, i)| u[i].iter().map(|x| if s > 0.0 { x / s } else { 0.0 }).collect())
        .collect();
    let right = sig.iter().map(|&(_, i)| v[i].clone()).collect();
    (sigma, left, right)
}

/// Modified Gram-Schmidt on `k` Gaussian columns of length `m`.
pub fn random_orthonormal(m: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(k);
    while q.len() < k {
        let mut c: Vec<f64> = (0..m).map(|_| rng.random::<f64>() - 0.5).collect();
        for _ in 0..2 {
            for prev in &q {
                let d: f64 = prev.iter().zip(&c).map(|(a, b)| a * b).sum();
                c.iter_mut().zip(prev).for_each(|(x, p)| *x -= d * p);
            }
        }
        let nrm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm > 1e-8 {
            c.iter_mut().for_each(|x| *x /= nrm);
            q.push(c);
        }
    }
    q
}

/// `U diag(sigma) V^T` with random orthonormal factors; returned column-major
/// together with the exact factors.
pub struct Synthetic {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub sigma: Vec<f64>,
    pub u: Vec<Vec<f64>>,
}

pub fn synthetic_matrix(rows: usize, cols: usize, sigma: &[f64], seed: u64) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = sigma.len();
    let u = random_orthonormal(rows, r, &mut rng);
    let v = random_orthonormal(cols, r, &mut rng);
    let mut data = vec![0.0; rows * cols];
    for l in 0..r {
        for j in 0..cols {
            let w = sigma[l] * v[l][j];
            let col = &mut data[j * rows..(j + 1) * rows];
            col.iter_mut().zip(&u[l]).for_each(|(d, x)| *d += w * x);
        }
    }
    Synthetic {
        rows,
        cols,
        data,
        sigma: sigma.to_vec(),
        u,
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Direct evaluation of a stacked LSTM from its flat parameter vector.
///
/// `window` holds `lookback` rows newest first; `masks[l - 1][t][unit]`
/// multiplies the input of layer `l` at chronological step `t`.
pub fn reference_forward(model: &LstmModel, window: &[f64], masks: Option<&[Vec<Vec<f64>>]>) -> Vec<f64> {
    let hp = model.hyper();
    let h = hp.cells;
    let width = model.input_width();
    let steps = hp.lookback;
    let p = model.params();
    // chronological input sequence
    let mut seq: Vec<Vec<f64>> = (0..steps)
        .map(|t| {
            let row = steps - 1 - t;
            window[row * width..(row + 1) * width].to_vec()
        })
        .collect();
    let mut offset = 0;
    for layer in 0..hp.layers {
        let n_in = if layer == 0 { width } else { h };
        if layer > 0 {
            if let Some(m) = masks {
                for (t, x) in seq.iter_mut().enumerate() {
                    for (u, v) in x.iter_mut().enumerate() {
                        *v *= m[layer - 1][t][u];
                    }
                }
            }
        }
        let cols = n_in + h;
        let weight = |row: usize, col: usize| p[offset + row * cols + col];
        let bias = |row: usize| p[offset + 4 * h * cols + row];
        let mut hid = vec![0.0; h];
        let mut cell = vec![0.0; h];
        let mut outs = Vec::with_capacity(steps);
        for x in &seq {
            let pre = |gate: usize, unit: usize| -> f64 {
                let row = gate * h + unit;
                let mut s = bias(row);
                for (c, xv) in x.iter().enumerate() {
                    s += weight(row, c) * xv;
                }
                for (c, hv) in hid.iter().enumerate() {
                    s += weight(row, n_in + c) * hv;
                }
                s
            };
            let mut new_h = vec![0.0; h];
            let mut new_c = vec![0.0; h];
            for u in 0..h {
                let i_g = logistic(pre(0, u));
                let f_g = logistic(pre(1, u));
                let o_g = logistic(pre(2, u));
                let g_g = pre(3, u).tanh();
                new_c[u] = f_g * cell[u] + i_g * g_g;
                new_h[u] = o_g * new_c[u].tanh();
            }
            hid = new_h;
            cell = new_c;
            outs.push(hid.clone());
        }
        offset += 4 * h * cols + 4 * h;
        seq = outs;
    }
    let last = seq.last().unwrap();
    let n_out = model.n_out();
    (0..n_out)
        .map(|o| {
            let mut s = p[offset + n_out * h + o];
            for (u, hv) in last.iter().enumerate() {
                s += p[offset + o * h + u] * hv;
            }
            s
        })
        .collect()
}

pub fn tight() -> SolverSettings {
    SolverSettings {
        tolerance: 1e-12,
        max_iterations: None,
    }
}

pub fn observed_orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

/// Stream-function solve against `psi* = sin(pi x) sin(pi y)`; the other
/// layer holds `psi*` so the coupling term cancels.
pub fn stream_function_errors() -> Vec<f64> {
    [8, 16, 32]
        .iter()
        .map(|&n| {
            let grid = StructuredGrid::double_gyre(n).unwrap();
            let params = PhysParams::double_gyre(&grid);
            let solver = QgSolver::new(&grid, params, tight()).unwrap();
            let exact = eval_on_cells(&grid, |x, y| (PI * x).sin() * (PI * y).sin()).unwrap();
            let qbar = eval_on_cells(&grid, |x, y| y - params.ro * 2.0 * PI * PI * (PI * x).sin() * (PI * y).sin()).unwrap();
            let psi = solver.solve_stream(Layer::Top, &qbar, &exact).unwrap();
            (&psi - &exact).l2_norm()
        })
        .collect()
}

/// Steady `u . grad q - (1/Re) lap q = f` with `u = (psi_y, -psi_x)`,
/// `q* = y + sin(pi x) sin(2 pi y) / 2`, `psi = sin(pi x) sin(pi y)`.
pub fn advection_diffusion_errors() -> Vec<f64> {
    let re = 20.0;
    let qs = |x: f64, y: f64| y + 0.5 * (PI * x).sin() * (2.0 * PI * y).sin();
    let qx = |x: f64, y: f64| 0.5 * PI * (PI * x).cos() * (2.0 * PI * y).sin();
    let qy = |x: f64, y: f64| 1.0 + PI * (PI * x).sin() * (2.0 * PI * y).cos();
    let lap = |x: f64, y: f64| -0.5 * 5.0 * PI * PI * (PI * x).sin() * (2.0 * PI * y).sin();
    let px = |x: f64, y: f64| PI * (PI * x).cos() * (PI * y).sin();
    let py = |x: f64, y: f64| PI * (PI * x).sin() * (PI * y).cos();
    let source = |x: f64, y: f64| py(x, y) * qx(x, y) - px(x, y) * qy(x, y) - lap(x, y) / re;
    [8, 16, 32]
        .iter()
        .map(|&n| {
            let grid = StructuredGrid::double_gyre(n).unwrap();
            let psi = eval_on_cells(&grid, |x, y| (PI * x).sin() * (PI * y).sin()).unwrap();
            let (conv, conv_b) = assemble_convection(&face_fluxes(&psi), |_, y| y);
            let diff = assemble_diffusion(&grid, None, |_, y| y);
            let mut st = conv;
            st.scale(-1.0);
            st.add_scaled(-1.0 / re, &diff.stencil);
            let rhs: Vec<f64> = (0..grid.n_cells())
                .map(|k| {
                    let (x, y) = grid.center(k);
                    source(x, y) + conv_b[k] + diff.lift[k] / re
                })
                .collect();
            let sol = sparse_solve(&SparseSystem::new(&grid, st, rhs).unwrap(), 1e-12, 20_000)
                .unwrap()
                .solution;
            let exact = eval_on_cells(&grid, qs).unwrap();
            (&sol - &exact).l2_norm()
        })
        .collect()
}
