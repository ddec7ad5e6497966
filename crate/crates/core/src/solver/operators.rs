//! Finite-volume building blocks: diffusion stencils with Dirichlet data,
//! stream-function face fluxes, central convection and the gradient indicator.

use crate::grid::{Field, StructuredGrid};
use crate::solver::linear::Stencil;

/// Discrete `div(kappa grad u)` per unit cell volume, together with the
/// contribution of the Dirichlet boundary data (`lift`), so that
/// `div(kappa grad u) ~ stencil * u + lift`.
#[derive(Debug, Clone)]
pub struct DiffusionOperator {
    pub stencil: Stencil,
    pub lift: Vec<f64>,
}

/// Assembles the diffusion operator. `kappa` holds optional cell-centred
/// coefficients (face values are two-cell averages, boundary faces take the
/// adjacent cell value); `None` means unit coefficient. The boundary value is
/// imposed at face centroids with a half-cell gradient.
pub fn assemble_diffusion<G>(grid: &StructuredGrid, kappa: Option<&[f64]>, boundary: G) -> DiffusionOperator
where
    G: Fn(f64, f64) -> f64,
{
    let (nx, ny) = (grid.nx, grid.ny);
    let n = grid.n_cells();
    let (hx, hy) = (grid.hx(), grid.hy());
    let (ihx2, ihy2) = (1.0 / (hx * hx), 1.0 / (hy * hy));
    let coef = |k: usize| kappa.map_or(1.0, |a| a[k]);
    let mut st = Stencil::zeros(n);
    let mut lift = vec![0.0; n];

    for j in 0..ny {
        let y = grid.cell_y(j);
        for i in 0..nx {
            let k = j * nx + i;
            let x = grid.cell_x(i);
            let kp = coef(k);

            if i + 1 < nx {
                let w = 0.5 * (kp + coef(k + 1)) * ihx2;
                st.east[k] = w;
                st.center[k] -= w;
            } else {
                let w = 2.0 * kp * ihx2;
                st.center[k] -= w;
                lift[k] += w * boundary(grid.xf, y);
            }
            if i > 0 {
                let w = 0.5 * (kp + coef(k - 1)) * ihx2;
                st.west[k] = w;
                st.center[k] -= w;
            } else {
                let w = 2.0 * kp * ihx2;
                st.center[k] -= w;
                lift[k] += w * boundary(grid.x0, y);
            }
            if j + 1 < ny {
                let w = 0.5 * (kp + coef(k + nx)) * ihy2;
                st.north[k] = w;
                st.center[k] -= w;
            } else {
                let w = 2.0 * kp * ihy2;
                st.center[k] -= w;
                lift[k] += w * boundary(x, grid.y_hi);
            }
            if j > 0 {
                let w = 0.5 * (kp + coef(k - nx)) * ihy2;
                st.south[k] = w;
                st.center[k] -= w;
            } else {
                let w = 2.0 * kp * ihy2;
                st.center[k] -= w;
                lift[k] += w * boundary(x, grid.y_lo);
            }
        }
    }
    DiffusionOperator { stencil: st, lift }
}

/// Volumetric fluxes `(curl Psi) . A` on every face.
///
/// `x_faces[j * (nx + 1) + i]` is the flux through the face at
/// `x = x0 + i hx` in the `+x` direction; `y_faces[j * nx + i]` is the flux
/// through the face at `y = y_lo + j hy` in the `+y` direction.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceFluxes {
    pub grid: StructuredGrid,
    pub x_faces: Vec<f64>,
    pub y_faces: Vec<f64>,
}

impl FaceFluxes {
    #[inline]
    pub fn x_face(&self, i: usize, j: usize) -> f64 {
        self.x_faces[j * (self.grid.nx + 1) + i]
    }

    #[inline]
    pub fn y_face(&self, i: usize, j: usize) -> f64 {
        self.y_faces[j * self.grid.nx + i]
    }

    /// Outward fluxes of cell (i, j) as (east, west, north, south).
    #[inline]
    pub fn outward(&self, i: usize, j: usize) -> [f64; 4] {
        [
            self.x_face(i + 1, j),
            -self.x_face(i, j),
            self.y_face(i, j + 1),
            -self.y_face(i, j),
        ]
    }

    pub fn net_outflow(&self, i: usize, j: usize) -> f64 {
        self.outward(i, j).iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.x_faces
            .iter()
            .chain(&self.y_faces)
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Face fluxes from vertex values of psi; the per-cell sum telescopes to zero.
pub fn face_fluxes(psi: &Field) -> FaceFluxes {
    let grid = *psi.grid();
    let (nx, ny) = (grid.nx, grid.ny);
    let vx = nx + 1;
    let mut vertex = vec![0.0; vx * (ny + 1)];
    for j in 1..ny {
        for i in 1..nx {
            vertex[j * vx + i] = 0.25
                * (psi.at(i - 1, j - 1) + psi.at(i, j - 1) + psi.at(i - 1, j) + psi.at(i, j));
        }
    }
    let mut x_faces = vec![0.0; (nx + 1) * ny];
    for j in 0..ny {
        for i in 0..=nx {
            // (d psi / dy) * hy
            x_faces[j * (nx + 1) + i] = vertex[(j + 1) * vx + i] - vertex[j * vx + i];
        }
    }
    let mut y_faces = vec![0.0; nx * (ny + 1)];
    for j in 0..=ny {
        for i in 0..nx {
            // -(d psi / dx) * hx
            y_faces[j * nx + i] = vertex[j * vx + i] - vertex[j * vx + i + 1];
        }
    }
    FaceFluxes {
        grid,
        x_faces,
        y_faces,
    }
}

/// Central-interpolation discretisation of `-div((curl Psi) u)` per unit
/// volume: returns the stencil and the boundary-face contribution for data `g`
/// (to be moved to the right-hand side with opposite sign).
pub fn assemble_convection<G>(fluxes: &FaceFluxes, boundary: G) -> (Stencil, Vec<f64>)
where
    G: Fn(f64, f64) -> f64,
{
    let grid = &fluxes.grid;
    let (nx, ny) = (grid.nx, grid.ny);
    let inv_vol = 1.0 / grid.cell_area();
    let mut st = Stencil::zeros(grid.n_cells());
    let mut boundary_term = vec![0.0; grid.n_cells()];
    for j in 0..ny {
        let y = grid.cell_y(j);
        for i in 0..nx {
            let k = j * nx + i;
            let x = grid.cell_x(i);
            let [e, w, n, s] = fluxes.outward(i, j);
            let mut center = 0.0;
            if i + 1 < nx {
                center -= 0.5 * e * inv_vol;
                st.east[k] = -0.5 * e * inv_vol;
            } else {
                boundary_term[k] -= e * inv_vol * boundary(grid.xf, y);
            }
            if i > 0 {
                center -= 0.5 * w * inv_vol;
                st.west[k] = -0.5 * w * inv_vol;
            } else {
                boundary_term[k] -= w * inv_vol * boundary(grid.x0, y);
            }
            if j + 1 < ny {
                center -= 0.5 * n * inv_vol;
                st.north[k] = -0.5 * n * inv_vol;
            } else {
                boundary_term[k] -= n * inv_vol * boundary(x, grid.y_hi);
            }
            if j > 0 {
                center -= 0.5 * s * inv_vol;
                st.south[k] = -0.5 * s * inv_vol;
            } else {
                boundary_term[k] -= s * inv_vol * boundary(x, grid.y_lo);
            }
            st.center[k] = center;
        }
    }
    (st, boundary_term)
}

/// Cell-centred gradient magnitude: central differences inside, second-order
/// one-sided differences on boundary cells.
pub fn gradient_magnitude(q: &Field) -> Vec<f64> {
    let grid = q.grid();
    let (nx, ny) = (grid.nx, grid.ny);
    let (hx, hy) = (grid.hx(), grid.hy());
    let deriv = |get: &dyn Fn(usize) -> f64, idx: usize, n: usize, h: f64| -> f64 {
        if idx > 0 && idx + 1 < n {
            (get(idx + 1) - get(idx - 1)) / (2.0 * h)
        } else if n >= 3 {
            if idx == 0 {
                (-3.0 * get(0) + 4.0 * get(1) - get(2)) / (2.0 * h)
            } else {
                (3.0 * get(n - 1) - 4.0 * get(n - 2) + get(n - 3)) / (2.0 * h)
            }
        } else {
            (get(1) - get(0)) / h
        }
    };
    let mut out = vec![0.0; grid.n_cells()];
    for j in 0..ny {
        for i in 0..nx {
            let gx = deriv(&|ii| q.at(ii, j), i, nx, hx);
            let gy = deriv(&|jj| q.at(i, jj), j, ny, hy);
            out[j * nx + i] = gx.hypot(gy);
        }
    }
    out
}

/// Threshold below which a field counts as constant for the indicator.
pub const INDICATOR_FLAT_THRESHOLD: f64 = 1e-14;

/// `a(q) = |grad q| / max |grad q|`, or zero for a flat field.
pub fn indicator(q: &Field) -> Field {
    let grid = q.grid();
    let mag = gradient_magnitude(q);
    let max = mag.iter().fold(0.0_f64, |m, v| m.max(*v));
    if !(max >= INDICATOR_FLAT_THRESHOLD) {
        return Field::zeros(grid);
    }
    let values = mag.into_iter().map(|m| (m / max).clamp(0.0, 1.0)).collect();
    Field::from_values_unchecked(grid, values)
}
