//! Deterministic and randomized POD, energy-based rank selection and modal
//! coefficients.

use std::io::Write;
use std::path::Path;

use faer::{Mat, MatRef};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::{write_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::grid::{fmt_real, Field, StructuredGrid};
use crate::snapshots::{read_grid, write_grid, SnapshotMatrix, Variable};

pub const BASIS_MAGIC: &[u8; 8] = b"QGBASI01";

pub const DEFAULT_OVERSAMPLE: usize = 75;
pub const DEFAULT_POWER: usize = 1;

/// Truncated or economy singular value decomposition `U diag(sigma) Vt`.
#[derive(Debug, Clone)]
pub struct SvdTriple {
    pub u: Mat<f64>,
    pub sigma: Vec<f64>,
    pub vt: Mat<f64>,
}

impl SvdTriple {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U diag(sigma) Vt`.
    pub fn reconstruct(&self) -> Mat<f64> {
        let mut us = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            us.col_as_slice_mut(j).iter_mut().for_each(|v| *v *= s);
        }
        &us * &self.vt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Provenance {
    Deterministic,
    Randomized { oversample: usize, power: usize, seed: u64 },
}

/// Leading POD modes of one variable.
#[derive(Debug, Clone)]
pub struct ReducedBasis {
    variable: Variable,
    grid: StructuredGrid,
    modes: Mat<f64>,
    sigma: Vec<f64>,
    spectrum: Vec<f64>,
    provenance: Provenance,
    fingerprint: [u8; 32],
}

impl ReducedBasis {
    /// Keeps the first `rank` columns of `svd.u`; the full computed spectrum is
    /// retained for diagnostics.
    pub fn from_svd(
        svd: &SvdTriple,
        rank: usize,
        variable: Variable,
        grid: &StructuredGrid,
        provenance: Provenance,
    ) -> Result<Self> {
        if rank == 0 || rank > svd.rank() {
            return Err(Error::invalid(format!(
                "basis rank {rank} must lie in 1..={}",
                svd.rank()
            )));
        }
        if svd.u.nrows() != grid.n_cells() {
            return Err(Error::invalid("modes do not match the grid"));
        }
        Ok(Self {
            variable,
            grid: *grid,
            modes: svd.u.as_ref().subcols(0, rank).to_owned(),
            sigma: svd.sigma[..rank].to_vec(),
            spectrum: svd.sigma.clone(),
            provenance,
            fingerprint: [0; 32],
        })
    }

    pub fn with_fingerprint(mut self, fingerprint: [u8; 32]) -> Self {
        self.fingerprint = fingerprint;
        self
    }

    /// The first `rank` modes of this basis.
    pub fn truncate(&self, rank: usize) -> Result<Self> {
        if rank == 0 || rank > self.rank() {
            return Err(Error::invalid(format!("cannot truncate a {}-mode basis to {rank}", self.rank())));
        }
        Ok(Self {
            modes: self.modes.as_ref().subcols(0, rank).to_owned(),
            sigma: self.sigma[..rank].to_vec(),
            ..self.clone()
        })
    }

    pub fn variable(&self) -> Variable {
        self.variable
    }

    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    pub fn modes(&self) -> MatRef<'_, f64> {
        self.modes.as_ref()
    }

    pub fn mode_field(&self, i: usize) -> Field {
        Field::from_values_unchecked(&self.grid, self.modes.col_as_slice(i).to_vec())
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn rank(&self) -> usize {
        self.modes.ncols()
    }

    /// `modes * coeffs` as a cell vector.
    pub fn expand(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.rank() {
            return Err(Error::invalid(format!(
                "{} coefficients for a {}-mode basis",
                coeffs.len(),
                self.rank()
            )));
        }
        let mut out = vec![0.0; self.modes.nrows()];
        for (i, c) in coeffs.iter().enumerate() {
            for (o, m) in out.iter_mut().zip(self.modes.col_as_slice(i)) {
                *o += c * m;
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(BASIS_MAGIC);
        w.u64(self.variable.code());
        write_grid(&mut w, &self.grid);
        w.usize(self.modes.nrows());
        w.usize(self.rank());
        for j in 0..self.rank() {
            w.f64s(self.modes.col_as_slice(j));
        }
        w.f64s(&self.sigma);
        w.usize(self.spectrum.len());
        w.f64s(&self.spectrum);
        match self.provenance {
            Provenance::Deterministic => w.u64(0),
            Provenance::Randomized { oversample, power, seed } => {
                w.u64(1);
                w.usize(oversample);
                w.usize(power);
                w.u64(seed);
            }
        }
        w.bytes(&self.fingerprint);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, BASIS_MAGIC)?;
        let variable = Variable::from_code(r.u64()?)?;
        let grid = read_grid(&mut r)?;
        let n_c = r.usize()?;
        let rank = r.usize()?;
        if n_c != grid.n_cells() || rank == 0 {
            return Err(Error::Format(format!("basis header {n_c}x{rank} does not match the grid")));
        }
        r.check_remaining(n_c.saturating_mul(rank), 8)?;
        let raw = r.f64s(n_c * rank)?;
        let modes = Mat::from_fn(n_c, rank, |i, j| raw[j * n_c + i]);
        let sigma = r.f64s(rank)?;
        let n_spec = r.count(8)?;
        let spectrum = r.f64s(n_spec)?;
        let provenance = match r.u64()? {
            0 => Provenance::Deterministic,
            1 => Provenance::Randomized {
                oversample: r.usize()?,
                power: r.usize()?,
                seed: r.u64()?,
            },
            other => return Err(Error::Format(format!("unknown basis provenance {other}"))),
        };
        let mut fingerprint = [0u8; 32];
        fingerprint.copy_from_slice(r.bytes(32)?);
        r.finish()?;
        Ok(Self {
            variable,
            grid,
            modes,
            sigma,
            spectrum,
            provenance,
            fingerprint,
        })
    }
}

pub fn write_basis(basis: &ReducedBasis, path: &Path) -> Result<()> {
    write_atomic(path, &basis.to_bytes())
}

pub fn read_basis(path: &Path) -> Result<ReducedBasis> {
    ReducedBasis::from_bytes(&std::fs::read(path)?)
}

/// Spectrum dump with header `index,sigma`, one-based index.
pub fn write_spectrum_csv<W: Write>(sigma: &[f64], mut out: W) -> Result<()> {
    writeln!(out, "index,sigma")?;
    for (i, s) in sigma.iter().enumerate() {
        writeln!(out, "{},{}", i + 1, fmt_real(*s))?;
    }
    Ok(())
}

/// Projection coefficients `modes^T S`, sharing the snapshot column map.
#[derive(Debug, Clone)]
pub struct CoefficientTable {
    pub variable: Variable,
    pub data: Mat<f64>,
}

impl CoefficientTable {
    pub fn rank(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_snapshots(&self) -> usize {
        self.data.ncols()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.data.col_as_slice(j).to_vec()
    }
}

fn check_finite(s: MatRef<'_, f64>) -> Result<()> {
    for j in 0..s.ncols() {
        for i in 0..s.nrows() {
            if !s[(i, j)].is_finite() {
                return Err(Error::invalid(format!("non-finite snapshot entry at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Makes the largest-magnitude entry of every left singular vector positive,
/// flipping the matching row of `vt`.
fn fix_signs(u: &mut Mat<f64>, vt: &mut Mat<f64>) {
    for j in 0..u.ncols() {
        let col = u.col_as_slice(j);
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for v in col {
            if v.abs() > best {
                best = v.abs();
                sign = v.signum();
            }
        }
        if sign < 0.0 {
            u.col_as_slice_mut(j).iter_mut().for_each(|v| *v = -*v);
            for c in 0..vt.ncols() {
                vt[(j, c)] = -vt[(j, c)];
            }
        }
    }
}

fn svd_of(a: MatRef<'_, f64>) -> Result<SvdTriple> {
    let svd = a
        .thin_svd()
        .map_err(|e| Error::LinearAlgebra(format!("SVD did not converge: {e:?}")))?;
    let sigma: Vec<f64> = svd.S().column_vector().iter().copied().collect();
    let mut u = svd.U().to_owned();
    let mut vt = svd.V().transpose().to_owned();
    fix_signs(&mut u, &mut vt);
    Ok(SvdTriple { u, sigma, vt })
}

/// Economy SVD of the full snapshot matrix.
pub fn deterministic_pod(s: MatRef<'_, f64>) -> Result<SvdTriple> {
    if s.nrows() == 0 || s.ncols() == 0 {
        return Err(Error::invalid("snapshot matrix is empty"));
    }
    check_finite(s)?;
    svd_of(s)
}

fn orthonormal_range(a: &Mat<f64>) -> Mat<f64> {
    a.qr().compute_thin_Q()
}

/// Randomized SVD with `power` subspace iterations.
///
/// Returns `rank + oversample` approximate leading triplets. The subspace is
/// re-orthonormalized after every multiplication by `S` and by `S^T`.
pub fn rpod(s: MatRef<'_, f64>, rank: usize, oversample: usize, power: usize, seed: u64) -> Result<SvdTriple> {
    let (m, n) = (s.nrows(), s.ncols());
    if rank == 0 {
        return Err(Error::invalid("rpod rank must be at least 1"));
    }
    if power == 0 {
        return Err(Error::invalid("rpod needs at least one power iteration"));
    }
    let l = rank
        .checked_add(oversample)
        .filter(|&l| l <= m.min(n))
        .ok_or_else(|| {
            Error::invalid(format!(
                "rank + oversample = {} exceeds min(N_C, N^s) = {}",
                rank.saturating_add(oversample),
                m.min(n)
            ))
        })?;
    check_finite(s)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..n * l).map(|_| StandardNormal.sample(&mut rng)).collect();
    let omega = Mat::from_fn(n, l, |i, j| draws[j * n + i]);

    let mut q = orthonormal_range(&(s * &omega));
    for _ in 0..power {
        let z = orthonormal_range(&(s.transpose() * &q));
        q = orthonormal_range(&(s * &z));
    }
    let b = q.transpose() * s;
    let small = svd_of(b.as_ref())?;
    let mut u = &q * &small.u;
    let mut vt = small.vt;
    fix_signs(&mut u, &mut vt);
    Ok(SvdTriple {
        u,
        sigma: small.sigma,
        vt,
    })
}

fn check_sigma(sigma: &[f64]) -> Result<f64> {
    if sigma.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(Error::invalid("singular values must be finite and non-negative"));
    }
    if sigma.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::invalid("singular values must be non-increasing"));
    }
    let total: f64 = sigma.iter().sum();
    if total == 0.0 {
        return Err(Error::invalid("all singular values are zero"));
    }
    Ok(total)
}

/// Smallest `N` whose leading singular values hold at least `threshold` of
/// the total (plain sums, not squares).
pub fn energy_rank(sigma: &[f64], threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("energy threshold {threshold} must lie in (0, 1)")));
    }
    let total = check_sigma(sigma)?;
    let mut cum = 0.0;
    for (i, s) in sigma.iter().enumerate() {
        cum += s;
        if cum / total >= threshold {
            return Ok(i + 1);
        }
    }
    Ok(sigma.len())
}

/// Fraction of `sum sigma_i` carried by the first `n` values.
pub fn energy_fraction(sigma: &[f64], n: usize) -> Result<f64> {
    let total = check_sigma(sigma)?;
    Ok(sigma.iter().take(n).sum::<f64>() / total)
}

/// Fraction of `sum sigma_i^2` carried by the first `n` values.
pub fn squared_energy_fraction(sigma: &[f64], n: usize) -> Result<f64> {
    check_sigma(sigma)?;
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    Ok(sigma.iter().take(n).map(|s| s * s).sum::<f64>() / total)
}

pub fn modal_coefficients(basis: &ReducedBasis, s: &SnapshotMatrix) -> Result<CoefficientTable> {
    if basis.grid() != s.grid() {
        return Err(Error::invalid("basis and snapshots live on different grids"));
    }
    if basis.variable() != s.variable() {
        return Err(Error::invalid(format!(
            "basis is for {} but snapshots are {}",
            basis.variable(),
            s.variable()
        )));
    }
    Ok(CoefficientTable {
        variable: basis.variable(),
        data: basis.modes().transpose() * s.data(),
    })
}

/// `||S - U U^T S||_F / ||S||_F` for orthonormal `modes`.
pub fn projection_error_of(modes: MatRef<'_, f64>, s: MatRef<'_, f64>) -> Result<f64> {
    if modes.nrows() != s.nrows() {
        return Err(Error::invalid(format!(
            "modes have {} rows, snapshots {}",
            modes.nrows(),
            s.nrows()
        )));
    }
    let norm = s.norm_l2();
    if norm == 0.0 {
        return Err(Error::invalid("projection error of a zero matrix is undefined"));
    }
    let c = modes.transpose() * s;
    let resid = s - modes * &c;
    Ok(resid.norm_l2() / norm)
}

pub fn projection_error(basis: &ReducedBasis, s: &SnapshotMatrix) -> Result<f64> {
    if basis.grid() != s.grid() {
        return Err(Error::invalid("basis and snapshots live on different grids"));
    }
    projection_error_of(basis.modes(), s.data())
}

/// Largest principal angle (radians) between the column spaces of two
/// orthonormal matrices with the same number of columns.
pub fn subspace_angle(u: MatRef<'_, f64>, v: MatRef<'_, f64>) -> Result<f64> {
    if u.nrows() != v.nrows() || u.ncols() != v.ncols() {
        return Err(Error::invalid("subspaces must have matching shapes"));
    }
    let resid = v - u * (u.transpose() * v);
    let sv = resid
        .singular_values()
        .map_err(|e| Error::LinearAlgebra(format!("SVD did not converge: {e:?}")))?;
    let sin = sv.first().copied().unwrap_or(0.0).min(1.0);
    Ok(sin.asin())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs(m: MatRef<'_, f64>) -> f64 {
        let mut out = 0.0f64;
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                out = out.max(m[(i, j)].abs());
            }
        }
        out
    }

    fn orthonormality_defect(u: MatRef<'_, f64>) -> f64 {
        max_abs((u.transpose() * u - Mat::<f64>::identity(u.ncols(), u.ncols())).as_ref())
    }

    #[test]
    fn rank_one_matrix() {
        let u: Vec<f64> = vec![0.6, 0.8, 0.0];
        let v: Vec<f64> = vec![0.0, 1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt(), 0.0];
        let s = Mat::from_fn(3, 4, |i, j| 2.5 * u[i] * v[j]);
        let svd = deterministic_pod(s.as_ref()).unwrap();
        assert!((svd.sigma[0] - 2.5).abs() < 1e-12);
        assert!(svd.sigma[1..].iter().all(|x| x.abs() < 1e-12));
        // sign convention: largest entry of the mode is positive
        assert!(svd.u[(1, 0)] > 0.0);
    }

    #[test]
    fn diagonal_matrix() {
        let mut s = Mat::<f64>::zeros(3, 3);
        s[(0, 0)] = 1.0;
        s[(1, 1)] = 3.0;
        s[(2, 2)] = 2.0;
        let svd = deterministic_pod(s.as_ref()).unwrap();
        for (a, b) in svd.sigma.iter().zip([3.0, 2.0, 1.0]) {
            assert!((a - b).abs() < 1e-14);
        }
        let rebuilt = svd.reconstruct();
        assert!(max_abs((&rebuilt - &s).as_ref()) < 1e-14);
        assert!(orthonormality_defect(svd.u.as_ref()) < 1e-12);
        assert!(orthonormality_defect(svd.vt.transpose()) < 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        let mut s = Mat::<f64>::zeros(3, 2);
        s[(1, 1)] = f64::NAN;
        assert!(matches!(deterministic_pod(s.as_ref()), Err(Error::InvalidArgument(_))));
        assert!(rpod(s.as_ref(), 1, 0, 1, 0).is_err());
    }

    #[test]
    fn rpod_argument_checks() {
        let s = Mat::<f64>::identity(6, 5);
        assert!(rpod(s.as_ref(), 0, 1, 1, 0).is_err());
        assert!(rpod(s.as_ref(), 2, 1, 0, 0).is_err());
        assert!(rpod(s.as_ref(), 3, 3, 1, 0).is_err());
        assert_eq!(rpod(s.as_ref(), 3, 2, 1, 0).unwrap().rank(), 5);
    }

    #[test]
    fn energy_rank_examples() {
        assert_eq!(energy_rank(&[9.0, 1.0], 0.9).unwrap(), 1);
        assert_eq!(energy_rank(&[1.0, 1.0, 1.0, 1.0], 0.5).unwrap(), 2);
        assert!(energy_rank(&[0.0, 0.0], 0.5).is_err());
        assert!(energy_rank(&[1.0, 2.0], 0.5).is_err());
        assert!(energy_rank(&[1.0], 1.0).is_err());
        assert!((squared_energy_fraction(&[4.0, 3.0], 1).unwrap() - 16.0 / 25.0).abs() < 1e-15);
        assert!((energy_fraction(&[3.0, 1.0], 1).unwrap() - 0.75).abs() < 1e-15);
    }

    fn basis_from(modes: Mat<f64>) -> ReducedBasis {
        let grid = StructuredGrid::new(2, 2, 0.0, 1.0, 0.0, 1.0).unwrap();
        let r = modes.ncols();
        let svd = SvdTriple {
            u: modes,
            sigma: vec![1.0; r],
            vt: Mat::identity(r, r),
        };
        ReducedBasis::from_svd(&svd, r, Variable::Q1, &grid, Provenance::Deterministic).unwrap()
    }

    #[test]
    fn projection_error_extremes() {
        let mut e = Mat::<f64>::zeros(4, 2);
        e[(0, 0)] = 1.0;
        e[(1, 1)] = 1.0;
        let inside = Mat::from_fn(4, 3, |i, j| if i < 2 { (i + j + 1) as f64 } else { 0.0 });
        let outside = Mat::from_fn(4, 3, |i, j| if i >= 2 { (i * j + 1) as f64 } else { 0.0 });
        assert!(projection_error_of(e.as_ref(), inside.as_ref()).unwrap() < 1e-15);
        assert_eq!(projection_error_of(e.as_ref(), outside.as_ref()).unwrap(), 1.0);
        assert!(projection_error_of(e.as_ref(), Mat::<f64>::zeros(4, 3).as_ref()).is_err());
    }

    #[test]
    fn basis_archive_round_trip() {
        let q = Mat::<f64>::from_fn(4, 4, |i, j| ((i * 4 + j) as f64).sin()).qr().compute_thin_Q();
        let b = basis_from(q.as_ref().subcols(0, 2).to_owned()).with_fingerprint([3; 32]);
        let bytes = b.to_bytes();
        let back = ReducedBasis::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.provenance(), Provenance::Deterministic);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(ReducedBasis::from_bytes(&bad).is_err());
    }

    #[test]
    fn spectrum_csv_format() {
        let mut out = Vec::new();
        write_spectrum_csv(&[2.0, 0.5], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "index,sigma\n1,2.0000000000000000e0\n2,5.0000000000000000e-1\n");
    }

    #[test]
    fn angle_between_identical_and_orthogonal_subspaces() {
        let mut a = Mat::<f64>::zeros(3, 1);
        a[(0, 0)] = 1.0;
        let mut b = Mat::<f64>::zeros(3, 1);
        b[(1, 0)] = -1.0;
        assert!(subspace_angle(a.as_ref(), a.as_ref()).unwrap() < 1e-15);
        assert!((subspace_angle(a.as_ref(), b.as_ref()).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }
}
