//! Snapshot ensembles: per-parameter time series, time averages,
//! fluctuations and the global parameter-major snapshot matrix.

use std::fmt;
use std::io::Write;
use std::path::Path;

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::archive::{write_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::grid::{Field, StructuredGrid};
use crate::solver::SnapshotRecord;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"QGSNAP01";

/// One of the four reduced variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    Q1,
    Q2,
    Psi1,
    Psi2,
}

impl Variable {
    pub const ALL: [Variable; 4] = [Variable::Q1, Variable::Q2, Variable::Psi1, Variable::Psi2];

    pub fn name(self) -> &'static str {
        match self {
            Variable::Q1 => "q1",
            Variable::Q2 => "q2",
            Variable::Psi1 => "psi1",
            Variable::Psi2 => "psi2",
        }
    }

    pub fn code(self) -> u64 {
        self as u64
    }

    pub fn from_code(code: u64) -> Result<Self> {
        usize::try_from(code)
            .ok()
            .and_then(|c| Variable::ALL.get(c).copied())
            .ok_or_else(|| Error::Format(format!("unknown variable tag {code}")))
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Variable::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::invalid(format!("unknown variable {name:?} (expected q1, q2, psi1 or psi2)")))
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Snapshots of one parameter sample at increasing times.
#[derive(Debug, Clone)]
pub struct SnapshotSeries {
    grid: StructuredGrid,
    mu: Vec<f64>,
    times: Vec<f64>,
    fields: [Vec<Field>; 4],
}

impl SnapshotSeries {
    pub fn new(grid: &StructuredGrid, mu: Vec<f64>) -> Self {
        Self {
            grid: *grid,
            mu,
            times: Vec::new(),
            fields: Default::default(),
        }
    }

    pub fn push(&mut self, record: SnapshotRecord) -> Result<()> {
        let fields = [record.q1, record.q2, record.psi1, record.psi2];
        self.push_fields(record.t, fields)
    }

    /// Appends one instant; fields are in `Variable::ALL` order.
    pub fn push_fields(&mut self, t: f64, fields: [Field; 4]) -> Result<()> {
        if !t.is_finite() {
            return Err(Error::invalid(format!("snapshot time {t} is not finite")));
        }
        if let Some(&last) = self.times.last() {
            if t <= last {
                return Err(Error::invalid(format!(
                    "snapshot times must increase strictly: {t} after {last}"
                )));
            }
        }
        if fields.iter().any(|f| f.grid() != &self.grid) {
            return Err(Error::invalid("snapshot field is defined on a different grid"));
        }
        self.times.push(t);
        for (slot, f) in self.fields.iter_mut().zip(fields) {
            slot.push(f);
        }
        Ok(())
    }

    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn fields(&self, variable: Variable) -> &[Field] {
        &self.fields[variable as usize]
    }

    /// Keeps only the instants with `lo <= t <= hi`.
    pub fn restrict(&self, lo: f64, hi: f64) -> SnapshotSeries {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&p| self.times[p] >= lo && self.times[p] <= hi)
            .collect();
        SnapshotSeries {
            grid: self.grid,
            mu: self.mu.clone(),
            times: keep.iter().map(|&p| self.times[p]).collect(),
            fields: std::array::from_fn(|v| keep.iter().map(|&p| self.fields[v][p].clone()).collect()),
        }
    }
}

fn mean_of(grid: &StructuredGrid, fields: &[Field]) -> Result<Vec<f64>> {
    if fields.is_empty() {
        return Err(Error::invalid("time average of an empty series"));
    }
    let mut acc = vec![0.0; grid.n_cells()];
    for f in fields {
        for (a, v) in acc.iter_mut().zip(f.values()) {
            *a += v;
        }
    }
    let inv = 1.0 / fields.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

/// Per-cell arithmetic mean over the sampled instants.
pub fn time_average(series: &SnapshotSeries, variable: Variable) -> Result<Field> {
    let mean = mean_of(&series.grid, series.fields(variable))?;
    Ok(Field::from_values_unchecked(&series.grid, mean))
}

/// Each snapshot minus the time average of its own series.
pub fn fluctuations(series: &SnapshotSeries, variable: Variable) -> Result<Vec<Field>> {
    let mean = time_average(series, variable)?;
    Ok(series.fields(variable).iter().map(|f| f - &mean).collect())
}

/// Fluctuation snapshots of every parameter sample for one variable.
///
/// Column `j = k * n_t + p` (zero based) holds sample `k` at instant `p`.
#[derive(Debug, Clone)]
pub struct SnapshotMatrix {
    variable: Variable,
    grid: StructuredGrid,
    data: Mat<f64>,
    params: Vec<Vec<f64>>,
    times: Vec<f64>,
    means: Vec<Vec<f64>>,
    fingerprint: [u8; 32],
}

impl PartialEq for SnapshotMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.variable == other.variable
            && self.grid == other.grid
            && self.params == other.params
            && self.times == other.times
            && self.means == other.means
            && self.fingerprint == other.fingerprint
            && self.data.nrows() == other.data.nrows()
            && self.data.ncols() == other.data.ncols()
            && (0..self.data.ncols()).all(|j| self.data.col_as_slice(j) == other.data.col_as_slice(j))
    }
}

impl SnapshotMatrix {
    /// Wraps an already assembled matrix after checking its shape.
    pub fn new(
        variable: Variable,
        grid: &StructuredGrid,
        data: Mat<f64>,
        params: Vec<Vec<f64>>,
        times: Vec<f64>,
        means: Vec<Vec<f64>>,
    ) -> Result<Self> {
        grid.validate()?;
        let n_c = grid.n_cells();
        let m = params.len();
        let n_t = times.len();
        if m == 0 || n_t == 0 {
            return Err(Error::invalid("snapshot matrix needs at least one sample and one instant"));
        }
        if data.nrows() != n_c || data.ncols() != m * n_t {
            return Err(Error::invalid(format!(
                "matrix is {}x{}, expected {}x{}",
                data.nrows(),
                data.ncols(),
                n_c,
                m * n_t
            )));
        }
        let d = params[0].len();
        if params.iter().any(|p| p.len() != d) {
            return Err(Error::invalid("parameter vectors differ in dimension"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("snapshot times must increase strictly"));
        }
        if means.len() != m || means.iter().any(|v| v.len() != n_c) {
            return Err(Error::invalid("need one time-average field per sample"));
        }
        Ok(Self {
            variable,
            grid: *grid,
            data,
            params,
            times,
            means,
            fingerprint: [0; 32],
        })
    }

    pub fn with_fingerprint(mut self, fingerprint: [u8; 32]) -> Self {
        self.fingerprint = fingerprint;
        self
    }

    pub fn variable(&self) -> Variable {
        self.variable
    }

    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    pub fn data(&self) -> MatRef<'_, f64> {
        self.data.as_ref()
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn n_cells(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_snapshots(&self) -> usize {
        self.data.ncols()
    }

    pub fn n_samples(&self) -> usize {
        self.params.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn param_dim(&self) -> usize {
        self.params[0].len()
    }

    pub fn column_index(&self, k: usize, p: usize) -> usize {
        assert!(k < self.n_samples() && p < self.n_times(), "column ({k}, {p}) out of range");
        k * self.n_times() + p
    }

    /// Inverse of [`column_index`](Self::column_index).
    pub fn split_index(&self, j: usize) -> (usize, usize) {
        assert!(j < self.n_snapshots(), "column {j} out of range");
        (j / self.n_times(), j % self.n_times())
    }

    pub fn column(&self, j: usize) -> &[f64] {
        self.data.col_as_slice(j)
    }

    /// Columns belonging to sample `k`.
    pub fn block(&self, k: usize) -> MatRef<'_, f64> {
        self.data.as_ref().subcols(k * self.n_times(), self.n_times())
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k]
    }

    pub fn mean_field(&self, k: usize) -> Field {
        Field::from_values_unchecked(&self.grid, self.means[k].clone())
    }

    pub fn column_field(&self, j: usize) -> Field {
        Field::from_values_unchecked(&self.grid, self.column(j).to_vec())
    }

    /// Full snapshot (time average plus fluctuation) of column `j`.
    pub fn snapshot_field(&self, j: usize) -> Field {
        let (k, _) = self.split_index(j);
        let v = self.column(j).iter().zip(&self.means[k]).map(|(a, b)| a + b).collect();
        Field::from_values_unchecked(&self.grid, v)
    }

    pub fn max_abs(&self) -> f64 {
        (0..self.n_snapshots())
            .flat_map(|j| self.column(j).iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn write_column_csv<W: Write>(&self, j: usize, out: W) -> Result<()> {
        if j >= self.n_snapshots() {
            return Err(Error::invalid(format!("column {j} out of range")));
        }
        self.column_field(j).write_csv(out)
    }

    pub fn write_mean_csv<W: Write>(&self, k: usize, out: W) -> Result<()> {
        if k >= self.n_samples() {
            return Err(Error::invalid(format!("sample {k} out of range")));
        }
        self.mean_field(k).write_csv(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n_c, n_s, m, n_t) = (self.n_cells(), self.n_snapshots(), self.n_samples(), self.n_times());
        let d = self.param_dim();
        let mut w = Writer::new(SNAPSHOT_MAGIC);
        w.reserve(8 * (n_c * (n_s + m) + m * d + n_t + 32));
        w.u64(self.variable.code());
        for v in [n_c, n_s, d, m, n_t] {
            w.usize(v);
        }
        write_grid(&mut w, &self.grid);
        for p in &self.params {
            w.f64s(p);
        }
        w.f64s(&self.times);
        for j in 0..n_s {
            w.f64s(self.column(j));
        }
        for mean in &self.means {
            w.f64s(mean);
        }
        w.bytes(&self.fingerprint);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, SNAPSHOT_MAGIC)?;
        let variable = Variable::from_code(r.u64()?)?;
        let n_c = r.usize()?;
        let n_s = r.usize()?;
        let d = r.usize()?;
        let m = r.usize()?;
        let n_t = r.usize()?;
        let grid = read_grid(&mut r)?;
        if grid.n_cells() != n_c {
            return Err(Error::Format(format!("grid has {} cells, header says {n_c}", grid.n_cells())));
        }
        if m.checked_mul(n_t) != Some(n_s) {
            return Err(Error::Format(format!("N^s={n_s} is not M*N^t={m}*{n_t}")));
        }
        r.check_remaining(m.saturating_mul(d), 8)?;
        let params = (0..m).map(|_| r.f64s(d)).collect::<Result<Vec<_>>>()?;
        let times = r.f64s(n_t)?;
        r.check_remaining(n_c.saturating_mul(n_s), 8)?;
        let payload = r.f64s(n_c * n_s)?;
        let data = Mat::from_fn(n_c, n_s, |i, j| payload[j * n_c + i]);
        drop(payload);
        let means = (0..m).map(|_| r.f64s(n_c)).collect::<Result<Vec<_>>>()?;
        let mut fingerprint = [0u8; 32];
        fingerprint.copy_from_slice(r.bytes(32)?);
        r.finish()?;
        let out = SnapshotMatrix::new(variable, &grid, data, params, times, means)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(out.with_fingerprint(fingerprint))
    }
}

pub(crate) fn write_grid(w: &mut Writer, g: &StructuredGrid) {
    w.usize(g.nx);
    w.usize(g.ny);
    w.f64s(&[g.x0, g.xf, g.y_lo, g.y_hi]);
}

pub(crate) fn read_grid(r: &mut Reader<'_>) -> Result<StructuredGrid> {
    let nx = r.usize()?;
    let ny = r.usize()?;
    let b = r.f64s(4)?;
    StructuredGrid::new(nx, ny, b[0], b[1], b[2], b[3]).map_err(|e| Error::Format(e.to_string()))
}

/// Fluctuation matrix for `variable` over all series, parameter-major.
pub fn assemble_matrix(all: &[SnapshotSeries], variable: Variable) -> Result<SnapshotMatrix> {
    let first = all
        .first()
        .ok_or_else(|| Error::invalid("cannot assemble a snapshot matrix from zero samples"))?;
    let grid = first.grid;
    let n_t = first.len();
    if n_t == 0 {
        return Err(Error::invalid("series has no snapshots"));
    }
    for (k, s) in all.iter().enumerate() {
        if s.grid != grid {
            return Err(Error::invalid(format!("sample {k} uses a different grid")));
        }
        if s.len() != n_t {
            return Err(Error::invalid(format!(
                "sample {k} has {} instants, sample 0 has {n_t}",
                s.len()
            )));
        }
        if s.mu.len() != first.mu.len() {
            return Err(Error::invalid(format!("sample {k} has a parameter vector of different length")));
        }
        if s.times.iter().zip(&first.times).any(|(a, b)| (a - b).abs() > 1e-12 * b.abs().max(1.0)) {
            return Err(Error::invalid(format!("sample {k} was sampled at different times")));
        }
    }
    let n_c = grid.n_cells();
    let means = all
        .iter()
        .map(|s| mean_of(&grid, s.fields(variable)))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Mat::<f64>::zeros(n_c, all.len() * n_t);
    for (k, s) in all.iter().enumerate() {
        for (p, f) in s.fields(variable).iter().enumerate() {
            let col = data.col_as_slice_mut(k * n_t + p);
            for ((c, v), mean) in col.iter_mut().zip(f.values()).zip(&means[k]) {
                *c = v - mean;
            }
        }
    }
    let params = all.iter().map(|s| s.mu.clone()).collect();
    SnapshotMatrix::new(variable, &grid, data, params, first.times.clone(), means)
}

pub fn write_snapshots(matrix: &SnapshotMatrix, path: &Path) -> Result<()> {
    write_atomic(path, &matrix.to_bytes())
}

pub fn read_snapshots(path: &Path) -> Result<SnapshotMatrix> {
    let bytes = std::fs::read(path)?;
    SnapshotMatrix::from_bytes(&bytes)
}
