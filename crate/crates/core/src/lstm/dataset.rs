use faer::MatRef;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-column affine maps onto [-1, 1], frozen from the training data.
///
/// Coefficient inputs and targets share one map so a prediction can be fed
/// straight back as the newest window row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mu_min: Vec<f64>,
    pub mu_max: Vec<f64>,
    pub t_min: f64,
    pub t_max: f64,
    pub coef_min: Vec<f64>,
    pub coef_max: Vec<f64>,
}

fn to_unit(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        2.0 * (v - lo) / (hi - lo) - 1.0
    } else {
        0.0
    }
}

fn from_unit(u: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        lo + (u + 1.0) * 0.5 * (hi - lo)
    } else {
        lo
    }
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

impl Normalizer {
    pub fn fit(coeffs: MatRef<'_, f64>, params: &[Vec<f64>], times: &[f64]) -> Self {
        let d = params.first().map_or(0, Vec::len);
        let (mu_min, mu_max) = (0..d).map(|c| min_max(params.iter().map(|p| p[c]))).unzip();
        let (t_min, t_max) = min_max(times.iter().copied());
        let (coef_min, coef_max) = (0..coeffs.nrows())
            .map(|i| min_max((0..coeffs.ncols()).map(|j| coeffs[(i, j)])))
            .unzip();
        Self {
            mu_min,
            mu_max,
            t_min,
            t_max,
            coef_min,
            coef_max,
        }
    }

    pub fn param_dim(&self) -> usize {
        self.mu_min.len()
    }

    pub fn n_coeffs(&self) -> usize {
        self.coef_min.len()
    }

    pub fn input_width(&self) -> usize {
        self.param_dim() + 1 + self.n_coeffs()
    }

    /// Normalized row `(mu, t, coeffs)`.
    pub fn row(&self, mu: &[f64], t: f64, coeffs: &[f64], out: &mut Vec<f64>) {
        for (c, m) in mu.iter().enumerate() {
            out.push(to_unit(*m, self.mu_min[c], self.mu_max[c]));
        }
        out.push(to_unit(t, self.t_min, self.t_max));
        out.extend(self.coeffs(coeffs));
    }

    pub fn coeffs(&self, coeffs: &[f64]) -> Vec<f64> {
        coeffs
            .iter()
            .enumerate()
            .map(|(i, v)| to_unit(*v, self.coef_min[i], self.coef_max[i]))
            .collect()
    }

    pub fn denormalize(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .enumerate()
            .map(|(i, u)| from_unit(*u, self.coef_min[i], self.coef_max[i]))
            .collect()
    }

    pub fn mu_in_box(&self, mu: &[f64]) -> bool {
        mu.iter()
            .enumerate()
            .all(|(c, m)| *m >= self.mu_min[c] && *m <= self.mu_max[c])
    }
}

/// Normalized windows and next-step targets.
#[derive(Debug, Clone)]
pub struct SequenceDataset {
    pub lookback: usize,
    pub input_width: usize,
    pub n_out: usize,
    /// `len * lookback * input_width`, each window newest row first.
    pub inputs: Vec<f64>,
    /// `len * n_out`.
    pub targets: Vec<f64>,
    /// Parameter sample of each window.
    pub sample: Vec<usize>,
    /// Zero-based time index of the newest row of each window.
    pub newest: Vec<usize>,
    pub norm: Normalizer,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample.is_empty()
    }

    pub fn window(&self, w: usize) -> &[f64] {
        let n = self.lookback * self.input_width;
        &self.inputs[w * n..(w + 1) * n]
    }

    pub fn target(&self, w: usize) -> &[f64] {
        &self.targets[w * self.n_out..(w + 1) * self.n_out]
    }

    /// Splits window indices into training and validation sets, holding out
    /// the chronologically last `fraction` of each sample's windows.
    pub fn split(&self, fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        let n_samples = self.sample.iter().max().map_or(0, |m| m + 1);
        for k in 0..n_samples {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&w| self.sample[w] == k).collect();
            idx.sort_by_key(|&w| self.newest[w]);
            let n_val = ((fraction * idx.len() as f64).round() as usize).min(idx.len().saturating_sub(1));
            let cut = idx.len() - n_val;
            train.extend_from_slice(&idx[..cut]);
            val.extend_from_slice(&idx[cut..]);
        }
        (train, val)
    }
}

/// Builds every window of `lookback` consecutive instants within each
/// parameter sample. `coeffs` has one column per snapshot, parameter-major.
pub fn build_dataset(
    coeffs: MatRef<'_, f64>,
    params: &[Vec<f64>],
    times: &[f64],
    lookback: usize,
) -> Result<SequenceDataset> {
    let n_t = times.len();
    let m = params.len();
    if lookback == 0 {
        return Err(Error::invalid("lookback must be at least 1"));
    }
    if lookback >= n_t {
        return Err(Error::invalid(format!(
            "lookback {lookback} must be smaller than the number of instants {n_t}"
        )));
    }
    if m == 0 || coeffs.ncols() != m * n_t {
        return Err(Error::invalid(format!(
            "coefficient table has {} columns, expected {m} samples x {n_t} instants",
            coeffs.ncols()
        )));
    }
    let d = params[0].len();
    if params.iter().any(|p| p.len() != d) {
        return Err(Error::invalid("parameter vectors differ in dimension"));
    }
    let norm = Normalizer::fit(coeffs, params, times);
    let n_out = coeffs.nrows();
    let width = norm.input_width();
    let mut ds = SequenceDataset {
        lookback,
        input_width: width,
        n_out,
        inputs: Vec::new(),
        targets: Vec::new(),
        sample: Vec::new(),
        newest: Vec::new(),
        norm,
    };
    let col = |k: usize, p: usize| -> Vec<f64> { (0..n_out).map(|i| coeffs[(i, k * n_t + p)]).collect() };
    for (k, mu) in params.iter().enumerate() {
        for p in (lookback - 1)..(n_t - 1) {
            for back in 0..lookback {
                let q = p - back;
                ds.norm.row(mu, times[q], &col(k, q), &mut ds.inputs);
            }
            let target = ds.norm.coeffs(&col(k, p + 1));
            ds.targets.extend(target);
            ds.sample.push(k);
            ds.newest.push(p);
        }
    }
    Ok(ds)
}
