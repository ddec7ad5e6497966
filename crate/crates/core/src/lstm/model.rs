use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Normalizer;
use super::LstmHyper;
use crate::archive::{write_atomic, Reader, Writer};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"QGLSTM01";

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Offsets of one layer's parameters in the flat vector. Gate rows are
/// ordered input, forget, output, candidate; each row is `[W_x | W_h]`.
#[derive(Debug, Clone, Copy)]
struct LayerShape {
    n_in: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Shapes {
    layers: Vec<LayerShape>,
    dense_w: usize,
    dense_b: usize,
    total: usize,
}

/// Inverted dropout masks applied to the inputs of layers above the first,
/// one value per time step and unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    per_layer: Vec<Vec<f64>>,
}

impl DropoutMasks {
    pub fn sample(model: &LstmModel, rate: f64, rng: &mut ChaCha8Rng) -> Self {
        let keep = 1.0 - rate;
        let n = model.hyper.lookback * model.hyper.cells;
        let per_layer = (1..model.hyper.layers)
            .map(|_| {
                (0..n)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect()
            })
            .collect();
        Self { per_layer }
    }
}

struct LayerTrace {
    x: Vec<f64>,
    h: Vec<f64>,
    c: Vec<f64>,
    gates: Vec<f64>,
}

pub(crate) struct Trace {
    layers: Vec<LayerTrace>,
    pub y: Vec<f64>,
}

/// Stacked LSTM with a dense read-out of the last hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    hyper: LstmHyper,
    n_out: usize,
    norm: Normalizer,
    seed: u64,
    params: Vec<f64>,
}

impl LstmModel {
    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new(hyper: LstmHyper, norm: Normalizer, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let n_out = norm.n_coeffs();
        if n_out == 0 {
            return Err(Error::invalid("model needs at least one output coefficient"));
        }
        let mut model = Self {
            hyper,
            n_out,
            norm,
            seed,
            params: Vec::new(),
        };
        let shapes = model.shapes();
        model.params = vec![0.0; shapes.total];
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let h = hyper.cells;
        for s in &shapes.layers {
            let bound = 1.0 / ((s.n_in + h) as f64).sqrt();
            for v in &mut model.params[s.w..s.b + 4 * h] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        let bound = 1.0 / (h as f64).sqrt();
        for v in &mut model.params[shapes.dense_w..] {
            *v = rng.random_range(-bound..=bound);
        }
        Ok(model)
    }

    fn shapes(&self) -> Shapes {
        let h = self.hyper.cells;
        let mut layers = Vec::with_capacity(self.hyper.layers);
        let mut off = 0;
        let mut n_in = self.norm.input_width();
        for _ in 0..self.hyper.layers {
            let w = off;
            let b = w + 4 * h * (n_in + h);
            layers.push(LayerShape { n_in, w, b });
            off = b + 4 * h;
            n_in = h;
        }
        let dense_w = off;
        let dense_b = dense_w + self.n_out * h;
        Shapes {
            layers,
            dense_w,
            dense_b,
            total: dense_b + self.n_out,
        }
    }

    pub fn hyper(&self) -> &LstmHyper {
        &self.hyper
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn input_width(&self) -> usize {
        self.norm.input_width()
    }

    pub fn lookback(&self) -> usize {
        self.hyper.lookback
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offset of the dense read-out bias within [`params`](Self::params).
    pub fn output_bias_offset(&self) -> usize {
        self.shapes().dense_b
    }

    /// Offset of the gate bias block of `layer`.
    pub fn gate_bias_offset(&self, layer: usize) -> usize {
        self.shapes().layers[layer].b
    }

    fn check_window(&self, window: &[f64]) -> Result<()> {
        let want = self.hyper.lookback * self.input_width();
        if window.len() != want {
            return Err(Error::invalid(format!(
                "window has {} values, expected {} rows x {} columns",
                window.len(),
                self.hyper.lookback,
                self.input_width()
            )));
        }
        Ok(())
    }

    /// Normalized next-step prediction for a normalized window, newest row first.
    pub fn forward(&self, window: &[f64]) -> Result<Vec<f64>> {
        self.check_window(window)?;
        Ok(self.run(window, None).y)
    }

    pub(crate) fn run(&self, window: &[f64], masks: Option<&DropoutMasks>) -> Trace {
        let shapes = self.shapes();
        let t_len = self.hyper.lookback;
        let h = self.hyper.cells;
        let width = self.input_width();
        let mut x: Vec<f64> = (0..t_len)
            .rev()
            .flat_map(|r| window[r * width..(r + 1) * width].iter().copied())
            .collect();
        let mut layers = Vec::with_capacity(shapes.layers.len());
        let mut z = vec![0.0; 4 * h];
        for (l, s) in shapes.layers.iter().enumerate() {
            if l > 0 {
                if let Some(m) = masks {
                    x.iter_mut().zip(&m.per_layer[l - 1]).for_each(|(v, k)| *v *= k);
                }
            }
            let cols = s.n_in + h;
            let w = &self.params[s.w..s.b];
            let b = &self.params[s.b..s.b + 4 * h];
            let mut hs = vec![0.0; (t_len + 1) * h];
            let mut cs = vec![0.0; (t_len + 1) * h];
            let mut gates = vec![0.0; t_len * 4 * h];
            let mut xh = vec![0.0; cols];
            for t in 0..t_len {
                xh[..s.n_in].copy_from_slice(&x[t * s.n_in..(t + 1) * s.n_in]);
                xh[s.n_in..].copy_from_slice(&hs[t * h..(t + 1) * h]);
                for (r, zr) in z.iter_mut().enumerate() {
                    let row = &w[r * cols..(r + 1) * cols];
                    *zr = b[r] + row.iter().zip(&xh).map(|(a, v)| a * v).sum::<f64>();
                }
                let g_t = &mut gates[t * 4 * h..(t + 1) * 4 * h];
                for j in 0..h {
                    let ig = sigmoid(z[j]);
                    let fg = sigmoid(z[h + j]);
                    let og = sigmoid(z[2 * h + j]);
                    let cand = z[3 * h + j].tanh();
                    g_t[j] = ig;
                    g_t[h + j] = fg;
                    g_t[2 * h + j] = og;
                    g_t[3 * h + j] = cand;
                    let c_new = fg * cs[t * h + j] + ig * cand;
                    cs[(t + 1) * h + j] = c_new;
                    hs[(t + 1) * h + j] = og * c_new.tanh();
                }
            }
            let next_x = hs[h..].to_vec();
            layers.push(LayerTrace { x, h: hs, c: cs, gates });
            x = next_x;
        }
        let last = &layers.last().expect("at least one layer").h[t_len * h..];
        let dw = &self.params[shapes.dense_w..shapes.dense_b];
        let y = (0..self.n_out)
            .map(|o| {
                self.params[shapes.dense_b + o]
                    + dw[o * h..(o + 1) * h].iter().zip(last).map(|(a, v)| a * v).sum::<f64>()
            })
            .collect();
        Trace { layers, y }
    }

    /// Accumulates `d loss / d params` into `grad` given `dy = d loss / d y`.
    pub(crate) fn backprop(&self, trace: &Trace, dy: &[f64], masks: Option<&DropoutMasks>, grad: &mut [f64]) {
        let shapes = self.shapes();
        let t_len = self.hyper.lookback;
        let h = self.hyper.cells;
        let top = trace.layers.last().expect("at least one layer");
        let last = &top.h[t_len * h..];
        let mut dh_ext = vec![0.0; t_len * h];
        for (o, d) in dy.iter().enumerate() {
            let row = shapes.dense_w + o * h;
            for j in 0..h {
                grad[row + j] += d * last[j];
                dh_ext[(t_len - 1) * h + j] += d * self.params[row + j];
            }
            grad[shapes.dense_b + o] += d;
        }
        let mut dz = vec![0.0; 4 * h];
        for l in (0..shapes.layers.len()).rev() {
            let s = shapes.layers[l];
            let tr = &trace.layers[l];
            let cols = s.n_in + h;
            let mut dx = vec![0.0; t_len * s.n_in];
            let mut dh_next = vec![0.0; h];
            let mut dc_next = vec![0.0; h];
            let mut dxh = vec![0.0; cols];
            for t in (0..t_len).rev() {
                let g = &tr.gates[t * 4 * h..(t + 1) * 4 * h];
                for j in 0..h {
                    let (ig, fg, og, cand) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                    let c_t = tr.c[(t + 1) * h + j];
                    let c_prev = tr.c[t * h + j];
                    let tc = c_t.tanh();
                    let dh = dh_ext[t * h + j] + dh_next[j];
                    let d_o = dh * tc;
                    let dc = dc_next[j] + dh * og * (1.0 - tc * tc);
                    dz[j] = dc * cand * ig * (1.0 - ig);
                    dz[h + j] = dc * c_prev * fg * (1.0 - fg);
                    dz[2 * h + j] = d_o * og * (1.0 - og);
                    dz[3 * h + j] = dc * ig * (1.0 - cand * cand);
                    dc_next[j] = dc * fg;
                }
                let x_t = &tr.x[t * s.n_in..(t + 1) * s.n_in];
                let h_prev = &tr.h[t * h..(t + 1) * h];
                dxh.iter_mut().for_each(|v| *v = 0.0);
                for (r, d) in dz.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let off = s.w + r * cols;
                    let gw = &mut grad[off..off + cols];
                    for (gv, xv) in gw[..s.n_in].iter_mut().zip(x_t) {
                        *gv += d * xv;
                    }
                    for (gv, hv) in gw[s.n_in..].iter_mut().zip(h_prev) {
                        *gv += d * hv;
                    }
                    grad[s.b + r] += d;
                    let row = &self.params[off..off + cols];
                    for (acc, wv) in dxh.iter_mut().zip(row) {
                        *acc += d * wv;
                    }
                }
                dx[t * s.n_in..(t + 1) * s.n_in].copy_from_slice(&dxh[..s.n_in]);
                dh_next.copy_from_slice(&dxh[s.n_in..]);
            }
            if l > 0 {
                if let Some(m) = masks {
                    dx.iter_mut().zip(&m.per_layer[l - 1]).for_each(|(v, k)| *v *= k);
                }
                dh_ext = dx;
            }
        }
    }

    /// Mean squared error of one window against a normalized target.
    pub fn loss(&self, window: &[f64], target: &[f64], masks: Option<&DropoutMasks>) -> Result<f64> {
        self.check_window(window)?;
        if target.len() != self.n_out {
            return Err(Error::invalid("target width does not match the model"));
        }
        let y = self.run(window, masks).y;
        Ok(mse(&y, target))
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_gradient(
        &self,
        window: &[f64],
        target: &[f64],
        masks: Option<&DropoutMasks>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_window(window)?;
        if target.len() != self.n_out {
            return Err(Error::invalid("target width does not match the model"));
        }
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.accumulate(window, target, masks, 1.0, &mut grad);
        Ok((loss, grad))
    }

    /// Adds `scale * d mse / d params` into `grad`; returns the unscaled loss.
    pub(crate) fn accumulate(
        &self,
        window: &[f64],
        target: &[f64],
        masks: Option<&DropoutMasks>,
        scale: f64,
        grad: &mut [f64],
    ) -> f64 {
        let trace = self.run(window, masks);
        let n = self.n_out as f64;
        let dy: Vec<f64> = trace
            .y
            .iter()
            .zip(target)
            .map(|(y, t)| scale * 2.0 * (y - t) / n)
            .collect();
        self.backprop(&trace, &dy, masks, grad);
        mse(&trace.y, target)
    }

    /// Rolls the model forward in physical units.
    ///
    /// `seed_coeffs` holds at least `lookback` coefficient rows in
    /// chronological order with matching `seed_times`; each prediction is
    /// appended as the newest row stamped with its horizon time.
    pub fn predict_autoregressive(
        &self,
        seed_coeffs: &[Vec<f64>],
        seed_times: &[f64],
        mu: &[f64],
        horizon: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        let lb = self.hyper.lookback;
        if seed_coeffs.len() < lb || seed_times.len() != seed_coeffs.len() {
            return Err(Error::invalid(format!(
                "rollout needs {lb} seed rows with times, got {} rows and {} times",
                seed_coeffs.len(),
                seed_times.len()
            )));
        }
        if mu.len() != self.norm.param_dim() {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, model expects {}",
                mu.len(),
                self.norm.param_dim()
            )));
        }
        if seed_coeffs.iter().any(|c| c.len() != self.n_out) {
            return Err(Error::invalid("seed coefficients do not match the model width"));
        }
        if !self.norm.mu_in_box(mu) {
            log::warn!("parameter {mu:?} lies outside the training box; extrapolating");
        }
        let width = self.input_width();
        let start = seed_coeffs.len() - lb;
        let mut rows: VecDeque<Vec<f64>> = (start..seed_coeffs.len())
            .map(|p| {
                let mut r = Vec::with_capacity(width);
                self.norm.row(mu, seed_times[p], &seed_coeffs[p], &mut r);
                r
            })
            .collect();
        let mut out = Vec::with_capacity(horizon.len());
        let mut window = Vec::with_capacity(lb * width);
        for (step, &t) in horizon.iter().enumerate() {
            window.clear();
            for r in rows.iter().rev() {
                window.extend_from_slice(r);
            }
            let y = self.run(&window, None).y;
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::RolloutDivergence { step });
            }
            let coeffs = self.norm.denormalize(&y);
            let mut r = Vec::with_capacity(width);
            self.norm.row(mu, t, &coeffs, &mut r);
            rows.pop_front();
            rows.push_back(r);
            out.push(coeffs);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let hp = &self.hyper;
        let mut w = Writer::new(MODEL_MAGIC);
        for v in [hp.layers, hp.cells, hp.batch_size, hp.epochs, hp.lookback, self.n_out] {
            w.usize(v);
        }
        w.f64s(&[hp.learning_rate, hp.weight_decay, hp.dropout, hp.validation_fraction]);
        w.u64(self.seed);
        let n = &self.norm;
        w.usize(n.param_dim());
        w.f64s(&n.mu_min);
        w.f64s(&n.mu_max);
        w.f64s(&[n.t_min, n.t_max]);
        w.f64s(&n.coef_min);
        w.f64s(&n.coef_max);
        w.usize(self.params.len());
        w.f64s(&self.params);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MODEL_MAGIC)?;
        let mut ints = [0usize; 6];
        for v in &mut ints {
            *v = r.usize()?;
        }
        let [layers, cells, batch_size, epochs, lookback, n_out] = ints;
        let reals = r.f64s(4)?;
        let hyper = LstmHyper {
            layers,
            cells,
            batch_size,
            epochs,
            learning_rate: reals[0],
            weight_decay: reals[1],
            dropout: reals[2],
            validation_fraction: reals[3],
            lookback,
        };
        hyper.validate().map_err(|e| Error::Format(e.to_string()))?;
        let seed = r.u64()?;
        let d = r.count(16)?;
        r.check_remaining(n_out, 16)?;
        let norm = Normalizer {
            mu_min: r.f64s(d)?,
            mu_max: r.f64s(d)?,
            t_min: r.f64()?,
            t_max: r.f64()?,
            coef_min: r.f64s(n_out)?,
            coef_max: r.f64s(n_out)?,
        };
        let n_params = r.count(8)?;
        let params = r.f64s(n_params)?;
        r.finish()?;
        let model = Self {
            hyper,
            n_out,
            norm,
            seed,
            params,
        };
        if model.shapes().total != model.params.len() {
            return Err(Error::Format("parameter count does not match the architecture".into()));
        }
        Ok(model)
    }
}

pub(crate) fn mse(y: &[f64], t: &[f64]) -> f64 {
    y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

pub fn write_model(model: &LstmModel, path: &Path) -> Result<()> {
    write_atomic(path, &model.to_bytes())
}

pub fn read_model(path: &Path) -> Result<LstmModel> {
    LstmModel::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(d: usize, n: usize) -> Normalizer {
        Normalizer {
            mu_min: vec![0.0; d],
            mu_max: vec![1.0; d],
            t_min: 0.0,
            t_max: 1.0,
            coef_min: vec![-1.0; n],
            coef_max: vec![1.0; n],
        }
    }

    fn hyper(layers: usize, cells: usize, lookback: usize) -> LstmHyper {
        LstmHyper {
            layers,
            cells,
            lookback,
            ..LstmHyper::m_q()
        }
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let mut m = LstmModel::new(hyper(2, 4, 3), norm(1, 2), 1).unwrap();
        m.params_mut().iter_mut().for_each(|v| *v = 0.0);
        let ob = m.output_bias_offset();
        m.params_mut()[ob] = 0.25;
        m.params_mut()[ob + 1] = -0.5;
        let window = vec![0.3; 3 * m.input_width()];
        assert_eq!(m.forward(&window).unwrap(), vec![0.25, -0.5]);
    }

    #[test]
    fn saturated_gates_ignore_input() {
        let mut m = LstmModel::new(hyper(1, 3, 2), norm(1, 2), 5).unwrap();
        let b = m.gate_bias_offset(0);
        for j in 0..3 {
            m.params_mut()[b + j] = -1e3; // input gate closed
            m.params_mut()[b + 3 + j] = 1e3; // forget gate open
        }
        let w = m.input_width();
        let a = m.forward(&vec![0.9; 2 * w]).unwrap();
        let c = m.forward(&(0..2 * w).map(|k| (k as f64).sin()).collect::<Vec<_>>()).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn width_mismatch_rejected() {
        let m = LstmModel::new(hyper(1, 3, 2), norm(1, 2), 5).unwrap();
        assert!(m.forward(&[0.0; 3]).is_err());
    }

    #[test]
    fn empty_horizon_gives_empty_rollout() {
        let m = LstmModel::new(hyper(1, 3, 2), norm(1, 2), 5).unwrap();
        let seed = vec![vec![0.1, 0.2]; 2];
        let out = m.predict_autoregressive(&seed, &[0.0, 0.1], &[0.5], &[]).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn archive_round_trip() {
        let m = LstmModel::new(hyper(2, 3, 2), norm(2, 2), 9).unwrap();
        let bytes = m.to_bytes();
        let back = LstmModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        let mut bad = bytes;
        let n = bad.len();
        bad[n - 20] ^= 4;
        assert!(LstmModel::from_bytes(&bad).is_err());
    }

    #[test]
    fn deterministic_init() {
        let a = LstmModel::new(hyper(2, 3, 2), norm(1, 2), 9).unwrap();
        let b = LstmModel::new(hyper(2, 3, 2), norm(1, 2), 9).unwrap();
        let c = LstmModel::new(hyper(2, 3, 2), norm(1, 2), 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        let bound = 1.0 / ((a.input_width() + 3) as f64).sqrt();
        assert!(a.params()[..a.gate_bias_offset(0)].iter().all(|v| v.abs() <= bound));
    }
}
