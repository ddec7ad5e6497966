use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::SequenceDataset;
use super::model::{DropoutMasks, LstmModel};
use super::LstmHyper;
use crate::error::{Error, Result};
use crate::grid::fmt_real;

/// Adam with decoupled weight decay applied to every parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub train_mse: f64,
    /// NaN when no window is held out.
    pub val_mse: f64,
}

fn mean_loss(model: &LstmModel, ds: &SequenceDataset, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return f64::NAN;
    }
    let total: f64 = idx
        .iter()
        .map(|&w| super::model::mse(&model.run(ds.window(w), None).y, ds.target(w)))
        .sum();
    total / idx.len() as f64
}

/// Fits a fresh model with mini-batch Adam; returns the model and the
/// per-epoch losses evaluated with dropout off.
pub fn train(ds: &SequenceDataset, hyper: &LstmHyper, seed: u64) -> Result<(LstmModel, Vec<LossRecord>)> {
    hyper.validate()?;
    if ds.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    if hyper.lookback != ds.lookback {
        return Err(Error::invalid(format!(
            "hyperparameters ask for lookback {}, dataset was built with {}",
            hyper.lookback, ds.lookback
        )));
    }
    let mut model = LstmModel::new(*hyper, ds.norm.clone(), seed)?;
    let (train_idx, val_idx) = ds.split(hyper.validation_fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut adam = Adam::new(model.params().len(), hyper.learning_rate, hyper.weight_decay);
    let mut grad = vec![0.0; model.params().len()];
    let mut order = train_idx.clone();
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &w in batch {
                let masks = (hyper.dropout > 0.0 && hyper.layers > 1)
                    .then(|| DropoutMasks::sample(&model, hyper.dropout, &mut rng));
                model.accumulate(ds.window(w), ds.target(w), masks.as_ref(), scale, &mut grad);
            }
            adam.step(model.params_mut(), &grad);
        }
        let train_mse = mean_loss(&model, ds, &train_idx);
        let val_mse = mean_loss(&model, ds, &val_idx);
        if !train_mse.is_finite() {
            return Err(Error::Divergence { epoch, loss: train_mse });
        }
        log::debug!("epoch={epoch} train_mse={train_mse:.6e} val_mse={val_mse:.6e}");
        history.push(LossRecord {
            epoch,
            train_mse,
            val_mse,
        });
    }
    Ok((model, history))
}

pub fn write_loss_csv<W: Write>(history: &[LossRecord], mut out: W) -> Result<()> {
    writeln!(out, "epoch,train_mse,val_mse")?;
    for r in history {
        writeln!(out, "{},{},{}", r.epoch, fmt_real(r.train_mse), fmt_real(r.val_mse))?;
    }
    Ok(())
}

/// Gradients below this magnitude are compared in absolute rather than
/// relative terms.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-4;

/// Largest discrepancy between backpropagated gradients and central finite
/// differences over `n_check` (at least 100, capped at the parameter count)
/// randomly chosen parameters. The discrepancy of one parameter is
/// `|a - f| / max(|a|, |f|, GRADIENT_CHECK_FLOOR)`.
pub fn gradient_check(
    model: &LstmModel,
    window: &[f64],
    target: &[f64],
    epsilon: f64,
    n_check: usize,
    seed: u64,
    masks: Option<&DropoutMasks>,
) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} must lie in [1e-7, 1e-4]")));
    }
    let (_, analytic) = model.loss_gradient(window, target, masks)?;
    let n = analytic.len();
    let k = n_check.max(100).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, n, k);
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for p in picks.iter() {
        let orig = probe.params()[p];
        probe.params_mut()[p] = orig + epsilon;
        let plus = probe.loss(window, target, masks)?;
        probe.params_mut()[p] = orig - epsilon;
        let minus = probe.loss(window, target, masks)?;
        probe.params_mut()[p] = orig;
        let fd = (plus - minus) / (2.0 * epsilon);
        let a = analytic[p];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRADIENT_CHECK_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}
