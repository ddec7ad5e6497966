//! Stacked LSTM forecasters for modal coefficients, trained from scratch.
//!
//! Each input row is `(mu, t, coefficients)`; a window holds `lookback` rows,
//! newest first, and the target is the coefficient vector one stride later.

mod dataset;
mod model;
mod train;

pub use dataset::{build_dataset, Normalizer, SequenceDataset};
pub use model::{read_model, write_model, DropoutMasks, LstmModel};
pub use train::{gradient_check, train, write_loss_csv, Adam, LossRecord};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snapshots::Variable;

pub const DEFAULT_LOOKBACK: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmHyper {
    pub layers: usize,
    pub cells: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub validation_fraction: f64,
    pub lookback: usize,
}

impl LstmHyper {
    /// Preset for potential vorticity.
    pub fn m_q() -> Self {
        Self {
            layers: 1,
            cells: 100,
            batch_size: 8,
            epochs: 500,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            dropout: 0.0,
            validation_fraction: 0.2,
            lookback: DEFAULT_LOOKBACK,
        }
    }

    /// Preset for stream functions.
    pub fn m_psi() -> Self {
        Self {
            layers: 3,
            cells: 50,
            batch_size: 16,
            dropout: 0.1,
            ..Self::m_q()
        }
    }

    pub fn for_variable(v: Variable) -> Self {
        match v {
            Variable::Q1 | Variable::Q2 => Self::m_q(),
            Variable::Psi1 | Variable::Psi2 => Self::m_psi(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.cells == 0 || self.batch_size == 0 || self.lookback == 0 {
            return Err(Error::invalid("layers, cells, batch size and lookback must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}
