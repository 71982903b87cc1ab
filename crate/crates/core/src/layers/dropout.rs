use serde::{Deserialize, Serialize};

use super::params::dropout_mask;
use crate::autodiff::{Tape, Var};
use crate::error::ModelError;
use crate::tensor::Result;

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

/// Inverted dropout: in training, each activation survives with probability
/// `1 - rate` and is scaled by `1 / (1 - rate)`; at inference it is the
/// identity.
#[derive(Clone, Copy, Debug)]
pub struct DropoutLayer {
    rate: f64,
}

impl DropoutLayer {
    pub fn new(rate: f64) -> Result<Self, ModelError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(ModelError::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(DropoutLayer { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// `rng` is only drawn from in [`Mode::Train`] with a positive rate.
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode, rng: Option<&mut dyn rand::RngCore>) -> Result<Var> {
        if mode == Mode::Infer || self.rate == 0.0 {
            return Ok(x);
        }
        let rng = rng.ok_or_else(|| {
            crate::tensor::TensorError::Contract("training-mode dropout needs an rng".into())
        })?;
        let mask = dropout_mask(tape.value(x).shape().to_vec(), self.rate, rng);
        let m = tape.constant(mask);
        tape.mul(x, m)
    }
}
