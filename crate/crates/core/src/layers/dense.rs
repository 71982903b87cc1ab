use serde::{Deserialize, Serialize};

use super::params::{glorot_uniform, Binding, ParamId, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::ModelError;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    None,
}

/// Fully connected layer, `activation(x · W + b)` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    weight: ParamId,
    bias: ParamId,
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Self, ModelError> {
        let w = glorot_uniform(vec![in_dim, out_dim], in_dim, out_dim, rng);
        Self::from_tensors(store, name, w, Tensor::zeros(vec![out_dim]), activation)
    }

    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        weight: Tensor,
        bias: Tensor,
        activation: Activation,
    ) -> Result<Self, ModelError> {
        let [in_dim, out_dim] = *weight.shape() else {
            return Err(ModelError::config(format!("{name}: weight must be rank 2")));
        };
        if bias.shape() != [out_dim] {
            return Err(ModelError::config(format!("{name}: bias must have shape [{out_dim}]")));
        }
        Ok(DenseLayer {
            weight: store.add(format!("{name}.weight"), weight, true)?,
            bias: store.add(format!("{name}.bias"), bias, true)?,
            in_dim,
            out_dim,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `x: [batch × in]` → `[batch × out]`.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                lhs: shape.to_vec(),
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let z = tape.matmul(x, bind.var(self.weight))?;
        let z = tape.add(z, bind.var(self.bias))?;
        match self.activation {
            Activation::Tanh => tape.tanh(z),
            Activation::Relu => tape.relu(z),
            Activation::Sigmoid => tape.sigmoid(z),
            Activation::None => Ok(z),
        }
    }
}
