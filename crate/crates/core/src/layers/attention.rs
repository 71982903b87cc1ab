use super::params::{glorot_uniform, uniform, Binding, ParamId, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::ModelError;
use crate::tensor::{Result, Tensor, TensorError};

/// The context vector is drawn from uniform(-CONTEXT_INIT, CONTEXT_INIT).
pub const CONTEXT_INIT: f64 = 0.1;

/// Word-level attention pooling:
///
/// ```text
/// μ_it = tanh(h_it W_w + b_w)
/// α_it = softmax_t(μ_itᵀ μ_w)      (padded positions score -∞)
/// S_i  = Σ_t α_it h_it
/// ```
#[derive(Clone, Debug)]
pub struct AttentionPooling {
    weight: ParamId,
    bias: ParamId,
    context: ParamId,
    input_dim: usize,
    attn_dim: usize,
}

/// Output of [`AttentionPooling::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `[batch × H_enc]` sentence vectors.
    pub pooled: Var,
    /// `[batch × L]` attention weights.
    pub weights: Var,
}

impl AttentionPooling {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        attn_dim: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Self, ModelError> {
        let w = glorot_uniform(vec![input_dim, attn_dim], input_dim, attn_dim, rng);
        let mu = uniform(vec![attn_dim], CONTEXT_INIT, rng);
        Self::from_tensors(store, name, w, Tensor::zeros(vec![attn_dim]), mu)
    }

    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        weight: Tensor,
        bias: Tensor,
        context: Tensor,
    ) -> Result<Self, ModelError> {
        let [input_dim, attn_dim] = *weight.shape() else {
            return Err(ModelError::config(format!("{name}: W_w must be rank 2")));
        };
        if bias.shape() != [attn_dim] || context.shape() != [attn_dim] {
            return Err(ModelError::config(format!("{name}: b_w and μ_w must have shape [{attn_dim}]")));
        }
        Ok(AttentionPooling {
            weight: store.add(format!("{name}.w_w"), weight, true)?,
            bias: store.add(format!("{name}.b_w"), bias, true)?,
            context: store.add(format!("{name}.mu_w"), context, true)?,
            input_dim,
            attn_dim,
        })
    }

    pub fn attn_dim(&self) -> usize {
        self.attn_dim
    }

    pub fn context_id(&self) -> ParamId {
        self.context
    }

    /// `h: [batch × L × H_enc]`, `mask: [batch × L]`.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, h: Var, mask: &[bool]) -> Result<Attended> {
        let shape = tape.value(h).shape().to_vec();
        let [batch, len, width] = shape[..] else {
            return Err(TensorError::ShapeMismatch {
                op: "attention_pool",
                lhs: shape,
                rhs: vec![self.input_dim, self.attn_dim],
            });
        };
        if width != self.input_dim || mask.len() != batch * len {
            return Err(TensorError::ShapeMismatch {
                op: "attention_pool",
                lhs: shape,
                rhs: vec![mask.len(), self.input_dim],
            });
        }
        if let Some(b) = (0..batch).find(|&b| !mask[b * len..(b + 1) * len].iter().any(|&m| m)) {
            return Err(TensorError::Contract(format!("attention over sequence {b} with every position masked")));
        }
        let flat = tape.reshape(h, vec![batch * len, width])?;
        let proj = tape.matmul(flat, bind.var(self.weight))?;
        let proj = tape.add(proj, bind.var(self.bias))?;
        let mu = tape.tanh(proj)?;
        let ctx = tape.reshape(bind.var(self.context), vec![self.attn_dim, 1])?;
        let scores = tape.matmul(mu, ctx)?;
        let scores = tape.reshape(scores, vec![batch, len])?;
        let scores = tape.mask_fill(scores, mask)?;
        let weights = tape.softmax_rows(scores)?;
        let pooled = tape.weighted_sum(weights, h)?;
        Ok(Attended { pooled, weights })
    }
}
