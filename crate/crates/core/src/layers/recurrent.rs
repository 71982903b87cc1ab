//! LSTM / GRU cells and the masked (bi)directional sequence encoder.
//!
//! LSTM step, with `[x; h]` the concatenation of input and previous state:
//!
//! ```text
//! i = σ([x; h] W_i + b_i)    f = σ([x; h] W_f + b_f)
//! o = σ([x; h] W_o + b_o)    g = tanh([x; h] W_g + b_g)
//! c' = f ⊙ c + i ⊙ g         h' = o ⊙ tanh(c')
//! ```
//!
//! GRU step:
//!
//! ```text
//! z = σ([x; h] W_z + b_z)    r = σ([x; h] W_r + b_r)
//! n = tanh([x; r ⊙ h] W_n + b_n)
//! h' = (1 - z) ⊙ n + z ⊙ h
//! ```

use serde::{Deserialize, Serialize};

use super::params::{uniform, Binding, ParamId, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::ModelError;
use crate::tensor::{Result, Tensor, TensorError};

/// Recurrent matrices are drawn from uniform(-RECURRENT_INIT, RECURRENT_INIT).
pub const RECURRENT_INIT: f64 = 0.08;
pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    #[default]
    Lstm,
    Gru,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Bidirectional,
}

fn gate(
    store: &mut ParamStore,
    name: &str,
    gate: &str,
    rows: usize,
    hidden: usize,
    bias: f64,
    rng: &mut dyn rand::RngCore,
) -> Result<(ParamId, ParamId), ModelError> {
    let w = uniform(vec![rows, hidden], RECURRENT_INIT, rng);
    Ok((
        store.add(format!("{name}.w_{gate}"), w, true)?,
        store.add(format!("{name}.b_{gate}"), Tensor::full(vec![hidden], bias), true)?,
    ))
}

fn affine(tape: &mut Tape, bind: &Binding, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let z = tape.matmul(x, bind.var(w))?;
    tape.add(z, bind.var(b))
}

#[derive(Clone, Debug)]
pub struct LstmCell {
    input: (ParamId, ParamId),
    forget: (ParamId, ParamId),
    output: (ParamId, ParamId),
    candidate: (ParamId, ParamId),
    input_dim: usize,
    hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Self, ModelError> {
        let rows = input_dim + hidden;
        Ok(LstmCell {
            input: gate(store, name, "i", rows, hidden, 0.0, rng)?,
            forget: gate(store, name, "f", rows, hidden, FORGET_BIAS_INIT, rng)?,
            output: gate(store, name, "o", rows, hidden, 0.0, rng)?,
            candidate: gate(store, name, "g", rows, hidden, 0.0, rng)?,
            input_dim,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// One step: `x: [batch × in]`, `h, c: [batch × hidden]` → `(h', c')`.
    pub fn step(&self, tape: &mut Tape, bind: &Binding, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        check_step_shapes(tape, x, h, Some(c), self.input_dim, self.hidden)?;
        let xh = tape.concat(&[x, h], 1)?;
        let i = affine(tape, bind, xh, self.input)?;
        let i = tape.sigmoid(i)?;
        let f = affine(tape, bind, xh, self.forget)?;
        let f = tape.sigmoid(f)?;
        let o = affine(tape, bind, xh, self.output)?;
        let o = tape.sigmoid(o)?;
        let g = affine(tape, bind, xh, self.candidate)?;
        let g = tape.tanh(g)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let squashed = tape.tanh(c_next)?;
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

#[derive(Clone, Debug)]
pub struct GruCell {
    update: (ParamId, ParamId),
    reset: (ParamId, ParamId),
    candidate: (ParamId, ParamId),
    input_dim: usize,
    hidden: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Self, ModelError> {
        let rows = input_dim + hidden;
        Ok(GruCell {
            update: gate(store, name, "z", rows, hidden, 0.0, rng)?,
            reset: gate(store, name, "r", rows, hidden, 0.0, rng)?,
            candidate: gate(store, name, "n", rows, hidden, 0.0, rng)?,
            input_dim,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn step(&self, tape: &mut Tape, bind: &Binding, x: Var, h: Var) -> Result<Var> {
        check_step_shapes(tape, x, h, None, self.input_dim, self.hidden)?;
        let xh = tape.concat(&[x, h], 1)?;
        let z = affine(tape, bind, xh, self.update)?;
        let z = tape.sigmoid(z)?;
        let r = affine(tape, bind, xh, self.reset)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h)?;
        let xrh = tape.concat(&[x, rh], 1)?;
        let n = affine(tape, bind, xrh, self.candidate)?;
        let n = tape.tanh(n)?;
        let one_minus_z = tape.one_minus(z)?;
        let fresh = tape.mul(one_minus_z, n)?;
        let carried = tape.mul(z, h)?;
        tape.add(fresh, carried)
    }
}

fn check_step_shapes(tape: &Tape, x: Var, h: Var, c: Option<Var>, input: usize, hidden: usize) -> Result<()> {
    let xs = tape.value(x).shape();
    let batch = xs.first().copied().unwrap_or(0);
    let bad = |v: Var| tape.value(v).shape() != [batch, hidden];
    if xs.len() != 2 || xs[1] != input || bad(h) || c.is_some_and(bad) {
        return Err(TensorError::ShapeMismatch {
            op: "recurrent step",
            lhs: xs.to_vec(),
            rhs: tape.value(h).shape().to_vec(),
        });
    }
    Ok(())
}

/// Hidden (and, for LSTM, cell) state of a recurrent cell.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

#[derive(Clone, Debug)]
pub enum RecurrentCell {
    Lstm(LstmCell),
    Gru(GruCell),
}

impl RecurrentCell {
    pub fn new(
        kind: CellKind,
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Self, ModelError> {
        Ok(match kind {
            CellKind::Lstm => RecurrentCell::Lstm(LstmCell::new(store, name, input_dim, hidden, rng)?),
            CellKind::Gru => RecurrentCell::Gru(GruCell::new(store, name, input_dim, hidden, rng)?),
        })
    }

    pub fn hidden(&self) -> usize {
        match self {
            RecurrentCell::Lstm(c) => c.hidden(),
            RecurrentCell::Gru(c) => c.hidden(),
        }
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> CellState {
        let zeros = tape.constant(Tensor::zeros(vec![batch, self.hidden()]));
        CellState {
            h: zeros,
            c: matches!(self, RecurrentCell::Lstm(_)).then_some(zeros),
        }
    }

    pub fn step(&self, tape: &mut Tape, bind: &Binding, x: Var, state: CellState) -> Result<CellState> {
        match self {
            RecurrentCell::Lstm(cell) => {
                let c = state.c.ok_or_else(|| TensorError::Contract("LSTM step without cell state".into()))?;
                let (h, c) = cell.step(tape, bind, x, state.h, c)?;
                Ok(CellState { h, c: Some(c) })
            }
            RecurrentCell::Gru(cell) => Ok(CellState {
                h: cell.step(tape, bind, x, state.h)?,
                c: None,
            }),
        }
    }
}

/// Output of [`SequenceEncoder::encode`].
#[derive(Clone, Copy, Debug)]
pub struct EncodedSequence {
    /// `[batch × L × H]` per-position states (forward ‖ backward when
    /// bidirectional).
    pub states: Var,
    /// Forward state after the last real token, `[batch × hidden]`.
    pub last_forward: Var,
    /// Backward state after consuming the first token, `[batch × hidden]`.
    pub last_backward: Option<Var>,
}

/// Runs one cell left-to-right, plus an independent second cell
/// right-to-left when bidirectional. Padded positions leave the state
/// untouched, so the backward cell effectively starts at the last real
/// token of each row.
#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    forward: RecurrentCell,
    backward: Option<RecurrentCell>,
}

impl SequenceEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: CellKind,
        input_dim: usize,
        hidden: usize,
        direction: Direction,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Self, ModelError> {
        let forward = RecurrentCell::new(kind, store, &format!("{name}.fwd"), input_dim, hidden, rng)?;
        let backward = match direction {
            Direction::Forward => None,
            Direction::Bidirectional => Some(RecurrentCell::new(kind, store, &format!("{name}.bwd"), input_dim, hidden, rng)?),
        };
        Ok(SequenceEncoder { forward, backward })
    }

    pub fn from_cells(forward: RecurrentCell, backward: Option<RecurrentCell>) -> Self {
        SequenceEncoder { forward, backward }
    }

    pub fn direction(&self) -> Direction {
        if self.backward.is_some() {
            Direction::Bidirectional
        } else {
            Direction::Forward
        }
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden() + self.backward.as_ref().map_or(0, RecurrentCell::hidden)
    }

    /// `x: [batch × L × in]` with a `[batch × L]` mask of real positions.
    pub fn encode(&self, tape: &mut Tape, bind: &Binding, x: Var, mask: &[bool]) -> Result<EncodedSequence> {
        let shape = tape.value(x).shape().to_vec();
        let [batch, len, _] = shape[..] else {
            return Err(TensorError::ShapeMismatch {
                op: "encode_sequence",
                lhs: shape,
                rhs: vec![],
            });
        };
        if mask.len() != batch * len {
            return Err(TensorError::ShapeMismatch {
                op: "encode_sequence mask",
                lhs: shape,
                rhs: vec![mask.len()],
            });
        }
        let columns: Vec<Vec<bool>> = (0..len)
            .map(|t| (0..batch).map(|b| mask[b * len + t]).collect())
            .collect();
        let (fwd, last_forward) = run_direction(&self.forward, tape, bind, x, &columns, false)?;
        match &self.backward {
            None => Ok(EncodedSequence {
                states: tape.stack(&fwd, 1)?,
                last_forward,
                last_backward: None,
            }),
            Some(cell) => {
                let (bwd, last_backward) = run_direction(cell, tape, bind, x, &columns, true)?;
                let per_step = fwd
                    .iter()
                    .zip(&bwd)
                    .map(|(&f, &b)| tape.concat(&[f, b], 1))
                    .collect::<Result<Vec<_>>>()?;
                Ok(EncodedSequence {
                    states: tape.stack(&per_step, 1)?,
                    last_forward,
                    last_backward: Some(last_backward),
                })
            }
        }
    }
}

fn run_direction(
    cell: &RecurrentCell,
    tape: &mut Tape,
    bind: &Binding,
    x: Var,
    columns: &[Vec<bool>],
    reverse: bool,
) -> Result<(Vec<Var>, Var)> {
    let batch = columns.first().map_or(0, Vec::len);
    let len = columns.len();
    let mut state = cell.zero_state(tape, batch);
    let mut outputs = vec![state.h; len];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    };
    for t in order {
        let live = &columns[t];
        if live.iter().any(|&m| m) {
            let x_t = tape.select(x, 1, t)?;
            let next = cell.step(tape, bind, x_t, state)?;
            state = if live.iter().all(|&m| m) {
                next
            } else {
                CellState {
                    h: tape.row_select(live, next.h, state.h)?,
                    c: match (next.c, state.c) {
                        (Some(n), Some(o)) => Some(tape.row_select(live, n, o)?),
                        _ => None,
                    },
                }
            };
        }
        outputs[t] = state.h;
    }
    Ok((outputs, state.h))
}
