use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::autodiff::{grad_check, GradCheckConfig, GradCheckReport, Tape, Var};
use crate::error::ModelError;
use crate::tensor::{Tensor, TensorError};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named, ordered parameter tensors owned by a model. Layers keep
/// [`ParamId`]s into the store; insertion order is the serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId, ModelError> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(ModelError::config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entries[id.0].trainable).collect()
    }

    /// Total number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Registers every tensor on `tape`: trainable ones as differentiable
    /// leaves, frozen ones as constants.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self
                .entries
                .iter()
                .map(|e| tape.leaf(e.value.clone(), e.trainable))
                .collect(),
        }
    }

    /// Like [`bind`](Self::bind) but takes the trainable tensors from
    /// already-registered `vars`, in [`trainable_ids`](Self::trainable_ids)
    /// order.
    pub fn bind_with(&self, tape: &mut Tape, vars: &[Var]) -> Binding {
        let mut supplied = vars.iter();
        Binding {
            vars: self
                .entries
                .iter()
                .map(|e| match e.trainable {
                    true => *supplied.next().expect("one var per trainable parameter"),
                    false => tape.constant(e.value.clone()),
                })
                .collect(),
        }
    }

    /// Finite-difference check of `f` with respect to every trainable tensor.
    pub fn grad_check<F>(&self, f: F, cfg: &GradCheckConfig) -> GradCheckReport
    where
        F: Fn(&mut Tape, &Binding) -> Result<Var, TensorError>,
    {
        let params: Vec<Tensor> = self.trainable_ids().into_iter().map(|id| self.get(id).clone()).collect();
        grad_check(
            |tape, vars| {
                let bind = self.bind_with(tape, vars);
                f(tape, &bind)
            },
            &params,
            cfg,
        )
    }
}

/// The tape variables of one [`ParamStore::bind`] call.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Uniform(-r, r) with `r = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut dyn rand::RngCore) -> Tensor {
    let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(shape, r, rng)
}

pub fn uniform(shape: Vec<usize>, r: f64, rng: &mut dyn rand::RngCore) -> Tensor {
    let n = shape.iter().product();
    let dist = Uniform::new_inclusive(-r, r);
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("extents are positive")
}

/// Inverted-dropout keep mask: each entry is `1 / (1 - rate)` with
/// probability `1 - rate`, else 0.
pub(crate) fn dropout_mask(shape: Vec<usize>, rate: f64, rng: &mut dyn rand::RngCore) -> Tensor {
    let n = shape.iter().product();
    let keep = 1.0 - rate;
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::new(shape, data).expect("extents are positive")
}
