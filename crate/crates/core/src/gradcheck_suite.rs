//! Finite-difference checks for every layer and every architecture, on
//! small shapes at 64-bit precision.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckConfig, GradCheckReport, Padding, Tape, Var};
use crate::batch::TokenBatch;
use crate::layers::{
    maxpool1d, uniform, Activation, AttentionPooling, Binding, CellKind, Conv1DLayer, DenseLayer, Direction,
    DropoutLayer, EmbeddingLayer, Mode, ParamStore, SequenceEncoder,
};
use crate::models::{build_model, ClassifierModel, ModelKind, ModelSpec};
use crate::tensor::{Result, Tensor};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

fn timed(name: impl Into<String>, run: impl FnOnce() -> GradCheckReport) -> CheckOutcome {
    let start = Instant::now();
    let report = run();
    CheckOutcome {
        name: name.into(),
        report,
        elapsed: start.elapsed(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn input(shape: Vec<usize>, seed: u64) -> Tensor {
    uniform(shape, 1.0, &mut rng(seed))
}

/// Contracts `y` with fixed random weights so every output entry matters.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = input(tape.value(y).shape().to_vec(), seed);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Adds uniform(-r, r) noise to every trainable tensor. Zero-initialized
/// biases otherwise put ReLUs exactly on their kink, and near-linear tanh
/// regimes make some gradients too small to difference reliably.
fn jitter(store: &mut ParamStore, r: f64, seed: u64, keep_zero_row: Option<usize>) {
    let mut g = rng(seed);
    for id in store.trainable_ids() {
        let t = store.get(id);
        let noise = uniform(t.shape().to_vec(), r, &mut g);
        let mut moved = t.zip_map(&noise, |a, b| a + b).expect("same shape");
        if let Some(dim) = keep_zero_row.filter(|_| t.rank() == 2 && store.entry(id).name.ends_with(".table")) {
            moved.data_mut()[..dim].fill(0.0);
        }
        *store.get_mut(id) = moved;
    }
}

fn check_store(name: &str, store: &ParamStore, f: impl Fn(&mut Tape, &Binding) -> Result<Var>) -> CheckOutcome {
    timed(name, || store.grad_check(f, &GradCheckConfig::default()))
}

pub fn dense(activation: Activation) -> CheckOutcome {
    let mut store = ParamStore::new();
    let d = DenseLayer::new(&mut store, "d", 4, 3, activation, &mut rng(1)).expect("valid layer");
    jitter(&mut store, 0.5, 2, None);
    let x = input(vec![5, 4], 3);
    check_store(&format!("dense/{activation:?}").to_lowercase(), &store, |tape, bind| {
        let xv = tape.constant(x.clone());
        let y = d.forward(tape, bind, xv)?;
        probe(tape, y, 4)
    })
}

pub fn embedding() -> CheckOutcome {
    let mut store = ParamStore::new();
    let mut table = input(vec![5, 3], 5).into_vec();
    table[..3].fill(0.0);
    let table = Tensor::new(vec![5, 3], table).expect("shape");
    let emb = EmbeddingLayer::new(&mut store, "e", table, true).expect("valid table");
    let batch = TokenBatch::from_sequences(&[vec![1, 4, 4, 2], vec![3, 0]]).expect("valid batch");
    check_store("embedding", &store, |tape, bind| {
        let y = emb.embed(tape, bind, &batch)?;
        probe(tape, y, 6)
    })
}

pub fn dropout() -> CheckOutcome {
    let layer = DropoutLayer::new(0.5).expect("valid rate");
    let x = input(vec![3, 4], 7);
    timed("dropout", || {
        grad_check(
            |tape, vars| {
                // same mask on every evaluation
                let mut g = rng(8);
                let y = layer.forward(tape, vars[0], Mode::Train, Some(&mut g))?;
                probe(tape, y, 9)
            },
            &[x],
            &GradCheckConfig::default(),
        )
    })
}

pub fn conv_maxpool() -> CheckOutcome {
    let mut store = ParamStore::new();
    let mut g = rng(10);
    let c1 = Conv1DLayer::new(&mut store, "c1", 3, 4, 3, Padding::SameZero, &mut g).expect("valid layer");
    let c2 = Conv1DLayer::new(&mut store, "c2", 4, 2, 3, Padding::Valid, &mut g).expect("valid layer");
    jitter(&mut store, 0.5, 11, None);
    let x = input(vec![2, 6, 3], 12);
    let mask = [true, true, true, false, true, true, true, true];
    check_store("conv1d+maxpool", &store, |tape, bind| {
        let xv = tape.constant(x.clone());
        let h = c1.forward(tape, bind, xv)?;
        let h = tape.tanh(h)?;
        let y = c2.forward(tape, bind, h)?;
        let pooled = maxpool1d(tape, y, Some(&mask))?;
        probe(tape, pooled, 13)
    })
}

pub fn lstm_unrolled() -> CheckOutcome {
    let mut store = ParamStore::new();
    let enc = SequenceEncoder::new(&mut store, "enc", CellKind::Lstm, 3, 4, Direction::Forward, &mut rng(14))
        .expect("valid encoder");
    let x = input(vec![2, 5, 3], 15);
    check_store("lstm/5 steps", &store, |tape, bind| {
        let xv = tape.constant(x.clone());
        let out = enc.encode(tape, bind, xv, &[true; 10])?;
        probe(tape, out.states, 16)
    })
}

pub fn bidirectional(cell: CellKind) -> CheckOutcome {
    let mut store = ParamStore::new();
    let enc = SequenceEncoder::new(&mut store, "enc", cell, 2, 3, Direction::Bidirectional, &mut rng(17))
        .expect("valid encoder");
    let x = input(vec![2, 4, 2], 18);
    let mask = [true, true, false, false, true, true, true, true];
    check_store(&format!("bidirectional {cell:?}").to_lowercase(), &store, |tape, bind| {
        let xv = tape.constant(x.clone());
        let out = enc.encode(tape, bind, xv, &mask)?;
        let last = tape.concat(&[out.last_forward, out.last_backward.expect("bidirectional")], 1)?;
        let a = probe(tape, out.states, 19)?;
        let b = probe(tape, last, 20)?;
        tape.add(a, b)
    })
}

pub fn attention() -> CheckOutcome {
    let mut store = ParamStore::new();
    let attn = AttentionPooling::new(&mut store, "att", 4, 3, &mut rng(21)).expect("valid layer");
    jitter(&mut store, 0.5, 22, None);
    let h = input(vec![2, 3, 4], 23);
    let mask = [true, true, true, true, false, false];
    timed("attention", || {
        let params: Vec<Tensor> = store.trainable_ids().into_iter().map(|id| store.get(id).clone()).collect();
        let mut all = params;
        all.push(h.clone());
        grad_check(
            |tape, vars| {
                let (weights, states) = vars.split_at(vars.len() - 1);
                let bind = store.bind_with(tape, weights);
                let out = attn.forward(tape, &bind, states[0], &mask)?;
                let a = probe(tape, out.pooled, 24)?;
                let b = probe(tape, out.weights, 25)?;
                tape.add(a, b)
            },
            &all,
            &GradCheckConfig::default(),
        )
    })
}

pub fn softmax_cross_entropy() -> CheckOutcome {
    let logits = uniform(vec![4, 3], 3.0, &mut rng(26));
    timed("softmax+cross-entropy", || {
        grad_check(
            |tape, vars| {
                let p = tape.softmax_rows(vars[0])?;
                tape.nll(p, &[0, 2, 1, 2])
            },
            &[logits],
            &GradCheckConfig::default(),
        )
    })
}

pub fn layer_checks() -> Vec<CheckOutcome> {
    let mut out: Vec<CheckOutcome> = [Activation::Tanh, Activation::Relu, Activation::Sigmoid, Activation::None]
        .into_iter()
        .map(dense)
        .collect();
    out.extend([
        embedding(),
        dropout(),
        conv_maxpool(),
        lstm_unrolled(),
        bidirectional(CellKind::Lstm),
        bidirectional(CellKind::Gru),
        attention(),
        softmax_cross_entropy(),
    ]);
    out
}

/// Small-dimension spec of the given architecture with trainable embeddings.
pub fn small_spec(kind: ModelKind) -> ModelSpec {
    ModelSpec {
        embedding_dim: 4,
        dnn_dims: vec![5, 4, 3],
        lstm_hidden: 3,
        conv_filters: 4,
        max_len: 16,
        trainable_embeddings: true,
        ..ModelSpec::new(kind)
    }
}

fn small_model(kind: ModelKind, seed: u64) -> ClassifierModel {
    let spec = small_spec(kind);
    let mut table = input(vec![6, spec.embedding_dim], seed).into_vec();
    table[..spec.embedding_dim].fill(0.0);
    let table = Tensor::new(vec![6, spec.embedding_dim], table).expect("shape");
    let mut model = build_model(&spec, table, seed + 1).expect("valid spec");
    jitter(model.params_mut(), 0.5, seed + 2, Some(spec.embedding_dim));
    model
}

/// End-to-end check of loss(forward(batch)) with respect to every parameter,
/// embeddings included, on a 2-sentence batch of 4 token slots.
pub fn architecture(kind: ModelKind) -> CheckOutcome {
    let model = small_model(kind, 30);
    let batch = TokenBatch::from_sequences(&[vec![1, 2, 3, 4], vec![5, 2, 1]]).expect("valid batch");
    let labels = [2, 1];
    check_store(&format!("model/{kind}"), model.params(), |tape, bind| {
        let p = model.forward(tape, bind, &batch, Mode::Infer, None)?;
        tape.nll(p, &labels)
    })
}

/// A deliberately wrong backward rule (gradient of `x²` reported as `x`).
/// The checker must flag it.
pub fn corrupted_fixture() -> CheckOutcome {
    let x = Tensor::vector(vec![0.7, -1.3, 2.1]).expect("non-empty");
    timed("fixture/corrupted backward", || {
        grad_check(
            |tape, vars| {
                let value = tape.value(vars[0]).map(|v| v * v);
                let sq = tape.custom(&[vars[0]], value, Box::new(|g, inputs, _| vec![g.zip_map(inputs[0], |g, x| g * x).expect("same shape")]));
                tape.sum(sq)
            },
            &[x],
            &GradCheckConfig::default(),
        )
    })
}

/// Layer checks (optionally) followed by one check per requested architecture.
pub fn run(kinds: &[ModelKind], include_layers: bool) -> Vec<CheckOutcome> {
    let mut out = if include_layers { layer_checks() } else { Vec::new() };
    out.extend(kinds.iter().map(|&k| architecture(k)));
    out
}
