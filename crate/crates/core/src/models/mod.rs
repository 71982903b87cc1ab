//! The five classifier architectures: embedding bottom, architecture-specific
//! body, dropout, and a dense softmax head over the three polarity classes.

pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Tape, Var};
use crate::batch::TokenBatch;
use crate::error::ModelError;
use crate::layers::{
    maxpool1d, Activation, AttentionPooling, Binding, CellKind, Conv1DLayer, DenseLayer, Direction, DropoutLayer,
    EmbeddingLayer, Mode, ParamStore, SequenceEncoder,
};
use crate::tensor::{Result, Tensor, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dnn,
    Cnn,
    Lstm,
    Bilstm,
    BilstmAttention,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Dnn,
        ModelKind::Cnn,
        ModelKind::Lstm,
        ModelKind::Bilstm,
        ModelKind::BilstmAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dnn => "dnn",
            ModelKind::Cnn => "cnn",
            ModelKind::Lstm => "lstm",
            ModelKind::Bilstm => "bilstm",
            ModelKind::BilstmAttention => "bilstm_attention",
        }
    }

    /// Display label used in comparison tables.
    pub fn title(self) -> &'static str {
        match self {
            ModelKind::Dnn => "DNN",
            ModelKind::Cnn => "CNN",
            ModelKind::Lstm => "LSTM",
            ModelKind::Bilstm => "Bi-LSTM",
            ModelKind::BilstmAttention => "Bi-LSTM+Attention",
        }
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, ModelKind::Lstm | ModelKind::Bilstm | ModelKind::BilstmAttention)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                ModelError::config(format!(
                    "unknown model kind {s:?} (expected one of dnn, cnn, lstm, bilstm, bilstm_attention)"
                ))
            })
    }
}

/// Architecture and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub embedding_dim: usize,
    pub dropout: f64,
    pub dnn_dims: Vec<usize>,
    pub lstm_hidden: usize,
    pub conv_filters: usize,
    pub kernel_width: usize,
    pub max_len: usize,
    pub classes: usize,
    pub cell: CellKind,
    pub trainable_embeddings: bool,
    /// Attention projection width; `None` uses the encoder width.
    pub attention_dim: Option<usize>,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        ModelSpec {
            kind,
            embedding_dim: 300,
            dropout: 0.5,
            dnn_dims: vec![128, 64, 32],
            lstm_hidden: 64,
            conv_filters: 300,
            kernel_width: 3,
            max_len: 64,
            classes: NUM_CLASSES,
            cell: CellKind::Lstm,
            trainable_embeddings: false,
            attention_dim: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.classes != NUM_CLASSES {
            return Err(ModelError::config(format!("class count must be {NUM_CLASSES}, got {}", self.classes)));
        }
        let dims = [
            ("embedding_dim", self.embedding_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("conv_filters", self.conv_filters),
            ("kernel_width", self.kernel_width),
            ("max_len", self.max_len),
            ("attention_dim", self.attention_dim.unwrap_or(1)),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::config(format!("{name} must be positive")));
        }
        if self.dnn_dims.is_empty() || self.dnn_dims.contains(&0) {
            return Err(ModelError::config("dnn_dims must be a non-empty list of positive widths"));
        }
        DropoutLayer::new(self.dropout)?;
        Ok(())
    }

    /// Width of the recurrent encoder output.
    pub fn encoder_dim(&self) -> usize {
        match self.kind {
            ModelKind::Lstm => self.lstm_hidden,
            _ => 2 * self.lstm_hidden,
        }
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::new(ModelKind::Dnn)
    }
}

#[derive(Clone, Debug)]
enum Body {
    Dnn(Vec<DenseLayer>),
    Cnn(Conv1DLayer, Conv1DLayer),
    Recurrent {
        encoder: SequenceEncoder,
        attention: Option<(AttentionPooling, DenseLayer)>,
    },
}

/// A built classifier. All tensors live in [`ClassifierModel::params`].
#[derive(Clone, Debug)]
pub struct ClassifierModel {
    spec: ModelSpec,
    seed: u64,
    store: ParamStore,
    embedding: EmbeddingLayer,
    body: Body,
    dropout: DropoutLayer,
    head: DenseLayer,
}

/// Builds the model described by `spec` on top of `table` (`[vocab × dim]`,
/// row 0 zero). `seed` drives parameter initialization only.
pub fn build_model(spec: &ModelSpec, table: Tensor, seed: u64) -> Result<ClassifierModel, ModelError> {
    spec.validate()?;
    match table.shape() {
        [_, dim] if *dim == spec.embedding_dim => {}
        shape => {
            return Err(ModelError::config(format!(
                "embedding table shape {shape:?} does not match embedding_dim {}",
                spec.embedding_dim
            )))
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let embedding = EmbeddingLayer::new(&mut store, "embedding", table, spec.trainable_embeddings)?;
    let e = spec.embedding_dim;
    let (body, width) = match spec.kind {
        ModelKind::Dnn => {
            let mut layers = Vec::with_capacity(spec.dnn_dims.len());
            let mut width = e;
            for (i, &out) in spec.dnn_dims.iter().enumerate() {
                layers.push(DenseLayer::new(&mut store, &format!("dnn{i}"), width, out, Activation::Relu, &mut rng)?);
                width = out;
            }
            (Body::Dnn(layers), width)
        }
        ModelKind::Cnn => {
            let f = spec.conv_filters;
            let k = spec.kernel_width;
            let c1 = Conv1DLayer::new(&mut store, "conv1", e, f, k, Padding::SameZero, &mut rng)?;
            let c2 = Conv1DLayer::new(&mut store, "conv2", f, f, k, Padding::Valid, &mut rng)?;
            (Body::Cnn(c1, c2), f)
        }
        ModelKind::Lstm | ModelKind::Bilstm | ModelKind::BilstmAttention => {
            let direction = match spec.kind {
                ModelKind::Lstm => Direction::Forward,
                _ => Direction::Bidirectional,
            };
            let encoder = SequenceEncoder::new(&mut store, "encoder", spec.cell, e, spec.lstm_hidden, direction, &mut rng)?;
            let h = encoder.output_dim();
            let attention = match spec.kind {
                ModelKind::BilstmAttention => {
                    let a = spec.attention_dim.unwrap_or(h);
                    let pool = AttentionPooling::new(&mut store, "attention", h, a, &mut rng)?;
                    let synth = DenseLayer::new(&mut store, "synthesis", h, h, Activation::Tanh, &mut rng)?;
                    Some((pool, synth))
                }
                _ => None,
            };
            (Body::Recurrent { encoder, attention }, h)
        }
    };
    let head = DenseLayer::new(&mut store, "head", width, spec.classes, Activation::None, &mut rng)?;
    Ok(ClassifierModel {
        spec: spec.clone(),
        seed,
        store,
        embedding,
        body,
        dropout: DropoutLayer::new(spec.dropout)?,
        head,
    })
}

impl ClassifierModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn embedding(&self) -> &EmbeddingLayer {
        &self.embedding
    }

    /// Class probabilities `[batch × 3]` as a tape variable. `rng` feeds
    /// dropout and is only needed in [`Mode::Train`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        batch: &TokenBatch,
        mode: Mode,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Var> {
        let logits = self.logits(tape, bind, batch, mode, rng)?;
        tape.softmax_rows(logits)
    }

    pub fn logits(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        batch: &TokenBatch,
        mode: Mode,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Var> {
        if batch.seq_len() > self.spec.max_len {
            return Err(TensorError::ShapeMismatch {
                op: "model forward (sequence longer than max_len)",
                lhs: vec![batch.batch_size(), batch.seq_len()],
                rhs: vec![self.spec.max_len],
            });
        }
        let features = self.body_forward(tape, bind, batch)?;
        let features = self.dropout.forward(tape, features, mode, rng)?;
        self.head.forward(tape, bind, features)
    }

    fn body_forward(&self, tape: &mut Tape, bind: &Binding, batch: &TokenBatch) -> Result<Var> {
        match &self.body {
            Body::Dnn(layers) => {
                let x = self.embedding.embed(tape, bind, batch)?;
                let mut h = tape.masked_mean_time(x, batch.mask())?;
                for layer in layers {
                    h = layer.forward(tape, bind, h)?;
                }
                Ok(h)
            }
            Body::Cnn(c1, c2) => {
                let k = c2.kernel_width();
                let padded = batch.padded_to(batch.seq_len().max(k));
                let x = self.embedding.embed(tape, bind, &padded)?;
                let h = c1.forward(tape, bind, x)?;
                let h = tape.relu(h)?;
                let h = c2.forward(tape, bind, h)?;
                let h = tape.relu(h)?;
                // a window counts when it ends on a real token, or is the
                // first window of a sentence shorter than the kernel
                let out_len = padded.seq_len() + 1 - k;
                let mask: Vec<bool> = batch
                    .lengths()
                    .iter()
                    .flat_map(|&n| (0..out_len).map(move |t| t + k - 1 < n.max(k)))
                    .collect();
                maxpool1d(tape, h, Some(&mask))
            }
            Body::Recurrent { encoder, attention } => {
                let x = self.embedding.embed(tape, bind, batch)?;
                let encoded = encoder.encode(tape, bind, x, batch.mask())?;
                match (attention, encoded.last_backward) {
                    (Some((pool, synth)), _) => {
                        let attended = pool.forward(tape, bind, encoded.states, batch.mask())?;
                        synth.forward(tape, bind, attended.pooled)
                    }
                    (None, Some(backward)) => tape.concat(&[encoded.last_forward, backward], 1),
                    (None, None) => Ok(encoded.last_forward),
                }
            }
        }
    }

    /// Inference-mode probabilities `[batch × 3]`.
    pub fn probabilities(&self, batch: &TokenBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let p = self.forward(&mut tape, &bind, &batch.trimmed(), Mode::Infer, None)?;
        Ok(tape.value(p).clone())
    }

    pub fn predict(&self, batch: &TokenBatch) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.probabilities(batch)?))
    }
}

/// Row-wise argmax of a `[n × c]` tensor; ties go to the lowest index.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let c = *probs.shape().last().unwrap_or(&1);
    probs
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::uniform;

    pub(crate) fn small_spec(kind: ModelKind) -> ModelSpec {
        ModelSpec {
            embedding_dim: 4,
            dnn_dims: vec![5, 4, 3],
            lstm_hidden: 3,
            conv_filters: 4,
            max_len: 16,
            ..ModelSpec::new(kind)
        }
    }

    pub(crate) fn table(vocab: usize, dim: usize, seed: u64) -> Tensor {
        let mut data = uniform(vec![vocab, dim], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).into_vec();
        data[..dim].fill(0.0);
        Tensor::new(vec![vocab, dim], data).unwrap()
    }

    fn rows_sum_to_one(p: &Tensor) {
        for row in p.data().chunks(3) {
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn parse_kinds() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!(matches!("transformer".parse::<ModelKind>(), Err(ModelError::Config(_))));
    }

    #[test]
    fn dnn_parameter_count() {
        let m = build_model(&ModelSpec::new(ModelKind::Dnn), table(10, 300, 0), 1).unwrap();
        let expected = 300 * 128 + 128 + 128 * 64 + 64 + 64 * 32 + 32 + 32 * 3 + 3;
        assert_eq!(m.params().trainable_scalars(), expected);
    }

    #[test]
    fn lstm_head_reads_hidden_64() {
        let m = build_model(&ModelSpec::new(ModelKind::Lstm), table(10, 300, 0), 1).unwrap();
        assert_eq!(m.head.in_dim(), 64);
        let b = build_model(&ModelSpec::new(ModelKind::Bilstm), table(10, 300, 0), 1).unwrap();
        assert_eq!(b.head.in_dim(), 128);
    }

    #[test]
    fn attention_model_has_one_context_vector() {
        let m = build_model(&ModelSpec::new(ModelKind::BilstmAttention), table(10, 300, 0), 1).unwrap();
        let contexts: Vec<_> = m.params().entries().iter().filter(|e| e.name.ends_with("mu_w")).collect();
        assert_eq!(contexts.len(), 1);
        assert_eq!(contexts[0].value.shape(), &[128]);
    }

    #[test]
    fn table_dim_must_match_spec() {
        let err = build_model(&ModelSpec::new(ModelKind::Dnn), table(10, 200, 0), 1).unwrap_err();
        assert!(matches!(err, ModelError::Config(_)));
        let spec = ModelSpec { classes: 2, ..ModelSpec::new(ModelKind::Dnn) };
        assert!(build_model(&spec, table(10, 300, 0), 1).is_err());
    }

    #[test]
    fn fresh_models_emit_distributions() {
        let batch = TokenBatch::from_sequences(&[vec![1, 2, 3], vec![4], vec![1, 2, 3]]).unwrap();
        for kind in ModelKind::ALL {
            let m = build_model(&small_spec(kind), table(6, 4, 2), 3).unwrap();
            let p = m.probabilities(&batch).unwrap();
            assert_eq!(p.shape(), &[3, 3]);
            rows_sum_to_one(&p);
            assert_eq!(&p.data()[..3], &p.data()[6..], "{kind}: identical sentences differ");
            assert_eq!(p, m.probabilities(&batch).unwrap(), "{kind}: infer not deterministic");
        }
    }

    #[test]
    fn trailing_padding_does_not_change_output() {
        let seqs = vec![vec![1, 2, 3, 4], vec![5], vec![2, 2]];
        let batch = TokenBatch::from_sequences(&seqs).unwrap();
        for kind in ModelKind::ALL {
            let m = build_model(&small_spec(kind), table(6, 4, 7), 8).unwrap();
            let mut tape = Tape::new();
            let bind = m.params().bind(&mut tape);
            let a = m.forward(&mut tape, &bind, &batch, Mode::Infer, None).unwrap();
            let b = m.forward(&mut tape, &bind, &batch.padded_to(9), Mode::Infer, None).unwrap();
            let diff = tape.value(a).max_abs_diff(tape.value(b)).unwrap();
            assert!(diff < 1e-9, "{kind}: {diff}");
        }
    }

    #[test]
    fn dnn_ignores_token_order() {
        let m = build_model(&small_spec(ModelKind::Dnn), table(6, 4, 7), 8).unwrap();
        let a = m.probabilities(&TokenBatch::from_sequences(&[vec![1, 2, 3, 5]]).unwrap()).unwrap();
        let b = m.probabilities(&TokenBatch::from_sequences(&[vec![5, 3, 1, 2]]).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn too_long_is_shape_error() {
        let m = build_model(&small_spec(ModelKind::Lstm), table(6, 4, 7), 8).unwrap();
        let b = TokenBatch::from_sequences(&[vec![1; 17]]).unwrap();
        assert!(matches!(m.probabilities(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn argmax_ties_go_low() {
        let p = Tensor::from_rows(&[&[0.2, 0.5, 0.3], &[0.4, 0.4, 0.2], &[0.1, 0.3, 0.6]]).unwrap();
        assert_eq!(argmax_rows(&p), vec![1, 0, 2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn predict_invariant_under_monotone_logit_rescaling(
                logits in proptest::collection::vec(-5.0f64..5.0, 3 * 4),
                scale in 0.1f64..10.0,
                shift in -3.0f64..3.0,
            ) {
                let t = Tensor::new(vec![4, 3], logits).unwrap();
                let p = crate::autodiff::softmax_last_axis(&t).unwrap();
                let q = crate::autodiff::softmax_last_axis(&t.map(|v| scale * v + shift)).unwrap();
                prop_assert_eq!(argmax_rows(&p), argmax_rows(&q));
                prop_assert_eq!(argmax_rows(&t), argmax_rows(&p));
            }
        }
    }
}
