//! Neural building blocks. Layers own [`ParamId`]s into a shared
//! [`ParamStore`] and emit operations onto a [`Tape`](crate::Tape).

pub mod attention;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod embedding;
pub mod params;
pub mod recurrent;

pub use attention::{Attended, AttentionPooling};
pub use conv::{maxpool1d, Conv1DLayer};
pub use dense::{Activation, DenseLayer};
pub use dropout::{DropoutLayer, Mode};
pub use embedding::{EmbeddingLayer, OOV_ID};
pub use params::{glorot_uniform, uniform, Binding, ParamEntry, ParamId, ParamStore};
pub use recurrent::{CellKind, CellState, Direction, EncodedSequence, GruCell, LstmCell, RecurrentCell, SequenceEncoder};

