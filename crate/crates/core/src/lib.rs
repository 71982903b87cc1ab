pub mod autodiff;
pub mod batch;
pub mod data;
pub mod error;
pub mod gradcheck_suite;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use batch::TokenBatch;
pub use error::ModelError;
pub use models::{build_model, ClassifierModel, ModelKind, ModelSpec};
pub use tensor::{Tensor, TensorError};
