//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `ISCKPT01`, a little-endian `u64` header length,
//! a JSON header, then every stored tensor as little-endian `f64`s in header
//! order. Only trainable tensors are stored; frozen embeddings come from the
//! embedding file at load time and are tied to the checkpoint by the
//! vocabulary hash.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, ClassifierModel, ModelSpec};
use crate::error::ModelError;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ISCKPT01";
const FORMAT: &str = "implicit-sent-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub vocab_hash: String,
    pub seed: u64,
    pub params: Vec<TensorMeta>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    tensors: Vec<Tensor>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_model(model: &ClassifierModel, vocab_hash: &str) -> Self {
        let store = model.params();
        let ids = store.trainable_ids();
        Checkpoint {
            header: CheckpointHeader {
                format: FORMAT.into(),
                version: VERSION,
                spec: model.spec().clone(),
                vocab_hash: vocab_hash.into(),
                seed: model.seed(),
                params: ids
                    .iter()
                    .map(|&id| TensorMeta {
                        name: store.entry(id).name.clone(),
                        shape: store.get(id).shape().to_vec(),
                    })
                    .collect(),
            },
            tensors: ids.iter().map(|&id| store.get(id).clone()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header is plain data");
        let floats: usize = self.tensors.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(header_len))
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| bad(format!("unreadable header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
        }
        let mut rest = &bytes[16 + header_len..];
        let mut tensors = Vec::with_capacity(header.params.len());
        for meta in &header.params {
            let n: usize = meta.shape.iter().product();
            if rest.len() < 8 * n {
                return Err(bad(format!("truncated data for {}", meta.name)));
            }
            let data = rest[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            rest = &rest[8 * n..];
            tensors.push(Tensor::new(meta.shape.clone(), data).map_err(|e| bad(format!("{}: {e}", meta.name)))?);
        }
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint { header, tensors })
    }

    /// Rebuilds the model on `table` and loads the stored tensors, checking
    /// the vocabulary hash and every name and shape against the spec.
    pub fn restore(&self, table: Tensor, vocab_hash: &str) -> Result<ClassifierModel, ModelError> {
        if self.header.vocab_hash != vocab_hash {
            return Err(bad(format!(
                "vocabulary hash mismatch: checkpoint was trained with {}, embeddings give {vocab_hash}",
                self.header.vocab_hash
            )));
        }
        let mut model = build_model(&self.header.spec, table, self.header.seed)?;
        let store = model.params_mut();
        let expected: Vec<String> = store.trainable_ids().iter().map(|&id| store.entry(id).name.clone()).collect();
        let stored: Vec<&str> = self.header.params.iter().map(|m| m.name.as_str()).collect();
        if expected != stored {
            return Err(bad(format!("parameter list {stored:?} does not match the spec's {expected:?}")));
        }
        for (meta, tensor) in self.header.params.iter().zip(&self.tensors) {
            let id = store.find(&meta.name).expect("names checked above");
            let slot = store.get_mut(id);
            if slot.shape() != tensor.shape() {
                return Err(bad(format!(
                    "{}: stored shape {:?}, spec requires {:?}",
                    meta.name,
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor.clone();
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &ClassifierModel, vocab_hash: &str, path: &Path) -> Result<(), ModelError> {
    fs::write(path, Checkpoint::from_model(model, vocab_hash).to_bytes()).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{small_spec, table};
    use super::*;
    use crate::batch::TokenBatch;
    use crate::models::ModelKind;

    fn perturbed(kind: ModelKind, trainable: bool) -> ClassifierModel {
        let spec = ModelSpec {
            trainable_embeddings: trainable,
            ..small_spec(kind)
        };
        let mut m = build_model(&spec, table(6, 4, 1), 2).unwrap();
        // move away from the initialization so a restore that silently
        // rebuilt from the seed would be caught
        for id in m.params().trainable_ids() {
            let t = m.params_mut().get_mut(id);
            let bumped = t.map(|v| v + 0.01);
            *t = bumped;
        }
        m
    }

    #[test]
    fn roundtrip_reproduces_predictions() {
        let batch = TokenBatch::from_sequences(&[vec![1, 2, 3], vec![5]]).unwrap();
        for kind in ModelKind::ALL {
            let m = perturbed(kind, false);
            let bytes = Checkpoint::from_model(&m, "h").to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap().restore(table(6, 4, 1), "h").unwrap();
            assert_eq!(m.probabilities(&batch).unwrap(), back.probabilities(&batch).unwrap());
            assert_eq!(Checkpoint::from_model(&back, "h").to_bytes(), bytes);
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = perturbed(ModelKind::Bilstm, false);
        save_checkpoint(&m, "h", &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.to_bytes(), std::fs::read(&path).unwrap());
        assert_eq!(ck.header.seed, 2);
        assert!(matches!(load_checkpoint(&dir.path().join("absent")), Err(ModelError::Io { .. })));
    }

    #[test]
    fn trainable_table_is_stored() {
        let m = perturbed(ModelKind::Dnn, true);
        let ck = Checkpoint::from_model(&m, "h");
        assert_eq!(ck.header.params[0].name, "embedding.table");
        let back = ck.restore(table(6, 4, 99), "h").unwrap();
        let id = back.embedding().table_id();
        assert_eq!(back.params().get(id), m.params().get(id));
    }

    #[test]
    fn vocab_hash_mismatch_refused() {
        let m = perturbed(ModelKind::Lstm, false);
        let ck = Checkpoint::from_model(&m, "abc");
        let err = ck.restore(table(6, 4, 1), "xyz").unwrap_err();
        assert!(err.to_string().contains("vocabulary hash mismatch"), "{err}");
    }

    #[test]
    fn corrupt_files_rejected() {
        let m = perturbed(ModelKind::Cnn, false);
        let bytes = Checkpoint::from_model(&m, "h").to_bytes();
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn shape_checked_against_spec() {
        let m = perturbed(ModelKind::Dnn, false);
        let mut ck = Checkpoint::from_model(&m, "h");
        ck.header.spec.dnn_dims = vec![6, 4, 3];
        assert!(matches!(ck.restore(table(6, 4, 1), "h"), Err(ModelError::Checkpoint(_))));
    }
}
