use super::params::{Binding, ParamId, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::batch::TokenBatch;
use crate::error::ModelError;
use crate::tensor::{Result, Tensor};

/// Row id reserved for out-of-vocabulary tokens and padding.
pub const OOV_ID: usize = 0;

/// Lookup table `[vocab × dim]`. Row [`OOV_ID`] is all zeros and stays that
/// way: the trainer masks its gradient when the table is trainable.
#[derive(Clone, Debug)]
pub struct EmbeddingLayer {
    table: ParamId,
    vocab: usize,
    dim: usize,
    trainable: bool,
}

impl EmbeddingLayer {
    pub fn new(store: &mut ParamStore, name: &str, table: Tensor, trainable: bool) -> Result<Self, ModelError> {
        let [vocab, dim] = *table.shape() else {
            return Err(ModelError::config("embedding table must be [vocab × dim]"));
        };
        if table.data()[..dim].iter().any(|&v| v != 0.0) {
            return Err(ModelError::config("embedding row 0 (out-of-vocabulary) must be all zeros"));
        }
        if !table.all_finite() {
            return Err(ModelError::config("embedding table has non-finite entries"));
        }
        Ok(EmbeddingLayer {
            table: store.add(format!("{name}.table"), table, trainable)?,
            vocab,
            dim,
            trainable,
        })
    }

    pub fn table_id(&self) -> ParamId {
        self.table
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// `[batch × len]` ids → `[batch × len × dim]` vectors.
    pub fn embed(&self, tape: &mut Tape, bind: &Binding, batch: &TokenBatch) -> Result<Var> {
        let rows = tape.gather(bind.var(self.table), batch.ids())?;
        tape.reshape(rows, vec![batch.batch_size(), batch.seq_len(), self.dim])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorError;

    fn layer() -> (ParamStore, EmbeddingLayer) {
        let mut store = ParamStore::new();
        let table = Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 2.0], &[-3.0, 0.5]]).unwrap();
        let l = EmbeddingLayer::new(&mut store, "emb", table, false).unwrap();
        (store, l)
    }

    fn embed(store: &ParamStore, l: &EmbeddingLayer, b: &TokenBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let v = l.embed(&mut tape, &bind, b)?;
        Ok(tape.value(v).clone())
    }

    #[test]
    fn lookup_rows() {
        let (store, l) = layer();
        let b = TokenBatch::from_sequences(&[vec![2, 0, 1], vec![2, 2]]).unwrap();
        let out = embed(&store, &l, &b).unwrap();
        assert_eq!(out.shape(), &[2, 3, 2]);
        assert_eq!(&out.data()[..6], &[-3.0, 0.5, 0.0, 0.0, 1.0, 2.0]);
        // identical ids give identical rows
        assert_eq!(&out.data()[6..8], &out.data()[8..10]);
        // padding maps to the zero row
        assert_eq!(&out.data()[10..], &[0.0, 0.0]);
    }

    #[test]
    fn out_of_range_id() {
        let (store, l) = layer();
        let b = TokenBatch::from_sequences(&[vec![3]]).unwrap();
        assert_eq!(
            embed(&store, &l, &b).unwrap_err(),
            TensorError::IndexOutOfRange { index: 3, extent: 3 }
        );
    }

    #[test]
    fn nonzero_oov_row_rejected() {
        let mut store = ParamStore::new();
        let table = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 2.0]]).unwrap();
        assert!(EmbeddingLayer::new(&mut store, "emb", table, false).is_err());
    }
}
