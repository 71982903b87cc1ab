//! Padded token-id batches shared by the data pipeline and the models.

use crate::tensor::TensorError;

/// A `[batch × len]` grid of token ids with a mask marking real positions.
/// Padding is always on the right and always uses id 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    mask: Vec<bool>,
    batch: usize,
    len: usize,
}

impl TokenBatch {
    /// Checks sizes and that every row's mask is a non-empty prefix.
    pub fn new(ids: Vec<usize>, mask: Vec<bool>, batch: usize, len: usize) -> Result<Self, TensorError> {
        if batch == 0 || len == 0 || ids.len() != batch * len || mask.len() != batch * len {
            return Err(TensorError::ShapeMismatch {
                op: "token batch",
                lhs: vec![batch, len],
                rhs: vec![ids.len(), mask.len()],
            });
        }
        for row in mask.chunks(len) {
            let real = row.iter().take_while(|&&m| m).count();
            if real == 0 || row[real..].iter().any(|&m| m) {
                return Err(TensorError::Contract(
                    "each mask row must be a non-empty prefix of real positions".into(),
                ));
            }
        }
        Ok(TokenBatch { ids, mask, batch, len })
    }

    /// Builds a right-padded batch from per-sentence id lists.
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self, TensorError> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend(s.iter().copied().chain(std::iter::repeat(0)).take(len));
            mask.extend((0..len).map(|t| t < s.len()));
        }
        TokenBatch::new(ids, mask, seqs.len(), len)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    /// Number of real tokens per row.
    pub fn lengths(&self) -> Vec<usize> {
        self.mask
            .chunks(self.len)
            .map(|r| r.iter().filter(|&&m| m).count())
            .collect()
    }

    /// Mask column `t` as one flag per row.
    pub fn mask_at(&self, t: usize) -> Vec<bool> {
        (0..self.batch).map(|b| self.mask[b * self.len + t]).collect()
    }

    /// Extends every row with padding up to `len` positions (no-op if
    /// already that long).
    pub fn padded_to(&self, len: usize) -> TokenBatch {
        if len <= self.len {
            return self.clone();
        }
        let mut ids = Vec::with_capacity(self.batch * len);
        let mut mask = Vec::with_capacity(self.batch * len);
        for b in 0..self.batch {
            let row = b * self.len..(b + 1) * self.len;
            ids.extend_from_slice(&self.ids[row.clone()]);
            ids.resize((b + 1) * len, 0);
            mask.extend_from_slice(&self.mask[row]);
            mask.resize((b + 1) * len, false);
        }
        TokenBatch { ids, mask, batch: self.batch, len }
    }

    /// Drops trailing columns that are padding in every row.
    pub fn trimmed(&self) -> TokenBatch {
        let longest = self.lengths().into_iter().max().unwrap_or(1);
        if longest == self.len {
            return self.clone();
        }
        let mut ids = Vec::with_capacity(self.batch * longest);
        let mut mask = Vec::with_capacity(self.batch * longest);
        for b in 0..self.batch {
            ids.extend_from_slice(&self.ids[b * self.len..b * self.len + longest]);
            mask.extend_from_slice(&self.mask[b * self.len..b * self.len + longest]);
        }
        TokenBatch { ids, mask, batch: self.batch, len: longest }
    }
}
