//! Corpus and embedding loading, vectorization, and the split/dedupe
//! protocol.

mod corpus;
mod embeddings;

use std::collections::HashSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::batch::TokenBatch;

pub use corpus::{load_corpus, parse_corpus, write_corpus, Corpus, Example, Label, LineError};
pub use embeddings::{
    load_embeddings, load_embeddings_with_dim, parse_embeddings, Vocabulary, EMBEDDING_DIM, OOV_TOKEN,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
}

/// Examples as padded id rows. Row `i` occupies `ids[i*max_len..(i+1)*max_len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vectorized {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub labels: Vec<usize>,
    pub max_len: usize,
}

impl Vectorized {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `indices` as a batch trimmed to its longest sentence.
    pub fn batch(&self, indices: &[usize]) -> TokenBatch {
        let l = self.max_len;
        let mut ids = Vec::with_capacity(indices.len() * l);
        let mut mask = Vec::with_capacity(indices.len() * l);
        for &i in indices {
            ids.extend_from_slice(&self.ids[i * l..(i + 1) * l]);
            mask.extend_from_slice(&self.mask[i * l..(i + 1) * l]);
        }
        TokenBatch::new(ids, mask, indices.len(), l)
            .expect("vectorized rows are non-empty prefixes")
            .trimmed()
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Maps tokens to ids, right-padding with id 0 / mask `false` and keeping
/// only the first `max_len` tokens.
///
/// # Panics
/// If `max_len` is zero.
pub fn vectorize(examples: &[Example], vocab: &Vocabulary, max_len: usize) -> Vectorized {
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut out = Vectorized {
        ids: vec![0; examples.len() * max_len],
        mask: vec![false; examples.len() * max_len],
        labels: Vec::with_capacity(examples.len()),
        max_len,
    };
    for (i, ex) in examples.iter().enumerate() {
        for (t, tok) in ex.tokens.iter().take(max_len).enumerate() {
            out.ids[i * max_len + t] = vocab.id(tok);
            out.mask[i * max_len + t] = true;
        }
        out.labels.push(ex.label.index());
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub seed: u64,
}

/// Seeded shuffle, then the first ⌊0.8·N⌋ examples train and the rest
/// validate. `test` is left empty.
pub fn split_train_valid(examples: &[Example], seed: u64) -> Result<DatasetSplit, DataError> {
    let n = examples.len();
    if n < 5 {
        return Err(DataError::Contract(format!("need at least 5 examples to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 4 / 5;
    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect();
    Ok(DatasetSplit {
        train: pick(&order[..n_train]),
        validation: pick(&order[n_train..]),
        test: Vec::new(),
        seed,
    })
}

#[derive(Clone, Debug, Default)]
pub struct Dedupe {
    pub kept: Vec<Example>,
    /// Ids of the removed test examples, in file order.
    pub removed: Vec<String>,
}

/// Drops test examples whose sentence text also occurs in `train`.
pub fn dedupe_overlap(train: &[Example], test: &[Example]) -> Dedupe {
    let seen: HashSet<String> = train.iter().map(Example::text).collect();
    let mut out = Dedupe::default();
    for ex in test {
        if seen.contains(&ex.text()) {
            out.removed.push(ex.id.clone());
        } else {
            out.kept.push(ex.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(id: usize, tokens: &[&str]) -> Example {
        Example::new(id.to_string(), Label::ALL[id % 3], tokens)
    }

    fn many(n: usize) -> Vec<Example> {
        (0..n).map(|i| ex(i, &["w"])).collect()
    }

    #[test]
    fn padding_and_truncation() {
        let vocab = Vocabulary::from_words(["a", "b", "c", "d", "e", "f", "g"]);
        let v = vectorize(&[ex(0, &["a", "b", "c"]), ex(1, &["a", "b", "c", "d", "e", "f", "g"]), ex(2, &["zz", "yy"])], &vocab, 5);
        assert_eq!(&v.mask[..5], &[true, true, true, false, false]);
        assert_eq!(&v.ids[..5], &[1, 2, 3, 0, 0]);
        assert_eq!(&v.ids[5..10], &[1, 2, 3, 4, 5]);
        assert_eq!(&v.ids[10..15], &[0; 5]);
        assert_eq!(&v.mask[10..15], &[true, true, false, false, false]);
        assert_eq!(v.labels, vec![0, 1, 2]);
        let b = v.batch(&[0, 2]);
        assert_eq!(b.seq_len(), 3);
        assert_eq!(b.lengths(), vec![3, 2]);
    }

    #[test]
    fn split_sizes() {
        let s = split_train_valid(&many(14774), 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len()), (11819, 2955));
        let s = split_train_valid(&many(5), 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len()), (4, 1));
        assert!(matches!(split_train_valid(&many(4), 7), Err(DataError::Contract(_))));
    }

    #[test]
    fn split_is_deterministic() {
        let a = split_train_valid(&many(50), 3).unwrap();
        let b = split_train_valid(&many(50), 3).unwrap();
        assert_eq!(a.train, b.train);
        let c = split_train_valid(&many(50), 4).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn dedupe_cases() {
        let train = vec![ex(0, &["a", "b"]), ex(1, &["c"])];
        let disjoint = vec![ex(2, &["d"]), ex(3, &["a"])];
        let d = dedupe_overlap(&train, &disjoint);
        assert_eq!((d.kept.len(), d.removed.len()), (2, 0));
        let shared = vec![ex(4, &["d"]), ex(5, &["a", "b"])];
        let d = dedupe_overlap(&train, &shared);
        assert_eq!(d.kept.len(), 1);
        assert_eq!(d.removed, vec!["5"]);
    }

    proptest! {
        #[test]
        fn mask_marks_real_prefix(lens in proptest::collection::vec(1usize..12, 1..8), max_len in 1usize..10) {
            let examples: Vec<Example> = lens.iter().enumerate().map(|(i, &n)| ex(i, &vec!["t"; n])).collect();
            let v = vectorize(&examples, &Vocabulary::from_words(["t"]), max_len);
            for (i, &n) in lens.iter().enumerate() {
                for t in 0..max_len {
                    prop_assert_eq!(v.mask[i * max_len + t], t < n.min(max_len));
                }
            }
        }

        #[test]
        fn split_is_partition(n in 5usize..200, seed in any::<u64>()) {
            let s = split_train_valid(&many(n), seed).unwrap();
            prop_assert_eq!(s.train.len() + s.validation.len(), n);
            let ids: HashSet<&str> = s.train.iter().chain(&s.validation).map(|e| e.id.as_str()).collect();
            prop_assert_eq!(ids.len(), n);
        }

        #[test]
        fn dedupe_is_idempotent(train in proptest::collection::vec(0u8..6, 0..10), test in proptest::collection::vec(0u8..6, 0..10)) {
            let mk = |xs: &[u8], off: usize| -> Vec<Example> {
                xs.iter().enumerate().map(|(i, &x)| Example::new((off + i).to_string(), Label::Neutral, &[&x.to_string()])).collect()
            };
            let (tr, te) = (mk(&train, 0), mk(&test, 100));
            let once = dedupe_overlap(&tr, &te);
            let twice = dedupe_overlap(&tr, &once.kept);
            prop_assert_eq!(&twice.kept, &once.kept);
            prop_assert!(twice.removed.is_empty());
        }
    }
}
