use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::DataError;
use crate::layers::OOV_ID;
use crate::tensor::Tensor;

pub const EMBEDDING_DIM: usize = 300;
pub const OOV_TOKEN: &str = "<oov>";

/// Word → id map. Id [`OOV_ID`] is reserved for unknown words and padding.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from words in id order, starting at id 1.
    /// Repeated words keep their first id.
    pub fn from_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut vocab = Vocabulary {
            words: vec![OOV_TOKEN.to_string()],
            index: HashMap::new(),
        };
        for w in words {
            vocab.insert(w.as_ref());
        }
        vocab
    }

    fn insert(&mut self, word: &str) -> bool {
        if self.index.contains_key(word) {
            return false;
        }
        self.index.insert(word.to_string(), self.words.len());
        self.words.push(word.to_string());
        true
    }

    /// Id of `word`, or [`OOV_ID`] when unknown.
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(OOV_ID)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }

    /// Hex SHA-256 over the words in id order, newline-terminated. Ties a
    /// checkpoint to the embedding file it was trained against.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reads word2vec text format (`count dim` header, then `word v1 … vdim`),
/// requiring `dim == expected_dim`. The returned table has the zero OOV row
/// prepended; duplicate words keep their first vector.
pub fn parse_embeddings(reader: impl BufRead, expected_dim: usize) -> Result<(Vocabulary, Tensor), DataError> {
    let mut lines = reader.lines().enumerate();
    let read_err = |line: usize, e: std::io::Error| DataError::Parse {
        line,
        message: e.to_string(),
    };
    let (count, dim) = loop {
        let Some((i, line)) = lines.next() else {
            return Err(DataError::Parse {
                line: 1,
                message: "missing `count dim` header".into(),
            });
        };
        let line = line.map_err(|e| read_err(i + 1, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts[..] {
            [c, d] => match (c.parse::<usize>(), d.parse::<usize>()) {
                (Ok(c), Ok(d)) => break (c, d),
                _ => {
                    return Err(DataError::Parse {
                        line: i + 1,
                        message: format!("bad header {line:?}"),
                    })
                }
            },
            _ => {
                return Err(DataError::Parse {
                    line: i + 1,
                    message: format!("header must be `count dim`, got {line:?}"),
                })
            }
        }
    };
    if dim != expected_dim {
        return Err(DataError::Config(format!(
            "embedding dimension {dim} does not match the required {expected_dim}"
        )));
    }
    let mut vocab = Vocabulary::from_words(std::iter::empty::<&str>());
    let mut data = vec![0.0; dim];
    let mut seen = 0;
    for (i, line) in lines {
        let line = line.map_err(|e| read_err(i + 1, e))?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ').filter(|s| !s.is_empty());
        let word = parts.next().expect("non-empty line");
        let values: Vec<f64> = parts
            .map(|v| match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(DataError::Parse {
                    line: i + 1,
                    message: format!("bad value {v:?} for {word:?}"),
                }),
            })
            .collect::<Result<_, _>>()?;
        if values.len() != dim {
            return Err(DataError::Parse {
                line: i + 1,
                message: format!("{word:?} has {} values, expected {dim}", values.len()),
            });
        }
        seen += 1;
        if vocab.insert(word) {
            data.extend(values);
        }
    }
    if seen != count {
        return Err(DataError::Parse {
            line: 1,
            message: format!("header announces {count} vectors but the file has {seen}"),
        });
    }
    let rows = vocab.len();
    let table = Tensor::new(vec![rows, dim], data).expect("rows × dim values collected");
    Ok((vocab, table))
}

pub fn load_embeddings_with_dim(path: &Path, expected_dim: usize) -> Result<(Vocabulary, Tensor), DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_embeddings(BufReader::new(file), expected_dim)
}

/// [`load_embeddings_with_dim`] at the standard 300 dimensions.
pub fn load_embeddings(path: &Path) -> Result<(Vocabulary, Tensor), DataError> {
    load_embeddings_with_dim(path, EMBEDDING_DIM)
}
