//! Seeded synthetic corpora and embeddings.
//!
//! * [`order_task`]: every sentence holds the same bag of special tokens,
//!   a pivot `P` and two markers `M`, as a contiguous run inside random
//!   filler. The class is the number of markers before the pivot
//!   (`P M M` → 0, `M P M` → 1, `M M P` → 2). Only word order separates
//!   the classes.
//! * [`separable_task`]: each class has its own keywords, so any of the
//!   architectures can fit it exactly.

use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Example, Label, Vocabulary};
use crate::layers::uniform;
use crate::tensor::Tensor;

pub const PIVOT: &str = "pivot";
pub const MARKER: &str = "marker";
const FILLERS: usize = 24;

fn filler(i: usize) -> String {
    format!("f{i:02}")
}

fn label_of(i: usize) -> Label {
    Label::ALL[i % 3]
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    /// Every word that occurs, in a fixed order.
    pub words: Vec<String>,
}

fn order_sentence(class: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut run = vec![MARKER.to_string(), MARKER.to_string()];
    run.insert(class, PIVOT.to_string());
    let fill = rng.gen_range(2..=7);
    let at = rng.gen_range(0..=fill);
    let mut tokens: Vec<String> = (0..fill).map(|_| filler(rng.gen_range(0..FILLERS))).collect();
    tokens.splice(at..at, run);
    tokens
}

/// Order-determined 3-class corpus with balanced labels.
pub fn order_task(n_train: usize, n_test: usize, seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |prefix: &str, n: usize| -> Vec<Example> {
        (0..n)
            .map(|i| {
                let label = label_of(i);
                let tokens = order_sentence(label.index(), &mut rng);
                Example {
                    id: format!("{prefix}{i}"),
                    label,
                    tokens,
                    context: None,
                }
            })
            .collect()
    };
    let train = make("tr", n_train);
    let test = make("te", n_test);
    let mut words: Vec<String> = (0..FILLERS).map(filler).collect();
    words.extend([PIVOT.to_string(), MARKER.to_string()]);
    SyntheticCorpus { train, test, words }
}

/// Keyword-separable corpus: class `c` sentences contain one of class `c`'s
/// keywords among fillers.
pub fn separable_task(n: usize, seed: u64) -> SyntheticCorpus {
    const KEYS: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key = |c: usize, k: usize| format!("k{c}_{k}");
    let train = (0..n)
        .map(|i| {
            let label = label_of(i);
            let fill = rng.gen_range(1..=5);
            let mut tokens: Vec<String> = (0..fill).map(|_| filler(rng.gen_range(0..FILLERS))).collect();
            let at = rng.gen_range(0..=fill);
            tokens.insert(at, key(label.index(), rng.gen_range(0..KEYS)));
            Example {
                id: format!("s{i}"),
                label,
                tokens,
                context: None,
            }
        })
        .collect();
    let mut words: Vec<String> = (0..FILLERS).map(filler).collect();
    words.extend((0..3).flat_map(|c| (0..KEYS).map(move |k| key(c, k))));
    SyntheticCorpus {
        train,
        test: Vec::new(),
        words,
    }
}

/// `n` examples of random filler text with cycling labels, ids `"{prefix}{i}"`.
pub fn noise_examples(n: usize, prefix: &str, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(3..=12);
            Example {
                id: format!("{prefix}{i}"),
                label: label_of(i),
                tokens: (0..len).map(|_| format!("n{}", rng.gen_range(0..5000))).collect(),
                context: None,
            }
        })
        .collect()
}

/// Replaces the text of `k` randomly chosen test examples with the text of
/// random training examples. Returns the ids of the planted test examples.
pub fn plant_overlaps(train: &[Example], test: &mut [Example], k: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots: Vec<usize> = (0..test.len()).collect();
    slots.shuffle(&mut rng);
    let mut planted: Vec<usize> = slots.into_iter().take(k).collect();
    planted.sort_unstable();
    for &i in &planted {
        test[i].tokens = train[rng.gen_range(0..train.len())].tokens.clone();
    }
    planted.into_iter().map(|i| test[i].id.clone()).collect()
}

/// Vocabulary over `words` and a table whose rows are uniform(-0.5, 0.5),
/// with the zero OOV row first.
pub fn random_embeddings(words: &[String], dim: usize, seed: u64) -> (Vocabulary, Tensor) {
    let vocab = Vocabulary::from_words(words);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; dim];
    data.extend(uniform(vec![vocab.len() - 1, dim], 0.5, &mut rng).into_vec());
    let table = Tensor::new(vec![vocab.len(), dim], data).expect("rows × dim");
    (vocab, table)
}

/// Writes `table` (minus the OOV row) in word2vec text format.
pub fn write_word2vec(vocab: &Vocabulary, table: &Tensor, mut out: impl Write) -> io::Result<()> {
    let dim = table.shape()[1];
    writeln!(out, "{} {dim}", vocab.len() - 1)?;
    for id in 1..vocab.len() {
        write!(out, "{}", vocab.word(id).expect("id < len"))?;
        for v in &table.data()[id * dim..(id + 1) * dim] {
            write!(out, " {v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_embeddings;
    use std::collections::BTreeMap;

    #[test]
    fn order_task_bags_match_across_classes() {
        let c = order_task(300, 30, 1);
        assert_eq!((c.train.len(), c.test.len()), (300, 30));
        for ex in &c.train {
            let count = |w: &str| ex.tokens.iter().filter(|t| *t == w).count();
            assert_eq!((count(PIVOT), count(MARKER)), (1, 2));
            let p = ex.tokens.iter().position(|t| t == PIVOT).unwrap();
            let before = ex.tokens[..p].iter().filter(|t| *t == MARKER).count();
            assert_eq!(before, ex.label.index());
        }
        let mut per_class: BTreeMap<Label, usize> = BTreeMap::new();
        c.train.iter().for_each(|e| *per_class.entry(e.label).or_default() += 1);
        assert_eq!(per_class.values().copied().collect::<Vec<_>>(), vec![100, 100, 100]);
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(order_task(20, 5, 3).train, order_task(20, 5, 3).train);
        assert_ne!(order_task(20, 5, 3).train, order_task(20, 5, 4).train);
        assert_eq!(separable_task(60, 2).train, separable_task(60, 2).train);
    }

    #[test]
    fn separable_keywords_identify_class() {
        let c = separable_task(60, 0);
        for ex in &c.train {
            let key = ex.tokens.iter().find(|t| t.starts_with('k')).unwrap();
            assert_eq!(key[1..2].parse::<usize>().unwrap(), ex.label.index());
        }
    }

    #[test]
    fn planted_overlaps_are_returned() {
        let train = noise_examples(50, "a", 1);
        let mut test = noise_examples(40, "b", 2);
        let ids = plant_overlaps(&train, &mut test, 7, 3);
        assert_eq!(ids.len(), 7);
        let removed = crate::data::dedupe_overlap(&train, &test).removed;
        assert_eq!(removed, ids);
    }

    #[test]
    fn word2vec_roundtrip() {
        let words: Vec<String> = ["x", "y", "z"].map(String::from).to_vec();
        let (vocab, table) = random_embeddings(&words, 5, 9);
        let mut buf = Vec::new();
        write_word2vec(&vocab, &table, &mut buf).unwrap();
        let (v2, t2) = parse_embeddings(buf.as_slice(), 5).unwrap();
        assert_eq!(v2.hash(), vocab.hash());
        assert_eq!(t2, table);
    }
}
