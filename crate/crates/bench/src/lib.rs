//! Shared fixtures for the benchmarks.

use implicit_sent::data::{vectorize, Vectorized};
use implicit_sent::synthetic::{order_task, random_embeddings};
use implicit_sent::Tensor;

/// `n` order-task sentences vectorized against a `dim`-wide random table.
pub fn order_fixture(n: usize, dim: usize, seed: u64) -> (Tensor, Vectorized) {
    let corpus = order_task(n, 0, seed);
    let (vocab, table) = random_embeddings(&corpus.words, dim, seed);
    (table, vectorize(&corpus.train, &vocab, 64))
}
