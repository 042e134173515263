//! Benchmark fixtures shared by the criterion targets.

use coleaf_core::synthdata::{generate_corpus, Corpus, CorpusSpec};

/// A desk-scale corpus of `n` videos.
pub fn desk_corpus(n: usize, seed: u64) -> Corpus {
    generate_corpus(&CorpusSpec::desk(n, seed))
        .expect("desk spec is valid")
        .corpus
}
