//! Shared fixtures for the benchmarks.

use lift_core::corpus::{self, Task};
use lift_core::{Denoiser, ModelConfig, TokenSequence, Vocabulary};

/// Addition corpus, its vocabulary and a freshly initialised desk-size model.
pub fn fixture(count: usize) -> (Vocabulary, Vec<TokenSequence>, Denoiser) {
    let examples = corpus::generate_synthetic(Task::AdditionCot, count, 7).expect("corpus");
    let vocab = Vocabulary::build(&examples, corpus::Tokenization::Char).expect("vocab");
    let data = vocab.encode_all(&examples).expect("encode");
    let model = Denoiser::new(ModelConfig::desk(vocab.len()), 0).expect("model");
    (vocab, data, model)
}
