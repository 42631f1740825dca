//! Fixtures shared by the kernel benchmarks.

use iur_core::dialogue::{ConnectionWordList, DialogueExample, TokenizationMode};
use iur_core::model::{ModelConfig, RunModel};
use iur_core::synth::{generate_synthetic, SyntheticSpec};
use iur_core::train::{build_vocabulary, toy_model_config, Rewriter};

pub fn examples(n: usize, seed: u64) -> Vec<DialogueExample> {
    generate_synthetic(&SyntheticSpec { num_examples: n, seed, ..SyntheticSpec::default() }).expect("valid spec")
}

/// An untrained rewriter over the vocabulary of `examples`.
pub fn untrained_rewriter(examples: &[DialogueExample], config: ModelConfig) -> Rewriter {
    let conn = ConnectionWordList::empty();
    let vocab = build_vocabulary(examples, &conn);
    let model = RunModel::new(ModelConfig { vocab_size: vocab.len(), ..config }, 1).expect("valid config");
    Rewriter { model, vocab, conn, k: 0, mode: TokenizationMode::Whitespace }
}

pub fn toy_rewriter(examples: &[DialogueExample]) -> Rewriter {
    untrained_rewriter(examples, toy_model_config())
}
