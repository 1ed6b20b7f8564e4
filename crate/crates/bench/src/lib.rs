//! Fixtures shared by the benchmarks.

use neurodesc::captioner::{Captioner, DecoderConfig};
use neurodesc::featpool::FeatureBundle;
use neurodesc::text::Vocabulary;
use neurodesc::NeuronRef;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Untrained captioner at desk dimensions over a `words`-word vocabulary.
pub fn captioner(words: usize, feature_dim: usize) -> Captioner {
    let cfg = DecoderConfig {
        embed_dim: 32,
        hidden_dim: 64,
        attention_dim: 64,
        dropout: 0.0,
        ..DecoderConfig::default()
    };
    let vocab = Vocabulary::from_words((0..words).map(|i| format!("w{i}")));
    Captioner::new(cfg, vocab, feature_dim, "bench").expect("valid config")
}

/// Random bundle of `k` vectors.
pub fn bundle(k: usize, dim: usize, seed: u64) -> FeatureBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors = (0..k).map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
    FeatureBundle::from_vectors(NeuronRef::new("bench", "layer", 0), "bench", vectors).expect("non-empty")
}
