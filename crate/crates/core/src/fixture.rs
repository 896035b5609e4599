//! Deterministic tiny checkpoints, vocabularies and texts for tests, the
//! synthetic validation harness and the `fixture` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::model::{Checkpoint, LayerWeights, ModelConfig};
use crate::tokenizer::{byte_encoder, Vocabulary, END_OF_TEXT};

/// Word list for fixture vocabularies and generated texts.
pub const LEXICON: &[&str] = &[
    "the", "a", "little", "prince", "planet", "rose", "fox", "king", "star", "lamp",
    "lamplighter", "desert", "pilot", "sheep", "box", "baobab", "volcano", "sunset",
    "flower", "garden", "well", "water", "snake", "friend", "secret", "heart", "eyes",
    "drawing", "hat", "elephant", "boa", "grown", "ups", "number", "business", "man",
    "geographer", "explorer", "mountain", "echo", "train", "switchman", "merchant", "pill",
    "thirst", "night", "day", "morning", "evening", "sky", "light", "small", "great",
    "beautiful", "serious", "strange", "sad", "happy", "old", "young", "asked", "said",
    "looked", "saw", "loved", "tamed", "watered", "laughed", "cried", "walked", "found",
    "lost", "knew", "thought", "was", "is", "and", "of", "to", "in", "on", "with", "for",
    "he", "she", "it", "i", "you", "his", "her", "my", "very", "never", "always", "again",
];

/// Two layers, four heads, sixteen model dimensions.
pub fn tiny_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 16,
        vocab_size,
        max_positions: 512,
        layernorm_epsilon: 1e-5,
    }
}

/// Byte tokens, one left-to-right merge chain per lexicon word (with its
/// leading space), and a trailing end-of-text token.
pub fn vocabulary() -> Vocabulary {
    let mut tokens: Vec<String> = byte_encoder().iter().map(|c| c.to_string()).collect();
    let mut merges: Vec<(String, String)> = Vec::new();
    for word in LEXICON {
        let chars: Vec<String> = std::iter::once('Ġ')
            .chain(word.chars())
            .map(String::from)
            .collect();
        let mut left = chars[0].clone();
        for right in &chars[1..] {
            let merged = format!("{left}{right}");
            if !tokens.contains(&merged) {
                merges.push((left.clone(), right.clone()));
                tokens.push(merged.clone());
            }
            left = merged;
        }
    }
    tokens.push(END_OF_TEXT.to_owned());
    Vocabulary::from_parts(tokens, merges).expect("fixture vocabulary is well formed")
}

fn normal_vec(rng: &mut ChaCha20Rng, len: usize, scale: f32) -> Vec<f32> {
    (0..len)
        .map(|_| scale * rng.sample::<f32, _>(StandardNormal))
        .collect()
}

/// Deterministic random checkpoint. Embeddings have unit-scale entries and
/// linear maps are scaled by `1/sqrt(fan_in)`, so every sublayer contributes
/// to the residual stream at a comparable magnitude.
pub fn checkpoint(config: &ModelConfig, seed: u64) -> Checkpoint {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d = config.d_model;
    let m = config.d_mlp();
    let w_in = 1.0 / (d as f32).sqrt();
    let w_mlp = 1.0 / (m as f32).sqrt();
    let token_embedding = normal_vec(&mut rng, config.vocab_size * d, 1.0);
    let position_embedding = normal_vec(&mut rng, config.max_positions * d, 0.5);
    let near_one = |rng: &mut ChaCha20Rng| -> Vec<f32> {
        normal_vec(rng, d, 0.1).into_iter().map(|v| 1.0 + v).collect()
    };
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            ln1_gamma: near_one(&mut rng),
            ln1_beta: normal_vec(&mut rng, d, 0.1),
            attn_qkv_weight: normal_vec(&mut rng, d * 3 * d, w_in),
            attn_qkv_bias: normal_vec(&mut rng, 3 * d, 0.1),
            attn_out_weight: normal_vec(&mut rng, d * d, w_in),
            attn_out_bias: normal_vec(&mut rng, d, 0.1),
            ln2_gamma: near_one(&mut rng),
            ln2_beta: normal_vec(&mut rng, d, 0.1),
            mlp_in_weight: normal_vec(&mut rng, d * m, w_in),
            mlp_in_bias: normal_vec(&mut rng, m, 0.1),
            mlp_out_weight: normal_vec(&mut rng, m * d, w_mlp),
            mlp_out_bias: normal_vec(&mut rng, d, 0.1),
        })
        .collect();
    Checkpoint {
        config: config.clone(),
        token_embedding,
        position_embedding,
        layers,
        lnf_gamma: near_one(&mut rng),
        lnf_beta: normal_vec(&mut rng, d, 0.1),
        hash: Default::default(),
    }
}

/// The checkpoint paired with [`vocabulary`].
pub fn default_checkpoint(seed: u64) -> Checkpoint {
    checkpoint(&tiny_config(vocabulary().vocab_size()), seed)
}

/// Generated sentences of 4 to 14 lexicon words, each closed by a period.
pub fn text(n_words: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut words = Vec::with_capacity(n_words);
    while words.len() < n_words {
        let len = rng.random_range(4..=14).min(n_words - words.len());
        for i in 0..len {
            let mut w = LEXICON[rng.random_range(0..LEXICON.len())].to_owned();
            if i + 1 == len {
                w.push('.');
            }
            words.push(w);
        }
    }
    words
}
