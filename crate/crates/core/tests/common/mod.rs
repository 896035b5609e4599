#![allow(dead_code)]

use std::path::PathBuf;

use ctxprobe::model::Checkpoint;
use ctxprobe::tokenizer::Vocabulary;
use serde_json::Value;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn tiny_checkpoint() -> Checkpoint {
    Checkpoint::load(&fixture_dir().join("tiny/model.ctxpw")).unwrap()
}

pub fn tiny_vocabulary() -> Vocabulary {
    let dir = fixture_dir().join("tiny");
    Vocabulary::load(&dir.join("vocab.json"), &dir.join("merges.txt")).unwrap()
}

pub fn reference() -> Value {
    let text = std::fs::read_to_string(fixture_dir().join("reference.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn as_u32s(v: &Value) -> Vec<u32> {
    v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as u32).collect()
}

pub fn as_matrix(v: &Value) -> Vec<Vec<f64>> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|row| row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect())
        .collect()
}

/// Largest elementwise absolute difference.
pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - y).abs()).fold(0.0, f64::max)
}

use ctxprobe::model::AttentionMask;
use rand::{Rng, RngCore};

/// One out-of-window trial: a random sequence, target and window size; every
/// token outside the window is replaced and the target row compared at every
/// layer. Returns the largest max-norm change.
pub fn out_of_window_trial(ckpt: &Checkpoint, rng: &mut impl RngCore) -> f64 {
    let vocab = ckpt.config.vocab_size as u32;
    let len = rng.random_range(2..=64usize);
    let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
    let target = rng.random_range(1..len);
    let n = rng.random_range(1..=target);
    let allowed: Vec<bool> = (0..len).map(|j| j + n > target && j <= target).collect();
    let mask = AttentionMask::from_bools(allowed.clone()).unwrap();
    let positions: Vec<usize> = (0..len).collect();
    let mutated: Vec<u32> = ids
        .iter()
        .zip(&allowed)
        .map(|(&id, &keep)| if keep { id } else { (id + rng.random_range(1..vocab)) % vocab })
        .collect();
    let a = ckpt.forward(&ids, &positions, &mask).unwrap();
    let b = ckpt.forward(&mutated, &positions, &mask).unwrap();
    (0..=ckpt.config.n_layers)
        .map(|l| {
            let (ra, rb) = (a.row(l, target).unwrap(), b.row(l, target).unwrap());
            ra.iter().zip(rb).map(|(x, y)| f64::from((x - y).abs())).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}
