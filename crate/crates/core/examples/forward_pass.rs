//! Masked forward pass on a deterministic tiny checkpoint. Tokens outside
//! the window can be replaced without moving the target's hidden state.
//!
//!     cargo run --example forward_pass

use ctxprobe::fixture;
use ctxprobe::model::AttentionMask;

fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

fn main() -> ctxprobe::Result<()> {
    let ckpt = fixture::default_checkpoint(0);
    let c = &ckpt.config;
    println!("{} layers, d_model {}, {} heads, vocab {}", c.n_layers, c.d_model, c.n_heads, c.vocab_size);
    println!("content hash {}", ckpt.content_hash()?);

    let ids: Vec<u32> = vec![262, 5, 300, 17, 411, 99, 2, 600, 42, 77];
    let positions: Vec<usize> = (0..ids.len()).collect();
    let (target, n) = (8, 3);
    let mask = AttentionMask::from_bools((0..ids.len()).map(|j| j + n > target && j <= target).collect())?;
    let h = ckpt.forward(&ids, &positions, &mask)?;
    for l in 0..=c.n_layers {
        println!("layer {l}: |h[target]| = {:.4}", norm(h.row(l, target)?));
    }

    let mut mutated = ids.clone();
    for id in &mut mutated[..=target - n] {
        *id = (*id + 1) % c.vocab_size as u32;
    }
    let g = ckpt.forward(&mutated, &positions, &mask)?;
    let diff = (0..=c.n_layers)
        .flat_map(|l| h.row(l, target).unwrap().iter().zip(g.row(l, target).unwrap()).map(|(a, b)| (a - b).abs()))
        .fold(0.0f32, f32::max);
    println!("max change after replacing out-of-window tokens: {diff:e}");
    Ok(())
}
