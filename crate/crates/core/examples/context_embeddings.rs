//! Word embeddings over the default context schedule, compared with the
//! embedding each word gets from its full sentence.
//!
//!     cargo run --release --example context_embeddings

use ctxprobe::fixture;
use ctxprobe::masking::{context_schedule, generate_embeddings, EmbeddingOptions, Pooling, WindowOptions};

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(x * y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(x * x)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(x * x)).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn main() -> ctxprobe::Result<()> {
    let ckpt = fixture::default_checkpoint(0);
    let vocab = fixture::vocabulary();
    let text = vocab.encode(&fixture::text(120, 1).join(" "))?;
    let options = EmbeddingOptions { layer: 2, pooling: Pooling::Last, window: WindowOptions::default() };
    let full = generate_embeddings(&ckpt, &text, text.n_tokens(), &options)?;
    println!("{} words, {} tokens", text.n_words(), text.n_tokens());
    for &n in context_schedule().sizes() {
        let set = generate_embeddings(&ckpt, &text, n, &options)?;
        let mean = (0..set.n_words).map(|w| cosine(set.row(w), full.row(w))).sum::<f64>() / set.n_words as f64;
        println!("n={n:>2}  mean cosine to full context {mean:.4}");
    }
    Ok(())
}
