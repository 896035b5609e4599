//! Byte-level BPE with word and sentence alignment.
//!
//!     cargo run --example tokenize -- "The fox waited. Then it left!"
//!
//! Uses the built-in fixture vocabulary unless `VOCAB` and `MERGES` point
//! at GPT-2 style `vocab.json` / `merges.txt` files.

use std::path::PathBuf;

use ctxprobe::fixture;
use ctxprobe::tokenizer::Vocabulary;

fn main() -> ctxprobe::Result<()> {
    let text = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "The little prince asked: draw me a sheep. He smiled!".into());
    let vocab = match (std::env::var_os("VOCAB"), std::env::var_os("MERGES")) {
        (Some(v), Some(m)) => Vocabulary::load(&PathBuf::from(v), &PathBuf::from(m))?,
        _ => fixture::vocabulary(),
    };
    let t = vocab.encode(&text)?;
    println!("{} tokens, {} words, {} sentences", t.n_tokens(), t.n_words(), t.sentence_spans.len());
    for (w, &(first, last)) in t.word_spans.iter().enumerate() {
        let pieces: Vec<&str> = (first..=last).map(|i| vocab.token(t.token_ids[i]).unwrap_or("?")).collect();
        println!(
            "word {w:>2} sentence {} tokens {first}..={last} {:?}",
            t.sentence_of_word(w).unwrap_or(0),
            pieces
        );
    }
    assert_eq!(vocab.decode(&t.token_ids)?, text);
    println!("decode round trip ok");
    Ok(())
}
