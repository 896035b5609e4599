//! How a context size turns into an input sequence and a key mask.
//!
//!     cargo run --example masked_windows

use ctxprobe::fixture;
use ctxprobe::masking::{build_windowed_input, WindowOptions, WindowScope};
use ctxprobe::tokenizer::END_OF_TEXT;

fn main() -> ctxprobe::Result<()> {
    let vocab = fixture::vocabulary();
    let text = vocab.encode("the rose was proud. the prince looked at the little rose for a long time.")?;
    let target = 9;
    let bos = vocab.token_id(END_OF_TEXT);
    let variants = [
        ("sentence", WindowOptions { scope: WindowScope::Sentence, bos_token: None }),
        ("document", WindowOptions { scope: WindowScope::Document, bos_token: None }),
        ("document + bos", WindowOptions { scope: WindowScope::Document, bos_token: bos }),
    ];
    for (label, options) in variants {
        println!("{label}:");
        for n in [1, 3, 8] {
            let w = build_windowed_input(&text, target, n, options)?;
            let mask: String = w.mask.as_slice().iter().map(|&a| if a { '#' } else { '.' }).collect();
            let t = w.target_token_index;
            println!("  n={n:<2} len {:>2} target {t:>2} {mask}", w.token_ids.len());
        }
    }
    Ok(())
}
