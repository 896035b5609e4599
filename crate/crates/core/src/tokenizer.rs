//! Byte-level BPE compatible with GPT-2 vocabulary and merges files, plus
//! the word and sentence alignment that window construction relies on.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::sync::OnceLock;

use fancy_regex::Regex;
use serde_json::Value;

use crate::error::{Error, Result};

/// GPT-2 pre-tokenization pattern.
const PRETOKENIZE: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

pub const END_OF_TEXT: &str = "<|endoftext|>";

fn pretokenizer() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(PRETOKENIZE).expect("static pattern"))
}

/// The reversible byte → printable-char table used by GPT-2.
pub fn byte_encoder() -> &'static [char; 256] {
    static TABLE: OnceLock<[char; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let printable = |b: u32| {
            (u32::from(b'!')..=u32::from(b'~')).contains(&b)
                || (0xA1..=0xAC).contains(&b)
                || (0xAE..=0xFF).contains(&b)
        };
        let mut table = ['\0'; 256];
        let mut shifted = 0u32;
        for b in 0..256u32 {
            let c = if printable(b) {
                b
            } else {
                shifted += 1;
                255 + shifted
            };
            table[b as usize] = char::from_u32(c).expect("valid scalar");
        }
        table
    })
}

fn byte_decoder() -> &'static HashMap<char, u8> {
    static TABLE: OnceLock<HashMap<char, u8>> = OnceLock::new();
    TABLE.get_or_init(|| {
        byte_encoder()
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect()
    })
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.merges == other.merges
    }
}

impl Vocabulary {
    /// Build from tokens listed in id order and merges in priority order.
    pub fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (id, token) in tokens.iter().enumerate() {
            if ids.insert(token.clone(), id as u32).is_some() {
                return Err(Error::Integrity(format!("token {token:?} listed twice")));
            }
        }
        let vocab = Vocabulary {
            ranks: merges
                .iter()
                .enumerate()
                .map(|(rank, pair)| (pair.clone(), rank))
                .collect(),
            tokens,
            ids,
            merges,
        };
        vocab.check_merges()?;
        Ok(vocab)
    }

    fn check_merges(&self) -> Result<()> {
        let alphabet: HashSet<char> = byte_encoder().iter().copied().collect();
        let mut produced: HashSet<String> = HashSet::new();
        for (rank, (a, b)) in self.merges.iter().enumerate() {
            for part in [a, b] {
                let mut chars = part.chars();
                let single_byte = matches!((chars.next(), chars.next()), (Some(c), None) if alphabet.contains(&c));
                if !(single_byte || self.ids.contains_key(part) || produced.contains(part)) {
                    return Err(Error::Integrity(format!(
                        "merge {rank} references unknown symbol {part:?}"
                    )));
                }
            }
            produced.insert(format!("{a}{b}"));
        }
        Ok(())
    }

    /// Load a `vocab.json` (token → id) and `merges.txt` pair.
    pub fn load(vocab_file: &Path, merges_file: &Path) -> Result<Self> {
        let text = fs::read_to_string(vocab_file).map_err(|e| Error::io(vocab_file, e))?;
        let parsed: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: vocab_file.to_owned(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let Value::Object(map) = parsed else {
            return Err(Error::Parse {
                path: vocab_file.to_owned(),
                line: 1,
                message: "expected a JSON object mapping token to id".into(),
            });
        };
        let mut slots: Vec<Option<String>> = vec![None; map.len()];
        for (token, id) in map {
            let id = id.as_u64().ok_or_else(|| {
                Error::Integrity(format!("id of token {token:?} is not a non-negative integer"))
            })? as usize;
            let slot = slots.get_mut(id).ok_or_else(|| {
                Error::Integrity(format!("id {id} of token {token:?} outside dense range"))
            })?;
            if let Some(prev) = slot {
                return Err(Error::Integrity(format!(
                    "duplicate id {id} for tokens {prev:?} and {token:?}"
                )));
            }
            *slot = Some(token);
        }
        // Every slot filled follows from the pigeonhole principle once
        // duplicates and out-of-range ids are excluded.
        let tokens = slots.into_iter().map(Option::unwrap).collect();

        let text = fs::read_to_string(merges_file).map_err(|e| Error::io(merges_file, e))?;
        let mut merges = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if (idx == 0 && line.starts_with('#')) || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_owned(), b.to_owned()))
                }
                _ => {
                    return Err(Error::Parse {
                        path: merges_file.to_owned(),
                        line: idx + 1,
                        message: format!("expected two space-separated symbols, got {line:?}"),
                    })
                }
            }
        }
        Self::from_parts(tokens, merges)
    }

    /// Write the vocabulary back out in the same two-file format.
    pub fn save(&self, vocab_file: &Path, merges_file: &Path) -> Result<()> {
        let map: serde_json::Map<String, Value> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(id, t)| (t.clone(), Value::from(id)))
            .collect();
        let json = serde_json::to_string(&Value::Object(map)).expect("string keys");
        fs::write(vocab_file, json).map_err(|e| Error::io(vocab_file, e))?;
        let mut merges = String::from("#version: 0.2\n");
        for (a, b) in &self.merges {
            merges.push_str(a);
            merges.push(' ');
            merges.push_str(b);
            merges.push('\n');
        }
        fs::write(merges_file, merges).map_err(|e| Error::io(merges_file, e))
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// True when every single byte has its own token, which makes `encode`
    /// total over arbitrary input.
    pub fn is_byte_complete(&self) -> bool {
        byte_encoder()
            .iter()
            .all(|c| self.ids.contains_key(c.to_string().as_str()))
    }

    fn bpe(&self, piece: &str) -> Vec<String> {
        let mut symbols: Vec<String> = piece
            .bytes()
            .map(|b| byte_encoder()[b as usize].to_string())
            .collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == a && &symbols[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    /// Tokenize `text`. Words are maximal runs of non-whitespace; a sentence
    /// ends at a word whose last character is `.`, `!` or `?`.
    pub fn encode(&self, text: &str) -> Result<TokenizedText> {
        self.encode_with_sentences(text, None)
    }

    /// Tokenize a word list joined by single spaces. `sentence_ids`, when
    /// given, overrides the punctuation heuristic: a new sentence starts
    /// wherever the id changes.
    pub fn encode_words<S: AsRef<str>>(
        &self,
        words: &[S],
        sentence_ids: Option<&[u64]>,
    ) -> Result<TokenizedText> {
        for (i, w) in words.iter().enumerate() {
            let w = w.as_ref();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!(
                    "word {i} ({w:?}) is empty or contains whitespace"
                )));
            }
        }
        if let Some(ids) = sentence_ids {
            if ids.len() != words.len() {
                return Err(Error::Data(format!(
                    "{} sentence ids for {} words",
                    ids.len(),
                    words.len()
                )));
            }
        }
        let text = words
            .iter()
            .map(AsRef::as_ref)
            .collect::<Vec<_>>()
            .join(" ");
        self.encode_with_sentences(&text, sentence_ids)
    }

    fn encode_with_sentences(
        &self,
        text: &str,
        sentence_ids: Option<&[u64]>,
    ) -> Result<TokenizedText> {
        let mut token_ids = Vec::new();
        let mut token_offsets = Vec::new();
        for piece in pretokenizer().find_iter(text) {
            let piece = piece.map_err(|e| Error::Data(format!("pre-tokenizer: {e}")))?;
            let mut start = piece.start();
            for symbol in self.bpe(piece.as_str()) {
                let id = self.token_id(&symbol).ok_or_else(|| {
                    Error::Data(format!("symbol {symbol:?} missing from vocabulary"))
                })?;
                let len = symbol.chars().count();
                token_ids.push(id);
                token_offsets.push(start..start + len);
                start += len;
            }
        }

        let words = word_ranges(text);
        let word_spans = align_words(&words, &token_offsets);
        let ends_sentence: Vec<bool> = match sentence_ids {
            Some(ids) => (0..words.len())
                .map(|w| w + 1 == words.len() || ids[w] != ids[w + 1])
                .collect(),
            None => words
                .iter()
                .enumerate()
                .map(|(w, r)| {
                    w + 1 == words.len() || matches!(text[r.clone()].chars().last(), Some('.' | '!' | '?'))
                })
                .collect(),
        };
        let mut sentence_spans = Vec::new();
        let mut first = 0;
        for (w, &end) in ends_sentence.iter().enumerate() {
            if end {
                sentence_spans.push((first, w));
                first = w + 1;
            }
        }
        Ok(TokenizedText {
            token_ids,
            token_offsets,
            word_spans,
            sentence_spans,
        })
    }

    /// Byte-exact inverse of `encode` on its outputs.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let token = self.token(id).ok_or_else(|| {
                Error::Range(format!("token id {id} >= vocab size {}", self.vocab_size()))
            })?;
            for c in token.chars() {
                match byte_decoder().get(&c) {
                    Some(&b) => bytes.push(b),
                    None => bytes.extend_from_slice(c.to_string().as_bytes()),
                }
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

fn word_ranges(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push(s..i);
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..text.len());
    }
    out
}

/// Assign each token to the word its bytes overlap. Whitespace-only tokens
/// are the leading space of the next word's pre-token, so they join the
/// following word (the last word when nothing follows).
fn align_words(words: &[Range<usize>], tokens: &[Range<usize>]) -> Vec<(usize, usize)> {
    if words.is_empty() {
        return Vec::new();
    }
    let mut owner = Vec::with_capacity(tokens.len());
    let mut w = 0;
    for tok in tokens {
        while w < words.len() && words[w].end <= tok.start {
            w += 1;
        }
        let hit = w < words.len() && words[w].start < tok.end;
        owner.push(hit.then_some(w));
    }
    let mut spans = vec![(usize::MAX, 0); words.len()];
    let mut next = words.len() - 1;
    for (t, o) in owner.iter().enumerate().rev() {
        if let Some(o) = *o {
            next = o;
        }
        let span = &mut spans[next];
        span.0 = t;
        span.1 = span.1.max(t);
    }
    spans
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenizedText {
    pub token_ids: Vec<u32>,
    /// Byte range of each token in the source text.
    pub token_offsets: Vec<Range<usize>>,
    /// Inclusive `[first_token, last_token]` per word.
    pub word_spans: Vec<(usize, usize)>,
    /// Inclusive `[first_word, last_word]` per sentence.
    pub sentence_spans: Vec<(usize, usize)>,
}

impl TokenizedText {
    pub fn n_tokens(&self) -> usize {
        self.token_ids.len()
    }

    pub fn n_words(&self) -> usize {
        self.word_spans.len()
    }

    pub fn sentence_of_word(&self, word: usize) -> Option<usize> {
        self.sentence_spans
            .iter()
            .position(|&(a, b)| (a..=b).contains(&word))
    }

    /// Token range `[first, last]` of a sentence.
    pub fn sentence_tokens(&self, sentence: usize) -> (usize, usize) {
        let (a, b) = self.sentence_spans[sentence];
        (self.word_spans[a].0, self.word_spans[b].1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn byte_vocab(extra_merges: &[(&str, &str)]) -> Vocabulary {
        let mut tokens: Vec<String> = byte_encoder().iter().map(|c| c.to_string()).collect();
        let merges: Vec<(String, String)> = extra_merges
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        for (a, b) in &merges {
            tokens.push(format!("{a}{b}"));
        }
        Vocabulary::from_parts(tokens, merges).unwrap()
    }

    #[test]
    fn byte_encoder_matches_gpt2_table() {
        let enc = byte_encoder();
        assert_eq!(enc[b'!' as usize], '!');
        assert_eq!(enc[b' ' as usize], 'Ġ');
        assert_eq!(enc[b'\n' as usize], 'Ċ');
        assert_eq!(enc[0], 'Ā');
        let distinct: HashSet<_> = enc.iter().collect();
        assert_eq!(distinct.len(), 256);
    }

    #[test]
    fn empty_text_is_empty() {
        let v = byte_vocab(&[]);
        assert_eq!(v.encode("").unwrap(), TokenizedText::default());
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn single_letter() {
        let v = byte_vocab(&[]);
        let t = v.encode("a").unwrap();
        assert_eq!(t.token_ids.len(), 1);
        assert_eq!(t.word_spans, vec![(0, 0)]);
        assert_eq!(t.sentence_spans, vec![(0, 0)]);
    }

    #[test]
    fn merges_apply_by_priority() {
        let v = byte_vocab(&[("Ġ", "t"), ("h", "e"), ("Ġt", "he")]);
        let t = v.encode("the the").unwrap();
        let pieces: Vec<_> = t.token_ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(pieces, vec!["t", "he", "Ġthe"]);
        assert_eq!(t.word_spans, vec![(0, 1), (2, 2)]);
    }

    #[test]
    fn sentences_split_on_terminal_punctuation() {
        let v = byte_vocab(&[]);
        let t = v.encode("The lamb ate. It slept! Why? end").unwrap();
        assert_eq!(t.sentence_spans, vec![(0, 2), (3, 4), (5, 5), (6, 6)]);
    }

    #[test]
    fn explicit_sentence_ids_override_punctuation() {
        let v = byte_vocab(&[]);
        let t = v
            .encode_words(&["a.", "b", "c", "d"], Some(&[0, 0, 1, 1]))
            .unwrap();
        assert_eq!(t.sentence_spans, vec![(0, 1), (2, 3)]);
    }

    #[test]
    fn leading_whitespace_joins_first_word() {
        let v = byte_vocab(&[]);
        let t = v.encode("  hi  there  ").unwrap();
        assert_eq!(t.word_spans.first().unwrap().0, 0);
        assert_eq!(t.word_spans.last().unwrap().1, t.n_tokens() - 1);
        assert_eq!(v.decode(&t.token_ids).unwrap(), "  hi  there  ");
    }

    #[test]
    fn out_of_range_id_is_range_error() {
        let v = byte_vocab(&[]);
        assert!(matches!(v.decode(&[256]), Err(Error::Range(_))));
    }

    #[test]
    fn duplicate_token_is_integrity_error() {
        let r = Vocabulary::from_parts(vec!["a".into(), "a".into()], vec![]);
        assert!(matches!(r, Err(Error::Integrity(_))));
    }

    #[test]
    fn merge_with_unknown_symbol_is_rejected() {
        let r = Vocabulary::from_parts(vec!["a".into()], vec![("xy".into(), "a".into())]);
        assert!(matches!(r, Err(Error::Integrity(_))));
    }
}
