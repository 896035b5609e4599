//! Word annotation TSV: `word<TAB>onset<TAB>offset[<TAB>sentence_id]`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenizer::{TokenizedText, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct WordEvent {
    pub word: String,
    pub onset: f64,
    pub offset: f64,
    pub sentence_id: Option<u64>,
}

pub fn read_annotations(path: &Path) -> Result<Vec<WordEvent>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<WordEvent>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_owned(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let header: Vec<&str> = match lines.next() {
        Some((_, h)) => h.split('\t').collect(),
        None => return Err(parse_err(1, "missing header".into())),
    };
    let has_sentence = match header[..] {
        ["word", "onset", "offset"] => false,
        ["word", "onset", "offset", "sentence_id"] => true,
        _ => {
            return Err(parse_err(
                1,
                format!("header must be word/onset/offset[/sentence_id], got {header:?}"),
            ))
        }
    };
    let mut events = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != header.len() {
            return Err(parse_err(idx + 1, format!("expected {} fields", header.len())));
        }
        let number = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(idx + 1, format!("{what} {s:?} is not a finite number")))
        };
        let onset = number(fields[1], "onset")?;
        let offset = number(fields[2], "offset")?;
        if offset < onset {
            return Err(parse_err(idx + 1, "offset precedes onset".into()));
        }
        let sentence_id = if has_sentence {
            Some(fields[3].parse::<u64>().map_err(|e| {
                parse_err(idx + 1, format!("sentence_id {:?}: {e}", fields[3]))
            })?)
        } else {
            None
        };
        events.push(WordEvent {
            word: fields[0].to_owned(),
            onset,
            offset,
            sentence_id,
        });
    }
    Ok(events)
}

pub fn write_annotations(path: &Path, events: &[WordEvent]) -> Result<()> {
    let with_sentence = events.iter().all(|e| e.sentence_id.is_some()) && !events.is_empty();
    let mut out = String::from(if with_sentence {
        "word\tonset\toffset\tsentence_id\n"
    } else {
        "word\tonset\toffset\n"
    });
    for e in events {
        write!(out, "{}\t{:.3}\t{:.3}", e.word, e.onset, e.offset).unwrap();
        if with_sentence {
            write!(out, "\t{}", e.sentence_id.unwrap()).unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Tokenize annotation words, honouring explicit sentence ids when present.
pub fn tokenize_events(vocab: &Vocabulary, events: &[WordEvent]) -> Result<TokenizedText> {
    let words: Vec<&str> = events.iter().map(|e| e.word.as_str()).collect();
    let ids: Option<Vec<u64>> = events.iter().map(|e| e.sentence_id).collect();
    vocab.encode_words(&words, ids.as_deref())
}
