//! Masked-attention generation: one (input sequence, attention mask) pair
//! per target token, and per-word embeddings that have seen exactly the
//! target plus its `n - 1` predecessors.

use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Tensor, EMBEDDINGS_MAGIC};
use crate::error::{Error, Result};
use crate::model::{AttentionMask, Checkpoint};
use crate::tokenizer::TokenizedText;

pub const DEFAULT_SCHEDULE: [usize; 21] = [
    1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 14, 16, 18, 20, 24, 28, 32, 36, 40, 45,
];

/// Strictly increasing context sizes, in tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ContextSchedule(Vec<usize>);

impl Default for ContextSchedule {
    fn default() -> Self {
        ContextSchedule(DEFAULT_SCHEDULE.to_vec())
    }
}

impl ContextSchedule {
    pub fn custom(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Config("context schedule is empty".into()));
        }
        if sizes[0] < 1 {
            return Err(Error::Config("context sizes must be >= 1".into()));
        }
        if sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "context schedule {sizes:?} is not strictly increasing"
            )));
        }
        if sizes.len() != DEFAULT_SCHEDULE.len() {
            log::warn!(
                "custom context schedule has {} sizes instead of {}",
                sizes.len(),
                DEFAULT_SCHEDULE.len()
            );
        }
        Ok(ContextSchedule(sizes))
    }

    pub fn sizes(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn position(&self, size: usize) -> Option<usize> {
        self.0.iter().position(|&s| s == size)
    }

    pub fn max(&self) -> usize {
        *self.0.last().expect("non-empty")
    }
}

impl TryFrom<Vec<usize>> for ContextSchedule {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::custom(v)
    }
}

impl From<ContextSchedule> for Vec<usize> {
    fn from(s: ContextSchedule) -> Self {
        s.0
    }
}

impl FromStr for ContextSchedule {
    type Err = Error;
    /// `default` or a comma-separated list.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "default" {
            return Ok(Self::default());
        }
        let sizes = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Config(format!("context size {p:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::custom(sizes)
    }
}

/// The default 21-size schedule spanning 1 to 45 tokens.
pub fn context_schedule() -> ContextSchedule {
    ContextSchedule::default()
}

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl ::std::str::FromStr for $name {
            type Err = $crate::Error;
            fn from_str(s: &str) -> $crate::Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err($crate::Error::Config(format!(
                        concat!("unknown ", stringify!($name), " {:?}"), other
                    ))),
                }
            }
        }
        impl ::std::fmt::Display for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(match self { $($name::$variant => $text,)+ })
            }
        }
    };
}
pub(crate) use string_enum;

/// How the rows of a multi-token word are reduced to one embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Last,
    Mean,
}
string_enum!(Pooling { Last => "last", Mean => "mean" });

/// Whether preceding sentences may be prepended to fill the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowScope {
    Sentence,
    #[default]
    Document,
}
string_enum!(WindowScope { Sentence => "sentence", Document => "document" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WindowOptions {
    pub scope: WindowScope,
    /// Token prepended to every input sequence and always attendable.
    pub bos_token: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowedInput {
    pub token_ids: Vec<u32>,
    pub positions: Vec<usize>,
    pub mask: AttentionMask,
    pub target_token_index: usize,
    pub target_word_index: usize,
    pub context_size: usize,
}

/// Window whose target is the last token of `target_word`.
pub fn build_windowed_input(
    text: &TokenizedText,
    target_word: usize,
    n: usize,
    options: WindowOptions,
) -> Result<WindowedInput> {
    let span = *text.word_spans.get(target_word).ok_or_else(|| {
        Error::Range(format!("word {target_word} outside text of {} words", text.n_words()))
    })?;
    build_for_token(text, target_word, span.1, n, options)
}

/// Window around an arbitrary token of `target_word`.
pub fn build_for_token(
    text: &TokenizedText,
    target_word: usize,
    target_token: usize,
    n: usize,
    options: WindowOptions,
) -> Result<WindowedInput> {
    if n < 1 {
        return Err(Error::Argument("context size must be >= 1".into()));
    }
    let sentence = text.sentence_of_word(target_word).ok_or_else(|| {
        Error::Range(format!("word {target_word} outside text of {} words", text.n_words()))
    })?;
    let mut first_sentence = sentence;
    if options.scope == WindowScope::Document {
        while first_sentence > 0 && target_token - text.sentence_tokens(first_sentence).0 < n - 1 {
            first_sentence -= 1;
        }
    }
    let first = text.sentence_tokens(first_sentence).0;
    let last = text.sentence_tokens(sentence).1;

    let offset = usize::from(options.bos_token.is_some());
    let mut token_ids = Vec::with_capacity(last - first + 1 + offset);
    token_ids.extend(options.bos_token);
    token_ids.extend_from_slice(&text.token_ids[first..=last]);

    let target = target_token - first + offset;
    let window_start = target.saturating_sub(n - 1).max(offset);
    let allowed = (0..token_ids.len())
        .map(|j| (offset == 1 && j == 0) || (window_start..=target).contains(&j))
        .collect();
    Ok(WindowedInput {
        positions: (0..token_ids.len()).collect(),
        token_ids,
        mask: AttentionMask::from_bools(allowed)?,
        target_token_index: target,
        target_word_index: target_word,
        context_size: n,
    })
}

impl WindowedInput {
    /// Hidden-state row of the target token at `layer`. Only the prefix up to
    /// the target is run: causal attention makes later tokens irrelevant and
    /// every row is computed independently, so the result is bit-identical
    /// to running the whole sequence.
    pub fn target_row(&self, ckpt: &Checkpoint, layer: usize) -> Result<Vec<f32>> {
        let t = self.target_token_index;
        let mask = AttentionMask::from_bools(self.mask.as_slice()[..=t].to_vec())?;
        let h = ckpt.forward(&self.token_ids[..=t], &self.positions[..=t], &mask)?;
        h.extract_layer(layer, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMetadata {
    pub context_size: usize,
    pub layer: usize,
    pub pooling: Pooling,
    pub window_scope: WindowScope,
    pub special_token: bool,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingOptions {
    pub layer: usize,
    pub pooling: Pooling,
    pub window: WindowOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub n_words: usize,
    pub d_model: usize,
    /// Row-major `[n_words × d_model]`.
    pub matrix: Vec<f32>,
    pub metadata: EmbeddingMetadata,
}

impl EmbeddingSet {
    pub fn row(&self, word: usize) -> &[f32] {
        &self.matrix[word * self.d_model..][..self.d_model]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(EMBEDDINGS_MAGIC);
        c.insert_field(
            "metadata",
            serde_json::to_value(&self.metadata).expect("metadata serializes"),
        );
        c.insert_tensor(
            "embeddings",
            Tensor::new(vec![self.n_words, self.d_model], self.matrix.clone())?,
        );
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Container::read(path, EMBEDDINGS_MAGIC)?;
        let metadata: EmbeddingMetadata = serde_json::from_value(c.field("metadata")?.clone())
            .map_err(|e| Error::Format(format!("{}: metadata: {e}", path.display())))?;
        let t = c.take_tensor("embeddings")?;
        let [n_words, d_model] = t.shape[..] else {
            return Err(Error::Format(format!(
                "{}: embeddings tensor must be 2-D, got {:?}",
                path.display(),
                t.shape
            )));
        };
        Ok(EmbeddingSet {
            n_words,
            d_model,
            matrix: t.data,
            metadata,
        })
    }
}

/// One embedding per word of `text` with context size `n`. Words are
/// processed in parallel; each row depends only on its own forward passes.
pub fn generate_embeddings(
    ckpt: &Checkpoint,
    text: &TokenizedText,
    n: usize,
    options: &EmbeddingOptions,
) -> Result<EmbeddingSet> {
    if n < 1 {
        return Err(Error::Argument("context size must be >= 1".into()));
    }
    if options.layer > ckpt.config.n_layers {
        return Err(Error::Range(format!(
            "layer {} outside 0..={}",
            options.layer, ckpt.config.n_layers
        )));
    }
    let d = ckpt.config.d_model;
    let rows: Vec<Vec<f32>> = (0..text.n_words())
        .into_par_iter()
        .map(|w| word_embedding(ckpt, text, w, n, options).map_err(|e| e.at_word(w)))
        .collect::<Result<_>>()?;
    Ok(EmbeddingSet {
        n_words: rows.len(),
        d_model: d,
        matrix: rows.concat(),
        metadata: EmbeddingMetadata {
            context_size: n,
            layer: options.layer,
            pooling: options.pooling,
            window_scope: options.window.scope,
            special_token: options.window.bos_token.is_some(),
            checkpoint_hash: ckpt.content_hash()?,
        },
    })
}

fn word_embedding(
    ckpt: &Checkpoint,
    text: &TokenizedText,
    word: usize,
    n: usize,
    options: &EmbeddingOptions,
) -> Result<Vec<f32>> {
    let (first, last) = text.word_spans[word];
    match options.pooling {
        Pooling::Last => build_for_token(text, word, last, n, options.window)?
            .target_row(ckpt, options.layer),
        Pooling::Mean => {
            let mut acc = vec![0.0f32; ckpt.config.d_model];
            for token in first..=last {
                let row = build_for_token(text, word, token, n, options.window)?
                    .target_row(ckpt, options.layer)?;
                acc.iter_mut().zip(&row).for_each(|(a, r)| *a += r);
            }
            let count = (last - first + 1) as f32;
            acc.iter_mut().for_each(|a| *a /= count);
            Ok(acc)
        }
    }
}
