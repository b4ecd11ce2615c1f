use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::IngestError;

/// Splits text into tokens, returning each token's byte range in order.
pub trait Tokenizer: Send + Sync {
    fn token_spans(&self, text: &str) -> Vec<Range<usize>>;

    fn count(&self, text: &str) -> usize {
        self.token_spans(text).len()
    }
}

/// One token per whitespace-separated word.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

/// Approximates subword tokenizers at 4 tokens per 3 words: every third word
/// is counted as two tokens, split at its character midpoint.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicTokenizer;

fn word_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push(s..i);
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push(s..text.len());
    }
    spans
}

impl Tokenizer for WhitespaceTokenizer {
    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        word_spans(text)
    }
}

impl Tokenizer for HeuristicTokenizer {
    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        let words = word_spans(text);
        let mut out = Vec::with_capacity(words.len() * 4 / 3 + 1);
        for (i, w) in words.into_iter().enumerate() {
            let tokens = (i + 1) * 4 / 3 - i * 4 / 3;
            if tokens == 1 {
                out.push(w);
                continue;
            }
            let word = &text[w.clone()];
            let chars = word.chars().count();
            let mid = word
                .char_indices()
                .nth(chars.div_ceil(2))
                .map_or(w.end, |(off, _)| w.start + off);
            out.push(w.start..mid);
            out.push(mid..w.end);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextChunk {
    pub doc_id: String,
    pub chunk_index: usize,
    pub text: String,
    /// Half-open token interval.
    pub token_span: (usize, usize),
}

/// Token-window starts: chunk `i` begins at `i * (chunk_tokens - overlap_tokens)`
/// and windows are emitted until the last one reaches the end.
pub fn chunk_windows(
    total_tokens: usize,
    chunk_tokens: usize,
    overlap_tokens: usize,
) -> Result<Vec<(usize, usize)>, IngestError> {
    if chunk_tokens == 0 {
        return Err(IngestError::Config("chunk size must be positive".into()));
    }
    if overlap_tokens >= chunk_tokens {
        return Err(IngestError::Config(format!(
            "overlap ({overlap_tokens}) must be smaller than chunk size ({chunk_tokens})"
        )));
    }
    let stride = chunk_tokens - overlap_tokens;
    let mut windows = Vec::new();
    let mut start = 0;
    while start < total_tokens {
        let end = (start + chunk_tokens).min(total_tokens);
        windows.push((start, end));
        if end == total_tokens {
            break;
        }
        start += stride;
    }
    Ok(windows)
}

pub fn chunk_document(
    doc_id: &str,
    text: &str,
    chunk_tokens: usize,
    overlap_tokens: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<TextChunk>, IngestError> {
    let spans = tokenizer.token_spans(text);
    let windows = chunk_windows(spans.len(), chunk_tokens, overlap_tokens)?;
    Ok(windows
        .into_iter()
        .enumerate()
        .map(|(chunk_index, (s, e))| TextChunk {
            doc_id: doc_id.to_string(),
            chunk_index,
            text: text[spans[s].start..spans[e - 1].end].to_string(),
            token_span: (s, e),
        })
        .collect())
}
