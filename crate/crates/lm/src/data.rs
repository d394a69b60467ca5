//! Corpus loading, the train/validation split and batch sampling.

use std::path::Path;

use attnprior_core::rng::Rng;
use rand::Rng as _;

use crate::error::{LmError, Result};
use crate::manifest::git_blob_hash;
use crate::vocab::{build_vocab, CharVocab};

/// Fraction of the corpus, by character position, held out at the end.
pub const VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: CharVocab,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Git-style SHA-256 blob hash of the raw file.
    pub hash: String,
}

/// Splits `text` so the final 10% of its characters form the validation set.
pub fn split_text(text: &str) -> (&str, &str) {
    let n = text.chars().count();
    let train_chars = n - (n as f64 * VAL_FRACTION) as usize;
    let cut = text.char_indices().nth(train_chars).map_or(text.len(), |(i, _)| i);
    text.split_at(cut)
}

impl Corpus {
    /// Builds the vocabulary from the training split only.
    pub fn from_text(text: &str, min_count: usize) -> Result<Self> {
        let (train, val) = split_text(text);
        let vocab = build_vocab(train, min_count)?;
        Ok(Corpus {
            train: vocab.encode(train),
            val: vocab.encode(val),
            hash: git_blob_hash(text.as_bytes()),
            vocab,
        })
    }

    pub fn load(path: &Path, min_count: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LmError::io(path, e))?;
        let text = String::from_utf8(bytes)
            .map_err(|e| LmError::Ingestion(format!("{}: not UTF-8 ({e})", path.display())))?;
        Corpus::from_text(&text, min_count)
    }
}

/// `batch` random windows of `t + 1` tokens: inputs and next-token targets,
/// each flattened `[batch, t]`.
pub fn sample_batch(tokens: &[usize], batch: usize, t: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if tokens.len() <= t {
        return Err(LmError::Ingestion(format!("{} tokens cannot fill a window of {t}", tokens.len())));
    }
    let mut x = Vec::with_capacity(batch * t);
    let mut y = Vec::with_capacity(batch * t);
    for _ in 0..batch {
        let s = rng.random_range(0..tokens.len() - t);
        x.extend_from_slice(&tokens[s..s + t]);
        y.extend_from_slice(&tokens[s + 1..s + t + 1]);
    }
    Ok((x, y))
}

/// Starts of non-overlapping evaluation windows. When more than `max`
/// windows fit, an evenly spaced subset of `max` is used.
pub fn eval_starts(tokens: &[usize], t: usize, max: usize) -> Vec<usize> {
    if tokens.len() <= t {
        return Vec::new();
    }
    let all: Vec<usize> = (0..(tokens.len() - 1) / t).map(|i| i * t).collect();
    if max == 0 || all.len() <= max {
        return all;
    }
    (0..max).map(|i| all[i * all.len() / max]).collect()
}
