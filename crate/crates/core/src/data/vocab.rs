use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::model::{PAD, UNK};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercase, split on whitespace, and emit every non-alphanumeric character
/// as a token of its own.
pub fn tokenize(title: &str) -> Vec<String> {
    let lower = title.to_lowercase();
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in lower.chars() {
        if ch.is_alphanumeric() {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(core::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Token ↔ id map. Ids 0 and 1 are padding and unknown; real tokens follow
/// in order of decreasing count, ties broken by token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: BTreeMap<String, usize>,
    min_count: u64,
}

impl Vocab {
    pub fn build<'a, I>(titles: I, min_count: u64) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
        for title in titles {
            for tok in title {
                *freq.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, u64)> = freq
            .into_iter()
            .filter(|&(t, c)| c >= min_count.max(1) && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let entries = kept.into_iter().map(|(t, c)| (t.to_string(), c));
        Self::from_entries(entries, min_count)
    }

    /// Rebuild from `(token, count)` pairs of real tokens, already in id
    /// order starting at id 2.
    pub fn from_entries<I: IntoIterator<Item = (String, u64)>>(entries: I, min_count: u64) -> Self {
        let mut tokens = alloc::vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut counts = alloc::vec![0, 0];
        for (t, c) in entries {
            tokens.push(t);
            counts.push(c);
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            counts,
            index,
            min_count,
        }
    }

    /// Number of ids, including padding and unknown.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    /// Id of a real token.
    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied().filter(|&i| i > UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    /// `(token, id, count)` for every id.
    pub fn entries(&self) -> impl Iterator<Item = (&str, usize, u64)> {
        self.tokens
            .iter()
            .zip(&self.counts)
            .enumerate()
            .map(|(i, (t, &c))| (t.as_str(), i, c))
    }
}

/// Map tokens to ids (unknown → [`UNK`]), truncate to `max_len` and right-pad
/// with [`PAD`].
pub fn encode_title(tokens: &[String], vocab: &Vocab, max_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = tokens
        .iter()
        .take(max_len)
        .map(|t| vocab.id(t).unwrap_or(UNK))
        .collect();
    ids.resize(max_len, PAD);
    ids
}
