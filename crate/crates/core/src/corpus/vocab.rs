use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const UNK: u32 = 2;
pub const RESERVED: [&str; 3] = ["[PAD]", "[CLS]", "[UNK]"];

/// Token ↔ id map with `PAD`, `CLS`, `UNK` at ids 0, 1, 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Vocabulary holding only the reserved tokens.
    pub fn reserved() -> Self {
        Self::from_tokens(Vec::new()).expect("reserved tokens are unique")
    }

    /// Builds a vocabulary from non-reserved tokens in id order (ids start at 3).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        for (i, r) in RESERVED.iter().enumerate() {
            if lines.get(i) != Some(r) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected reserved token {r}"),
                });
            }
        }
        Self::from_tokens(lines[RESERVED.len()..].iter().map(|s| s.to_string()).collect())
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Keeps the `max_size - 3` most frequent tokens after the reserved ones.
/// Frequency ties are broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(texts: &[S], max_size: usize) -> Result<Vocab> {
    if max_size < RESERVED.len() {
        return Err(Error::Invalid(format!("max_size must be at least {}, got {max_size}", RESERVED.len())));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in texts {
        for w in words(t.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(w, _)| !RESERVED.contains(&w.as_str())).collect();
    // BTreeMap iteration is lexicographic; a stable sort on count keeps that order among ties.
    ranked.sort_by_key(|w| std::cmp::Reverse(w.1));
    ranked.truncate(max_size - RESERVED.len());
    Vocab::from_tokens(ranked.into_iter().map(|(w, _)| w).collect())
}

/// Lowercase, whitespace split, `CLS` prepended, truncated to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Vec<u32> {
    assert!(max_len >= 2, "max_len must be at least 2");
    std::iter::once(CLS).chain(words(text).map(|w| vocab.id(&w))).take(max_len).collect()
}
