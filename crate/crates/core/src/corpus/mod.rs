//! Case data model, tokenization, dataset files and the synthetic generator.

mod generate;
mod io;
mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{gen_ljp_dataset, gen_match_dataset, mutual_information, FactorKind, GenSpec, World};
pub use io::{load_dataset, save_dataset};
pub use vocab::{build_vocab, tokenize, Vocab, CLS, PAD, RESERVED, UNK};

/// Number of relevance levels for a case pair.
pub const MATCH_LEVELS: usize = 4;

/// The three court judgments of a criminal case.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Judgment {
    pub article: usize,
    pub charge: usize,
    pub term: usize,
}

impl Judgment {
    pub fn new(article: usize, charge: usize, term: usize) -> Self {
        Self { article, charge, term }
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.article, self.charge, self.term]
    }

    /// Number of judgments on which `self` and `other` agree (0..=3).
    pub fn agreements(&self, other: &Judgment) -> usize {
        self.as_array().iter().zip(other.as_array()).filter(|(a, b)| **a == *b).count()
    }
}

/// Class counts of the article, charge and term subtasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub articles: usize,
    pub charges: usize,
    pub terms: usize,
}

impl ClassCounts {
    pub fn as_array(&self) -> [usize; 3] {
        [self.articles, self.charges, self.terms]
    }

    pub fn validate(&self, j: &Judgment) -> Result<()> {
        for ((name, label), n) in ["article", "charge", "term"].iter().zip(j.as_array()).zip(self.as_array()) {
            if label >= n {
                return Err(Error::Invalid(format!("{name} label {label} out of range (< {n})")));
            }
        }
        Ok(())
    }
}

/// A tokenized case. `tokens[0]` is always `CLS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Case {
    pub id: String,
    pub tokens: Vec<u32>,
    pub raw_text: String,
}

impl Case {
    pub fn new(id: impl Into<String>, raw_text: impl Into<String>, vocab: &Vocab, max_len: usize) -> Self {
        let raw_text = raw_text.into();
        let tokens = tokenize(&raw_text, vocab, max_len);
        Self { id: id.into(), tokens, raw_text }
    }
}

/// One line of an LJP dataset file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LjpRecord {
    pub id: String,
    pub text: String,
    pub article: usize,
    pub charge: usize,
    pub term: usize,
}

impl LjpRecord {
    pub fn judgment(&self) -> Judgment {
        Judgment::new(self.article, self.charge, self.term)
    }
}

/// One line of a matching dataset file. The latent judgments are present for
/// synthetic data and absent for externally supplied pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub source_id: String,
    pub target_id: String,
    pub source_text: String,
    pub target_text: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_judgment: Option<Judgment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_judgment: Option<Judgment>,
}

impl MatchRecord {
    pub fn pair_id(&self) -> String {
        format!("{}|{}", self.source_id, self.target_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LjpExample {
    pub case: Case,
    pub judgment: Judgment,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchExample {
    pub pair_id: String,
    pub source: Case,
    pub target: Case,
    pub label: usize,
}

pub fn tokenize_ljp(records: &[LjpRecord], vocab: &Vocab, max_len: usize, classes: &ClassCounts) -> Result<Vec<LjpExample>> {
    records
        .iter()
        .map(|r| {
            let judgment = r.judgment();
            classes.validate(&judgment).map_err(|e| Error::Invalid(format!("case {}: {e}", r.id)))?;
            Ok(LjpExample { case: Case::new(&r.id, &r.text, vocab, max_len), judgment })
        })
        .collect()
}

pub fn tokenize_match(records: &[MatchRecord], vocab: &Vocab, max_len: usize) -> Result<Vec<MatchExample>> {
    records
        .iter()
        .map(|r| {
            if r.label >= MATCH_LEVELS {
                return Err(Error::Invalid(format!("pair {}: label {} out of range", r.pair_id(), r.label)));
            }
            Ok(MatchExample {
                pair_id: r.pair_id(),
                source: Case::new(&r.source_id, &r.source_text, vocab, max_len),
                target: Case::new(&r.target_id, &r.target_text, vocab, max_len),
                label: r.label,
            })
        })
        .collect()
}

/// Deterministic 0.8 / 0.1 / 0.1 split by position.
pub fn split_811<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = items.len();
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    (
        items[..n_train].to_vec(),
        items[n_train..n_train + n_valid].to_vec(),
        items[n_train + n_valid..].to_vec(),
    )
}
