//! Synthetic LJP and case-matching data with known latent judgments.
//!
//! A [`World`] fixes one disjoint keyword pool per (factor kind, class) plus a
//! filler pool. A case with judgment `(a, c, t)` is written as three segments
//! (article, charge, term). Each position in segment `s` draws:
//!
//! * with probability `overlap_rate`, a keyword of the *next* segment's
//!   factor for this case (segments overlap the way real fact descriptions
//!   mention one circumstance in support of several judgments);
//! * otherwise, with probability [`FILLER_RATE`], a filler word;
//! * otherwise, a keyword of segment `s`'s own factor and class.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassCounts, Judgment, LjpRecord, MatchRecord, MATCH_LEVELS, RESERVED};
use crate::error::{Error, Result};
use crate::seed;

/// Keywords allocated to each (factor kind, class).
pub const KEYWORDS_PER_CLASS: usize = 4;
/// Fraction of non-overlap positions filled with class-independent words.
pub const FILLER_RATE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub n_cases: usize,
    pub n_articles: usize,
    pub n_charges: usize,
    pub n_terms: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub overlap_rate: f64,
    pub label_correlation: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_cases: 2000,
            n_articles: 8,
            n_charges: 6,
            n_terms: 4,
            vocab_size: 256,
            seq_len: 24,
            overlap_rate: 0.2,
            label_correlation: 0.7,
            seed: 7,
        }
    }
}

impl GenSpec {
    pub fn classes(&self) -> ClassCounts {
        ClassCounts { articles: self.n_articles, charges: self.n_charges, terms: self.n_terms }
    }

    fn n_keywords(&self) -> usize {
        (self.n_articles + self.n_charges + self.n_terms) * KEYWORDS_PER_CLASS
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, n) in [("n_articles", self.n_articles), ("n_charges", self.n_charges), ("n_terms", self.n_terms)] {
            if n < 2 {
                return bad(format!("{name} must be at least 2, got {n}"));
            }
        }
        for (name, v) in [("overlap_rate", self.overlap_rate), ("label_correlation", self.label_correlation)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.n_cases == 0 {
            return bad("n_cases must be positive".into());
        }
        if self.seq_len < 3 {
            return bad(format!("seq_len must be at least 3, got {}", self.seq_len));
        }
        let needed = RESERVED.len() + self.n_keywords() + 1;
        if self.vocab_size < needed {
            return bad(format!(
                "vocab_size {} too small for disjoint keyword pools (need at least {needed})",
                self.vocab_size
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: GenSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FactorKind {
    Article,
    Charge,
    Term,
}

impl FactorKind {
    pub const ALL: [FactorKind; 3] = [FactorKind::Article, FactorKind::Charge, FactorKind::Term];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Keyword inventory shared by every dataset generated from one [`GenSpec`].
#[derive(Clone, Debug)]
pub struct World {
    spec: GenSpec,
    /// `pools[kind][class]` holds that class's keywords.
    pools: [Vec<Vec<String>>; 3],
    filler: Vec<String>,
    owner: HashMap<String, (FactorKind, usize)>,
}

impl World {
    pub fn new(spec: &GenSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(spec.seed, "corpus.words");
        let total = spec.vocab_size - RESERVED.len();
        let words = pseudo_words(total, &mut rng);
        let mut it = words.into_iter();
        let counts = spec.classes().as_array();
        let pools: [Vec<Vec<String>>; 3] = counts.map(|n| {
            (0..n).map(|_| it.by_ref().take(KEYWORDS_PER_CLASS).collect()).collect()
        });
        let filler: Vec<String> = it.collect();
        let mut owner = HashMap::new();
        for kind in FactorKind::ALL {
            for (class, pool) in pools[kind.index()].iter().enumerate() {
                for w in pool {
                    owner.insert(w.clone(), (kind, class));
                }
            }
        }
        Ok(Self { spec: spec.clone(), pools, filler, owner })
    }

    pub fn spec(&self) -> &GenSpec {
        &self.spec
    }

    /// Which (factor kind, class) pool a word belongs to; `None` for filler
    /// and unknown words.
    pub fn keyword_owner(&self, word: &str) -> Option<(FactorKind, usize)> {
        self.owner.get(word).copied()
    }

    pub fn filler(&self) -> &[String] {
        &self.filler
    }

    /// Segment lengths for article, charge and term.
    pub fn segment_lengths(&self) -> [usize; 3] {
        let base = self.spec.seq_len / 3;
        [base, base, self.spec.seq_len - 2 * base]
    }

    /// Samples judgments with article→charge and charge→term dependence.
    pub fn sample_judgment(&self, rng: &mut ChaCha8Rng) -> Judgment {
        let s = &self.spec;
        let article = rng.gen_range(0..s.n_articles);
        let charge = if rng.gen_bool(s.label_correlation) { article % s.n_charges } else { rng.gen_range(0..s.n_charges) };
        let term = if rng.gen_bool(s.label_correlation) { charge % s.n_terms } else { rng.gen_range(0..s.n_terms) };
        Judgment::new(article, charge, term)
    }

    /// Writes the fact description of a case with judgment `j`.
    pub fn write_case(&self, j: &Judgment, rng: &mut ChaCha8Rng) -> String {
        let classes = j.as_array();
        let mut words: Vec<&str> = Vec::with_capacity(self.spec.seq_len);
        for (seg, len) in self.segment_lengths().into_iter().enumerate() {
            let next = (seg + 1) % 3;
            for _ in 0..len {
                let w = if rng.gen_bool(self.spec.overlap_rate) {
                    self.pools[next][classes[next]].choose(rng)
                } else if rng.gen_bool(FILLER_RATE) {
                    self.filler.choose(rng)
                } else {
                    self.pools[seg][classes[seg]].choose(rng)
                };
                words.push(w.expect("pools are non-empty"));
            }
        }
        words.join(" ")
    }

    /// A judgment agreeing with `source` on exactly `agree` of the three
    /// factors; the agreeing factors are chosen uniformly.
    pub fn judgment_with_agreements(&self, source: &Judgment, agree: usize, rng: &mut ChaCha8Rng) -> Judgment {
        let counts = self.spec.classes().as_array();
        let mut which = [0usize, 1, 2];
        which.shuffle(rng);
        let keep: HashSet<usize> = which[..agree].iter().copied().collect();
        let src = source.as_array();
        let mut out = [0usize; 3];
        for k in 0..3 {
            out[k] = if keep.contains(&k) {
                src[k]
            } else {
                let other = rng.gen_range(0..counts[k] - 1);
                if other >= src[k] { other + 1 } else { other }
            };
        }
        Judgment::new(out[0], out[1], out[2])
    }
}

fn pseudo_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::with_capacity(syllables * 2);
        for _ in 0..syllables {
            w.push(*CONSONANTS.choose(rng).unwrap() as char);
            w.push(*VOWELS.choose(rng).unwrap() as char);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// LJP cases with article/charge/term labels.
pub fn gen_ljp_dataset(spec: &GenSpec) -> Result<Vec<LjpRecord>> {
    let world = World::new(spec)?;
    let mut rng = seed::rng(spec.seed, "corpus.ljp");
    Ok((0..spec.n_cases)
        .map(|i| {
            let j = world.sample_judgment(&mut rng);
            let text = world.write_case(&j, &mut rng);
            LjpRecord { id: format!("ljp-{i:06}"), text, article: j.article, charge: j.charge, term: j.term }
        })
        .collect())
}

/// Case pairs whose label is the number of agreeing latent judgments, with
/// each label used `n_pairs / 4` times (remainders go to the lowest labels).
pub fn gen_match_dataset(spec: &GenSpec, n_pairs: usize) -> Result<Vec<MatchRecord>> {
    if n_pairs < MATCH_LEVELS {
        return Err(Error::Invalid(format!("n_pairs must be at least {MATCH_LEVELS} to cover every label, got {n_pairs}")));
    }
    let world = World::new(spec)?;
    let mut rng = seed::rng(spec.seed, "corpus.match");
    let mut labels: Vec<usize> = (0..n_pairs).map(|i| i % MATCH_LEVELS).collect();
    labels.shuffle(&mut rng);
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let src = world.sample_judgment(&mut rng);
            let tgt = world.judgment_with_agreements(&src, label, &mut rng);
            let source_text = world.write_case(&src, &mut rng);
            let target_text = world.write_case(&tgt, &mut rng);
            MatchRecord {
                source_id: format!("m{i:06}-s"),
                target_id: format!("m{i:06}-t"),
                source_text,
                target_text,
                label,
                source_judgment: Some(src),
                target_judgment: Some(tgt),
            }
        })
        .collect())
}

/// Empirical mutual information (nats) between two label sequences.
pub fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut pa: HashMap<usize, f64> = HashMap::new();
    let mut pb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0 / n;
        *pa.entry(x).or_default() += 1.0 / n;
        *pb.entry(y).or_default() += 1.0 / n;
    }
    joint.iter().map(|(&(x, y), &p)| p * (p / (pa[&x] * pb[&y])).ln()).sum()
}
