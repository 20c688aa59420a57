//! Multi-aspect examples, a synthetic review generator with planted gold
//! rationales, vocabulary encoding and dataset statistics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numerics::{RngState, Stream};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("example {index}: {message}")]
    Invalid { index: usize, message: String },
    #[error("dataset is empty")]
    Empty,
}

/// Token sequence with optional per-aspect labels and gold rationales.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiAspectExample {
    pub tokens: Vec<String>,
    /// One entry per aspect; `None` means unannotated.
    pub labels: Vec<Option<usize>>,
    /// One entry per aspect; each mask has one 0/1 entry per token.
    pub rationales: Vec<Option<Vec<u8>>>,
}

impl MultiAspectExample {
    pub fn validate(&self, num_aspects: usize) -> Result<(), String> {
        if self.labels.len() != num_aspects || self.rationales.len() != num_aspects {
            return Err(format!(
                "expected {num_aspects} aspect slots, found {} labels and {} rationales",
                self.labels.len(),
                self.rationales.len()
            ));
        }
        if self.labels.iter().all(Option::is_none) {
            return Err("no aspect is labelled".into());
        }
        for (a, r) in self.rationales.iter().enumerate() {
            if let Some(mask) = r {
                if mask.len() != self.tokens.len() {
                    return Err(format!(
                        "rationale for aspect {a} has {} entries but there are {} tokens",
                        mask.len(),
                        self.tokens.len()
                    ));
                }
                if mask.iter().any(|&m| m > 1) {
                    return Err(format!("rationale for aspect {a} is not binary"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub num_aspects: usize,
    pub examples: Vec<MultiAspectExample>,
}

impl Dataset {
    pub fn new(num_aspects: usize, examples: Vec<MultiAspectExample>) -> Result<Self, DataError> {
        for (index, ex) in examples.iter().enumerate() {
            ex.validate(num_aspects)
                .map_err(|message| DataError::Invalid { index, message })?;
        }
        Ok(Self { num_aspects, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn has_gold(&self) -> bool {
        self.examples.iter().any(|e| e.rationales.iter().any(Option::is_some))
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0)
    }

    /// Consecutive train/validation/test split by fractions of the length.
    pub fn split(&self, train: f64, val: f64) -> (Dataset, Dataset, Dataset) {
        let n = self.examples.len();
        let n_train = libm::round((n as f64) * train) as usize;
        let n_val = (libm::round((n as f64) * val) as usize).min(n - n_train.min(n));
        let n_train = n_train.min(n);
        let part = |r: core::ops::Range<usize>| Dataset {
            num_aspects: self.num_aspects,
            examples: self.examples[r].to_vec(),
        };
        (
            part(0..n_train),
            part(n_train..n_train + n_val),
            part(n_train + n_val..n),
        )
    }
}

/// Phrase inventory of one aspect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectGrammar {
    pub name: String,
    /// Whitespace-tokenised phrases expressing positive sentiment.
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    /// Probability that an example mentions (and labels) this aspect.
    pub presence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthGrammarConfig {
    pub num_aspects: usize,
    pub aspects: Vec<AspectGrammar>,
    /// Neutral single-token filler words.
    pub filler: Vec<String>,
    /// Total tokens per example, drawn uniformly from `min_len..=max_len`.
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

const FILLER: &[&str] = &[
    "the", "a", "i", "we", "had", "this", "beer", "at", "with", "friends", "last", "night", "it", "was",
    "poured", "into", "glass", "bottle", "from", "store", "bought", "weekend", "after", "dinner", "and",
    "then", "tried", "again", "review", "notes", "overall", "some", "time", "ago", "local", "shop",
    "served", "tonight", "my", "our", "brewery", "label", "price", "paid", "sampled", "because", "while",
    "on", "tap", "session",
];

struct Pools {
    name: &'static str,
    intensifiers: [&'static str; 3],
    positive: [&'static str; 4],
    negative: [&'static str; 4],
    nouns: [&'static str; 4],
}

const NAMED_POOLS: [Pools; 3] = [
    Pools {
        name: "appearance",
        intensifiers: ["truly", "remarkably", "visibly"],
        positive: ["golden", "radiant", "clear", "glowing"],
        negative: ["murky", "dull", "cloudy", "muddy"],
        nouns: ["color", "head", "pour", "lacing"],
    },
    Pools {
        name: "aroma",
        intensifiers: ["deeply", "richly", "faintly"],
        positive: ["fragrant", "floral", "fruity", "fresh"],
        negative: ["musty", "sour", "stale", "skunky"],
        nouns: ["aroma", "nose", "scent", "bouquet"],
    },
    Pools {
        name: "palate",
        intensifiers: ["thoroughly", "wonderfully", "oddly"],
        positive: ["smooth", "creamy", "crisp", "silky"],
        negative: ["watery", "harsh", "thin", "sticky"],
        nouns: ["mouthfeel", "body", "finish", "texture"],
    },
];

impl SynthGrammarConfig {
    /// Three-token `intensifier adjective noun` phrases per aspect, 30-token
    /// texts, every aspect always present.
    pub fn with_default_vocab(num_aspects: usize, seed: u64) -> Self {
        let aspects = (0..num_aspects)
            .map(|a| {
                let (name, ints, pos, neg, nouns): (String, Vec<String>, Vec<String>, Vec<String>, Vec<String>) =
                    match NAMED_POOLS.get(a) {
                        Some(p) => (
                            p.name.to_string(),
                            p.intensifiers.iter().map(|s| s.to_string()).collect(),
                            p.positive.iter().map(|s| s.to_string()).collect(),
                            p.negative.iter().map(|s| s.to_string()).collect(),
                            p.nouns.iter().map(|s| s.to_string()).collect(),
                        ),
                        None => {
                            let w = |kind: &str, n: usize| (0..n).map(|i| format!("a{a}{kind}{i}")).collect();
                            (format!("aspect{a}"), w("int", 3), w("pos", 4), w("neg", 4), w("noun", 4))
                        }
                    };
                let phrases = |adjs: &[String]| {
                    let mut out = Vec::new();
                    for i in &ints {
                        for adj in adjs {
                            for n in &nouns {
                                out.push(format!("{i} {adj} {n}"));
                            }
                        }
                    }
                    out
                };
                AspectGrammar {
                    name,
                    positive: phrases(&pos),
                    negative: phrases(&neg),
                    presence: 1.0,
                }
            })
            .collect();
        Self {
            num_aspects,
            aspects,
            filler: FILLER.iter().map(|s| s.to_string()).collect(),
            min_len: 30,
            max_len: 30,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.num_aspects == 0 {
            return bad("num_aspects must be at least 1".into());
        }
        if self.aspects.len() != self.num_aspects {
            return bad(format!(
                "num_aspects is {} but {} aspect grammars are given",
                self.num_aspects,
                self.aspects.len()
            ));
        }
        if self.filler.is_empty() {
            return bad("filler vocabulary is empty".into());
        }
        if self.min_len > self.max_len {
            return bad(format!("min_len {} exceeds max_len {}", self.min_len, self.max_len));
        }
        let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
        let mut longest_total = 0;
        for (a, g) in self.aspects.iter().enumerate() {
            if g.positive.is_empty() || g.negative.is_empty() {
                return bad(format!("aspect {a} ({}) has an empty phrase set", g.name));
            }
            if !(0.0..=1.0).contains(&g.presence) {
                return bad(format!("aspect {a} presence {} outside [0, 1]", g.presence));
            }
            let mut longest = 0;
            for phrase in g.positive.iter().chain(&g.negative) {
                let n = phrase.split_whitespace().count();
                if n == 0 {
                    return bad(format!("aspect {a} has an empty phrase"));
                }
                longest = longest.max(n);
                for w in phrase.split_whitespace() {
                    if let Some(&other) = owner.get(w) {
                        if other != a {
                            return bad(format!("token `{w}` appears in aspects {other} and {a}"));
                        }
                    }
                    owner.insert(w, a);
                }
            }
            longest_total += longest;
        }
        if let Some(w) = self.filler.iter().find(|w| owner.contains_key(w.as_str())) {
            return bad(format!("filler token `{w}` is also an aspect token"));
        }
        if longest_total > self.min_len {
            return bad(format!(
                "min_len {} cannot hold the longest phrases of every aspect ({longest_total} tokens)",
                self.min_len
            ));
        }
        Ok(())
    }
}

/// Generates `n` examples. Each mentions every aspect independently with its
/// presence probability, using a phrase of uniformly random polarity; the
/// label is that polarity (1 = positive) and the gold mask marks exactly the
/// phrase tokens. Remaining positions hold filler.
pub fn synth_generate(cfg: &SynthGrammarConfig, n: usize) -> Result<Dataset, DataError> {
    cfg.validate()?;
    if n == 0 {
        return Err(DataError::Empty);
    }
    let mut rng = RngState::stream(cfg.seed, Stream::Data);
    let k = cfg.num_aspects;
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let total = cfg.min_len + rng.below(cfg.max_len - cfg.min_len + 1);
        let mut spans: Vec<(usize, Vec<&str>)> = Vec::new();
        let mut labels = vec![None; k];
        for (a, g) in cfg.aspects.iter().enumerate() {
            if !rng.bernoulli(g.presence) {
                continue;
            }
            let positive = rng.bernoulli(0.5);
            let pool = if positive { &g.positive } else { &g.negative };
            let phrase = &pool[rng.below(pool.len())];
            labels[a] = Some(usize::from(positive));
            spans.push((a, phrase.split_whitespace().collect()));
        }
        rng.shuffle(&mut spans);
        let span_tokens: usize = spans.iter().map(|(_, t)| t.len()).sum();
        let filler_count = total - span_tokens;
        let mut slots: Vec<bool> = core::iter::repeat(true)
            .take(spans.len())
            .chain(core::iter::repeat(false).take(filler_count))
            .collect();
        rng.shuffle(&mut slots);
        let mut tokens = Vec::with_capacity(total);
        let mut rationales: Vec<Option<Vec<u8>>> = vec![None; k];
        let mut owners: Vec<Option<usize>> = Vec::with_capacity(total);
        let mut next_span = spans.iter();
        for is_span in slots {
            if is_span {
                let (a, words) = next_span.next().expect("one slot per span");
                for w in words {
                    tokens.push(w.to_string());
                    owners.push(Some(*a));
                }
            } else {
                tokens.push(cfg.filler[rng.below(cfg.filler.len())].clone());
                owners.push(None);
            }
        }
        for (a, label) in labels.iter().enumerate() {
            if label.is_some() {
                rationales[a] = Some(owners.iter().map(|o| u8::from(*o == Some(a))).collect());
            }
        }
        if labels.iter().all(Option::is_none) {
            // An example must carry at least one label; mention one aspect.
            let a = rng.below(k);
            let g = &cfg.aspects[a];
            let positive = rng.bernoulli(0.5);
            let pool = if positive { &g.positive } else { &g.negative };
            let words: Vec<&str> = pool[rng.below(pool.len())].split_whitespace().collect();
            let at = rng.below(tokens.len() - words.len() + 1);
            let mut mask = vec![0u8; tokens.len()];
            for (i, w) in words.iter().enumerate() {
                tokens[at + i] = w.to_string();
                mask[at + i] = 1;
            }
            labels[a] = Some(usize::from(positive));
            rationales[a] = Some(mask);
        }
        examples.push(MultiAspectExample {
            tokens,
            labels,
            rationales,
        });
    }
    Dataset::new(k, examples)
}

/// Token-to-id map; id 0 is reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

pub const UNK: &str = "[UNK]";

impl Vocab {
    pub fn build<'a>(datasets: impl IntoIterator<Item = &'a Dataset>) -> Self {
        let mut words: Vec<String> = Vec::new();
        let mut seen = BTreeMap::new();
        for ds in datasets {
            for ex in &ds.examples {
                for t in &ex.tokens {
                    if !seen.contains_key(t) {
                        seen.insert(t.clone(), ());
                        words.push(t.clone());
                    }
                }
            }
        }
        words.sort();
        let mut tokens = vec![UNK.to_string()];
        tokens.extend(words.into_iter().filter(|w| w != UNK));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        if self.index.is_empty() && !self.tokens.is_empty() {
            return self.tokens.iter().position(|t| t == token).unwrap_or(0);
        }
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Restores the lookup index after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub ids: Vec<usize>,
    pub labels: Vec<Option<usize>>,
    pub gold: Vec<Option<Vec<u8>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub num_aspects: usize,
    pub examples: Vec<EncodedExample>,
}

impl EncodedDataset {
    pub fn encode(vocab: &Vocab, ds: &Dataset) -> Self {
        Self {
            num_aspects: ds.num_aspects,
            examples: ds
                .examples
                .iter()
                .map(|e| EncodedExample {
                    ids: vocab.encode(&e.tokens),
                    labels: e.labels.clone(),
                    gold: e.rationales.clone(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectStats {
    pub positive: usize,
    pub negative: usize,
    /// Labels other than 0/1 (multi-class data).
    pub other: usize,
    pub unlabeled: usize,
    pub annotated: usize,
    /// Mean fraction of gold tokens over examples with a gold mask; `None`
    /// when no example carries one.
    pub gold_sparsity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub examples: usize,
    pub mean_tokens: f64,
    pub aspects: Vec<AspectStats>,
}

pub fn stats(ds: &Dataset) -> Result<DatasetStats, DataError> {
    if ds.is_empty() {
        return Err(DataError::Empty);
    }
    let mut aspects = vec![
        AspectStats {
            positive: 0,
            negative: 0,
            other: 0,
            unlabeled: 0,
            annotated: 0,
            gold_sparsity: None,
        };
        ds.num_aspects
    ];
    let mut sparsity_sum = vec![0.0; ds.num_aspects];
    let mut tokens = 0usize;
    for ex in &ds.examples {
        tokens += ex.tokens.len();
        for (a, st) in aspects.iter_mut().enumerate() {
            match ex.labels[a] {
                Some(1) => st.positive += 1,
                Some(0) => st.negative += 1,
                Some(_) => st.other += 1,
                None => st.unlabeled += 1,
            }
            if let Some(mask) = &ex.rationales[a] {
                if !mask.is_empty() {
                    st.annotated += 1;
                    sparsity_sum[a] += mask.iter().map(|&m| m as f64).sum::<f64>() / mask.len() as f64;
                }
            }
        }
    }
    for (st, s) in aspects.iter_mut().zip(sparsity_sum) {
        if st.annotated > 0 {
            st.gold_sparsity = Some(s / st.annotated as f64);
        }
    }
    Ok(DatasetStats {
        examples: ds.len(),
        mean_tokens: tokens as f64 / ds.len() as f64,
        aspects,
    })
}

/// Splits `order` into batches of at most `batch_size` examples sharing the
/// same length, keeping the relative order within each length.
pub fn length_batches(order: &[usize], lengths: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut first_seen: Vec<usize> = Vec::new();
    for &i in order {
        let len = lengths[i];
        let g = groups.entry(len).or_default();
        if g.is_empty() {
            first_seen.push(len);
        }
        g.push(i);
    }
    let mut out = Vec::new();
    for len in first_seen {
        for chunk in groups[&len].chunks(batch_size.max(1)) {
            out.push(chunk.to_vec());
        }
    }
    out
}
