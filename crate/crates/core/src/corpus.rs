//! Monolingual corpora, the exponentially smoothed language sampling
//! distribution, and assembly of the multilingual training corpus.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One language's sentences, one entry per non-blank input line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageCorpus {
    pub lang_id: String,
    sentences: Vec<String>,
    byte_size: u64,
}

impl LanguageCorpus {
    /// Builds a corpus from raw lines. Trailing `\r`/`\n` are stripped and
    /// blank lines are dropped.
    pub fn from_lines<I, S>(lang_id: impl Into<String>, lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let sentences: Vec<String> = lines
            .into_iter()
            .filter_map(|line| {
                let line = line.as_ref().trim_end_matches(['\n', '\r']);
                if line.trim().is_empty() {
                    None
                } else {
                    Some(line.to_owned())
                }
            })
            .collect();
        let byte_size = sentences.iter().map(|s| s.len() as u64).sum();
        LanguageCorpus {
            lang_id: lang_id.into(),
            sentences,
            byte_size,
        }
    }

    pub fn sentences(&self) -> &[String] {
        &self.sentences
    }

    /// Sentence count.
    pub fn n(&self) -> usize {
        self.sentences.len()
    }

    pub fn byte_size(&self) -> u64 {
        self.byte_size
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Hex SHA-256 over the language id and sentences, used as a cache key.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.lang_id.as_bytes());
        hasher.update([0u8]);
        for s in &self.sentences {
            hasher.update(s.as_bytes());
            hasher.update(*b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

/// Reads a UTF-8 corpus file with one sentence per line.
pub fn load_corpus(path: impl AsRef<Path>, lang_id: &str) -> Result<LanguageCorpus> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = std::str::from_utf8(raw).map_err(|_| Error::InvalidUtf8 {
            path: path.to_path_buf(),
            line: i + 1,
        })?;
        lines.push(line);
    }
    Ok(LanguageCorpus::from_lines(lang_id, lines))
}

/// Language sampling probabilities `q_i = f_i^α / Σ_j f_j^α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingDistribution {
    pub alpha: f64,
    pub langs: Vec<String>,
    pub counts: Vec<usize>,
    /// Raw fractions `n_i / Σ n`.
    pub f: Vec<f64>,
    /// Smoothed probabilities.
    pub q: Vec<f64>,
}

impl SamplingDistribution {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn index_of(&self, lang: &str) -> Option<usize> {
        self.langs.iter().position(|l| l == lang)
    }

    /// `q_i^β` for every language.
    pub fn weights(&self, beta: f64) -> Vec<f64> {
        self.q.iter().map(|q| q.powf(beta)).collect()
    }

    /// Per-language `{n, f, q}` report, keyed by language id.
    pub fn report(&self) -> BTreeMap<String, LanguageShare> {
        self.langs
            .iter()
            .enumerate()
            .map(|(i, lang)| {
                (
                    lang.clone(),
                    LanguageShare {
                        n: self.counts[i],
                        f: self.f[i],
                        q: self.q[i],
                    },
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LanguageShare {
    pub n: usize,
    pub f: f64,
    pub q: f64,
}

/// Computes the smoothed sampling distribution over `corpora`.
///
/// Languages without sentences are kept in the output with `f = q = 0` and
/// take no part in the normalization, so `0^α` never enters the sum.
pub fn compute_sampling_distribution(
    corpora: &[LanguageCorpus],
    alpha: f64,
) -> Result<SamplingDistribution> {
    let counts: Vec<usize> = corpora.iter().map(LanguageCorpus::n).collect();
    sampling_distribution_from_counts(
        corpora.iter().map(|c| c.lang_id.clone()).collect(),
        counts,
        alpha,
    )
}

/// Same as [`compute_sampling_distribution`] but from raw sentence counts.
pub fn sampling_distribution_from_counts(
    langs: Vec<String>,
    counts: Vec<usize>,
    alpha: f64,
) -> Result<SamplingDistribution> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    if langs.len() != counts.len() {
        return Err(Error::LengthMismatch {
            expected: langs.len(),
            actual: counts.len(),
        });
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::AllCorporaEmpty);
    }
    let f: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
    let powered: Vec<f64> = f
        .iter()
        .map(|&fi| if fi > 0.0 { fi.powf(alpha) } else { 0.0 })
        .collect();
    let norm: f64 = powered.iter().sum();
    let q = powered.iter().map(|p| p / norm).collect();
    Ok(SamplingDistribution {
        alpha,
        langs,
        counts,
        f,
        q,
    })
}

/// How the byte threshold in [`filter_languages`] treats the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    /// Keep corpora with `byte_size >= min_bytes`.
    #[default]
    Inclusive,
    /// Keep corpora with `byte_size > min_bytes`.
    Exclusive,
}

/// Keeps the corpora whose byte size passes `min_bytes`, preserving order.
pub fn filter_languages(
    corpora: Vec<LanguageCorpus>,
    min_bytes: u64,
    threshold: Threshold,
) -> Vec<LanguageCorpus> {
    corpora
        .into_iter()
        .filter(|c| match threshold {
            Threshold::Inclusive => c.byte_size >= min_bytes,
            Threshold::Exclusive => c.byte_size > min_bytes,
        })
        .collect()
}

/// Draws `total_sentences` sentences: a language with probability `q_i`,
/// then a sentence of that language uniformly with replacement.
pub fn assemble_multilingual_corpus(
    corpora: &[LanguageCorpus],
    dist: &SamplingDistribution,
    total_sentences: usize,
    seed: u64,
) -> Result<LanguageCorpus> {
    if corpora.len() != dist.len() {
        return Err(Error::LengthMismatch {
            expected: dist.len(),
            actual: corpora.len(),
        });
    }
    if total_sentences == 0 {
        return Err(Error::Config("total_sentences must be > 0".into()));
    }
    for (c, &q) in corpora.iter().zip(&dist.q) {
        if q > 0.0 && c.is_empty() {
            return Err(Error::EmptyCorpus(c.lang_id.clone()));
        }
    }
    let languages =
        WeightedIndex::new(&dist.q).map_err(|e| Error::Config(format!("bad distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(total_sentences);
    for _ in 0..total_sentences {
        let corpus = &corpora[languages.sample(&mut rng)];
        let j = rng.gen_range(0..corpus.n());
        out.push(corpus.sentences[j].as_str());
    }
    Ok(LanguageCorpus::from_lines("multi", out))
}
