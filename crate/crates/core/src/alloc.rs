//! Greedy per-language vocabulary capacity allocation over an ALP table,
//! and construction of the merged multilingual vocabulary.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::alp::AlpTable;
use crate::corpus::SamplingDistribution;
use crate::error::{Error, Result};
use crate::unigram::{UnigramDistribution, UnigramVocabulary};

/// Supplies the monolingual vocabulary (and its unigram distribution) of a
/// language at a grid size.
pub trait VocabProvider {
    fn vocabulary(&self, lang: &str, size: usize) -> Result<Arc<UnigramVocabulary>>;
    fn unigram(&self, lang: &str, size: usize) -> Result<Arc<UnigramDistribution>>;
}

/// In-memory provider keyed by `(lang, size)`.
#[derive(Default)]
pub struct MapProvider {
    vocabs: HashMap<(String, usize), Arc<UnigramVocabulary>>,
    unigrams: Mutex<HashMap<(String, usize), Arc<UnigramDistribution>>>,
}

impl MapProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, lang: &str, size: usize, vocab: UnigramVocabulary) {
        self.vocabs.insert((lang.to_owned(), size), Arc::new(vocab));
    }

    pub fn insert_unigram(&mut self, lang: &str, size: usize, dist: UnigramDistribution) {
        self.unigrams
            .get_mut()
            .unwrap()
            .insert((lang.to_owned(), size), Arc::new(dist));
    }
}

impl VocabProvider for MapProvider {
    fn vocabulary(&self, lang: &str, size: usize) -> Result<Arc<UnigramVocabulary>> {
        self.vocabs
            .get(&(lang.to_owned(), size))
            .cloned()
            .ok_or_else(|| Error::MissingCell {
                lang: lang.to_owned(),
                size,
            })
    }

    /// Falls back to the vocabulary's own piece probabilities.
    fn unigram(&self, lang: &str, size: usize) -> Result<Arc<UnigramDistribution>> {
        let key = (lang.to_owned(), size);
        if let Some(d) = self.unigrams.lock().unwrap().get(&key) {
            return Ok(d.clone());
        }
        let v = self.vocabulary(lang, size)?;
        let d = Arc::new(UnigramDistribution::from_probs(
            v.pieces().iter().map(|(p, lp)| (p.clone(), lp.exp())),
            0.0,
        ));
        self.unigrams.lock().unwrap().insert(key, d.clone());
        Ok(d)
    }
}

mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else if *x < 0.0 {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub lang: String,
    /// Weighted ALP gain of the increment; `inf` for a language's first step.
    #[serde(with = "nonfinite")]
    pub gain: f64,
    pub union_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub beta: f64,
    pub alpha: f64,
    #[serde(rename = "T")]
    pub target_size: usize,
    pub grid_step: usize,
    /// Allocated size per language.
    pub t: BTreeMap<String, usize>,
    /// `Σ q_i^β · ALP_i(t_i)`; absent when some language got nothing.
    pub objective: Option<f64>,
    pub trace: Vec<TraceStep>,
    /// Every language reached its cap before the union reached `T`.
    pub exhausted: bool,
}

impl AllocationPlan {
    pub fn union_size(&self) -> usize {
        self.trace.last().map_or(0, |s| s.union_size)
    }

    /// Allocation after replaying the trace from zero.
    pub fn replay(&self) -> BTreeMap<String, usize> {
        let mut t: BTreeMap<String, usize> = self.t.keys().map(|k| (k.clone(), 0)).collect();
        for s in &self.trace {
            *t.get_mut(&s.lang).unwrap() += self.grid_step;
        }
        t
    }
}

/// Language visiting order for tie-breaks: heavier `q^β` first, then
/// language id.
fn tie_break_order(dist: &SamplingDistribution, weights: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .total_cmp(&weights[a])
            .then_with(|| dist.langs[a].cmp(&dist.langs[b]))
    });
    order
}

/// Union of piece sets with reference counts.
#[derive(Default)]
struct PieceUnion {
    refs: HashMap<String, usize>,
}

impl PieceUnion {
    fn add(&mut self, v: &UnigramVocabulary) {
        for (p, _) in v.pieces() {
            *self.refs.entry(p.clone()).or_default() += 1;
        }
    }

    fn remove(&mut self, v: &UnigramVocabulary) {
        for (p, _) in v.pieces() {
            if let Some(n) = self.refs.get_mut(p) {
                *n -= 1;
                if *n == 0 {
                    self.refs.remove(p);
                }
            }
        }
    }

    fn len(&self) -> usize {
        self.refs.len()
    }
}

/// Repeatedly grows by one grid step the language with the largest weighted
/// ALP gain until the union of the chosen vocabularies reaches `target`.
///
/// A language's first step has gain `+∞`; a capped language is skipped.
/// Ties go to the larger `q^β`, then the smaller language id. If every
/// language is capped first, the plan comes back with `exhausted` set.
pub fn greedy_allocate(
    table: &AlpTable,
    dist: &SamplingDistribution,
    beta: f64,
    target: usize,
    provider: &dyn VocabProvider,
) -> Result<AllocationPlan> {
    if target == 0 {
        return Err(Error::Config("target size must be > 0".into()));
    }
    if dist.is_empty() || table.steps() == 0 {
        return Err(Error::Config("empty ALP table".into()));
    }
    let steps = table.steps();
    let mut rows = Vec::with_capacity(dist.len());
    for lang in &dist.langs {
        let row = table.rows.get(lang).ok_or_else(|| Error::MissingCell {
            lang: lang.clone(),
            size: table.grid_step,
        })?;
        if let Some(j) = row.iter().position(|a| !a.is_finite()) {
            return Err(Error::MissingCell {
                lang: lang.clone(),
                size: (j + 1) * table.grid_step,
            });
        }
        rows.push(row);
    }
    let weights = dist.weights(beta);
    let order = tie_break_order(dist, &weights);

    let gain = |i: usize, at: usize| -> f64 {
        if at == steps {
            f64::NEG_INFINITY
        } else if weights[i] == 0.0 {
            0.0
        } else if at == 0 {
            f64::INFINITY
        } else {
            weights[i] * (rows[i][at] - rows[i][at - 1])
        }
    };

    let mut at = vec![0usize; dist.len()];
    let mut current: Vec<Option<Arc<UnigramVocabulary>>> = vec![None; dist.len()];
    let mut union = PieceUnion::default();
    let mut trace = Vec::new();
    let mut exhausted = false;
    loop {
        let mut best: Option<(usize, f64)> = None;
        for &i in &order {
            if at[i] == steps {
                continue;
            }
            let g = gain(i, at[i]);
            if best.is_none_or(|(_, b)| g > b) {
                best = Some((i, g));
            }
        }
        let Some((i, g)) = best else {
            exhausted = true;
            warn!(
                "every language reached its cap with union {} < T = {target}",
                union.len()
            );
            break;
        };
        at[i] += 1;
        let next = provider.vocabulary(&dist.langs[i], at[i] * table.grid_step)?;
        if let Some(prev) = current[i].take() {
            union.remove(&prev);
        }
        union.add(&next);
        current[i] = Some(next);
        trace.push(TraceStep {
            step: trace.len(),
            lang: dist.langs[i].clone(),
            gain: g,
            union_size: union.len(),
        });
        if union.len() >= target {
            break;
        }
    }

    let t: BTreeMap<String, usize> = dist
        .langs
        .iter()
        .zip(&at)
        .map(|(l, &a)| (l.clone(), a * table.grid_step))
        .collect();
    let mut plan = AllocationPlan {
        beta,
        alpha: dist.alpha,
        target_size: target,
        grid_step: table.grid_step,
        t,
        objective: None,
        trace,
        exhausted,
    };
    plan.objective = objective_value(&plan, table, dist, beta).ok();
    Ok(plan)
}

/// `Σ_i q_i^β · ALP_i(t_i)`. Every language needs `t_i > 0`.
pub fn objective_value(
    plan: &AllocationPlan,
    table: &AlpTable,
    dist: &SamplingDistribution,
    beta: f64,
) -> Result<f64> {
    let weights = dist.weights(beta);
    let mut total = 0.0;
    for (lang, w) in dist.langs.iter().zip(weights) {
        let size = plan.t.get(lang).copied().unwrap_or(0);
        let a = table.get(lang, size).ok_or_else(|| Error::MissingCell {
            lang: lang.clone(),
            size,
        })?;
        total += w * a;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedPiece {
    /// `Σ_i q_i^β · p_uni,i(piece)` over contributing languages.
    pub mass: f64,
    /// `ln(mass / Σ mass)`.
    pub score: f64,
    pub langs: BTreeSet<String>,
}

/// Deduplicated union of the allocated monolingual vocabularies.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergedVocabulary {
    pub pieces: BTreeMap<String, MergedPiece>,
}

impl MergedVocabulary {
    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// The merged pieces as a segmentation model scored by merged score.
    pub fn to_unigram_vocabulary(&self) -> UnigramVocabulary {
        UnigramVocabulary::from_pieces(self.pieces.iter().map(|(p, m)| (p.clone(), m.score)))
    }

    fn coverage_count(&self) -> usize {
        self.pieces
            .keys()
            .filter(|p| p.chars().count() == 1)
            .count()
    }
}

/// Unions the planned vocabularies; a piece's mass is the `q^β`-weighted sum
/// of its unigram probabilities in each contributing language.
pub fn merge_vocabularies(
    plan: &AllocationPlan,
    provider: &dyn VocabProvider,
    dist: &SamplingDistribution,
    beta: f64,
) -> Result<MergedVocabulary> {
    let weights = dist.weights(beta);
    let mut pieces: BTreeMap<String, MergedPiece> = BTreeMap::new();
    for (lang, w) in dist.langs.iter().zip(weights) {
        let size = plan.t.get(lang).copied().unwrap_or(0);
        if size == 0 {
            continue;
        }
        let vocab = provider.vocabulary(lang, size)?;
        let p_uni = provider.unigram(lang, size)?;
        for (piece, _) in vocab.pieces() {
            let entry = pieces.entry(piece.clone()).or_insert_with(|| MergedPiece {
                mass: 0.0,
                score: 0.0,
                langs: BTreeSet::new(),
            });
            entry.mass += w * p_uni.prob(piece);
            entry.langs.insert(lang.clone());
        }
    }
    let total: f64 = pieces.values().map(|m| m.mass).sum();
    for m in pieces.values_mut() {
        m.score = if total > 0.0 {
            (m.mass / total).ln()
        } else {
            f64::NEG_INFINITY
        };
    }
    Ok(MergedVocabulary { pieces })
}

/// Keeps exactly `target` pieces: every single-character piece, then the
/// highest-scoring others (ties by piece).
pub fn clip_vocabulary(merged: &MergedVocabulary, target: usize) -> Result<MergedVocabulary> {
    let coverage = merged.coverage_count();
    if target < coverage {
        return Err(Error::BelowCoverage { target, coverage });
    }
    if merged.size() < target {
        return Err(Error::Config(format!(
            "cannot clip {} pieces up to {target}",
            merged.size()
        )));
    }
    let mut others: Vec<(&String, &MergedPiece)> = merged
        .pieces
        .iter()
        .filter(|(p, _)| p.chars().count() != 1)
        .collect();
    others.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then_with(|| a.0.cmp(b.0)));
    let keep: BTreeSet<&String> = others
        .into_iter()
        .take(target - coverage)
        .map(|(p, _)| p)
        .collect();
    Ok(MergedVocabulary {
        pieces: merged
            .pieces
            .iter()
            .filter(|(p, _)| p.chars().count() == 1 || keep.contains(p))
            .map(|(p, m)| (p.clone(), m.clone()))
            .collect(),
    })
}
