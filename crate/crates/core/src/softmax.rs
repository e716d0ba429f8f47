//! Output-layer losses: exact softmax, k-NN target sampling over a
//! refreshed top-k inner-product index, and the sampled baselines
//! (target sampling, NCE, NEG).
//!
//! Every loss is a function of the logits `z_w = h·v_w + b_w`, so its
//! gradient is carried as one coefficient `∂L/∂z_w` per touched word:
//! `∂L/∂v_w = coef·h`, `∂L/∂b_w = coef`, `∂L/∂h = Σ coef·v_w`.

use std::cmp::Ordering;
use std::fmt::Write as _;

use log::warn;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    /// `|V| × d_e`.
    pub vectors: Array2<f64>,
    pub biases: Array1<f64>,
}

impl EmbeddingTable {
    pub fn new(vectors: Array2<f64>, biases: Array1<f64>) -> Result<Self> {
        if vectors.nrows() != biases.len() {
            return Err(Error::LengthMismatch {
                expected: vectors.nrows(),
                actual: biases.len(),
            });
        }
        if !vectors.iter().chain(biases.iter()).all(|x| x.is_finite()) {
            return Err(Error::Config(
                "embedding table has non-finite entries".into(),
            ));
        }
        Ok(EmbeddingTable { vectors, biases })
    }

    /// Entries uniform in `[-scale, scale)`, zero biases.
    pub fn random(vocab_size: usize, dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors =
            Array2::from_shape_simple_fn((vocab_size, dim), || rng.gen_range(-scale..scale));
        EmbeddingTable {
            vectors,
            biases: Array1::zeros(vocab_size),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn logit(&self, h: ArrayView1<f64>, w: u32) -> f64 {
        h.dot(&self.vectors.row(w as usize)) + self.biases[w as usize]
    }

    pub fn is_finite(&self) -> bool {
        self.vectors
            .iter()
            .chain(self.biases.iter())
            .all(|x| x.is_finite())
    }

    fn check(&self, w: u32) -> Result<()> {
        if (w as usize) < self.vocab_size() {
            Ok(())
        } else {
            Err(Error::UnknownId(w))
        }
    }
}

/// Orders `(score, id)` by descending score, then ascending id.
fn rank(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopKIndex {
    pub k: usize,
    lists: Vec<Vec<u32>>,
    pub built_at_step: u64,
}

impl TopKIndex {
    pub fn list(&self, w: u32) -> Option<&[u32]> {
        self.lists.get(w as usize).map(Vec::as_slice)
    }

    pub fn vocab_size(&self) -> usize {
        self.lists.len()
    }

    /// `word_id<TAB>neighbor ids` per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (w, list) in self.lists.iter().enumerate() {
            let ids: Vec<String> = list.iter().map(u32::to_string).collect();
            let _ = writeln!(out, "{w}\t{}", ids.join(" "));
        }
        out
    }
}

const QUERY_BLOCK: usize = 64;
const ROW_CHUNK: usize = 256;

/// Exact top-k neighbours of every word by inner product `v_iᵀv_j`
/// (self-pairs included, biases ignored). `k > |V|` is clamped.
pub fn build_topk_index(emb: &EmbeddingTable, k: usize, step: u64) -> Result<TopKIndex> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let v = emb.vocab_size();
    let k = if k > v {
        warn!("k = {k} exceeds vocabulary size {v}; clamping");
        v
    } else {
        k
    };
    let table = emb.vectors.view();
    let blocks: Vec<Vec<Vec<u32>>> = (0..v)
        .step_by(QUERY_BLOCK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let end = (start + QUERY_BLOCK).min(v);
            let scores = table.slice(s![start..end, ..]).dot(&table.t());
            scores.outer_iter().map(|row| top_k(row, k)).collect()
        })
        .collect();
    Ok(TopKIndex {
        k,
        lists: blocks.into_iter().flatten().collect(),
        built_at_step: step,
    })
}

fn top_k(scores: ArrayView1<f64>, k: usize) -> Vec<u32> {
    let mut best: Vec<(f64, u32)> = Vec::with_capacity(k);
    if 4 * k >= scores.len() {
        best.extend(scores.iter().enumerate().map(|(j, &x)| (x, j as u32)));
    } else {
        // bounded scan: `worst` indexes the weakest kept pair
        let mut worst = 0;
        for (j, &x) in scores.iter().enumerate() {
            let cand = (x, j as u32);
            if best.len() < k {
                best.push(cand);
                if best.len() == k {
                    worst = weakest(&best);
                }
            } else if rank(&cand, &best[worst]) == Ordering::Less {
                best[worst] = cand;
                worst = weakest(&best);
            }
        }
    }
    best.sort_unstable_by(rank);
    best.truncate(k);
    best.into_iter().map(|(_, j)| j).collect()
}

fn weakest(pairs: &[(f64, u32)]) -> usize {
    (1..pairs.len()).fold(0, |w, i| {
        if rank(&pairs[i], &pairs[w]) == Ordering::Greater {
            i
        } else {
            w
        }
    })
}

/// `true` when the index must be rebuilt before `step`.
pub fn should_refresh(step: u64, n: u64) -> bool {
    assert!(n >= 1, "refresh interval must be >= 1");
    step.is_multiple_of(n)
}

/// Warns (and returns `false`) unless `n·|W| ≥ factor·|V|`.
pub fn check_refresh_interval(
    n: u64,
    targets_per_batch: usize,
    vocab_size: usize,
    factor: f64,
) -> bool {
    let ok = (n as f64) * targets_per_batch as f64 >= factor * vocab_size as f64;
    if !ok {
        warn!(
            "refresh interval {n} with {targets_per_batch} targets per batch is short for |V| = {vocab_size}; \
             want n·|W| >= {factor}·|V|"
        );
    }
    ok
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    ids: Vec<u32>,
    pub includes_targets: bool,
}

impl CandidateSet {
    /// Sorts and deduplicates `ids`.
    pub fn from_ids(mut ids: Vec<u32>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        CandidateSet {
            ids,
            includes_targets: false,
        }
    }

    pub fn full(vocab_size: usize) -> Self {
        CandidateSet {
            ids: (0..vocab_size as u32).collect(),
            includes_targets: true,
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, w: u32) -> bool {
        self.ids.binary_search(&w).is_ok()
    }
}

/// Union of the targets' neighbour lists, with the targets themselves.
pub fn build_candidate_set(index: &TopKIndex, targets: &[u32]) -> Result<CandidateSet> {
    let mut ids = Vec::with_capacity(targets.len() * (index.k + 1));
    for &t in targets {
        let list = index.list(t).ok_or(Error::UnknownId(t))?;
        ids.extend_from_slice(list);
        ids.push(t);
    }
    let mut set = CandidateSet::from_ids(ids);
    set.includes_targets = true;
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// Touched words; may repeat.
    pub ids: Vec<u32>,
    /// `∂L/∂z` for each entry of `ids`.
    pub coef: Vec<f64>,
}

impl LossGrad {
    pub fn grad_h(&self, emb: &EmbeddingTable) -> Array1<f64> {
        let mut g = Array1::zeros(emb.dim());
        for (&w, &c) in self.ids.iter().zip(&self.coef) {
            g.scaled_add(c, &emb.vectors.row(w as usize));
        }
        g
    }

    /// `∂L/∂z_w` summed over repeats.
    pub fn coef_of(&self, w: u32) -> f64 {
        self.ids
            .iter()
            .zip(&self.coef)
            .filter(|(&i, _)| i == w)
            .map(|(_, &c)| c)
            .sum()
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy of `target` under a softmax restricted to `ids`
/// (distinct, containing `target`).
fn restricted_softmax(
    h: ArrayView1<f64>,
    target: u32,
    ids: &[u32],
    emb: &EmbeddingTable,
) -> LossGrad {
    let z: Vec<f64> = ids.iter().map(|&w| emb.logit(h, w)).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    let mut loss = 0.0;
    let coef = ids
        .iter()
        .zip(&z)
        .map(|(&w, &zw)| {
            let p = (zw - lse).exp();
            if w == target {
                loss = lse - zw;
                p - 1.0
            } else {
                p
            }
        })
        .collect();
    LossGrad {
        loss,
        ids: ids.to_vec(),
        coef,
    }
}

/// Softmax cross-entropy with the normaliser restricted to `cand`.
pub fn sampled_mlm_loss(
    h: ArrayView1<f64>,
    target: u32,
    cand: &CandidateSet,
    emb: &EmbeddingTable,
) -> Result<LossGrad> {
    if !cand.contains(target) {
        return Err(Error::TargetNotInCandidates(target));
    }
    if let Some(&last) = cand.ids.last() {
        emb.check(last)?;
    }
    Ok(restricted_softmax(h, target, &cand.ids, emb))
}

/// Full-vocabulary softmax cross-entropy.
pub fn exact_mlm_loss(h: ArrayView1<f64>, target: u32, emb: &EmbeddingTable) -> Result<LossGrad> {
    emb.check(target)?;
    let ids: Vec<u32> = (0..emb.vocab_size() as u32).collect();
    Ok(restricted_softmax(h, target, &ids, emb))
}

/// Softmax cross-entropy over `{target} ∪ negatives`.
pub fn target_sampling_loss(
    h: ArrayView1<f64>,
    target: u32,
    negatives: &[u32],
    emb: &EmbeddingTable,
) -> Result<LossGrad> {
    emb.check(target)?;
    let mut ids = negatives.to_vec();
    ids.push(target);
    let set = CandidateSet::from_ids(ids);
    if let Some(&last) = set.ids.last() {
        emb.check(last)?;
    }
    Ok(restricted_softmax(h, target, &set.ids, emb))
}

/// Noise-contrastive estimation with `K = |negatives|` draws from `noise`:
/// `s_w = z_w − ln(K·q(w))`, loss `softplus(−s_t) + Σ_neg softplus(s_neg)`.
/// Repeated negatives count once per draw.
pub fn nce_loss(
    h: ArrayView1<f64>,
    target: u32,
    negatives: &[u32],
    noise: &[f64],
    emb: &EmbeddingTable,
) -> Result<LossGrad> {
    emb.check(target)?;
    let k = negatives.len().max(1) as f64;
    let score = |w: u32| emb.logit(h, w) - (k * noise[w as usize]).ln();
    let st = score(target);
    let mut loss = softplus(-st);
    let mut ids = vec![target];
    let mut coef = vec![-sigmoid(-st)];
    for &w in negatives {
        emb.check(w)?;
        let sw = score(w);
        loss += softplus(sw);
        ids.push(w);
        coef.push(sigmoid(sw));
    }
    Ok(LossGrad { loss, ids, coef })
}

/// Negative sampling: `−ln σ(z_t) − Σ_neg ln σ(−z_neg)`.
pub fn neg_loss(
    h: ArrayView1<f64>,
    target: u32,
    negatives: &[u32],
    emb: &EmbeddingTable,
) -> Result<LossGrad> {
    emb.check(target)?;
    let zt = emb.logit(h, target);
    let mut loss = softplus(-zt);
    let mut ids = vec![target];
    let mut coef = vec![-sigmoid(-zt)];
    for &w in negatives {
        emb.check(w)?;
        let zw = emb.logit(h, w);
        loss += softplus(zw);
        ids.push(w);
        coef.push(sigmoid(zw));
    }
    Ok(LossGrad { loss, ids, coef })
}

/// Unigram noise distribution for the sampled baselines.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    probs: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl NoiseSampler {
    pub fn new(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        let dist = WeightedIndex::new(weights)
            .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
        Ok(NoiseSampler {
            probs: weights.iter().map(|w| w / total).collect(),
            dist,
        })
    }

    pub fn uniform(n: usize) -> Self {
        Self::new(&vec![1.0; n]).expect("n > 0")
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `count` independent draws.
    pub fn sample<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<u32> {
        (0..count).map(|_| self.dist.sample(rng) as u32).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Exact,
    Knn,
    Target,
    Nce,
    Neg,
}

impl Sampler {
    pub const ALL: [Sampler; 5] = [
        Sampler::Exact,
        Sampler::Knn,
        Sampler::Target,
        Sampler::Nce,
        Sampler::Neg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Sampler::Exact => "exact",
            Sampler::Knn => "knn",
            Sampler::Target => "target",
            Sampler::Nce => "nce",
            Sampler::Neg => "neg",
        }
    }
}

impl std::str::FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Sampler::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampler {s:?}")))
    }
}

/// What the batched output layer normalises over.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    Exact,
    Knn(&'a TopKIndex),
    Target(&'a [u32]),
    Nce {
        negatives: &'a [u32],
        noise: &'a [f64],
    },
    Neg(&'a [u32]),
}

/// Loss and gradients of one batch of positions.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrad {
    /// Summed over positions.
    pub loss: f64,
    /// `n × d_e`.
    pub grad_h: Array2<f64>,
    /// Columns touched, ascending.
    pub ids: Vec<u32>,
    /// `|ids| × d_e`.
    pub grad_rows: Array2<f64>,
    pub grad_bias: Array1<f64>,
    /// Number of words the normaliser ranged over.
    pub candidate_size: usize,
}

enum RowRule<'a> {
    Softmax,
    /// Only negatives plus the row's own target.
    MaskedSoftmax(&'a [bool]),
    Nce {
        mult: &'a [f64],
        log_kq: Vec<f64>,
    },
    Neg {
        mult: &'a [f64],
    },
}

/// Batched loss over positions `h` (rows) and their targets, using dense
/// products over the candidate columns.
pub fn batch_loss(
    emb: &EmbeddingTable,
    h: ArrayView2<f64>,
    targets: &[u32],
    objective: Objective,
) -> Result<BatchGrad> {
    if h.nrows() != targets.len() {
        return Err(Error::LengthMismatch {
            expected: h.nrows(),
            actual: targets.len(),
        });
    }
    for &t in targets {
        emb.check(t)?;
    }
    let v = emb.vocab_size();
    let (ids, negatives): (Vec<u32>, Option<&[u32]>) = match objective {
        Objective::Exact => ((0..v as u32).collect(), None),
        Objective::Knn(index) => (build_candidate_set(index, targets)?.ids, None),
        Objective::Target(n) | Objective::Neg(n) | Objective::Nce { negatives: n, .. } => {
            let mut ids = n.to_vec();
            ids.extend_from_slice(targets);
            (CandidateSet::from_ids(ids).ids, Some(n))
        }
    };
    if let Some(&last) = ids.last() {
        emb.check(last)?;
    }
    let mut mult = vec![0.0; ids.len()];
    if let Some(neg) = negatives {
        for w in neg {
            mult[ids.binary_search(w).unwrap()] += 1.0;
        }
    }
    let is_neg: Vec<bool> = mult.iter().map(|&m| m > 0.0).collect();
    let rule = match objective {
        Objective::Exact | Objective::Knn(_) => RowRule::Softmax,
        Objective::Target(_) => RowRule::MaskedSoftmax(&is_neg),
        Objective::Nce { negatives, noise } => {
            let k = negatives.len().max(1) as f64;
            RowRule::Nce {
                mult: &mult,
                log_kq: ids.iter().map(|&w| (k * noise[w as usize]).ln()).collect(),
            }
        }
        Objective::Neg(_) => RowRule::Neg { mult: &mult },
    };

    let gathered;
    let (vecs, bias) = if ids.len() == v {
        (emb.vectors.view(), emb.biases.view())
    } else {
        let idx: Vec<usize> = ids.iter().map(|&w| w as usize).collect();
        gathered = (
            emb.vectors.select(Axis(0), &idx),
            emb.biases.select(Axis(0), &idx),
        );
        (gathered.0.view(), gathered.1.view())
    };

    let (n, d, m) = (h.nrows(), h.ncols(), ids.len());
    let mut grad_h = Array2::zeros((n, d));
    let mut grad_rows = Array2::zeros((m, d));
    let mut grad_bias = Array1::zeros(m);
    let mut loss = 0.0;
    for start in (0..n).step_by(ROW_CHUNK) {
        let end = (start + ROW_CHUNK).min(n);
        let hc = h.slice(s![start..end, ..]);
        let mut z = hc.dot(&vecs.t());
        z += &bias;
        for (mut row, &t) in z.outer_iter_mut().zip(&targets[start..end]) {
            let tc = ids.binary_search(&t).unwrap();
            loss += row_coefficients(row.as_slice_mut().unwrap(), tc, &rule);
        }
        general_mat_mul(
            1.0,
            &z,
            &vecs,
            0.0,
            &mut grad_h.slice_mut(s![start..end, ..]),
        );
        general_mat_mul(1.0, &z.t(), &hc, 1.0, &mut grad_rows);
        grad_bias += &z.sum_axis(Axis(0));
    }
    Ok(BatchGrad {
        loss,
        grad_h,
        candidate_size: ids.len(),
        ids,
        grad_rows,
        grad_bias,
    })
}

/// Overwrites logits with `∂L/∂z` and returns the row's loss.
fn row_coefficients(z: &mut [f64], t: usize, rule: &RowRule) -> f64 {
    match rule {
        RowRule::Softmax | RowRule::MaskedSoftmax(_) => {
            let allowed = |j: usize| match rule {
                RowRule::MaskedSoftmax(mask) => mask[j] || j == t,
                _ => true,
            };
            let mut m = f64::NEG_INFINITY;
            for (j, &x) in z.iter().enumerate() {
                if allowed(j) {
                    m = m.max(x);
                }
            }
            let mut sum = 0.0;
            for (j, &x) in z.iter().enumerate() {
                if allowed(j) {
                    sum += (x - m).exp();
                }
            }
            let lse = m + sum.ln();
            let loss = lse - z[t];
            for (j, x) in z.iter_mut().enumerate() {
                *x = if allowed(j) { (*x - lse).exp() } else { 0.0 };
            }
            z[t] -= 1.0;
            loss
        }
        RowRule::Nce { mult, log_kq } => {
            let st = z[t] - log_kq[t];
            let mut loss = softplus(-st);
            for (j, x) in z.iter_mut().enumerate() {
                if mult[j] > 0.0 {
                    let s = *x - log_kq[j];
                    loss += mult[j] * softplus(s);
                    *x = mult[j] * sigmoid(s);
                } else {
                    *x = 0.0;
                }
            }
            z[t] -= sigmoid(-st);
            loss
        }
        RowRule::Neg { mult } => {
            let zt = z[t];
            let mut loss = softplus(-zt);
            for (j, x) in z.iter_mut().enumerate() {
                if mult[j] > 0.0 {
                    loss += mult[j] * softplus(*x);
                    *x = mult[j] * sigmoid(*x);
                } else {
                    *x = 0.0;
                }
            }
            z[t] -= sigmoid(-zt);
            loss
        }
    }
}
