//! Brute-force oracles and instance generators shared by the integration
//! suites. The oracles never call into the code paths being checked.
#![allow(dead_code)]

use std::collections::HashMap;

/// Every segmentation of `text` into pieces of `vocab`, with its summed log
/// probability.
pub fn all_segmentations(text: &str, vocab: &HashMap<String, f64>) -> Vec<(Vec<String>, f64)> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut path = Vec::new();
    fn rec(
        chars: &[char],
        i: usize,
        vocab: &HashMap<String, f64>,
        path: &mut Vec<String>,
        score: f64,
        out: &mut Vec<(Vec<String>, f64)>,
    ) {
        if i == chars.len() {
            out.push((path.clone(), score));
            return;
        }
        for j in i + 1..=chars.len() {
            let piece: String = chars[i..j].iter().collect();
            if let Some(&lp) = vocab.get(&piece) {
                path.push(piece);
                rec(chars, j, vocab, path, score + lp, out);
                path.pop();
            }
        }
    }
    rec(&chars, 0, vocab, &mut path, 0.0, &mut out);
    out
}

/// Maximum segmentation score by enumeration.
pub fn best_segmentation_score(text: &str, vocab: &HashMap<String, f64>) -> f64 {
    all_segmentations(text, vocab)
        .into_iter()
        .map(|s| s.1)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `log Σ_segmentations exp(score)` by enumeration.
pub fn marginal_log_likelihood(text: &str, vocab: &HashMap<String, f64>) -> f64 {
    let scores: Vec<f64> = all_segmentations(text, vocab)
        .into_iter()
        .map(|s| s.1)
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

/// Posterior expected occurrence counts of each piece by enumeration.
pub fn expected_piece_counts(text: &str, vocab: &HashMap<String, f64>) -> HashMap<String, f64> {
    let segs = all_segmentations(text, vocab);
    let z: f64 = segs.iter().map(|s| s.1.exp()).sum();
    let mut out = HashMap::new();
    for (pieces, score) in segs {
        let w = score.exp() / z;
        for p in pieces {
            *out.entry(p).or_insert(0.0) += w;
        }
    }
    out
}

/// Overlapping occurrence count of `needle` in `hay`.
pub fn count_occurrences(hay: &str, needle: &str) -> usize {
    let h: Vec<char> = hay.chars().collect();
    let n: Vec<char> = needle.chars().collect();
    if n.len() > h.len() {
        return 0;
    }
    (0..=h.len() - n.len())
        .filter(|&i| h[i..i + n.len()] == n[..])
        .count()
}

/// Splitmix64, for generating test instances without touching the crate's RNG.
pub struct Mix(pub u64);

impl Mix {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Relative error between two gradient vectors, normalized by the larger norm.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Exact top-k by naive inner products: descending score, ascending id.
pub fn brute_topk(rows: &[Vec<f64>], k: usize) -> Vec<Vec<u32>> {
    rows.iter()
        .map(|q| {
            let mut scored: Vec<(f64, u32)> = rows
                .iter()
                .enumerate()
                .map(|(j, r)| (q.iter().zip(r).map(|(a, b)| a * b).sum(), j as u32))
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            scored
                .into_iter()
                .take(k.min(rows.len()))
                .map(|s| s.1)
                .collect()
        })
        .collect()
}

/// `−log softmax(z)[t]` over the listed logits, by direct summation.
pub fn naive_ce(logits: &[f64], t: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|z| (z - m).exp()).sum();
    m + s.ln() - logits[t]
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let up = f(&p);
            p[i] = orig - eps;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Every allocation of `budget` grid steps over languages with per-language
/// caps, each language receiving at least one step.
pub fn allocations(caps: &[usize], budget: usize) -> Vec<Vec<usize>> {
    fn rec(caps: &[usize], left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == caps.len() {
            if left == 0 {
                out.push(cur.clone());
            }
            return;
        }
        for s in 1..=caps[cur.len()].min(left) {
            cur.push(s);
            rec(caps, left - s, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(caps, budget, &mut Vec::new(), &mut out);
    out
}

/// A random allocation instance with disjoint vocabularies and
/// non-increasing gains.
pub struct AllocInstance {
    pub table: vocap_core::alp::AlpTable,
    pub dist: vocap_core::corpus::SamplingDistribution,
    pub provider: vocap_core::alloc::MapProvider,
    pub beta: f64,
    pub steps: usize,
    pub grid_step: usize,
}

pub fn concave_instance(
    mix: &mut Mix,
    langs: usize,
    steps: usize,
    integer_gains: bool,
) -> AllocInstance {
    use vocap_core::unigram::UnigramVocabulary;
    let grid_step = 1 + mix.below(3);
    let names: Vec<String> = (0..langs).map(|i| format!("l{i}")).collect();
    let mut table = vocap_core::alp::AlpTable::new(grid_step, grid_step * steps);
    let mut provider = vocap_core::alloc::MapProvider::new();
    for name in &names {
        let mut a = -50.0 - 50.0 * mix.uniform();
        let mut gain = if integer_gains {
            8.0
        } else {
            10.0 * mix.uniform()
        };
        let mut row = Vec::with_capacity(steps);
        for _ in 0..steps {
            row.push(a);
            gain = if integer_gains {
                gain - mix.below(3) as f64
            } else {
                gain * mix.uniform()
            };
            a += gain.max(0.0);
        }
        table.insert_row(name, row);
        for j in 1..=steps {
            let size = j * grid_step;
            provider.insert(
                name,
                size,
                UnigramVocabulary::from_pieces((0..size).map(|k| (format!("{name}/{k}"), -1.0))),
            );
        }
    }
    let counts: Vec<usize> = (0..langs).map(|_| 1 + mix.below(10_000)).collect();
    let dist = vocap_core::corpus::sampling_distribution_from_counts(names, counts, 0.7).unwrap();
    let beta = [0.0, 0.3, 0.7, 1.0][mix.below(4)];
    AllocInstance {
        table,
        dist,
        provider,
        beta,
        steps,
        grid_step,
    }
}

/// Optimal objective and every optimal plan (in grid steps) by enumeration.
pub fn brute_force_optimum(inst: &AllocInstance, budget: usize) -> (f64, Vec<Vec<usize>>) {
    let weights: Vec<f64> = inst.dist.q.iter().map(|q| q.powf(inst.beta)).collect();
    let caps = vec![inst.steps; inst.dist.langs.len()];
    let value = |plan: &[usize]| -> f64 {
        plan.iter()
            .zip(&inst.dist.langs)
            .zip(&weights)
            .map(|((&s, l), w)| w * inst.table.rows[l][s - 1])
            .sum()
    };
    let all = allocations(&caps, budget);
    let best = all
        .iter()
        .map(|p| value(p))
        .fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-9 * best.abs().max(1.0);
    let optima = all.into_iter().filter(|p| value(p) >= best - tol).collect();
    (best, optima)
}

/// Random embedding tables, contexts, and the per-position losses in packed
/// form for finite-difference checks.
pub mod fixtures {
    use super::Mix;
    use ndarray::{Array1, Array2};
    use vocap_core::softmax::*;

    pub fn random_table(mix: &mut Mix, v: usize, d: usize, scale: f64) -> EmbeddingTable {
        let vectors = Array2::from_shape_fn((v, d), |_| scale * mix.normal());
        let biases = Array1::from_shape_fn(v, |_| 0.1 * mix.normal());
        EmbeddingTable::new(vectors, biases).unwrap()
    }

    pub fn random_h(mix: &mut Mix, d: usize) -> Array1<f64> {
        Array1::from_shape_fn(d, |_| mix.normal())
    }

    pub fn logits(h: &Array1<f64>, emb: &EmbeddingTable, ids: &[u32]) -> Vec<f64> {
        ids.iter()
            .map(|&w| {
                let row = emb.vectors.row(w as usize);
                h.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() + emb.biases[w as usize]
            })
            .collect()
    }

    /// Packs `(h, V, b)` so every parameter can be perturbed.
    pub fn pack(h: &Array1<f64>, emb: &EmbeddingTable) -> Vec<f64> {
        h.iter()
            .chain(emb.vectors.iter())
            .chain(emb.biases.iter())
            .copied()
            .collect()
    }

    pub fn unpack(p: &[f64], v: usize, d: usize) -> (Array1<f64>, EmbeddingTable) {
        let h = Array1::from(p[..d].to_vec());
        let vectors = Array2::from_shape_vec((v, d), p[d..d + v * d].to_vec()).unwrap();
        let biases = Array1::from(p[d + v * d..].to_vec());
        (h, EmbeddingTable::new(vectors, biases).unwrap())
    }

    pub fn analytic(lg: &LossGrad, h: &Array1<f64>, emb: &EmbeddingTable) -> Vec<f64> {
        let (v, d) = (emb.vocab_size(), emb.dim());
        let mut gv = Array2::<f64>::zeros((v, d));
        let mut gb = Array1::<f64>::zeros(v);
        for (&w, &c) in lg.ids.iter().zip(&lg.coef) {
            gv.row_mut(w as usize).scaled_add(c, h);
            gb[w as usize] += c;
        }
        lg.grad_h(emb)
            .iter()
            .chain(gv.iter())
            .chain(gb.iter())
            .copied()
            .collect()
    }

    pub type LossFn<'a> = Box<dyn Fn(&Array1<f64>, &EmbeddingTable) -> LossGrad + 'a>;

    pub fn losses<'a>(
        t: u32,
        cand: &'a CandidateSet,
        negs: &'a [u32],
        noise: &'a [f64],
    ) -> Vec<(&'static str, LossFn<'a>)> {
        vec![
            (
                "sampled",
                Box::new(move |h, e| sampled_mlm_loss(h.view(), t, cand, e).unwrap()),
            ),
            (
                "exact",
                Box::new(move |h, e| exact_mlm_loss(h.view(), t, e).unwrap()),
            ),
            (
                "target",
                Box::new(move |h, e| target_sampling_loss(h.view(), t, negs, e).unwrap()),
            ),
            (
                "nce",
                Box::new(move |h, e| nce_loss(h.view(), t, negs, noise, e).unwrap()),
            ),
            (
                "neg",
                Box::new(move |h, e| neg_loss(h.view(), t, negs, e).unwrap()),
            ),
        ]
    }
}
