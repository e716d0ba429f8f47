//! Unigram language model subword vocabularies: seeding, EM over
//! segmentation lattices, likelihood-based pruning, Viterbi tokenization and
//! unigram counting.
//!
//! Spaces are replaced by [`WS_MARKER`] before training and tokenization.
//! Training works on whitespace-delimited chunks ("words" carrying their
//! leading marker) weighted by frequency, so no trained piece spans a word
//! boundary. Tokenization runs one lattice over the whole sentence and works
//! with any vocabulary.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::LanguageCorpus;
use crate::error::{Error, Result};

/// Visible stand-in for a space character.
pub const WS_MARKER: char = '\u{2581}';

/// Log-probability penalty below the vocabulary minimum for characters that
/// have no piece.
const UNK_PENALTY: f64 = 10.0;

pub fn normalize(sentence: &str) -> String {
    sentence.replace(' ', &WS_MARKER.to_string())
}

/// Joins pieces and maps the whitespace marker back to spaces.
pub fn detokenize<S: AsRef<str>>(pieces: &[S]) -> String {
    let joined: String = pieces.iter().map(AsRef::as_ref).collect();
    joined.replace(WS_MARKER, " ")
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UnigramConfig {
    /// Longest piece, in characters.
    pub max_piece_chars: usize,
    /// Seed candidates per target piece.
    pub seed_factor: usize,
    /// Fraction of pieces kept per pruning round.
    pub shrink_factor: f64,
    /// EM iterations on the seed set.
    pub initial_em_iterations: usize,
    /// EM iterations after each pruning round.
    pub em_iterations_per_round: usize,
    /// Additive smoothing for unigram counts.
    pub smoothing: f64,
}

impl Default for UnigramConfig {
    fn default() -> Self {
        UnigramConfig {
            max_piece_chars: 16,
            seed_factor: 20,
            shrink_factor: 0.75,
            initial_em_iterations: 4,
            em_iterations_per_round: 2,
            smoothing: 1.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Vocabulary and tokenization
// ---------------------------------------------------------------------------

/// Piece → natural-log probability. The segmentation model.
#[derive(Debug, Clone, PartialEq)]
pub struct UnigramVocabulary {
    /// Sorted by descending log probability, then lexicographically.
    pieces: Vec<(String, f64)>,
    index: HashMap<String, usize>,
    max_piece_chars: usize,
    unk_log_prob: f64,
}

impl UnigramVocabulary {
    /// Builds a vocabulary; a repeated piece keeps its first score.
    pub fn from_pieces<I, S>(pieces: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut seen = HashMap::new();
        let mut list = Vec::new();
        for (p, lp) in pieces {
            let p = p.into();
            if p.is_empty() || seen.contains_key(&p) {
                continue;
            }
            seen.insert(p.clone(), ());
            list.push((p, lp));
        }
        list.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let index = list
            .iter()
            .enumerate()
            .map(|(i, (p, _))| (p.clone(), i))
            .collect();
        let max_piece_chars = list
            .iter()
            .map(|(p, _)| p.chars().count())
            .max()
            .unwrap_or(1);
        let min = list
            .iter()
            .map(|(_, lp)| *lp)
            .filter(|lp| lp.is_finite())
            .fold(0.0f64, f64::min);
        UnigramVocabulary {
            pieces: list,
            index,
            max_piece_chars,
            unk_log_prob: min - UNK_PENALTY,
        }
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[(String, f64)] {
        &self.pieces
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.index.contains_key(piece)
    }

    pub fn log_prob(&self, piece: &str) -> Option<f64> {
        self.index.get(piece).map(|&i| self.pieces[i].1)
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn max_piece_chars(&self) -> usize {
        self.max_piece_chars
    }

    /// Score given to a character with no piece.
    pub fn unk_log_prob(&self) -> f64 {
        self.unk_log_prob
    }

    /// The single-character pieces.
    pub fn char_cover(&self) -> BTreeSet<char> {
        self.pieces
            .iter()
            .filter_map(|(p, _)| single_char(p))
            .collect()
    }

    /// Viterbi segmentation of `sentence` (spaces are marked first).
    pub fn tokenize(&self, sentence: &str) -> Vec<String> {
        self.tokenize_with_score(sentence).0
    }

    /// Viterbi segmentation and its total log probability.
    ///
    /// Among equal-scoring paths the one with fewer pieces wins, then the
    /// lexicographically smallest piece sequence.
    pub fn tokenize_with_score(&self, sentence: &str) -> (Vec<String>, f64) {
        let text = normalize(sentence);
        let (spans, score) = self.viterbi(&text);
        let pieces = spans
            .into_iter()
            .map(|(a, b)| text[a..b].to_owned())
            .collect();
        (pieces, score)
    }

    /// Byte spans of the best path over already-normalized text.
    fn viterbi(&self, text: &str) -> (Vec<(usize, usize)>, f64) {
        let bounds: Vec<usize> = text
            .char_indices()
            .map(|(b, _)| b)
            .chain(std::iter::once(text.len()))
            .collect();
        let n = bounds.len() - 1;
        // best[i]: best segmentation of text[i..], as (score, pieces, first piece end)
        let mut best: Vec<(f64, usize, usize)> = vec![(f64::NEG_INFINITY, usize::MAX, 0); n + 1];
        best[n] = (0.0, 0, n);
        for i in (0..n).rev() {
            let mut cur: Option<(f64, usize, usize)> = None;
            for len in 1..=self.max_piece_chars.min(n - i) {
                let j = i + len;
                let piece = &text[bounds[i]..bounds[j]];
                let lp = match self.log_prob(piece) {
                    Some(lp) => lp,
                    None if len == 1 => self.unk_log_prob,
                    None => continue,
                };
                let (rest, rest_count, _) = best[j];
                if rest == f64::NEG_INFINITY && j != n {
                    continue;
                }
                let cand = (lp + rest, rest_count + 1, j);
                cur = Some(match cur {
                    None => cand,
                    Some(c) => {
                        // higher score, then fewer pieces, then the
                        // lexicographically smaller first piece
                        let ord = cand
                            .0
                            .total_cmp(&c.0)
                            .then_with(|| c.1.cmp(&cand.1))
                            .then_with(|| text[bounds[i]..bounds[c.2]].cmp(piece));
                        if ord == Ordering::Greater {
                            cand
                        } else {
                            c
                        }
                    }
                });
            }
            if let Some(c) = cur {
                best[i] = c;
            }
        }
        let mut spans = Vec::new();
        let mut i = 0;
        while i < n {
            let j = best[i].2;
            spans.push((bounds[i], bounds[j]));
            i = j;
        }
        (spans, best[0].0)
    }

    /// TSV lines `piece<TAB>log_prob`, in vocabulary order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (p, lp) in &self.pieces {
            out.push_str(p);
            out.push('\t');
            out.push_str(&format_float(*lp));
            out.push('\n');
        }
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_tsv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text).map_err(|(line, message)| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        })
    }

    /// Parses the TSV format; errors carry a 1-based line number.
    pub fn parse_tsv(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut pieces = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            // pieces may contain tabs, the score never does
            let (piece, score) = line
                .rsplit_once('\t')
                .ok_or((i + 1, "missing tab separator".to_owned()))?;
            let lp: f64 = score
                .parse()
                .map_err(|_| (i + 1, format!("bad log probability {score:?}")))?;
            pieces.push((piece.to_owned(), lp));
        }
        Ok(Self::from_pieces(pieces))
    }
}

/// Shortest round-tripping decimal form.
pub(crate) fn format_float(x: f64) -> String {
    if x == f64::NEG_INFINITY {
        "-inf".to_owned()
    } else {
        format!("{x:?}")
    }
}

fn single_char(p: &str) -> Option<char> {
    let mut it = p.chars();
    match (it.next(), it.next()) {
        (Some(c), None) => Some(c),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Unigram distribution
// ---------------------------------------------------------------------------

/// Smoothed empirical piece distribution of a tokenized corpus.
///
/// `probs` covers every vocabulary piece; `smoothing_mass` is the mass held
/// by pieces outside the vocabulary (unknown characters).
#[derive(Debug, Clone, PartialEq)]
pub struct UnigramDistribution {
    pub probs: HashMap<String, f64>,
    pub counts: HashMap<String, u64>,
    pub unk_count: u64,
    pub smoothing_mass: f64,
}

impl UnigramDistribution {
    /// Wraps explicit probabilities, e.g. for hand-built cases.
    pub fn from_probs<I, S>(probs: I, smoothing_mass: f64) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        UnigramDistribution {
            probs: probs.into_iter().map(|(p, v)| (p.into(), v)).collect(),
            counts: HashMap::new(),
            unk_count: 0,
            smoothing_mass,
        }
    }

    pub fn prob(&self, piece: &str) -> f64 {
        self.probs
            .get(piece)
            .copied()
            .unwrap_or(self.smoothing_mass)
    }

    pub fn log_prob(&self, piece: &str) -> f64 {
        self.prob(piece).ln()
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum::<f64>() + self.smoothing_mass
    }
}

/// Tokenizes every sentence, sentence order preserved.
pub fn tokenize_corpus(vocab: &UnigramVocabulary, corpus: &LanguageCorpus) -> Vec<Vec<String>> {
    corpus
        .sentences()
        .par_iter()
        .map(|s| vocab.tokenize(s))
        .collect()
}

/// Counts piece frequencies of the Viterbi-tokenized corpus with additive
/// smoothing `smoothing` over the vocabulary plus one unknown bucket.
pub fn count_unigram_distribution(
    vocab: &UnigramVocabulary,
    corpus: &LanguageCorpus,
    smoothing: f64,
) -> Result<UnigramDistribution> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(corpus.lang_id.clone()));
    }
    Ok(distribution_from_tokens(
        vocab,
        &tokenize_corpus(vocab, corpus),
        smoothing,
    ))
}

pub(crate) fn distribution_from_tokens(
    vocab: &UnigramVocabulary,
    tokens: &[Vec<String>],
    smoothing: f64,
) -> UnigramDistribution {
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut unk_count = 0u64;
    let mut total = 0u64;
    for sentence in tokens {
        for piece in sentence {
            total += 1;
            if vocab.contains(piece) {
                *counts.entry(piece.clone()).or_default() += 1;
            } else {
                unk_count += 1;
            }
        }
    }
    let z = total as f64 + smoothing * (vocab.size() + 1) as f64;
    let probs = vocab
        .pieces()
        .iter()
        .map(|(p, _)| {
            let c = counts.get(p).copied().unwrap_or(0);
            (p.clone(), (c as f64 + smoothing) / z)
        })
        .collect();
    UnigramDistribution {
        probs,
        counts,
        unk_count,
        smoothing_mass: (unk_count as f64 + smoothing) / z,
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// A candidate piece with its raw occurrence count and current log
/// probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub piece: String,
    pub count: u64,
    pub log_prob: f64,
}

/// Scored candidate pieces, sorted lexicographically by piece.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn get(&self, piece: &str) -> Option<&Candidate> {
        self.candidates
            .binary_search_by(|c| c.piece.as_str().cmp(piece))
            .ok()
            .map(|i| &self.candidates[i])
    }

    pub fn pieces(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.piece.as_str())
    }

    pub fn from_scored<I, S>(pieces: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut candidates: Vec<Candidate> = pieces
            .into_iter()
            .map(|(p, lp)| Candidate {
                piece: p.into(),
                count: 0,
                log_prob: lp,
            })
            .collect();
        candidates.sort_by(|a, b| a.piece.cmp(&b.piece));
        candidates.dedup_by(|a, b| a.piece == b.piece);
        CandidateSet { candidates }
    }

    pub fn into_vocabulary(self) -> UnigramVocabulary {
        UnigramVocabulary::from_pieces(self.candidates.into_iter().map(|c| (c.piece, c.log_prob)))
    }
}

struct Chunk {
    text: String,
    bounds: Vec<usize>,
    count: u64,
}

impl Chunk {
    fn new(text: String, count: u64) -> Self {
        let bounds = text
            .char_indices()
            .map(|(b, _)| b)
            .chain(std::iter::once(text.len()))
            .collect();
        Chunk {
            text,
            bounds,
            count,
        }
    }

    fn chars(&self) -> usize {
        self.bounds.len() - 1
    }

    fn slice(&self, i: usize, j: usize) -> &str {
        &self.text[self.bounds[i]..self.bounds[j]]
    }
}

#[derive(Clone, Copy)]
struct Edge {
    start: u32,
    end: u32,
    piece: u32,
}

struct Lattice {
    len: usize,
    /// Sorted by start, then end.
    edges: Vec<Edge>,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

impl Lattice {
    fn forward(&self, lp: &[f64], skip: Option<u32>) -> Vec<f64> {
        let mut alpha = vec![f64::NEG_INFINITY; self.len + 1];
        alpha[0] = 0.0;
        for e in &self.edges {
            if Some(e.piece) == skip {
                continue;
            }
            let v = alpha[e.start as usize] + lp[e.piece as usize];
            alpha[e.end as usize] = log_add(alpha[e.end as usize], v);
        }
        alpha
    }

    fn backward(&self, lp: &[f64]) -> Vec<f64> {
        let mut beta = vec![f64::NEG_INFINITY; self.len + 1];
        beta[self.len] = 0.0;
        for e in self.edges.iter().rev() {
            let v = beta[e.end as usize] + lp[e.piece as usize];
            beta[e.start as usize] = log_add(beta[e.start as usize], v);
        }
        beta
    }
}

/// Training state for one corpus: the frequency-weighted word chunks.
pub struct UnigramTrainer {
    chunks: Vec<Chunk>,
    charset: BTreeMap<char, u64>,
    config: UnigramConfig,
}

/// Splits normalized text before every whitespace marker.
fn split_chunks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (b, c) in text.char_indices() {
        if c == WS_MARKER && b > start {
            out.push(&text[start..b]);
            start = b;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

impl UnigramTrainer {
    pub fn new(corpus: &LanguageCorpus, config: UnigramConfig) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus(corpus.lang_id.clone()));
        }
        if config.max_piece_chars == 0 {
            return Err(Error::Config("max_piece_chars must be >= 1".into()));
        }
        if !(config.shrink_factor > 0.0 && config.shrink_factor < 1.0) {
            return Err(Error::Config("shrink_factor must be in (0, 1)".into()));
        }
        let mut words: BTreeMap<String, u64> = BTreeMap::new();
        for s in corpus.sentences() {
            let text = normalize(s);
            for chunk in split_chunks(&text) {
                *words.entry(chunk.to_owned()).or_default() += 1;
            }
        }
        let mut charset = BTreeMap::new();
        for (w, &count) in &words {
            for c in w.chars() {
                *charset.entry(c).or_default() += count;
            }
        }
        let chunks = words.into_iter().map(|(w, c)| Chunk::new(w, c)).collect();
        Ok(UnigramTrainer {
            chunks,
            charset,
            config,
        })
    }

    pub fn config(&self) -> &UnigramConfig {
        &self.config
    }

    /// Distinct characters of the corpus (after whitespace marking).
    pub fn charset(&self) -> impl Iterator<Item = char> + '_ {
        self.charset.keys().copied()
    }

    pub fn num_chars(&self) -> usize {
        self.charset.len()
    }

    /// All characters plus the `seed_size - |charset|` best substrings by
    /// `count × length`. Initial log probabilities are the normalized scores.
    pub fn seed_vocabulary(&self, seed_size: usize) -> Result<CandidateSet> {
        if seed_size < self.num_chars() {
            return Err(Error::BelowCoverage {
                target: seed_size,
                coverage: self.num_chars(),
            });
        }
        let max_len = self.config.max_piece_chars;
        let mut substrings: HashMap<&str, u64> = HashMap::new();
        for chunk in &self.chunks {
            let n = chunk.chars();
            for i in 0..n {
                for j in (i + 2)..=(i + max_len).min(n) {
                    *substrings.entry(chunk.slice(i, j)).or_default() += chunk.count;
                }
            }
        }
        let mut multi: Vec<(&str, u64, f64)> = substrings
            .into_iter()
            .map(|(s, c)| (s, c, (c * s.chars().count() as u64) as f64))
            .collect();
        multi.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(b.0)));
        multi.truncate(seed_size - self.num_chars());

        let mut scored: Vec<(String, u64, f64)> = self
            .charset
            .iter()
            .map(|(&c, &n)| (c.to_string(), n, n as f64))
            .collect();
        scored.extend(multi.into_iter().map(|(s, c, sc)| (s.to_owned(), c, sc)));
        let total: f64 = scored.iter().map(|s| s.2).sum();
        let mut candidates: Vec<Candidate> = scored
            .into_iter()
            .map(|(piece, count, score)| Candidate {
                piece,
                count,
                log_prob: (score / total).ln(),
            })
            .collect();
        candidates.sort_by(|a, b| a.piece.cmp(&b.piece));
        Ok(CandidateSet { candidates })
    }

    fn check_coverage(&self, set: &CandidateSet) -> Result<()> {
        for &c in self.charset.keys() {
            if set.get(c.encode_utf8(&mut [0; 4])).is_none() {
                return Err(Error::Coverage(c));
            }
        }
        Ok(())
    }

    fn lattice(&self, chunk: &Chunk, index: &HashMap<&str, u32>) -> Lattice {
        let n = chunk.chars();
        let max_len = self.config.max_piece_chars;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..=(i + max_len).min(n) {
                if let Some(&id) = index.get(chunk.slice(i, j)) {
                    edges.push(Edge {
                        start: i as u32,
                        end: j as u32,
                        piece: id,
                    });
                }
            }
        }
        Lattice { len: n, edges }
    }

    fn index(set: &CandidateSet) -> HashMap<&str, u32> {
        set.candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (c.piece.as_str(), i as u32))
            .collect()
    }

    /// One E-step: corpus log-likelihood and the expected count of every
    /// candidate under the current probabilities.
    pub fn expected_counts(&self, set: &CandidateSet) -> Result<(f64, Vec<f64>)> {
        self.check_coverage(set)?;
        let index = Self::index(set);
        let lp: Vec<f64> = set.candidates.iter().map(|c| c.log_prob).collect();
        let per_chunk: Vec<(f64, Vec<(u32, f64)>)> = self
            .chunks
            .par_iter()
            .map(|chunk| {
                let lat = self.lattice(chunk, &index);
                let alpha = lat.forward(&lp, None);
                let beta = lat.backward(&lp);
                let z = alpha[lat.len];
                let w = chunk.count as f64;
                let counts = lat
                    .edges
                    .iter()
                    .map(|e| {
                        let post =
                            alpha[e.start as usize] + lp[e.piece as usize] + beta[e.end as usize]
                                - z;
                        (e.piece, w * post.exp())
                    })
                    .collect();
                (w * z, counts)
            })
            .collect();
        let mut loglik = 0.0;
        let mut counts = vec![0.0; set.len()];
        for (ll, cs) in per_chunk {
            loglik += ll;
            for (p, c) in cs {
                counts[p as usize] += c;
            }
        }
        Ok((loglik, counts))
    }

    /// Corpus log-likelihood under the current probabilities.
    pub fn log_likelihood(&self, set: &CandidateSet) -> Result<f64> {
        Ok(self.expected_counts(set)?.0)
    }

    /// Runs `iterations` EM steps in place and returns the log-likelihood
    /// before each step followed by the final one.
    pub fn em_train(&self, set: &mut CandidateSet, iterations: usize) -> Result<Vec<f64>> {
        let mut history = Vec::with_capacity(iterations + 1);
        for _ in 0..iterations {
            let (ll, counts) = self.expected_counts(set)?;
            history.push(ll);
            let total: f64 = counts.iter().sum();
            for (c, &n) in set.candidates.iter_mut().zip(&counts) {
                c.log_prob = (n.max(f64::MIN_POSITIVE) / total).ln();
            }
        }
        history.push(self.log_likelihood(set)?);
        Ok(history)
    }

    /// Drop in corpus log-likelihood when each piece is removed with every
    /// other probability held fixed. Single-character pieces get `+∞`.
    pub fn removal_losses(&self, set: &CandidateSet) -> Result<Vec<f64>> {
        self.check_coverage(set)?;
        let index = Self::index(set);
        let lp: Vec<f64> = set.candidates.iter().map(|c| c.log_prob).collect();
        let per_chunk: Vec<Vec<(u32, f64)>> = self
            .chunks
            .par_iter()
            .map(|chunk| {
                let lat = self.lattice(chunk, &index);
                let alpha = lat.forward(&lp, None);
                let beta = lat.backward(&lp);
                let z = alpha[lat.len];
                let w = chunk.count as f64;
                let mut by_piece: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
                for e in lat.edges.iter().filter(|e| e.end - e.start > 1) {
                    let post =
                        (alpha[e.start as usize] + lp[e.piece as usize] + beta[e.end as usize] - z)
                            .exp();
                    let slot = by_piece.entry(e.piece).or_default();
                    slot.0 += 1;
                    slot.1 += post;
                }
                by_piece
                    .into_iter()
                    .map(|(piece, (occurrences, post))| {
                        let delta = if occurrences == 1 && post < 0.99 {
                            -(-post).ln_1p()
                        } else {
                            z - lat.forward(&lp, Some(piece))[lat.len]
                        };
                        (piece, w * delta)
                    })
                    .collect()
            })
            .collect();
        let mut losses: Vec<f64> = set
            .candidates
            .iter()
            .map(|c| {
                if single_char(&c.piece).is_some() {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .collect();
        for cs in per_chunk {
            for (p, d) in cs {
                losses[p as usize] += d;
            }
        }
        Ok(losses)
    }

    /// Prunes to exactly `target_size` pieces (or all multi-character pieces
    /// removed first, whichever is larger), keeping `shrink_factor` of the
    /// set per round with EM between rounds. Characters are never removed.
    pub fn prune_to_size(
        &self,
        mut set: CandidateSet,
        target_size: usize,
        shrink_factor: f64,
    ) -> Result<UnigramVocabulary> {
        let coverage = set
            .candidates
            .iter()
            .filter(|c| single_char(&c.piece).is_some())
            .count();
        if target_size < coverage {
            return Err(Error::BelowCoverage {
                target: target_size,
                coverage,
            });
        }
        if !(shrink_factor > 0.0 && shrink_factor < 1.0) {
            return Err(Error::Config("shrink_factor must be in (0, 1)".into()));
        }
        while set.len() > target_size {
            let keep = ((set.len() as f64 * shrink_factor).floor() as usize).max(target_size);
            let losses = self.removal_losses(&set)?;
            let mut order: Vec<usize> = (0..set.len()).collect();
            order.sort_by(|&a, &b| {
                losses[a]
                    .total_cmp(&losses[b])
                    .then_with(|| set.candidates[a].piece.cmp(&set.candidates[b].piece))
            });
            let mut drop = vec![false; set.len()];
            for &i in &order[..set.len() - keep] {
                drop[i] = true;
            }
            let mut i = 0;
            set.candidates.retain(|_| {
                let keep = !drop[i];
                i += 1;
                keep
            });
            if set.len() > target_size {
                self.em_train(&mut set, self.config.em_iterations_per_round)?;
            }
        }
        Ok(set.into_vocabulary())
    }

    /// Seed, EM, prune, final EM.
    pub fn train(&self, size: usize) -> Result<UnigramVocabulary> {
        if size < self.num_chars() {
            return Err(Error::BelowCoverage {
                target: size,
                coverage: self.num_chars(),
            });
        }
        let seed_size = size
            .saturating_mul(self.config.seed_factor)
            .max(self.num_chars());
        let mut set = self.seed_vocabulary(seed_size)?;
        self.em_train(&mut set, self.config.initial_em_iterations)?;
        let pruned = self.prune_to_size(set, size, self.config.shrink_factor)?;
        let mut set =
            CandidateSet::from_scored(pruned.pieces().iter().map(|(p, lp)| (p.clone(), *lp)));
        self.em_train(&mut set, self.config.em_iterations_per_round)?;
        Ok(set.into_vocabulary())
    }
}

/// Trains a vocabulary of `size` pieces on `corpus`. Deterministic given the
/// corpus and config. Returns fewer pieces when the corpus has fewer
/// distinct substrings than `size`.
pub fn train_unigram_vocab(
    corpus: &LanguageCorpus,
    size: usize,
    config: &UnigramConfig,
) -> Result<UnigramVocabulary> {
    UnigramTrainer::new(corpus, config.clone())?.train(size)
}
