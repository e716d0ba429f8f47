//! Synthetic Zipfian languages for desk-scale experiments.
//!
//! Each language has its own alphabet, a lexicon built from stems and
//! suffixes (so subwords are worth learning), and Zipf-distributed word
//! frequencies.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::LanguageCorpus;

#[derive(Debug, Clone)]
pub struct SyntheticLanguage {
    pub lang_id: String,
    pub alphabet: Vec<char>,
    pub lexicon: Vec<String>,
    pub zipf_exponent: f64,
    pub sentence_len: (usize, usize),
}

/// Alphabets from disjoint scripts, indexed by language number.
fn alphabet(index: usize) -> Vec<char> {
    let starts = [
        'a' as u32, 0x3b1, 0x430, 0x5d0, 0x10d0, 0x0e01, 0x0905, 0x13a0, 0x1200, 0x0531,
    ];
    let base = starts[index % starts.len()];
    (0..20).filter_map(|i| char::from_u32(base + i)).collect()
}

impl SyntheticLanguage {
    /// A language with `lexicon_size` words over the `index`-th alphabet.
    pub fn new(lang_id: &str, index: usize, lexicon_size: usize, seed: u64) -> Self {
        let alphabet = alphabet(index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37));
        let syllable = |rng: &mut ChaCha8Rng| -> String {
            let n = rng.gen_range(1..=3);
            (0..n)
                .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
                .collect()
        };
        let stems: Vec<String> = (0..(lexicon_size / 4).max(1))
            .map(|_| {
                (0..rng.gen_range(1..=2))
                    .map(|_| syllable(&mut rng))
                    .collect()
            })
            .collect();
        let suffixes: Vec<String> = (0..8).map(|_| syllable(&mut rng)).collect();
        let mut lexicon = Vec::with_capacity(lexicon_size);
        let mut seen = std::collections::HashSet::new();
        let mut attempts = 0;
        while lexicon.len() < lexicon_size && attempts < lexicon_size * 50 {
            attempts += 1;
            let stem = &stems[rng.gen_range(0..stems.len())];
            let word = if rng.gen_bool(0.6) {
                format!("{stem}{}", suffixes[rng.gen_range(0..suffixes.len())])
            } else {
                stem.clone()
            };
            if seen.insert(word.clone()) {
                lexicon.push(word);
            }
        }
        SyntheticLanguage {
            lang_id: lang_id.to_owned(),
            alphabet,
            lexicon,
            zipf_exponent: 1.0,
            sentence_len: (3, 12),
        }
    }

    /// `n` sentences of space-separated words.
    pub fn generate(&self, n: usize, seed: u64) -> LanguageCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = (1..=self.lexicon.len())
            .map(|r| 1.0 / (r as f64).powf(self.zipf_exponent))
            .collect();
        let words = WeightedIndex::new(&weights).expect("non-empty lexicon");
        let lines = (0..n).map(|_| {
            let len = rng.gen_range(self.sentence_len.0..=self.sentence_len.1);
            (0..len)
                .map(|_| self.lexicon[words.sample(&mut rng)].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        });
        LanguageCorpus::from_lines(self.lang_id.clone(), lines.collect::<Vec<_>>())
    }

    /// Sentences until the corpus reaches `bytes` UTF-8 bytes.
    pub fn generate_bytes(&self, bytes: u64, seed: u64) -> LanguageCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lines = Vec::new();
        let mut total = 0u64;
        let mut chunk = 0u64;
        while total < bytes {
            let c = self.generate(256, rng.gen::<u64>() ^ chunk);
            for s in c.sentences() {
                if total >= bytes {
                    break;
                }
                total += s.len() as u64;
                lines.push(s.clone());
            }
            chunk += 1;
        }
        LanguageCorpus::from_lines(self.lang_id.clone(), lines)
    }
}

/// Zipf-distributed token ids in `[0, n)` with exponent `s`.
pub fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (1..=n).map(|r| 1.0 / (r as f64).powf(s)).collect()
}
