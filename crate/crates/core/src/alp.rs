//! Average log probability (ALP) of a corpus under a vocabulary, and the
//! per-language grid of ALP values the allocator consumes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::LanguageCorpus;
use crate::error::{Error, Result};
use crate::unigram::{
    distribution_from_tokens, format_float, tokenize_corpus, UnigramConfig, UnigramDistribution,
    UnigramTrainer, UnigramVocabulary,
};

/// Mean over sentences of the summed `ln p_uni` of each sentence's Viterbi
/// pieces, in nats.
pub fn compute_alp(
    corpus: &LanguageCorpus,
    vocab: &UnigramVocabulary,
    p_uni: &UnigramDistribution,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(corpus.lang_id.clone()));
    }
    Ok(alp_from_tokens(&tokenize_corpus(vocab, corpus), p_uni))
}

fn alp_from_tokens(tokens: &[Vec<String>], p_uni: &UnigramDistribution) -> f64 {
    let total: f64 = tokens
        .iter()
        .map(|s| s.iter().map(|p| p_uni.log_prob(p)).sum::<f64>())
        .sum();
    total / tokens.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlpConfig {
    pub grid_step: usize,
    pub cap: usize,
    pub unigram: UnigramConfig,
}

impl Default for AlpConfig {
    fn default() -> Self {
        AlpConfig {
            grid_step: 500,
            cap: 8000,
            unigram: UnigramConfig::default(),
        }
    }
}

impl AlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_step == 0 || self.cap == 0 || !self.cap.is_multiple_of(self.grid_step) {
            return Err(Error::Config(format!(
                "cap ({}) must be a positive multiple of grid_step ({})",
                self.cap, self.grid_step
            )));
        }
        Ok(())
    }

    pub fn sizes(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.cap / self.grid_step).map(move |j| j * self.grid_step)
    }

    /// Hash of everything that changes a cell's value for a fixed size.
    pub fn cell_fingerprint(&self) -> String {
        let json = serde_json::to_string(&self.unigram).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// `a[lang][j]` is the ALP at vocabulary size `(j + 1) * grid_step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlpTable {
    pub grid_step: usize,
    pub cap: usize,
    pub langs: Vec<String>,
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl AlpTable {
    pub fn new(grid_step: usize, cap: usize) -> Self {
        AlpTable {
            grid_step,
            cap,
            langs: Vec::new(),
            rows: BTreeMap::new(),
        }
    }

    /// Number of grid points per language.
    pub fn steps(&self) -> usize {
        self.cap / self.grid_step
    }

    pub fn insert_row(&mut self, lang: &str, row: Vec<f64>) {
        if !self.rows.contains_key(lang) {
            self.langs.push(lang.to_owned());
        }
        self.rows.insert(lang.to_owned(), row);
    }

    /// ALP at `size` pieces; `size` must be a positive grid multiple.
    pub fn get(&self, lang: &str, size: usize) -> Option<f64> {
        if size == 0 || !size.is_multiple_of(self.grid_step) {
            return None;
        }
        self.rows.get(lang)?.get(size / self.grid_step - 1).copied()
    }

    pub fn num_entries(&self) -> usize {
        self.rows.values().map(Vec::len).sum()
    }

    /// `lang<TAB>size<TAB>alp` lines in language then size order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for lang in &self.langs {
            for (j, a) in self.rows[lang].iter().enumerate() {
                out.push_str(&format!(
                    "{lang}\t{}\t{}\n",
                    (j + 1) * self.grid_step,
                    format_float(*a)
                ));
            }
        }
        out
    }

    pub fn parse_tsv(text: &str, grid_step: usize, cap: usize) -> Result<Self> {
        let mut table = AlpTable::new(grid_step, cap);
        let mut cells: Vec<(String, usize, f64)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse {
                path: PathBuf::from("<alp table>"),
                line: i + 1,
                message,
            };
            let mut it = line.split('\t');
            let (Some(lang), Some(size), Some(alp), None) =
                (it.next(), it.next(), it.next(), it.next())
            else {
                return Err(bad("expected three tab-separated fields".into()));
            };
            let size: usize = size
                .parse()
                .map_err(|_| bad(format!("bad size {size:?}")))?;
            let alp: f64 = alp.parse().map_err(|_| bad(format!("bad ALP {alp:?}")))?;
            cells.push((lang.to_owned(), size, alp));
        }
        for (lang, size, alp) in cells {
            if size == 0 || size % grid_step != 0 || size > cap {
                return Err(Error::Config(format!("size {size} is off the grid")));
            }
            if !table.rows.contains_key(&lang) {
                table.insert_row(&lang, vec![f64::NAN; cap / grid_step]);
            }
            table.rows.get_mut(&lang).unwrap()[size / grid_step - 1] = alp;
        }
        for (lang, row) in &table.rows {
            if let Some(j) = row.iter().position(|a| a.is_nan()) {
                return Err(Error::MissingCell {
                    lang: lang.clone(),
                    size: (j + 1) * grid_step,
                });
            }
        }
        Ok(table)
    }
}

/// Companion metadata written next to the TSV table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlpManifest {
    pub config: AlpConfig,
    pub cell_fingerprint: String,
    pub corpus_hashes: BTreeMap<String, String>,
}

impl AlpManifest {
    pub fn new(config: &AlpConfig, corpora: &[LanguageCorpus]) -> Self {
        AlpManifest {
            config: config.clone(),
            cell_fingerprint: config.cell_fingerprint(),
            corpus_hashes: corpora
                .iter()
                .map(|c| (c.lang_id.clone(), c.content_hash()))
                .collect(),
        }
    }
}

/// Result of one sweep: the table plus cache statistics.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub table: AlpTable,
    pub manifest: AlpManifest,
    pub computed: usize,
    pub reused: usize,
}

/// Language index, size, and `(alp, reused)` of one grid cell.
type CellResult = (usize, usize, Result<(f64, bool)>);

/// Where cell vocabularies live: `<dir>/<lang>/<size>.tsv`.
pub fn vocab_path(dir: &Path, lang: &str, size: usize) -> PathBuf {
    dir.join(lang).join(format!("{size}.tsv"))
}

/// Trains a vocabulary for every (language, grid size) cell and records its
/// ALP on the same corpus.
pub fn build_alp_table(corpora: &[LanguageCorpus], config: &AlpConfig) -> Result<AlpTable> {
    Ok(sweep(corpora, config, None, None)?.table)
}

/// Memoized sweep. A cell is reused from `previous` when the language's
/// corpus hash and the cell fingerprint are unchanged (and, when
/// `vocab_dir` is given, its vocabulary file exists). Trained vocabularies
/// are written under `vocab_dir`.
pub fn sweep(
    corpora: &[LanguageCorpus],
    config: &AlpConfig,
    previous: Option<(&AlpTable, &AlpManifest)>,
    vocab_dir: Option<&Path>,
) -> Result<Sweep> {
    config.validate()?;
    if corpora.is_empty() {
        return Err(Error::Config("no corpora to sweep".into()));
    }
    let manifest = AlpManifest::new(config, corpora);
    let reusable = |lang: &str, size: usize| -> Option<f64> {
        let (table, old) = previous?;
        if old.cell_fingerprint != manifest.cell_fingerprint
            || old.corpus_hashes.get(lang) != manifest.corpus_hashes.get(lang)
        {
            return None;
        }
        if let Some(dir) = vocab_dir {
            if !vocab_path(dir, lang, size).exists() {
                return None;
            }
        }
        table.get(lang, size)
    };

    let trainers: Vec<UnigramTrainer> = corpora
        .par_iter()
        .map(|c| UnigramTrainer::new(c, config.unigram.clone()))
        .collect::<Result<_>>()?;

    let cells: Vec<(usize, usize)> = (0..corpora.len())
        .flat_map(|l| config.sizes().map(move |s| (l, s)))
        .collect();
    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|&(l, size)| {
            let corpus = &corpora[l];
            if let Some(a) = reusable(&corpus.lang_id, size) {
                debug!("cache hit {} @ {size}", corpus.lang_id);
                return (l, size, Ok((a, false)));
            }
            let res = (|| {
                let vocab = trainers[l].train(size)?;
                if let Some(dir) = vocab_dir {
                    let path = vocab_path(dir, &corpus.lang_id, size);
                    std::fs::create_dir_all(path.parent().unwrap())
                        .map_err(|e| Error::io(&path, e))?;
                    vocab.write_tsv(&path)?;
                }
                let tokens = tokenize_corpus(&vocab, corpus);
                let p_uni = distribution_from_tokens(&vocab, &tokens, config.unigram.smoothing);
                Ok((alp_from_tokens(&tokens, &p_uni), true))
            })();
            (l, size, res)
        })
        .collect();

    let mut table = AlpTable::new(config.grid_step, config.cap);
    for c in corpora {
        table.insert_row(&c.lang_id, vec![f64::NAN; table.steps()]);
    }
    let mut failures = Vec::new();
    let (mut computed, mut reused) = (0, 0);
    for (l, size, res) in results {
        let lang = &corpora[l].lang_id;
        match res {
            Ok((a, fresh)) => {
                if fresh {
                    computed += 1;
                } else {
                    reused += 1;
                }
                table.rows.get_mut(lang).unwrap()[size / config.grid_step - 1] = a;
            }
            Err(e) => {
                warn!("cell {lang} @ {size} failed: {e}");
                failures.push(Error::CellFailure {
                    lang: lang.clone(),
                    size,
                    message: e.to_string(),
                });
            }
        }
    }
    if let Some(first) = failures.into_iter().next() {
        return Err(first);
    }
    info!("ALP sweep: {computed} cells computed, {reused} reused");
    Ok(Sweep {
        table,
        manifest,
        computed,
        reused,
    })
}
