//! The command surface: corpus statistics, ALP sweeps, allocation,
//! tokenization, toy pre-training and output-layer benchmarks. Every
//! artifact lands under one run directory with a manifest.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alloc::{
    clip_vocabulary, greedy_allocate, merge_vocabularies, AllocationPlan, MergedVocabulary,
    VocabProvider,
};
use crate::alp::{sweep, vocab_path, AlpConfig, AlpManifest, AlpTable, Sweep};
use crate::corpus::{
    assemble_multilingual_corpus, compute_sampling_distribution, filter_languages, load_corpus,
    LanguageCorpus, LanguageShare, SamplingDistribution, Threshold,
};
use crate::error::{Error, Result};
use crate::mlm::{
    benchmark_output_layer, encode_corpus, train, write_checkpoint, BenchRecord, MetricRecord,
    OutputBenchConfig, TokenizedCorpus, TrainConfig,
};
use crate::softmax::Sampler;
use crate::unigram::{
    count_unigram_distribution, UnigramConfig, UnigramDistribution, UnigramVocabulary,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub sampler: Sampler,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Language id → corpus file.
    pub corpora: BTreeMap<String, PathBuf>,
    pub alpha: f64,
    pub beta: f64,
    pub grid_step: usize,
    pub cap: usize,
    #[serde(rename = "T")]
    pub target_size: usize,
    pub unigram: UnigramConfig,
    /// Corpora below this many bytes are dropped.
    pub min_bytes: u64,
    pub threshold: Threshold,
    /// Resource tiers: below `low_tier_bytes` is low, above
    /// `high_tier_bytes` is high.
    pub low_tier_bytes: u64,
    pub high_tier_bytes: u64,
    pub out_dir: PathBuf,
    /// Vocabulary for pre-training; defaults to the merged vocabulary.
    pub pretrain_vocab: Option<PathBuf>,
    pub pretrain_sentences: usize,
    pub valid_every: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub arms: Vec<Arm>,
    pub bench: OutputBenchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            corpora: BTreeMap::new(),
            alpha: 0.7,
            beta: 0.7,
            grid_step: 500,
            cap: 8000,
            target_size: 8000,
            unigram: UnigramConfig::default(),
            min_bytes: 0,
            threshold: Threshold::Inclusive,
            low_tier_bytes: 1 << 30,
            high_tier_bytes: 10 << 30,
            out_dir: PathBuf::from("run"),
            pretrain_vocab: None,
            pretrain_sentences: 20_000,
            valid_every: 10,
            seed: 0,
            train: TrainConfig::default(),
            arms: vec![
                Arm {
                    sampler: Sampler::Exact,
                    k: 50,
                },
                Arm {
                    sampler: Sampler::Knn,
                    k: 50,
                },
                Arm {
                    sampler: Sampler::Knn,
                    k: 5,
                },
            ],
            bench: OutputBenchConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn alp_config(&self) -> AlpConfig {
        AlpConfig {
            grid_step: self.grid_step,
            cap: self.cap,
            unigram: self.unigram.clone(),
        }
    }

    /// Checks every precondition before any work starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.corpora.is_empty() {
            return bad("no corpora configured".into());
        }
        for (lang, path) in &self.corpora {
            if lang.is_empty() || lang.contains(['/', '\\', '\t']) {
                return bad(format!("invalid language id {lang:?}"));
            }
            if !path.is_file() {
                return bad(format!("corpus for {lang} not found: {}", path.display()));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.target_size == 0 {
            return bad("T must be > 0".into());
        }
        if self.low_tier_bytes > self.high_tier_bytes {
            return bad("low_tier_bytes must not exceed high_tier_bytes".into());
        }
        if self.pretrain_sentences == 0 || self.valid_every < 2 {
            return bad("pretrain_sentences must be > 0 and valid_every >= 2".into());
        }
        if self.arms.is_empty() {
            return bad("no pre-training arms".into());
        }
        if self.arms.iter().any(|a| a.k == 0) {
            return bad("arm k must be >= 1".into());
        }
        self.alp_config().validate()?;
        self.train.validate()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("serializable"),
        ))
    }
}

/// One command's entry in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub commands: BTreeMap<String, CommandRecord>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub const MANIFEST: &str = "manifest.json";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

/// Runs `f` and records it in the run manifest.
fn recorded<T>(config: &PipelineConfig, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let started = now();
    let out = f()?;
    let path = config.out_dir.join(MANIFEST);
    let mut manifest: RunManifest = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) => RunManifest::default(),
    };
    manifest.tool_version = env!("CARGO_PKG_VERSION").to_owned();
    manifest.commands.insert(
        name.to_owned(),
        CommandRecord {
            config_hash: config.hash(),
            started_unix: started,
            finished_unix: now(),
        },
    );
    write_json(&path, &manifest)?;
    Ok(out)
}

/// Loads and filters the configured corpora, in language-id order.
pub fn load_corpora(config: &PipelineConfig) -> Result<Vec<LanguageCorpus>> {
    let corpora = config
        .corpora
        .iter()
        .map(|(lang, path)| load_corpus(path, lang))
        .collect::<Result<Vec<_>>>()?;
    let before = corpora.len();
    let kept = filter_languages(corpora, config.min_bytes, config.threshold);
    if kept.len() < before {
        info!(
            "dropped {} corpora below {} bytes",
            before - kept.len(),
            config.min_bytes
        );
    }
    if kept.is_empty() {
        return Err(Error::Config("every corpus was filtered out".into()));
    }
    Ok(kept)
}

/// Writes `corpus_stats.json` (`lang → {n, f, q}`).
pub fn cmd_corpus_stats(config: &PipelineConfig) -> Result<BTreeMap<String, LanguageShare>> {
    config.validate()?;
    recorded(config, "corpus-stats", || {
        let corpora = load_corpora(config)?;
        let report = compute_sampling_distribution(&corpora, config.alpha)?.report();
        write_json(&config.out_dir.join("corpus_stats.json"), &report)?;
        Ok(report)
    })
}

pub fn vocab_dir(config: &PipelineConfig) -> PathBuf {
    config.out_dir.join("vocabs")
}

fn read_previous_sweep(config: &PipelineConfig) -> Option<(AlpTable, AlpManifest)> {
    let manifest: AlpManifest =
        serde_json::from_str(&fs::read_to_string(config.out_dir.join("alp_manifest.json")).ok()?)
            .ok()?;
    let text = fs::read_to_string(config.out_dir.join("alp.tsv")).ok()?;
    let table = AlpTable::parse_tsv(&text, manifest.config.grid_step, manifest.config.cap).ok()?;
    Some((table, manifest))
}

/// Trains the vocabulary grid and writes `alp.tsv` and `alp_manifest.json`.
/// Cells whose inputs are unchanged since the last sweep are reused.
pub fn cmd_sweep(config: &PipelineConfig) -> Result<Sweep> {
    config.validate()?;
    recorded(config, "sweep", || {
        let corpora = load_corpora(config)?;
        let previous = read_previous_sweep(config);
        let dir = vocab_dir(config);
        let result = sweep(
            &corpora,
            &config.alp_config(),
            previous.as_ref().map(|(t, m)| (t, m)),
            Some(&dir),
        )?;
        if result.computed == 0 {
            info!("sweep: every cell reused from cache");
        }
        write_file(&config.out_dir.join("alp.tsv"), result.table.to_tsv())?;
        write_json(&config.out_dir.join("alp_manifest.json"), &result.manifest)?;
        Ok(result)
    })
}

/// Reads cell vocabularies from a sweep directory; unigram distributions
/// are counted on the language's corpus.
pub struct DirProvider {
    dir: PathBuf,
    corpora: HashMap<String, LanguageCorpus>,
    smoothing: f64,
    vocabs: Mutex<HashMap<(String, usize), Arc<UnigramVocabulary>>>,
    unigrams: Mutex<HashMap<(String, usize), Arc<UnigramDistribution>>>,
}

impl DirProvider {
    pub fn new(dir: PathBuf, corpora: &[LanguageCorpus], smoothing: f64) -> Self {
        DirProvider {
            dir,
            corpora: corpora
                .iter()
                .map(|c| (c.lang_id.clone(), c.clone()))
                .collect(),
            smoothing,
            vocabs: Mutex::default(),
            unigrams: Mutex::default(),
        }
    }
}

impl VocabProvider for DirProvider {
    fn vocabulary(&self, lang: &str, size: usize) -> Result<Arc<UnigramVocabulary>> {
        let key = (lang.to_owned(), size);
        if let Some(v) = self.vocabs.lock().unwrap().get(&key) {
            return Ok(v.clone());
        }
        let path = vocab_path(&self.dir, lang, size);
        if !path.exists() {
            return Err(Error::MissingCell {
                lang: lang.to_owned(),
                size,
            });
        }
        let v = Arc::new(UnigramVocabulary::read_tsv(&path)?);
        self.vocabs.lock().unwrap().insert(key, v.clone());
        Ok(v)
    }

    fn unigram(&self, lang: &str, size: usize) -> Result<Arc<UnigramDistribution>> {
        let key = (lang.to_owned(), size);
        if let Some(d) = self.unigrams.lock().unwrap().get(&key) {
            return Ok(d.clone());
        }
        let corpus = self
            .corpora
            .get(lang)
            .ok_or_else(|| Error::EmptyCorpus(lang.to_owned()))?;
        let vocab = self.vocabulary(lang, size)?;
        let d = Arc::new(count_unigram_distribution(&vocab, corpus, self.smoothing)?);
        self.unigrams.lock().unwrap().insert(key, d.clone());
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Low,
    Mid,
    High,
}

pub fn tier_of(bytes: u64, low: u64, high: u64) -> Tier {
    if bytes < low {
        Tier::Low
    } else if bytes > high {
        Tier::High
    } else {
        Tier::Mid
    }
}

/// Allocated sizes grouped by resource tier.
pub fn capacity_report(
    plan: &AllocationPlan,
    corpora: &[LanguageCorpus],
    dist: &SamplingDistribution,
    low: u64,
    high: u64,
) -> String {
    let mut groups: BTreeMap<Tier, Vec<&LanguageCorpus>> = BTreeMap::new();
    for c in corpora {
        groups
            .entry(tier_of(c.byte_size(), low, high))
            .or_default()
            .push(c);
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "T = {}, beta = {}, alpha = {}, union = {}{}",
        plan.target_size,
        plan.beta,
        plan.alpha,
        plan.union_size(),
        if plan.exhausted { " (exhausted)" } else { "" }
    );
    for (tier, members) in groups {
        let total: usize = members.iter().map(|c| plan.t[&c.lang_id]).sum();
        let _ = writeln!(
            out,
            "\n[{tier:?}] {} languages, {total} pieces",
            members.len()
        );
        for c in members {
            let q = dist.index_of(&c.lang_id).map_or(0.0, |i| dist.q[i]);
            let _ = writeln!(
                out,
                "  {:<12} bytes {:>12}  q {:.6}  t {}",
                c.lang_id,
                c.byte_size(),
                q,
                plan.t[&c.lang_id]
            );
        }
    }
    out
}

/// `piece<TAB>mass<TAB>languages` for every merged piece.
pub fn provenance_tsv(merged: &MergedVocabulary) -> String {
    let mut out = String::new();
    for (piece, m) in &merged.pieces {
        let langs: Vec<&str> = m.langs.iter().map(String::as_str).collect();
        let _ = writeln!(out, "{piece}\t{:?}\t{}", m.mass, langs.join(","));
    }
    out
}

#[derive(Debug, Clone)]
pub struct AllocateOutcome {
    pub plan: AllocationPlan,
    pub merged: MergedVocabulary,
    pub vocab_path: PathBuf,
}

/// Runs the greedy allocation over the swept ALP table and writes
/// `plan.json`, `merged.tsv` (exactly `T` pieces unless exhausted),
/// `provenance.tsv` and `capacity_report.txt`.
pub fn cmd_allocate(config: &PipelineConfig) -> Result<AllocateOutcome> {
    config.validate()?;
    recorded(config, "allocate", || {
        let corpora = load_corpora(config)?;
        let (table, manifest) = read_previous_sweep(config).ok_or_else(|| {
            Error::Config("no ALP table in the run directory; run `sweep` first".into())
        })?;
        if manifest != AlpManifest::new(&config.alp_config(), &corpora) {
            return Err(Error::Config(
                "ALP table is stale for this config; rerun `sweep`".into(),
            ));
        }
        let dist = compute_sampling_distribution(&corpora, config.alpha)?;
        let provider = DirProvider::new(vocab_dir(config), &corpora, config.unigram.smoothing);
        let plan = greedy_allocate(&table, &dist, config.beta, config.target_size, &provider)?;
        let merged = merge_vocabularies(&plan, &provider, &dist, config.beta)?;
        let merged = if plan.exhausted {
            warn!(
                "allocation exhausted: merged vocabulary has {} < {} pieces",
                merged.size(),
                config.target_size
            );
            merged
        } else {
            clip_vocabulary(&merged, config.target_size)?
        };
        let vocab_path = config.out_dir.join("merged.tsv");
        write_json(&config.out_dir.join("plan.json"), &plan)?;
        write_file(&vocab_path, merged.to_unigram_vocabulary().to_tsv())?;
        write_file(
            &config.out_dir.join("provenance.tsv"),
            provenance_tsv(&merged),
        )?;
        write_file(
            &config.out_dir.join("capacity_report.txt"),
            capacity_report(
                &plan,
                &corpora,
                &dist,
                config.low_tier_bytes,
                config.high_tier_bytes,
            ),
        )?;
        Ok(AllocateOutcome {
            plan,
            merged,
            vocab_path,
        })
    })
}

/// Tokenizes `input` line by line into `output`, pieces space-joined. Blank
/// lines stay blank. Returns the number of lines.
pub fn cmd_tokenize(vocab: &Path, input: &Path, output: &Path) -> Result<usize> {
    let vocab = UnigramVocabulary::read_tsv(vocab)?;
    let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let mut out = String::with_capacity(text.len() * 2);
    let mut lines = 0;
    for line in text.split_terminator('\n') {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if !line.trim().is_empty() {
            out.push_str(&vocab.tokenize(line).join(" "));
        }
        out.push('\n');
        lines += 1;
    }
    write_file(output, out)?;
    Ok(lines)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub sampler: Sampler,
    pub k: usize,
    pub final_val_ce: f64,
    pub metrics: Vec<MetricRecord>,
}

pub fn arm_name(arm: &Arm) -> String {
    format!("{}_k{}", arm.sampler.name(), arm.k)
}

/// Trains one toy model per arm on a sampled multilingual corpus and writes
/// `pretrain/metrics_<arm>.jsonl` and `pretrain/checkpoint_<arm>.json`.
pub fn cmd_pretrain(config: &PipelineConfig) -> Result<Vec<ArmSummary>> {
    config.validate()?;
    recorded(config, "pretrain", || {
        let corpora = load_corpora(config)?;
        let vocab_path = config
            .pretrain_vocab
            .clone()
            .unwrap_or_else(|| config.out_dir.join("merged.tsv"));
        if !vocab_path.exists() {
            return Err(Error::Config(format!(
                "pre-training vocabulary {} missing; run `allocate` first or set pretrain_vocab",
                vocab_path.display()
            )));
        }
        let vocab = UnigramVocabulary::read_tsv(&vocab_path)?;
        let dist = compute_sampling_distribution(&corpora, config.alpha)?;
        let mixed =
            assemble_multilingual_corpus(&corpora, &dist, config.pretrain_sentences, config.seed)?;
        let data = TokenizedCorpus::split(
            vocab.size(),
            encode_corpus(&vocab, &mixed)?,
            config.valid_every,
        )?;
        let dir = config.out_dir.join("pretrain");
        let mut out = Vec::with_capacity(config.arms.len());
        for arm in &config.arms {
            let tc = TrainConfig {
                sampler: arm.sampler,
                k: arm.k,
                ..config.train.clone()
            };
            let state = train(&tc, &data)?;
            let name = arm_name(arm);
            write_file(
                &dir.join(format!("metrics_{name}.jsonl")),
                state.metrics_jsonl(),
            )?;
            write_checkpoint(&dir.join(format!("checkpoint_{name}.json")), &tc, &state)?;
            out.push(ArmSummary {
                sampler: arm.sampler,
                k: arm.k,
                final_val_ce: state.final_val_ce().unwrap_or(f64::NAN),
                metrics: state.metrics,
            });
        }
        Ok(out)
    })
}

/// Output-layer benchmark of all five samplers; writes `bench.json`.
pub fn cmd_bench_softmax(config: &PipelineConfig) -> Result<Vec<BenchRecord>> {
    recorded(config, "bench-softmax", || {
        let records = benchmark_output_layer(&config.bench, &Sampler::ALL)?;
        write_json(&config.out_dir.join("bench.json"), &records)?;
        Ok(records)
    })
}
