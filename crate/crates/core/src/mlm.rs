//! A small masked-language-model trainer that drives the output-layer
//! samplers end to end.
//!
//! The encoder is deliberately tiny: the mean of the unmasked context
//! embeddings is projected to `d_h`, passed through a two-layer tanh
//! feed-forward block and projected back to `d_e`. Input and output
//! embeddings are tied. Training is plain SGD on the mean masked-token loss.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::LanguageCorpus;
use crate::error::{Error, Result};
use crate::softmax::{
    batch_loss, build_topk_index, check_refresh_interval, should_refresh, EmbeddingTable,
    NoiseSampler, Objective, Sampler, TopKIndex,
};
use crate::unigram::{tokenize_corpus, UnigramVocabulary};

/// Input id of a masked position; never a vocabulary id.
pub const MASK: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub sampler: Sampler,
    pub k: usize,
    pub refresh_n: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub d_e: usize,
    pub d_h: usize,
    /// Negatives drawn per batch for target sampling, NCE and NEG.
    pub num_negatives: usize,
    pub eval_interval: u64,
    pub eval_batches: usize,
    /// Sentences longer than this are truncated.
    pub max_len: usize,
    /// Required `refresh_n·|W| / |V|` before warning.
    pub refresh_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sampler: Sampler::Knn,
            k: 50,
            refresh_n: 1000,
            lr: 0.5,
            batch_size: 32,
            mask_rate: 0.15,
            total_steps: 1000,
            seed: 0,
            d_e: 64,
            d_h: 64,
            num_negatives: 50_000,
            eval_interval: 100,
            eval_batches: 4,
            max_len: 64,
            refresh_factor: 4.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.refresh_n == 0 {
            return bad("refresh_n must be >= 1");
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) && self.mask_rate != 1.0 {
            return bad("mask_rate must be in (0, 1]");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if self.k == 0 {
            return bad("k must be >= 1");
        }
        if self.batch_size == 0 || self.d_e == 0 || self.d_h == 0 || self.max_len == 0 {
            return bad("batch_size, d_e, d_h and max_len must be >= 1");
        }
        if self.eval_interval == 0 || self.eval_batches == 0 {
            return bad("eval_interval and eval_batches must be >= 1");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("serializable"),
        ))
    }
}

/// Masked inputs and the prediction targets of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub inputs: Vec<Vec<u32>>,
    /// `(sentence, position)` of each target, in reading order.
    pub positions: Vec<(usize, usize)>,
    /// Original ids at `positions`.
    pub targets: Vec<u32>,
}

/// Masks each position with probability `mask_rate`; a masked position is
/// replaced by [`MASK`] 80% of the time, a random id 10% and kept 10%. A
/// batch with no masked position gets one, chosen uniformly.
pub fn mask_batch(
    batch: &[Vec<u32>],
    vocab_size: usize,
    mask_rate: f64,
    seed: u64,
) -> Result<MaskedBatch> {
    if batch.is_empty() || batch.iter().any(Vec::is_empty) {
        return Err(Error::Config("batch sentences must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    for (s, sent) in batch.iter().enumerate() {
        for i in 0..sent.len() {
            if rng.gen::<f64>() < mask_rate {
                chosen.push((s, i));
            }
        }
    }
    if chosen.is_empty() {
        let total: usize = batch.iter().map(Vec::len).sum();
        let mut pick = rng.gen_range(0..total);
        for (s, sent) in batch.iter().enumerate() {
            if pick < sent.len() {
                chosen.push((s, pick));
                break;
            }
            pick -= sent.len();
        }
    }
    let mut inputs = batch.to_vec();
    let mut targets = Vec::with_capacity(chosen.len());
    for &(s, i) in &chosen {
        targets.push(batch[s][i]);
        let r: f64 = rng.gen();
        if r < 0.8 {
            inputs[s][i] = MASK;
        } else if r < 0.9 {
            inputs[s][i] = rng.gen_range(0..vocab_size as u32);
        }
    }
    Ok(MaskedBatch {
        inputs,
        positions: chosen,
        targets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub embedding: EmbeddingTable,
    /// `d_e × d_h`.
    pub input_proj: Array2<f64>,
    /// `d_h × d_e`.
    pub output_proj: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-scale..scale))
}

/// Fresh parameters with `d_e`-dimensional embeddings projected to a
/// `d_h`-wide encoder. Equal widths start with identity projections.
pub fn build_factorized_embedding(
    vocab_size: usize,
    d_e: usize,
    d_h: usize,
    seed: u64,
) -> Result<ModelParams> {
    if vocab_size == 0 || d_e == 0 || d_h == 0 {
        return Err(Error::Config("vocab_size, d_e and d_h must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emb_scale = 1.0 / (d_e as f64).sqrt();
    let embedding = EmbeddingTable::new(
        uniform_matrix(&mut rng, vocab_size, d_e, emb_scale),
        Array1::zeros(vocab_size),
    )?;
    let (input_proj, output_proj) = if d_e == d_h {
        (Array2::eye(d_e), Array2::eye(d_e))
    } else {
        (
            uniform_matrix(&mut rng, d_e, d_h, (3.0 / d_e as f64).sqrt()),
            uniform_matrix(&mut rng, d_h, d_e, (3.0 / d_h as f64).sqrt()),
        )
    };
    let hidden = (3.0 / d_h as f64).sqrt();
    Ok(ModelParams {
        embedding,
        input_proj,
        output_proj,
        w1: uniform_matrix(&mut rng, d_h, d_h, hidden),
        b1: Array1::zeros(d_h),
        w2: uniform_matrix(&mut rng, d_h, d_h, hidden),
        b2: Array1::zeros(d_h),
    })
}

impl ModelParams {
    pub fn vocab_size(&self) -> usize {
        self.embedding.vocab_size()
    }

    pub fn d_e(&self) -> usize {
        self.embedding.dim()
    }

    pub fn d_h(&self) -> usize {
        self.w1.nrows()
    }

    /// `|V|·d_e`.
    pub fn embedding_parameter_count(&self) -> usize {
        self.vocab_size() * self.d_e()
    }

    /// `|V|·d_e + |V| + 2·d_e·d_h + 2·d_h² + 2·d_h`.
    pub fn parameter_count(&self) -> usize {
        let (v, e, h) = (self.vocab_size(), self.d_e(), self.d_h());
        v * e + v + 2 * e * h + 2 * h * h + 2 * h
    }

    /// Every tensor as `(name, values)`.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("embedding", flat(&self.embedding.vectors)),
            ("bias", self.embedding.biases.as_slice().unwrap()),
            ("input_proj", flat(&self.input_proj)),
            ("output_proj", flat(&self.output_proj)),
            ("w1", flat(&self.w1)),
            ("b1", self.b1.as_slice().unwrap()),
            ("w2", flat(&self.w2)),
            ("b2", self.b2.as_slice().unwrap()),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

fn flat(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

/// Unmasked context ids of every target position.
fn contexts(batch: &MaskedBatch) -> Vec<Vec<u32>> {
    batch
        .positions
        .iter()
        .map(|&(s, i)| {
            batch.inputs[s]
                .iter()
                .enumerate()
                .filter(|&(j, &x)| j != i && x != MASK)
                .map(|(_, &x)| x)
                .collect()
        })
        .collect()
}

/// Encoder activations for a batch of positions.
pub struct Forward {
    pub contexts: Vec<Vec<u32>>,
    pub mean: Array2<f64>,
    pub c: Array2<f64>,
    pub a: Array2<f64>,
    pub g: Array2<f64>,
    /// `n × d_e` output vectors.
    pub h: Array2<f64>,
}

pub fn forward(params: &ModelParams, batch: &MaskedBatch) -> Forward {
    let contexts = contexts(batch);
    let mut mean = Array2::zeros((contexts.len(), params.d_e()));
    for (mut row, ctx) in mean.outer_iter_mut().zip(&contexts) {
        for &w in ctx {
            row += &params.embedding.vectors.row(w as usize);
        }
        if !ctx.is_empty() {
            row /= ctx.len() as f64;
        }
    }
    let c = mean.dot(&params.input_proj);
    let mut a = c.dot(&params.w1.t());
    a += &params.b1;
    a.mapv_inplace(f64::tanh);
    let mut g = a.dot(&params.w2.t());
    g += &params.b2;
    let h = g.dot(&params.output_proj);
    Forward {
        contexts,
        mean,
        c,
        a,
        g,
        h,
    }
}

/// Output vector for the target at `position` of `batch.positions`.
pub fn encode(params: &ModelParams, batch: &MaskedBatch, position: usize) -> Array1<f64> {
    forward(params, batch).h.row(position).to_owned()
}

/// Gradients of the summed loss; embedding rows are sparse.
pub struct Gradients {
    pub loss: f64,
    pub rows: Vec<(u32, Array1<f64>)>,
    pub bias: Vec<(u32, f64)>,
    pub input_proj: Array2<f64>,
    pub output_proj: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub candidate_size: usize,
    /// Wall-clock seconds spent in the output layer.
    pub output_secs: f64,
}

/// Loss (summed over targets) and gradients through encoder and output layer.
pub fn loss_and_gradients(
    params: &ModelParams,
    batch: &MaskedBatch,
    objective: Objective,
) -> Result<Gradients> {
    let fwd = forward(params, batch);
    let clock = Instant::now();
    let out = batch_loss(&params.embedding, fwd.h.view(), &batch.targets, objective)?;
    let output_secs = clock.elapsed().as_secs_f64();
    let dh = &out.grad_h;
    let output_proj = fwd.g.t().dot(dh);
    let dg = dh.dot(&params.output_proj.t());
    let w2 = dg.t().dot(&fwd.a);
    let b2 = dg.sum_axis(Axis(0));
    let mut du = dg.dot(&params.w2);
    du.zip_mut_with(&fwd.a, |d, &a| *d *= 1.0 - a * a);
    let w1 = du.t().dot(&fwd.c);
    let b1 = du.sum_axis(Axis(0));
    let dc = du.dot(&params.w1);
    let input_proj = fwd.mean.t().dot(&dc);
    let dmean = dc.dot(&params.input_proj.t());

    let mut rows: Vec<(u32, Array1<f64>)> = out
        .ids
        .iter()
        .zip(out.grad_rows.outer_iter())
        .map(|(&w, r)| (w, r.to_owned()))
        .collect();
    for (ctx, d) in fwd.contexts.iter().zip(dmean.outer_iter()) {
        if ctx.is_empty() {
            continue;
        }
        let scaled = &d / ctx.len() as f64;
        for &w in ctx {
            rows.push((w, scaled.clone()));
        }
    }
    Ok(Gradients {
        loss: out.loss,
        rows,
        bias: out
            .ids
            .iter()
            .copied()
            .zip(out.grad_bias.iter().copied())
            .collect(),
        input_proj,
        output_proj,
        w1,
        b1,
        w2,
        b2,
        candidate_size: out.candidate_size,
        output_secs,
    })
}

impl ModelParams {
    /// `θ ← θ − scale·g`.
    pub fn apply(&mut self, g: &Gradients, scale: f64) {
        for (w, r) in &g.rows {
            self.embedding
                .vectors
                .row_mut(*w as usize)
                .scaled_add(-scale, r);
        }
        for &(w, b) in &g.bias {
            self.embedding.biases[w as usize] -= scale * b;
        }
        self.input_proj.scaled_add(-scale, &g.input_proj);
        self.output_proj.scaled_add(-scale, &g.output_proj);
        self.w1.scaled_add(-scale, &g.w1);
        self.b1.scaled_add(-scale, &g.b1);
        self.w2.scaled_add(-scale, &g.w2);
        self.b2.scaled_add(-scale, &g.b2);
    }
}

/// Mean full-softmax cross-entropy (nats) over the targets of `batches`.
pub fn exact_cross_entropy(params: &ModelParams, batches: &[MaskedBatch]) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for batch in batches {
        let h = forward(params, batch).h;
        total += full_softmax_loss(&params.embedding, h.view(), &batch.targets);
        count += batch.targets.len();
    }
    total / count.max(1) as f64
}

fn full_softmax_loss(emb: &EmbeddingTable, h: ArrayView2<f64>, targets: &[u32]) -> f64 {
    let mut z = h.dot(&emb.vectors.t());
    z += &emb.biases;
    z.outer_iter()
        .zip(targets)
        .map(|(row, &t)| {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() - row[t as usize]
        })
        .sum()
}

/// Piece ids of every sentence; a piece outside `vocab` is an error.
pub fn encode_corpus(vocab: &UnigramVocabulary, corpus: &LanguageCorpus) -> Result<Vec<Vec<u32>>> {
    tokenize_corpus(vocab, corpus)
        .into_iter()
        .map(|pieces| {
            pieces
                .iter()
                .map(|p| {
                    vocab
                        .id(p)
                        .map(|i| i as u32)
                        .ok_or_else(|| Error::Coverage(p.chars().next().unwrap_or('?')))
                })
                .collect()
        })
        .collect()
}

/// Token-id sentences split into training and held-out parts.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedCorpus {
    pub vocab_size: usize,
    pub train: Vec<Vec<u32>>,
    pub valid: Vec<Vec<u32>>,
}

impl TokenizedCorpus {
    /// Every `valid_every`-th sentence is held out.
    pub fn split(vocab_size: usize, sentences: Vec<Vec<u32>>, valid_every: usize) -> Result<Self> {
        let mut train = Vec::new();
        let mut valid = Vec::new();
        for (i, s) in sentences.into_iter().enumerate() {
            if s.is_empty() {
                continue;
            }
            if let Some(&bad) = s.iter().find(|&&w| w as usize >= vocab_size) {
                return Err(Error::UnknownId(bad));
            }
            if valid_every > 0 && i % valid_every == valid_every - 1 {
                valid.push(s);
            } else {
                train.push(s);
            }
        }
        if train.is_empty() || valid.is_empty() {
            return Err(Error::Config(
                "need both training and held-out sentences".into(),
            ));
        }
        Ok(TokenizedCorpus {
            vocab_size,
            train,
            valid,
        })
    }

    /// Add-one smoothed training unigram weights.
    pub fn unigram_weights(&self) -> Vec<f64> {
        let mut w = vec![1.0; self.vocab_size];
        for s in &self.train {
            for &t in s {
                w[t as usize] += 1.0;
            }
        }
        w
    }
}

fn draw_batch(
    sentences: &[Vec<u32>],
    size: usize,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<u32>> {
    (0..size)
        .map(|_| {
            let s = &sentences[rng.gen_range(0..sentences.len())];
            s[..s.len().min(max_len)].to_vec()
        })
        .collect()
}

/// Fixed held-out batches shared by every evaluation.
pub fn validation_batches(
    config: &TrainConfig,
    data: &TokenizedCorpus,
) -> Result<Vec<MaskedBatch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005E_ED0F_7A11);
    (0..config.eval_batches)
        .map(|_| {
            let b = draw_batch(&data.valid, config.batch_size, config.max_len, &mut rng);
            mask_batch(&b, data.vocab_size, config.mask_rate, rng.gen())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub val_ce: f64,
    pub ms_per_step: f64,
    pub sampler: Sampler,
    pub k: usize,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub step: u64,
    pub metrics: Vec<MetricRecord>,
    /// Mean training loss of every step, under the training objective.
    pub train_losses: Vec<f64>,
    pub candidate_sizes: Vec<usize>,
}

impl TrainState {
    pub fn final_val_ce(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.val_ce)
    }

    /// JSON lines, one record per evaluation.
    pub fn metrics_jsonl(&self) -> String {
        self.metrics
            .iter()
            .map(|m| serde_json::to_string(m).expect("serializable") + "\n")
            .collect()
    }
}

/// Per-step randomness: batch, masks and negatives depend only on
/// `(seed, step)`.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

/// Runs `config.total_steps` SGD updates and logs exact held-out
/// cross-entropy every `eval_interval` steps and at the end.
pub fn train(config: &TrainConfig, data: &TokenizedCorpus) -> Result<TrainState> {
    config.validate()?;
    let params = build_factorized_embedding(data.vocab_size, config.d_e, config.d_h, config.seed)?;
    train_from(config, data, params)
}

pub fn train_from(
    config: &TrainConfig,
    data: &TokenizedCorpus,
    params: ModelParams,
) -> Result<TrainState> {
    config.validate()?;
    let valid = validation_batches(config, data)?;
    let noise = NoiseSampler::new(&data.unigram_weights())?;
    let mut state = TrainState {
        params,
        step: 0,
        metrics: Vec::new(),
        train_losses: Vec::with_capacity(config.total_steps as usize),
        candidate_sizes: Vec::new(),
    };
    let mut index: Option<TopKIndex> = None;
    let mut warned = false;
    let mut clock = Instant::now();
    let mut since_eval = 0u64;
    for step in 0..config.total_steps {
        if step % config.eval_interval == 0 {
            state.record_eval(config, &valid, &mut clock, &mut since_eval);
        }
        let mut rng = step_rng(config.seed, step);
        let raw = draw_batch(&data.train, config.batch_size, config.max_len, &mut rng);
        let batch = mask_batch(&raw, data.vocab_size, config.mask_rate, rng.gen())?;
        if config.sampler == Sampler::Knn && should_refresh(step, config.refresh_n) {
            if !warned {
                check_refresh_interval(
                    config.refresh_n,
                    batch.targets.len(),
                    data.vocab_size,
                    config.refresh_factor,
                );
                warned = true;
            }
            index = Some(build_topk_index(&state.params.embedding, config.k, step)?);
            debug!("step {step}: refreshed top-{} index", config.k);
        }
        let negatives = match config.sampler {
            Sampler::Target | Sampler::Nce | Sampler::Neg => {
                noise.sample(config.num_negatives, &mut rng)
            }
            _ => Vec::new(),
        };
        let objective = match config.sampler {
            Sampler::Exact => Objective::Exact,
            Sampler::Knn => Objective::Knn(index.as_ref().expect("built at step 0")),
            Sampler::Target => Objective::Target(&negatives),
            Sampler::Nce => Objective::Nce {
                negatives: &negatives,
                noise: noise.probs(),
            },
            Sampler::Neg => Objective::Neg(&negatives),
        };
        let grads = loss_and_gradients(&state.params, &batch, objective)?;
        let n = batch.targets.len() as f64;
        let mean_loss = grads.loss / n;
        if !mean_loss.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: mean_loss,
            });
        }
        state.params.apply(&grads, config.lr / n);
        if !state.params.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: mean_loss,
            });
        }
        state.train_losses.push(mean_loss);
        state.candidate_sizes.push(grads.candidate_size);
        state.step = step + 1;
        since_eval += 1;
    }
    state.record_eval(config, &valid, &mut clock, &mut since_eval);
    Ok(state)
}

impl TrainState {
    fn record_eval(
        &mut self,
        config: &TrainConfig,
        valid: &[MaskedBatch],
        clock: &mut Instant,
        since: &mut u64,
    ) {
        if self.metrics.last().is_some_and(|m| m.step == self.step) {
            return;
        }
        let ms = if *since == 0 {
            0.0
        } else {
            clock.elapsed().as_secs_f64() * 1e3 / *since as f64
        };
        let val_ce = exact_cross_entropy(&self.params, valid);
        info!(
            "step {} {} val_ce {val_ce:.4}",
            self.step,
            config.sampler.name()
        );
        self.metrics.push(MetricRecord {
            step: self.step,
            val_ce,
            ms_per_step: ms,
            sampler: config.sampler,
            k: config.k,
        });
        *since = 0;
        *clock = Instant::now();
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config_hash: String,
    config: TrainConfig,
    step: u64,
    params: ModelParams,
}

pub fn write_checkpoint(path: &Path, config: &TrainConfig, state: &TrainState) -> Result<()> {
    let ck = Checkpoint {
        config_hash: config.hash(),
        config: config.clone(),
        step: state.step,
        params: state.params.clone(),
    };
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(&mut f, &ck)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

/// Parameters, config and step of a checkpoint; the stored hash is checked.
pub fn read_checkpoint(path: &Path) -> Result<(TrainConfig, u64, ModelParams)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    if ck.config.hash() != ck.config_hash {
        return Err(Error::Config(format!(
            "{}: config hash mismatch",
            path.display()
        )));
    }
    Ok((ck.config, ck.step, ck.params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub sampler: Sampler,
    pub vocab_size: usize,
    pub k: usize,
    pub candidate_size_mean: f64,
    pub steps_per_sec: f64,
    /// Share of step time spent in the output layer.
    pub output_layer_share: f64,
    /// Top-k index build time, amortised separately over `refresh_n`.
    pub index_secs: f64,
    pub speedup_vs_exact: Option<f64>,
}

/// Times `steps` training steps per config on the same model and data.
/// Index builds are excluded from `steps_per_sec` and reported apart.
pub fn benchmark_step_throughput(
    configs: &[TrainConfig],
    data: &TokenizedCorpus,
    steps: u64,
) -> Result<Vec<BenchRecord>> {
    let mut out = Vec::with_capacity(configs.len());
    for config in configs {
        config.validate()?;
        let mut params =
            build_factorized_embedding(data.vocab_size, config.d_e, config.d_h, config.seed)?;
        let noise = NoiseSampler::new(&data.unigram_weights())?;
        let t0 = Instant::now();
        let index = match config.sampler {
            Sampler::Knn => Some(build_topk_index(&params.embedding, config.k, 0)?),
            _ => None,
        };
        let index_secs = t0.elapsed().as_secs_f64();
        let (mut total, mut output, mut cand) = (0.0, 0.0, 0usize);
        for step in 0..steps {
            let mut rng = step_rng(config.seed, step);
            let raw = draw_batch(&data.train, config.batch_size, config.max_len, &mut rng);
            let batch = mask_batch(&raw, data.vocab_size, config.mask_rate, rng.gen())?;
            let negatives = match config.sampler {
                Sampler::Target | Sampler::Nce | Sampler::Neg => {
                    noise.sample(config.num_negatives, &mut rng)
                }
                _ => Vec::new(),
            };
            let objective = match config.sampler {
                Sampler::Exact => Objective::Exact,
                Sampler::Knn => Objective::Knn(index.as_ref().unwrap()),
                Sampler::Target => Objective::Target(&negatives),
                Sampler::Nce => Objective::Nce {
                    negatives: &negatives,
                    noise: noise.probs(),
                },
                Sampler::Neg => Objective::Neg(&negatives),
            };
            let start = Instant::now();
            let grads = loss_and_gradients(&params, &batch, objective)?;
            params.apply(&grads, config.lr / batch.targets.len() as f64);
            total += start.elapsed().as_secs_f64();
            output += grads.output_secs;
            cand += grads.candidate_size;
        }
        out.push(BenchRecord {
            sampler: config.sampler,
            vocab_size: data.vocab_size,
            k: config.k,
            candidate_size_mean: cand as f64 / steps.max(1) as f64,
            steps_per_sec: steps as f64 / total.max(f64::MIN_POSITIVE),
            output_layer_share: output / total.max(f64::MIN_POSITIVE),
            index_secs,
            speedup_vs_exact: None,
        });
    }
    fill_speedups(&mut out);
    Ok(out)
}

/// Synthetic output-layer workload: random embeddings and encoder outputs,
/// Zipf-distributed targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputBenchConfig {
    pub vocab_size: usize,
    pub d_e: usize,
    pub targets: usize,
    pub k: usize,
    pub steps: usize,
    pub num_negatives: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for OutputBenchConfig {
    fn default() -> Self {
        OutputBenchConfig {
            vocab_size: 100_000,
            d_e: 64,
            targets: 4096,
            k: 50,
            steps: 2,
            num_negatives: 50_000,
            zipf_exponent: 1.0,
            seed: 0,
        }
    }
}

/// Times loss-plus-gradient evaluation of the output layer per sampler on
/// identical batches. Index construction is timed apart in `index_secs`.
pub fn benchmark_output_layer(
    config: &OutputBenchConfig,
    samplers: &[Sampler],
) -> Result<Vec<BenchRecord>> {
    if config.vocab_size == 0
        || config.d_e == 0
        || config.targets == 0
        || config.steps == 0
        || config.k == 0
    {
        return Err(Error::Config("bench sizes must be >= 1".into()));
    }
    let scale = 1.0 / (config.d_e as f64).sqrt();
    let emb = EmbeddingTable::random(config.vocab_size, config.d_e, scale, config.seed);
    let zipf = NoiseSampler::new(&crate::synthetic::zipf_weights(
        config.vocab_size,
        config.zipf_exponent,
    ))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xBE7C);
    let batches: Vec<(Array2<f64>, Vec<u32>)> = (0..config.steps)
        .map(|_| {
            let h = Array2::from_shape_simple_fn((config.targets, config.d_e), || {
                rng.gen_range(-1.0..1.0)
            });
            (h, zipf.sample(config.targets, &mut rng))
        })
        .collect();
    let noise = zipf.probs();
    let mut out = Vec::with_capacity(samplers.len());
    for &sampler in samplers {
        let t0 = Instant::now();
        let index = match sampler {
            Sampler::Knn => Some(build_topk_index(&emb, config.k, 0)?),
            _ => None,
        };
        let index_secs = t0.elapsed().as_secs_f64();
        let (mut total, mut cand) = (0.0, 0usize);
        for (h, targets) in &batches {
            let start = Instant::now();
            let negatives = match sampler {
                Sampler::Target | Sampler::Nce | Sampler::Neg => {
                    zipf.sample(config.num_negatives, &mut rng)
                }
                _ => Vec::new(),
            };
            let objective = match sampler {
                Sampler::Exact => Objective::Exact,
                Sampler::Knn => Objective::Knn(index.as_ref().unwrap()),
                Sampler::Target => Objective::Target(&negatives),
                Sampler::Nce => Objective::Nce {
                    negatives: &negatives,
                    noise,
                },
                Sampler::Neg => Objective::Neg(&negatives),
            };
            let res = batch_loss(&emb, h.view(), targets, objective)?;
            total += start.elapsed().as_secs_f64();
            cand += res.candidate_size;
        }
        let steps = batches.len() as f64;
        out.push(BenchRecord {
            sampler,
            vocab_size: config.vocab_size,
            k: config.k,
            candidate_size_mean: cand as f64 / steps,
            steps_per_sec: steps / total.max(f64::MIN_POSITIVE),
            output_layer_share: 1.0,
            index_secs,
            speedup_vs_exact: None,
        });
    }
    fill_speedups(&mut out);
    Ok(out)
}

/// Sets `speedup_vs_exact` relative to the first exact record, if any.
pub fn fill_speedups(records: &mut [BenchRecord]) {
    let base = records
        .iter()
        .find(|r| r.sampler == Sampler::Exact)
        .map(|r| r.steps_per_sec);
    for r in records {
        r.speedup_vs_exact = base.map(|b| r.steps_per_sec / b);
    }
}

/// Ids of the distinct targets of a batch.
pub fn distinct_targets(batch: &MaskedBatch) -> usize {
    batch.targets.iter().collect::<HashSet<_>>().len()
}
