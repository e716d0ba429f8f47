use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use vocap_core::pipeline::{self, PipelineConfig};
use vocap_core::softmax::Sampler;
use vocap_core::Error;

/// Per-language vocabulary allocation and k-NN sampled-softmax toolkit.
///
/// Settings come from an optional JSON config; any flag given on the
/// command line overrides the matching config key.
#[derive(Parser)]
#[command(
    name = "vocap",
    version,
    after_help = "Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure, 3 allocation exhausted before T."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sentence counts and smoothed sampling probabilities per language.
    CorpusStats(Common),
    /// Train the vocabulary grid and write the ALP table.
    Sweep(Common),
    /// Allocate per-language capacity and write the merged vocabulary.
    Allocate(Common),
    /// Tokenize a text file line by line.
    Tokenize {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train toy masked language models, one per sampler arm.
    Pretrain(Common),
    /// Benchmark the output-layer samplers.
    BenchSoftmax(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus as LANG=PATH; repeatable.
    #[arg(long = "corpus", value_parser = parse_corpus)]
    corpora: Vec<(String, PathBuf)>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    grid_step: Option<usize>,
    #[arg(long)]
    cap: Option<usize>,
    /// Target merged vocabulary size.
    #[arg(long = "target-size", short = 'T')]
    target_size: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    refresh_n: Option<u64>,
    #[arg(long)]
    sampler: Option<Sampler>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_corpus(s: &str) -> Result<(String, PathBuf), String> {
    let (lang, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected LANG=PATH, got {s:?}"))?;
    Ok((lang.to_owned(), PathBuf::from(path)))
}

impl Common {
    fn resolve(&self) -> vocap_core::Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        for (lang, path) in &self.corpora {
            c.corpora.insert(lang.clone(), path.clone());
        }
        if let Some(v) = &self.out_dir {
            c.out_dir = v.clone();
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(v) = self.grid_step {
            c.grid_step = v;
        }
        if let Some(v) = self.cap {
            c.cap = v;
        }
        if let Some(v) = self.target_size {
            c.target_size = v;
        }
        if let Some(v) = self.k {
            c.train.k = v;
            c.bench.k = v;
            for arm in &mut c.arms {
                if arm.sampler == Sampler::Knn {
                    arm.k = v;
                }
            }
        }
        if let Some(v) = self.refresh_n {
            c.train.refresh_n = v;
        }
        if let Some(v) = self.sampler {
            c.train.sampler = v;
            c.arms = vec![pipeline::Arm {
                sampler: v,
                k: c.train.k,
            }];
        }
        if let Some(v) = self.steps {
            c.train.total_steps = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
            c.train.seed = v;
            c.bench.seed = v;
        }
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::BelowCoverage { .. }
        | Error::Parse { .. }
        | Error::InvalidUtf8 { .. }
        | Error::Json(_) => 1,
        _ => 2,
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable")
    );
}

fn run(cli: Cli) -> vocap_core::Result<u8> {
    match cli.command {
        Command::CorpusStats(c) => print_json(&pipeline::cmd_corpus_stats(&c.resolve()?)?),
        Command::Sweep(c) => {
            let s = pipeline::cmd_sweep(&c.resolve()?)?;
            eprintln!("{} cells computed, {} reused", s.computed, s.reused);
        }
        Command::Allocate(c) => {
            let config = c.resolve()?;
            let out = pipeline::cmd_allocate(&config)?;
            print_json(&out.plan.t);
            if out.plan.exhausted {
                eprintln!(
                    "warning: every language reached its cap; merged vocabulary has {} < {} pieces",
                    out.merged.size(),
                    config.target_size
                );
                return Ok(3);
            }
        }
        Command::Tokenize {
            vocab,
            input,
            output,
        } => {
            let n = pipeline::cmd_tokenize(&vocab, &input, &output)?;
            eprintln!("{n} lines");
        }
        Command::Pretrain(c) => {
            for arm in pipeline::cmd_pretrain(&c.resolve()?)? {
                println!(
                    "{}\tk={}\tval_ce={:.4}",
                    arm.sampler.name(),
                    arm.k,
                    arm.final_val_ce
                );
            }
        }
        Command::BenchSoftmax(c) => print_json(&pipeline::cmd_bench_softmax(&c.resolve()?)?),
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
