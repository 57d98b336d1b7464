//! Command-line surface. Flags override the JSON config file, which
//! overrides per-dataset defaults.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use graphbert::embedding::EmbeddingSources;
use graphbert::encoder::ResidualMode;
use graphbert::preprocess::IntimacyMethod;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pipeline;
use crate::report;
use crate::run::RunDir;

#[derive(Debug, Parser)]
#[command(name = "graphbert", version, about = "Graph transformer pipeline for citation benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a dataset and build its context cache (a no-op when cached).
    Preprocess(Common),
    /// Reconstruction then structure-recovery pre-training.
    Pretrain(Common),
    /// Node classification, from scratch or from a checkpoint.
    Finetune(Common),
    /// KMeans on raw features or on encoder outputs.
    Cluster(Common),
    /// Fine-tune once per context size.
    SweepK {
        #[command(flatten)]
        common: Common,
        /// Comma-separated context sizes.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10,20,30,40,50")]
        ks: Vec<usize>,
    },
    /// Fine-tune once per residual mode.
    SweepResidual {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "none,raw,graph_raw")]
        modes: Vec<ResidualMode>,
    },
    /// Fine-tune once per embedding-source subset. Runs without a residual
    /// unless `--residual` is given.
    SweepEmbeddings {
        #[command(flatten)]
        common: Common,
        /// Semicolon-separated subsets, each comma-separated.
        #[arg(long, value_delimiter = ';', default_value = "raw;wl;position;hop;all")]
        sets: Vec<EmbeddingSources>,
    },
    /// Print result tables for run directories.
    Report {
        runs: Vec<PathBuf>,
        /// Also write the tables to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config; keys mirror the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long, env = "GRAPHBERT_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, env = "GRAPHBERT_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    pub runs_dir: PathBuf,
    /// Run directory name; defaults to `<command>-<dataset>-<config digest>`.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed from the clock instead of `--seed`; the seed used is recorded.
    #[arg(long)]
    pub nondeterministic: bool,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_parser = parse_method)]
    pub intimacy_method: Option<IntimacyMethod>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub intermediate_size: Option<usize>,
    #[arg(long)]
    pub hidden_dropout: Option<f64>,
    #[arg(long)]
    pub attention_dropout: Option<f64>,
    #[arg(long)]
    pub residual: Option<ResidualMode>,
    /// Comma-separated subset of raw, wl, position, hop.
    #[arg(long)]
    pub embeddings: Option<EmbeddingSources>,
    #[arg(long)]
    pub per_head_scaling: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub reconstruct_epochs: Option<usize>,
    #[arg(long)]
    pub recover_epochs: Option<usize>,
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    #[arg(long)]
    pub from_checkpoint: Option<PathBuf>,
    /// Cluster count; defaults to the number of classes.
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Sweep points run concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

fn parse_method(s: &str) -> std::result::Result<IntimacyMethod, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown method {s:?}"))
}

impl Common {
    /// Built-in and dataset defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::layered(self.dataset.as_deref(), self.config.as_deref())?;
        macro_rules! set {
            ($flag:expr => $($field:tt)+) => {
                if let Some(v) = $flag.clone() {
                    c.$($field)+ = v;
                }
            };
        }
        set!(self.data_dir => data_dir);
        set!(self.cache_dir => cache_dir);
        set!(self.k => k);
        set!(self.alpha => alpha);
        set!(self.intimacy_method => intimacy_method);
        set!(self.hidden => model.encoder.hidden);
        set!(self.depth => model.encoder.depth);
        set!(self.heads => model.encoder.heads);
        set!(self.intermediate_size => model.encoder.intermediate_size);
        set!(self.hidden_dropout => model.encoder.hidden_dropout);
        set!(self.attention_dropout => model.encoder.attention_dropout);
        set!(self.residual => model.encoder.residual_mode);
        set!(self.embeddings => model.embeddings);
        set!(self.per_head_scaling => model.encoder.per_head_scaling);
        set!(self.epochs => train.epochs);
        set!(self.lr => train.lr);
        set!(self.weight_decay => train.weight_decay);
        set!(self.reconstruct_epochs => pretrain.reconstruct_epochs);
        set!(self.recover_epochs => pretrain.recover_epochs);
        set!(self.restarts => cluster.kmeans.restarts);
        set!(self.max_iter => cluster.kmeans.max_iter);
        if self.batch_size.is_some() {
            c.train.batch_size = self.batch_size;
        }
        if self.split_file.is_some() {
            c.split.file = self.split_file.clone();
        }
        if self.from_checkpoint.is_some() {
            c.from_checkpoint = self.from_checkpoint.clone();
        }
        if self.clusters.is_some() {
            c.cluster.clusters = self.clusters;
        }
        if let Some(s) = self.seed {
            c.seed = s;
            c.train.seed = s;
            c.cluster.kmeans.seed = s;
        }
        if self.nondeterministic {
            let s = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_nanos() as u64);
            c.deterministic = false;
            c.seed = s;
            c.train.seed = s.rotate_left(17);
            c.cluster.kmeans.seed = s.rotate_left(34);
        }
        Ok(c)
    }

    fn run_dir(&self, command: &str, cfg: &RunConfig) -> Result<RunDir> {
        let name = self
            .name
            .clone()
            .unwrap_or_else(|| format!("{command}-{}-{}", cfg.dataset, cfg.digest()));
        RunDir::create(&self.runs_dir, &name, cfg)
    }

    fn sweep_root(&self, command: &str, cfg: &RunConfig) -> PathBuf {
        self.runs_dir.join(
            self.name
                .clone()
                .unwrap_or_else(|| format!("{command}-{}-{}", cfg.dataset, cfg.digest())),
        )
    }
}

fn print<S: Serialize>(s: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(s)?);
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(c) => {
            let cfg = c.resolve()?;
            let s = pipeline::preprocess(&cfg)?;
            if s.cache_hit {
                log::info!("cache hit at {}", cfg.cache_path().display());
            }
            print(&s)
        }
        Command::Pretrain(c) => {
            let cfg = c.resolve()?;
            print(&pipeline::pretrain(&cfg, &mut c.run_dir("pretrain", &cfg)?)?)
        }
        Command::Finetune(c) => {
            let cfg = c.resolve()?;
            print(&pipeline::finetune(&cfg, &mut c.run_dir("finetune", &cfg)?)?)
        }
        Command::Cluster(c) => {
            let cfg = c.resolve()?;
            print(&pipeline::cluster(&cfg, &mut c.run_dir("cluster", &cfg)?)?)
        }
        Command::SweepK { common, ks } => {
            let cfg = common.resolve()?;
            let root = common.sweep_root("sweep-k", &cfg);
            print(&pipeline::sweep_k(&cfg, &root, &ks, common.jobs)?)
        }
        Command::SweepResidual { common, modes } => {
            let cfg = common.resolve()?;
            let root = common.sweep_root("sweep-residual", &cfg);
            print(&pipeline::sweep_residual(&cfg, &root, &modes, common.jobs)?)
        }
        Command::SweepEmbeddings { common, sets } => {
            let mut cfg = common.resolve()?;
            if common.residual.is_none() {
                cfg.model.encoder.residual_mode = ResidualMode::None;
            }
            let root = common.sweep_root("sweep-embeddings", &cfg);
            print(&pipeline::sweep_embeddings(&cfg, &root, &sets, common.jobs)?)
        }
        Command::Report { runs, out } => {
            if runs.is_empty() {
                return Err(CliError::Config("report needs at least one run directory".into()));
            }
            let dirs: Vec<&Path> = runs.iter().map(PathBuf::as_path).collect();
            let text = report::render(&dirs)?;
            print!("{text}");
            if let Some(p) = out {
                std::fs::write(p, &text)?;
            }
            Ok(())
        }
    }
}
