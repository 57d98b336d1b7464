//! The subcommands as library calls.

use std::path::{Path, PathBuf};
use std::time::Instant;

use gbert_tensor::checkpoint::Checkpoint;
use gbert_tensor::{CsrMatrix, ParamStore};
use graphbert::clustering::{cluster_embeddings, ClusterInput, ClusteringMetrics};
use graphbert::embedding::EmbeddingSources;
use graphbert::encoder::ResidualMode;
use graphbert::graph::{dataset_paths, load_planetoid, load_split_file, standard_split, DatasetSplit, Graph, IngestStats};
use graphbert::model::GraphBert;
use graphbert::objectives::{
    finetune_classify, pretrain_stage, ClassifyReport, FinetuneInit, IntimacySource, PretrainTask, StageReport,
};
use graphbert::preprocess::{build_cache, normalized_adjacency, transpose, ContextCache};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::run::{MetricRow, RunDir};

pub struct Workspace {
    pub graph: Graph,
    pub cache: ContextCache,
    pub split: DatasetSplit,
}

fn graph_dir(cfg: &RunConfig) -> PathBuf {
    cfg.cache_dir.join(&cfg.dataset).join("graph")
}

pub fn ingest(cfg: &RunConfig) -> Result<(Graph, IngestStats)> {
    let (content, cites, _) = dataset_paths(&cfg.data_dir, &cfg.dataset);
    if !content.exists() {
        return Err(CliError::Missing {
            what: "dataset content file",
            path: content.display().to_string(),
            command: format!("scripts/prepare_datasets.py {}", cfg.data_dir.display()),
        });
    }
    Ok(load_planetoid(&content, &cites)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub dataset: String,
    pub nodes: usize,
    pub edges: usize,
    pub features: usize,
    pub classes: usize,
    pub k: usize,
    pub alpha: f64,
    pub wl_distinct: usize,
    pub wl_rounds: usize,
    pub cache_hit: bool,
    pub seconds: f64,
    pub ingest: IngestStats,
}

/// Parses the dataset and builds the context cache unless a valid one for
/// the same graph, `k` and `α` already exists.
pub fn preprocess(cfg: &RunConfig) -> Result<PreprocessSummary> {
    let start = Instant::now();
    let (graph, ingest) = ingest(cfg)?;
    let gdir = graph_dir(cfg);
    let cdir = cfg.cache_path();
    let graph_ok = Graph::load(&gdir).is_ok_and(|g| g.content_hash() == graph.content_hash() && g.node_ids == graph.node_ids);
    let cached = if graph_ok {
        ContextCache::load(&cdir, &graph, cfg.k, cfg.alpha).ok()
    } else {
        None
    };
    let cache_hit = cached.is_some();
    let cache = match cached {
        Some(c) => c,
        None => {
            if !graph_ok {
                graph.save(&gdir)?;
            }
            let c = build_cache(&graph, &cfg.cache_config())?;
            c.save(&cdir)?;
            c
        }
    };
    Ok(PreprocessSummary {
        dataset: cfg.dataset.clone(),
        nodes: graph.node_count(),
        edges: graph.edge_count(),
        features: graph.feature_dim(),
        classes: graph.class_count(),
        k: cache.k(),
        alpha: cfg.alpha,
        wl_distinct: cache.manifest.wl_distinct,
        wl_rounds: cache.manifest.wl_rounds,
        cache_hit,
        seconds: start.elapsed().as_secs_f64(),
        ingest,
    })
}

fn preprocess_command(cfg: &RunConfig) -> String {
    format!("graphbert preprocess --dataset {} --k {} --alpha {}", cfg.dataset, cfg.k, cfg.alpha)
}

pub fn resolve_split(cfg: &RunConfig, graph: &Graph) -> Result<DatasetSplit> {
    let (_, _, default_file) = dataset_paths(&cfg.data_dir, &cfg.dataset);
    let file = cfg.split.file.clone().or_else(|| default_file.exists().then_some(default_file));
    Ok(match file {
        Some(f) => load_split_file(graph, &f)?,
        None => standard_split(
            graph,
            cfg.split.train_per_class,
            cfg.split.validation,
            cfg.split.test,
            cfg.split.seed,
        )?,
    })
}

/// Loads the preprocessed graph, its cache and the split.
pub fn open(cfg: &RunConfig) -> Result<Workspace> {
    let gdir = graph_dir(cfg);
    if !gdir.join("graph.json").exists() {
        return Err(CliError::Missing {
            what: "preprocessed graph",
            path: gdir.display().to_string(),
            command: preprocess_command(cfg),
        });
    }
    let graph = Graph::load(&gdir)?;
    let cdir = cfg.cache_path();
    if !cdir.join("manifest.json").exists() {
        return Err(CliError::Missing {
            what: "context cache",
            path: cdir.display().to_string(),
            command: preprocess_command(cfg),
        });
    }
    let cache = ContextCache::load(&cdir, &graph, cfg.k, cfg.alpha)?;
    let split = resolve_split(cfg, &graph)?;
    Ok(Workspace { graph, cache, split })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CliError::Missing {
            what: "checkpoint",
            path: path.display().to_string(),
            command: "graphbert pretrain".into(),
        });
    }
    Ok(Checkpoint::load(path)?)
}

fn save_checkpoint(path: &Path, params: &ParamStore<f32>, step: u64, cfg: &RunConfig, stage: &str) -> Result<()> {
    let mut ck = Checkpoint::new(params.clone());
    ck.step = step;
    ck.meta = serde_json::json!({ "stage": stage, "config": cfg });
    ck.save(path)?;
    Ok(())
}

fn new_model(cfg: &RunConfig, graph: &Graph) -> Result<GraphBert> {
    Ok(GraphBert::new(cfg.model.clone(), graph.feature_dim(), graph.class_count(), cfg.seed)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub kind: String,
    pub dataset: String,
    pub reconstruct: StageReport,
    pub recover: StageReport,
    pub checkpoint: PathBuf,
}

/// Reconstruction then structure recovery on the same weights. On
/// divergence the last good weights are saved as `last_good.ckpt`.
pub fn pretrain(cfg: &RunConfig, run: &mut RunDir) -> Result<PretrainSummary> {
    let ws = open(cfg)?;
    let mut model = new_model(cfg, &ws.graph)?;
    let abar_t: Option<CsrMatrix<f64>> = ws
        .cache
        .intimacy
        .is_none()
        .then(|| transpose(&normalized_adjacency(&ws.graph)));
    let source = match (&ws.cache.intimacy, &abar_t) {
        (Some(s), _) => IntimacySource::Dense(s),
        (None, Some(at)) => IntimacySource::OnDemand {
            abar_t: at,
            alpha: cfg.alpha,
            tol: cfg.cache_config().power_tol,
            max_iter: cfg.cache_config().power_max_iter,
        },
        (None, None) => unreachable!("transpose built when intimacy is absent"),
    };
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut step = 0u64;
    for (task, epochs, name) in [
        (PretrainTask::Reconstruct, cfg.pretrain.reconstruct_epochs, "reconstruct"),
        (PretrainTask::Recover, cfg.pretrain.recover_epochs, "recover"),
    ] {
        let stage_cfg = graphbert::objectives::TrainConfig {
            epochs,
            ..cfg.train.clone()
        };
        run.note(format!("{name}: {epochs} epochs"));
        let report = match pretrain_stage(&mut model, &ws.graph, &ws.cache, Some(&source), task, &stage_cfg) {
            Ok(r) => r,
            Err(e) => {
                if matches!(e, graphbert::Error::Diverged { .. }) {
                    save_checkpoint(&run.checkpoint("last_good"), &model.params, step, cfg, name)?;
                    run.note(format!("{name} diverged, last good weights saved: {e}"));
                }
                return Err(e.into());
            }
        };
        step += epochs as u64;
        for (epoch, &loss) in report.losses.iter().enumerate() {
            rows.push(MetricRow {
                epoch,
                split: name.into(),
                loss,
                accuracy: None,
            });
        }
        if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
            run.note(format!("{name}: loss {first:.6} -> {last:.6} in {:.1}s", report.train_seconds));
        }
        save_checkpoint(&run.checkpoint(name), &model.params, step, cfg, name)?;
        reports.push(report);
    }
    run.write_metrics(&rows)?;
    let recover = reports.pop().expect("two stages");
    let reconstruct = reports.pop().expect("two stages");
    let summary = PretrainSummary {
        kind: "pretrain".into(),
        dataset: cfg.dataset.clone(),
        reconstruct,
        recover,
        checkpoint: run.checkpoint("recover"),
    };
    run.write_summary(&summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub kind: String,
    pub dataset: String,
    pub k: usize,
    pub depth: usize,
    pub residual_mode: ResidualMode,
    pub embeddings: String,
    pub epochs: usize,
    pub init: String,
    pub best_epoch: Option<usize>,
    pub validation_accuracy: f64,
    pub test_accuracy: f64,
    pub train_accuracy_at_best: f64,
    pub max_train_accuracy: f64,
    /// First epoch whose training accuracy reached 0.95.
    pub train_095_epoch: Option<usize>,
    pub train_seconds: f64,
}

pub fn finetune(cfg: &RunConfig, run: &mut RunDir) -> Result<FinetuneSummary> {
    let ws = open(cfg)?;
    let mut model = new_model(cfg, &ws.graph)?;
    let source = cfg.from_checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let init = match &source {
        Some(ck) => FinetuneInit::FromCheckpoint(&ck.params),
        None => FinetuneInit::Scratch,
    };
    run.note(format!(
        "finetune {} k={} depth={} residual={} embeddings={} epochs={} split={:?}",
        cfg.dataset,
        cfg.k,
        cfg.model.encoder.depth,
        cfg.model.encoder.residual_mode,
        cfg.model.embeddings,
        cfg.train.epochs,
        ws.split.sizes()
    ));
    let report = finetune_classify(&mut model, &ws.graph, &ws.cache, &ws.split, &cfg.train, init)?;
    run.write_metrics(&classify_rows(&report))?;
    save_checkpoint(&run.checkpoint("best"), &model.params, cfg.train.epochs as u64, cfg, "classify")?;
    let summary = FinetuneSummary {
        kind: "finetune".into(),
        dataset: cfg.dataset.clone(),
        k: cfg.k,
        depth: cfg.model.encoder.depth,
        residual_mode: cfg.model.encoder.residual_mode,
        embeddings: cfg.model.embeddings.to_string(),
        epochs: cfg.train.epochs,
        init: match &cfg.from_checkpoint {
            Some(p) => p.display().to_string(),
            None => "scratch".into(),
        },
        best_epoch: report.best_epoch,
        validation_accuracy: report.best_validation,
        test_accuracy: report.test_at_best,
        train_accuracy_at_best: report.train_at_best,
        max_train_accuracy: report.epochs.iter().map(|e| e.train.accuracy).fold(0.0, f64::max),
        train_095_epoch: report.epochs.iter().position(|e| e.train.accuracy >= 0.95),
        train_seconds: report.train_seconds,
    };
    run.note(format!(
        "best epoch {:?}: validation {:.4}, test {:.4} ({:.1}s)",
        summary.best_epoch, summary.validation_accuracy, summary.test_accuracy, summary.train_seconds
    ));
    run.write_summary(&summary)?;
    Ok(summary)
}

fn classify_rows(report: &ClassifyReport) -> Vec<MetricRow> {
    let mut rows = Vec::with_capacity(report.epochs.len() * 4);
    for e in &report.epochs {
        rows.push(MetricRow {
            epoch: e.epoch,
            split: "train_step".into(),
            loss: e.train_step_loss,
            accuracy: None,
        });
        for (split, m) in [("train", e.train), ("validation", e.validation), ("test", e.test)] {
            rows.push(MetricRow {
                epoch: e.epoch,
                split: split.into(),
                loss: m.loss,
                accuracy: Some(m.accuracy),
            });
        }
    }
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub kind: String,
    pub dataset: String,
    pub input: String,
    pub clusters: usize,
    pub metrics: ClusteringMetrics,
    pub sse: f64,
    pub distance_sum: f64,
    pub iterations: usize,
    pub restart: usize,
    pub seconds: f64,
}

/// KMeans on raw features, or on encoder outputs when a checkpoint is set.
pub fn cluster(cfg: &RunConfig, run: &mut RunDir) -> Result<ClusterSummary> {
    let start = Instant::now();
    let (graph, model, cache);
    let input = match &cfg.from_checkpoint {
        None => {
            graph = match Graph::load(&graph_dir(cfg)) {
                Ok(g) => g,
                Err(_) => ingest(cfg)?.0,
            };
            ClusterInput::RawFeatures
        }
        Some(path) => {
            let ws = open(cfg)?;
            let ck = load_checkpoint(path)?;
            let mut m = new_model(cfg, &ws.graph)?;
            m.transfer_from(&ck.params)?;
            graph = ws.graph;
            cache = ws.cache;
            model = m;
            ClusterInput::Model(&model, &cache)
        }
    };
    let l = cfg.cluster.clusters.unwrap_or_else(|| graph.class_count());
    let (c, metrics) = cluster_embeddings(&graph, input, l, &cfg.cluster.kmeans)?;
    let summary = ClusterSummary {
        kind: "cluster".into(),
        dataset: cfg.dataset.clone(),
        input: match &cfg.from_checkpoint {
            Some(p) => p.display().to_string(),
            None => "raw".into(),
        },
        clusters: l,
        metrics,
        sse: c.sse,
        distance_sum: c.distance_sum,
        iterations: c.iterations,
        restart: c.restart,
        seconds: start.elapsed().as_secs_f64(),
    };
    let rows: Vec<MetricRow> = ClusteringMetrics::NAMES
        .iter()
        .zip(metrics.values())
        .map(|(name, v)| MetricRow {
            epoch: c.iterations,
            split: (*name).into(),
            loss: c.sse,
            accuracy: Some(v),
        })
        .collect();
    run.write_metrics(&rows)?;
    run.note(format!("clusters {l}: {metrics:?}"));
    run.write_summary(&summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub run: PathBuf,
    pub summary: FinetuneSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub kind: String,
    pub dataset: String,
    pub points: Vec<SweepPoint>,
}

/// Fine-tunes one run per labelled configuration under `root`, at most
/// `jobs` at a time.
pub fn sweep(
    kind: &str,
    root: &Path,
    points: Vec<(String, RunConfig)>,
    jobs: usize,
) -> Result<SweepSummary> {
    std::fs::create_dir_all(root)?;
    let dataset = points.first().map(|p| p.1.dataset.clone()).unwrap_or_default();
    let run_point = |(label, cfg): &(String, RunConfig)| -> Result<SweepPoint> {
        let mut run = RunDir::create(root, label, cfg)?;
        let summary = finetune(cfg, &mut run)?;
        Ok(SweepPoint {
            label: label.clone(),
            run: run.path.clone(),
            summary,
        })
    };
    let results: Vec<SweepPoint> = if jobs <= 1 {
        points.iter().map(run_point).collect::<Result<_>>()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?
            .install(|| points.par_iter().map(run_point).collect::<Result<_>>())?
    };
    let summary = SweepSummary {
        kind: kind.into(),
        dataset,
        points: results,
    };
    std::fs::write(root.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

pub fn sweep_k(cfg: &RunConfig, root: &Path, ks: &[usize], jobs: usize) -> Result<SweepSummary> {
    let mut points = Vec::new();
    for &k in ks {
        let c = RunConfig { k, ..cfg.clone() };
        preprocess(&c)?;
        points.push((format!("k{k}"), c));
    }
    sweep("sweep_k", root, points, jobs)
}

pub fn sweep_residual(cfg: &RunConfig, root: &Path, modes: &[ResidualMode], jobs: usize) -> Result<SweepSummary> {
    let points = modes
        .iter()
        .map(|&m| {
            let mut c = cfg.clone();
            c.model.encoder.residual_mode = m;
            (m.to_string(), c)
        })
        .collect();
    sweep("sweep_residual", root, points, jobs)
}

pub fn sweep_embeddings(cfg: &RunConfig, root: &Path, sets: &[EmbeddingSources], jobs: usize) -> Result<SweepSummary> {
    let points = sets
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.model.embeddings = s;
            (s.to_string().replace(',', "+"), c)
        })
        .collect();
    sweep("sweep_embeddings", root, points, jobs)
}
