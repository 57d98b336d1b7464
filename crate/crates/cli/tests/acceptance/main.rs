//! Acceptance run: one PASS/FAIL line per criterion on the real citation
//! datasets. Data comes from `GRAPHBERT_DATA_DIR` or the workspace `data/`;
//! caches persist under the cargo target tmpdir so reruns skip
//! preprocessing. Set `GRAPHBERT_ACCEPTANCE_PUBMED=1` to include Pubmed.

mod props;

use std::io::Write;
use std::path::{Path, PathBuf};

use graphbert::embedding::EmbeddingSources;
use graphbert::encoder::ResidualMode;
use graphbert_cli::config::RunConfig;
use graphbert_cli::pipeline::{self, FinetuneSummary, SweepSummary};
use graphbert_cli::run::RunDir;

/// Slack for "equal within noise" comparisons of test accuracy.
const ACCURACY_NOISE: f64 = 0.005;
/// A later k may run this much faster than the previous one before the
/// timing curve counts as decreasing.
const TIMING_SLACK: f64 = 0.85;

type Outcome = Result<(bool, String), String>;

struct Board {
    lines: Vec<(u32, String)>,
}

impl Board {
    fn record(&mut self, id: u32, title: &str, outcome: Outcome) {
        let line = match outcome {
            Ok((true, d)) => format!("PASS criterion {id} ({title}): {d}"),
            Ok((false, d)) => format!("FAIL criterion {id} ({title}): {d}"),
            Err(e) => format!("FAIL criterion {id} ({title}): error: {e}"),
        };
        // Written straight to the handle so the line shows even when the
        // harness captures output.
        let _ = writeln!(std::io::stdout(), "{line}");
        self.lines.push((id, line));
    }
}

struct Env {
    data: PathBuf,
    cache: PathBuf,
    runs: PathBuf,
}

impl Env {
    fn new() -> Self {
        let data = std::env::var_os("GRAPHBERT_DATA_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"));
        let tmp = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        Self {
            data,
            cache: tmp.join("cache"),
            runs: tmp.join("runs"),
        }
    }

    fn config(&self, dataset: &str) -> RunConfig {
        RunConfig {
            data_dir: self.data.clone(),
            cache_dir: self.cache.clone(),
            ..RunConfig::for_dataset(dataset)
        }
    }

    fn finetune(&self, cfg: &RunConfig, name: &str) -> Result<FinetuneSummary, String> {
        pipeline::preprocess(cfg).map_err(|e| e.to_string())?;
        let mut run = RunDir::create(&self.runs, name, cfg).map_err(|e| e.to_string())?;
        pipeline::finetune(cfg, &mut run).map_err(|e| e.to_string())
    }
}

fn acc(s: &SweepSummary, label: &str) -> Result<f64, String> {
    s.points
        .iter()
        .find(|p| p.label == label)
        .map(|p| p.summary.test_accuracy)
        .ok_or_else(|| format!("sweep has no point {label}"))
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn node_classification(env: &Env) -> Outcome {
    let cora = env.finetune(&env.config("cora"), "c1-cora")?;
    let citeseer = env.finetune(&env.config("citeseer"), "c1-citeseer")?;
    let mut pass = cora.test_accuracy >= 0.81 && citeseer.test_accuracy >= 0.68;
    let mut detail = format!(
        "cora {:.3} (>= 0.81), citeseer {:.3} (>= 0.68)",
        cora.test_accuracy, citeseer.test_accuracy
    );
    if std::env::var_os("GRAPHBERT_ACCEPTANCE_PUBMED").is_some() {
        let pubmed = env.finetune(&env.config("pubmed"), "c1-pubmed")?;
        pass &= pubmed.test_accuracy >= 0.77;
        detail.push_str(&format!(", pubmed {:.3} (>= 0.77)", pubmed.test_accuracy));
    } else {
        detail.push_str(", pubmed not run");
    }
    Ok((pass, detail))
}

fn subgraph_sweep(env: &Env) -> Outcome {
    let ks = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 20, 30, 40, 50];
    let s = pipeline::sweep_k(&env.config("cora"), &env.runs.join("c2-sweep-k"), &ks, 1).map_err(|e| e.to_string())?;
    let (a1, a7, a50) = (acc(&s, "k1")?, acc(&s, "k7")?, acc(&s, "k50")?);
    let times: Vec<f64> = s.points.iter().map(|p| p.summary.train_seconds).collect();
    let monotone = times.windows(2).all(|w| w[1] >= TIMING_SLACK * w[0]);
    let times: Vec<String> = times.iter().map(|t| format!("{t:.1}")).collect();
    Ok((
        a7 > a1 && a7 > a50 && monotone,
        format!(
            "acc k1 {a1:.3}, k7 {a7:.3}, k50 {a50:.3}; seconds [{}] monotone within {TIMING_SLACK}: {monotone}",
            times.join(", ")
        ),
    ))
}

fn residual_ablation(env: &Env) -> Outcome {
    let modes = [ResidualMode::None, ResidualMode::Raw, ResidualMode::GraphRaw];
    let s = pipeline::sweep_residual(&env.config("cora"), &env.runs.join("c3-residual"), &modes, 1)
        .map_err(|e| e.to_string())?;
    let (none, raw, graph_raw) = (acc(&s, "none")?, acc(&s, "raw")?, acc(&s, "graph_raw")?);
    let pass = graph_raw >= raw
        && raw >= none
        && within(graph_raw, 0.843, 0.03)
        && within(raw, 0.817, 0.03)
        && within(none, 0.804, 0.03);
    Ok((
        pass,
        format!("graph_raw {graph_raw:.3} (0.843), raw {raw:.3} (0.817), none {none:.3} (0.804), tolerance 0.03"),
    ))
}

fn embedding_ablation(env: &Env) -> Outcome {
    let sets: Vec<EmbeddingSources> = ["raw", "hop", "position", "wl", "raw,wl,position,hop"]
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("{e}"))?;
    let mut cfg = env.config("cora");
    cfg.model.encoder.residual_mode = ResidualMode::None;
    let s = pipeline::sweep_embeddings(&cfg, &env.runs.join("c4-embeddings"), &sets, 1)
        .map_err(|e| e.to_string())?;
    let raw = acc(&s, "raw")?;
    let alone = [acc(&s, "hop")?, acc(&s, "position")?, acc(&s, "wl")?];
    let all = s.points.last().map(|p| p.summary.test_accuracy).unwrap_or(f64::NAN);
    let pass = within(raw, 0.795, 0.03) && alone.iter().all(|&a| a < 0.50) && all >= raw - ACCURACY_NOISE;
    Ok((
        pass,
        format!(
            "raw {raw:.3} (0.795 +- 0.03); hop {:.3}, position {:.3}, wl {:.3} (< 0.50); all {all:.3} (>= raw - {ACCURACY_NOISE})",
            alone[0], alone[1], alone[2]
        ),
    ))
}

fn raw_clustering(env: &Env) -> Outcome {
    let cfg = env.config("cora");
    pipeline::preprocess(&cfg).map_err(|e| e.to_string())?;
    let mut run = RunDir::create(&env.runs, "c5-cluster", &cfg).map_err(|e| e.to_string())?;
    let s = pipeline::cluster(&cfg, &mut run).map_err(|e| e.to_string())?;
    let (nmi, ari) = (s.metrics.normalized_mi, s.metrics.rand);
    Ok((
        within(nmi, 0.133, 0.05) && within(ari, 0.080, 0.05),
        format!(
            "NMI {nmi:.3} (0.133 +- 0.05), ARI {ari:.3} (0.080 +- 0.05), best of {} restarts",
            cfg.cluster.kmeans.restarts
        ),
    ))
}

/// Criteria 6 and 7 share one pre-training run.
fn pretraining(env: &Env) -> (Outcome, Outcome) {
    let cfg = env.config("cora");
    let pre = (|| {
        pipeline::preprocess(&cfg).map_err(|e| e.to_string())?;
        let mut run = RunDir::create(&env.runs, "c6-pretrain", &cfg).map_err(|e| e.to_string())?;
        pipeline::pretrain(&cfg, &mut run).map_err(|e| e.to_string())
    })();
    let pre = match pre {
        Ok(p) => p,
        Err(e) => return (Err(e.clone()), Err(e)),
    };
    let convergence = {
        let drop = |losses: &[f64]| {
            let first = losses.first().copied().unwrap_or(f64::NAN);
            let best = losses.iter().take(50).copied().fold(f64::INFINITY, f64::min);
            (first, best, best <= 0.5 * first)
        };
        let (r0, r50, rp) = drop(&pre.reconstruct.losses);
        let (s0, s50, sp) = drop(&pre.recover.losses);
        Ok((
            rp && sp,
            format!("reconstruction {r0:.4} -> {r50:.4}, recovery {s0:.4} -> {s50:.4} (best of first 50 <= half)"),
        ))
    };
    let effect = (|| {
        let short = |c: &RunConfig| RunConfig {
            train: graphbert::objectives::TrainConfig { epochs: 30, ..c.train.clone() },
            ..c.clone()
        };
        let scratch = env.finetune(&short(&cfg), "c6-scratch")?;
        let mut warm = short(&cfg);
        warm.from_checkpoint = Some(pre.checkpoint.clone());
        let warm = env.finetune(&warm, "c6-pretrained")?;
        let margin = warm.test_accuracy - scratch.test_accuracy;
        Ok((
            margin >= 0.01,
            format!(
                "pretrained {:.3} vs scratch {:.3} after 30 epochs, margin {margin:+.3} (>= 0.01)",
                warm.test_accuracy, scratch.test_accuracy
            ),
        ))
    })();
    (effect, convergence)
}

fn deep_model(env: &Env) -> Outcome {
    let mut cfg = env.config("cora");
    cfg.train.epochs = 50;
    let shallow = env.finetune(&cfg, "c8-depth2")?;
    cfg.model.encoder.depth = 30;
    let deep = env.finetune(&cfg, "c8-depth30")?;
    let reached = deep.train_095_epoch.is_some();
    let gap = (deep.test_accuracy - shallow.test_accuracy).abs();
    Ok((
        reached && gap <= 0.10,
        format!(
            "depth 30 reached 0.95 train accuracy at epoch {:?}; test {:.3} vs depth 2 {:.3}, gap {gap:.3} (<= 0.10)",
            deep.train_095_epoch.map(|e| e + 1),
            deep.test_accuracy,
            shallow.test_accuracy
        ),
    ))
}

fn seeded_csvs_match(env: &Env) -> props::Check {
    let mut cfg = env.config("cora");
    cfg.train.epochs = 5;
    let mut csvs = Vec::new();
    for name in ["c9-determinism-a", "c9-determinism-b"] {
        env.finetune(&cfg, name)?;
        csvs.push(std::fs::read(env.runs.join(name).join("metrics.csv")).map_err(|e| e.to_string())?);
    }
    if csvs[0] == csvs[1] {
        Ok(format!("two seeded runs wrote identical metrics.csv ({} bytes)", csvs[0].len()))
    } else {
        Err("seeded runs wrote different metrics.csv".into())
    }
}

fn property_suites(env: &Env) -> Outcome {
    let checks: [(&str, props::Check); 8] = [
        ("grad_check", props::primitive_gradients()),
        ("full model", props::full_model_gradients()),
        ("intimacy", props::intimacy()),
        ("wl", props::wl_permutation()),
        ("encoder", props::encoder_permutation()),
        ("top-k", props::topk_oracle()),
        ("kmeans", props::kmeans_oracle()),
        ("determinism", seeded_csvs_match(env)),
    ];
    let pass = checks.iter().all(|(_, c)| c.is_ok());
    let detail: Vec<String> = checks
        .iter()
        .map(|(name, c)| match c {
            Ok(d) => format!("{name} ok [{d}]"),
            Err(e) => format!("{name} FAILED [{e}]"),
        })
        .collect();
    Ok((pass, detail.join("; ")))
}

#[test]
fn acceptance() {
    let env = Env::new();
    let mut board = Board { lines: Vec::new() };
    board.record(9, "property suites", property_suites(&env));
    board.record(5, "raw-feature clustering", raw_clustering(&env));
    board.record(1, "node classification", node_classification(&env));
    board.record(3, "residual ablation", residual_ablation(&env));
    board.record(4, "embedding ablation", embedding_ablation(&env));
    board.record(8, "deep model", deep_model(&env));
    let (effect, convergence) = pretraining(&env);
    board.record(6, "pre-training effect", effect);
    board.record(7, "pre-training convergence", convergence);
    board.record(2, "subgraph-size sweep", subgraph_sweep(&env));

    board.lines.sort_by_key(|l| l.0);
    let text: String = board.lines.iter().map(|(_, l)| format!("{l}\n")).collect();
    let _ = writeln!(std::io::stdout(), "\nacceptance summary\n{text}");
    let _ = std::fs::write(Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance.txt"), &text);
    let failed: Vec<u32> = board
        .lines
        .iter()
        .filter(|(_, l)| l.starts_with("FAIL"))
        .map(|l| l.0)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
