//! Aggregates run directories into result tables.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

use crate::error::{CliError, Result};
use crate::pipeline::{ClusterSummary, FinetuneSummary, PretrainSummary, SweepSummary};

fn load(dir: &Path) -> Result<Value> {
    let p = dir.join("summary.json");
    let text = std::fs::read_to_string(&p).map_err(|_| CliError::Missing {
        what: "run summary",
        path: p.display().to_string(),
        command: "graphbert finetune".into(),
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}|", header.iter().map(|_| "---").collect::<Vec<_>>().join("|"));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out.push('\n');
}

fn sweep_table(out: &mut String, s: &SweepSummary) {
    let _ = writeln!(out, "### {} ({})\n", s.kind, s.dataset);
    match s.kind.as_str() {
        "sweep_k" => {
            let rows: Vec<Vec<String>> = s
                .points
                .iter()
                .map(|p| {
                    vec![
                        p.summary.k.to_string(),
                        format!("{:.3}", p.summary.test_accuracy),
                        format!("{:.2}", p.summary.train_seconds),
                    ]
                })
                .collect();
            table(out, &["k", "test accuracy", "total time (s)"], &rows);
        }
        "sweep_residual" => {
            let rows: Vec<Vec<String>> = s
                .points
                .iter()
                .map(|p| vec![p.summary.residual_mode.to_string(), format!("{:.3}", p.summary.test_accuracy)])
                .collect();
            table(out, &["residual", "test accuracy"], &rows);
        }
        _ => {
            let rows: Vec<Vec<String>> = s
                .points
                .iter()
                .map(|p| vec![p.summary.embeddings.clone(), format!("{:.3}", p.summary.test_accuracy)])
                .collect();
            table(out, &["embeddings", "test accuracy"], &rows);
        }
    }
}

/// Markdown tables for every run directory in `dirs`, grouped by kind.
pub fn render(dirs: &[&Path]) -> Result<String> {
    let mut out = String::new();
    let mut finetunes = Vec::new();
    let mut clusters = Vec::new();
    let mut pretrains = Vec::new();
    for dir in dirs {
        let v = load(dir)?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match v.get("kind").and_then(Value::as_str) {
            Some("finetune") => finetunes.push((name, serde_json::from_value::<FinetuneSummary>(v)?)),
            Some("cluster") => clusters.push((name, serde_json::from_value::<ClusterSummary>(v)?)),
            Some("pretrain") => pretrains.push((name, serde_json::from_value::<PretrainSummary>(v)?)),
            Some(k) if k.starts_with("sweep") => sweep_table(&mut out, &serde_json::from_value(v)?),
            other => {
                return Err(CliError::Config(format!(
                    "{}: unknown run kind {other:?}",
                    dir.display()
                )))
            }
        }
    }
    if !finetunes.is_empty() {
        let rows: Vec<Vec<String>> = finetunes
            .iter()
            .map(|(n, s)| {
                vec![
                    n.clone(),
                    s.dataset.clone(),
                    s.init.clone(),
                    s.epochs.to_string(),
                    format!("{:.3}", s.validation_accuracy),
                    format!("{:.3}", s.test_accuracy),
                ]
            })
            .collect();
        out.push_str("### node classification\n\n");
        table(&mut out, &["run", "dataset", "init", "epochs", "validation", "test"], &rows);
    }
    if !clusters.is_empty() {
        let mut header = vec!["metric".to_string()];
        header.extend(clusters.iter().map(|(n, _)| n.clone()));
        let labels = [
            "Rand",
            "Raw Rand",
            "Adjusted MI",
            "Normalized MI",
            "Homogeneity",
            "Completeness",
        ];
        let rows: Vec<Vec<String>> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut r = vec![l.to_string()];
                r.extend(clusters.iter().map(|(_, s)| format!("{:.3}", s.metrics.values()[i])));
                r
            })
            .collect();
        out.push_str("### clustering\n\n");
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        table(&mut out, &header, &rows);
    }
    if !pretrains.is_empty() {
        let mut rows = Vec::new();
        for (n, s) in &pretrains {
            for (stage, r) in [("reconstruct", &s.reconstruct), ("recover", &s.recover)] {
                let at = |i: usize| r.losses.get(i).map_or("-".into(), |l| format!("{l:.4}"));
                rows.push(vec![
                    n.clone(),
                    stage.into(),
                    at(0),
                    at(49),
                    r.losses.last().map_or("-".into(), |l| format!("{l:.4}")),
                ]);
            }
        }
        out.push_str("### pre-training\n\n");
        table(&mut out, &["run", "stage", "epoch 1", "epoch 50", "final"], &rows);
    }
    Ok(out)
}
