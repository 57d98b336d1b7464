//! Self-contained run directories.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

pub struct RunDir {
    pub path: PathBuf,
    log: File,
}

impl RunDir {
    /// Creates `root/name`, replacing earlier metrics and summaries, and
    /// snapshots the configuration.
    pub fn create(root: &Path, name: &str, config: &RunConfig) -> Result<Self> {
        let path = root.join(name);
        fs::create_dir_all(path.join("checkpoints"))?;
        for stale in ["metrics.csv", "summary.json", "log.txt"] {
            let p = path.join(stale);
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        fs::write(path.join("config.json"), serde_json::to_vec_pretty(config)?)?;
        let log = OpenOptions::new().create(true).append(true).open(path.join("log.txt"))?;
        Ok(Self { path, log })
    }

    pub fn note(&mut self, msg: impl AsRef<str>) {
        let msg = msg.as_ref();
        log::info!("{msg}");
        let _ = writeln!(self.log, "{msg}");
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.path.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn write_metrics(&self, rows: &[MetricRow]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path.join("metrics.csv"))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary<S: Serialize>(&self, summary: &S) -> Result<()> {
        fs::write(self.path.join("summary.json"), serde_json::to_vec_pretty(summary)?)?;
        Ok(())
    }
}

pub fn read_metrics(dir: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(dir.join("metrics.csv"))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
