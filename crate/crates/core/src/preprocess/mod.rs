//! Intimacy matrix, contexts, hop distances and WL codes, persisted as a
//! reusable cache.

mod context;
mod intimacy;
mod wl;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use context::{effective_k, hop_distances, topk_context, topk_row, Contexts};
pub use intimacy::{
    intimacy_dense, intimacy_power, intimacy_row, normalized_adjacency, ppr_vector, residual,
    transpose, IntimacyMatrix, DEFAULT_ALPHA,
};
pub use wl::{wl_codes, WlCodes};

use crate::binio;
use crate::error::{Error, Result};
use crate::graph::Graph;

pub const CACHE_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntimacyMethod {
    /// Dense solve up to `dense_limit` nodes, power iteration above.
    Auto,
    Dense,
    Power,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    pub k: usize,
    pub alpha: f64,
    pub method: IntimacyMethod,
    pub dense_limit: usize,
    pub power_tol: f64,
    pub power_max_iter: usize,
    /// Keep the full `S` (as f32) when `|V|` is at most this.
    pub store_intimacy_limit: usize,
    pub wl_max_iter: Option<usize>,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            k: 7,
            alpha: DEFAULT_ALPHA,
            method: IntimacyMethod::Auto,
            dense_limit: 1024,
            power_tol: 1e-10,
            power_max_iter: 10_000,
            store_intimacy_limit: 8_000,
            wl_max_iter: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub format_version: u32,
    pub graph_hash: String,
    pub node_count: usize,
    pub requested_k: usize,
    pub k: usize,
    pub alpha: f64,
    pub method: IntimacyMethod,
    pub power_tol: f64,
    pub wl_rounds: usize,
    pub wl_distinct: usize,
    pub has_intimacy: bool,
}

/// Precomputed batching substrate for one graph and `(k, α)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextCache {
    pub manifest: CacheManifest,
    pub contexts: Contexts,
    /// Hop distance of each context entry, aligned with `contexts.nodes`.
    pub hops: Vec<u32>,
    pub wl: Vec<u32>,
    /// Full row-major `S` when small enough to keep.
    pub intimacy: Option<Vec<f32>>,
}

impl ContextCache {
    pub fn k(&self) -> usize {
        self.contexts.k
    }

    pub fn node_count(&self) -> usize {
        self.manifest.node_count
    }

    pub fn hops_of(&self, i: usize) -> &[u32] {
        let k = self.k();
        &self.hops[i * k..(i + 1) * k]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        binio::write_u32(&dir.join("contexts.u32"), &self.contexts.nodes)?;
        binio::write_f32(&dir.join("scores.f32"), &self.contexts.scores)?;
        binio::write_u32(&dir.join("hops.u32"), &self.hops)?;
        binio::write_u32(&dir.join("wl.u32"), &self.wl)?;
        if let Some(s) = &self.intimacy {
            binio::write_f32(&dir.join("intimacy.f32"), s)?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }

    /// Loads a cache, refusing it unless it was built for `graph` with the
    /// same `k` and `α`.
    pub fn load(dir: &Path, graph: &Graph, k: usize, alpha: f64) -> Result<Self> {
        let path = dir.join("manifest.json");
        let manifest: CacheManifest = serde_json::from_slice(&fs::read(&path).map_err(|e| {
            Error::CacheInvalid(format!("{}: {e}; run `graphbert preprocess` first", path.display()))
        })?)?;
        if manifest.format_version != CACHE_FORMAT {
            return Err(Error::CacheInvalid(format!(
                "format version {} (expected {CACHE_FORMAT})",
                manifest.format_version
            )));
        }
        if manifest.graph_hash != graph.content_hash() {
            return Err(Error::CacheInvalid("graph hash does not match the cache".into()));
        }
        if manifest.requested_k != k {
            return Err(Error::CacheInvalid(format!(
                "cache built for k = {}, requested k = {k}",
                manifest.requested_k
            )));
        }
        if manifest.alpha != alpha {
            return Err(Error::CacheInvalid(format!(
                "cache built for alpha = {}, requested alpha = {alpha}",
                manifest.alpha
            )));
        }
        let n = manifest.node_count;
        let nk = n * manifest.k;
        let contexts = Contexts {
            k: manifest.k,
            nodes: binio::read_u32(&dir.join("contexts.u32"), Some(nk))?,
            scores: binio::read_f32(&dir.join("scores.f32"), Some(nk))?,
        };
        let hops = binio::read_u32(&dir.join("hops.u32"), Some(nk))?;
        let wl = binio::read_u32(&dir.join("wl.u32"), Some(n))?;
        let intimacy = if manifest.has_intimacy {
            Some(binio::read_f32(&dir.join("intimacy.f32"), Some(n * n))?)
        } else {
            None
        };
        Ok(Self {
            manifest,
            contexts,
            hops,
            wl,
            intimacy,
        })
    }
}

/// Computes every cache component. Per-node work runs on the ambient rayon
/// pool; output does not depend on its size.
pub fn build_cache(graph: &Graph, config: &CacheConfig) -> Result<ContextCache> {
    let n = graph.node_count();
    if config.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let abar = normalized_adjacency(graph);
    let method = match config.method {
        IntimacyMethod::Auto if n <= config.dense_limit => IntimacyMethod::Dense,
        IntimacyMethod::Auto => IntimacyMethod::Power,
        m => m,
    };
    let keep = n <= config.store_intimacy_limit;
    let k = effective_k(config.k, n);
    let (contexts, intimacy) = match method {
        IntimacyMethod::Dense => {
            let s = intimacy_dense(&abar, config.alpha)?;
            let c = topk_context(&s, config.k);
            (c, keep.then(|| s.data.iter().map(|&v| v as f32).collect()))
        }
        _ => {
            let at = transpose(&abar);
            let rows: Vec<(Vec<(usize, f64)>, Option<Vec<f32>>)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let row = intimacy_row(&at, i, config.alpha, config.power_tol, config.power_max_iter)?;
                    let top = topk_row(&row, i, k);
                    Ok((top, keep.then(|| row.iter().map(|&v| v as f32).collect())))
                })
                .collect::<Result<_>>()?;
            let (tops, full): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
            let full = keep.then(|| full.into_iter().flatten().flatten().collect());
            (context::assemble(k, tops), full)
        }
    };
    let hops = hop_distances(graph, &contexts);
    let wl = wl_codes(graph, config.wl_max_iter);
    let manifest = CacheManifest {
        format_version: CACHE_FORMAT,
        graph_hash: graph.content_hash(),
        node_count: n,
        requested_k: config.k,
        k,
        alpha: config.alpha,
        method,
        power_tol: config.power_tol,
        wl_rounds: wl.rounds,
        wl_distinct: wl.distinct(),
        has_intimacy: intimacy.is_some(),
    };
    Ok(ContextCache {
        manifest,
        contexts,
        hops,
        wl: wl.codes,
        intimacy,
    })
}
