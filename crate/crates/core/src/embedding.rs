//! Subgraph serialization and the four initial embedding sources.

use std::fmt;
use std::str::FromStr;

use gbert_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::ContextCache;

/// Target-first node lists for a set of targets, `k + 1` rows each.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphBatch {
    pub targets: Vec<usize>,
    pub rows: usize,
    /// Graph node of each row, `targets.len() × rows`.
    pub nodes: Vec<usize>,
    pub wl: Vec<u32>,
    pub positions: Vec<u32>,
    pub hops: Vec<u32>,
}

impl SubgraphBatch {
    pub fn from_cache(cache: &ContextCache, targets: &[usize]) -> Result<Self> {
        let n = cache.node_count();
        let k = cache.k();
        let rows = k + 1;
        let cap = targets.len() * rows;
        let mut nodes = Vec::with_capacity(cap);
        let mut hops = Vec::with_capacity(cap);
        for &t in targets {
            if t >= n {
                return Err(Error::Config(format!("target {t} outside cache of {n} nodes")));
            }
            nodes.push(t);
            nodes.extend(cache.contexts.of(t).iter().map(|&j| j as usize));
            hops.push(0);
            hops.extend_from_slice(cache.hops_of(t));
        }
        let wl = nodes.iter().map(|&j| cache.wl[j]).collect();
        let positions = (0..targets.len()).flat_map(|_| 0..rows as u32).collect();
        Ok(Self {
            targets: targets.to_vec(),
            rows,
            nodes,
            wl,
            positions,
            hops,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Nodes of subgraph `b`, target first.
    pub fn nodes_of(&self, b: usize) -> &[usize] {
        &self.nodes[b * self.rows..(b + 1) * self.rows]
    }
}

/// Which terms enter the summed initial embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSources {
    pub raw: bool,
    pub wl: bool,
    pub position: bool,
    pub hop: bool,
}

impl EmbeddingSources {
    pub const ALL: Self = Self {
        raw: true,
        wl: true,
        position: true,
        hop: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.raw || self.wl || self.position || self.hop)
    }

    pub fn names(&self) -> Vec<&'static str> {
        [
            (self.raw, "raw"),
            (self.wl, "wl"),
            (self.position, "position"),
            (self.hop, "hop"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect()
    }
}

impl Default for EmbeddingSources {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for EmbeddingSources {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names().join(","))
    }
}

impl FromStr for EmbeddingSources {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let names: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
        ablation_mask(&names)
    }
}

/// Parses a subset of `raw`, `wl`, `position`, `hop`.
pub fn ablation_mask(sources: &[&str]) -> Result<EmbeddingSources> {
    let mut m = EmbeddingSources {
        raw: false,
        wl: false,
        position: false,
        hop: false,
    };
    for s in sources {
        match *s {
            "raw" => m.raw = true,
            "wl" => m.wl = true,
            "position" | "pos" => m.position = true,
            "hop" => m.hop = true,
            "all" => m = EmbeddingSources::ALL,
            other => return Err(Error::Config(format!("unknown embedding source {other:?}"))),
        }
    }
    if m.is_empty() {
        return Err(Error::Config("at least one embedding source is required".into()));
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinusoidVariant {
    /// Cosine exponent `(2l+1)/d_h`.
    #[default]
    Printed,
    /// Cosine exponent `2l/d_h`, as in the original transformer.
    Classic,
}

/// Sinusoidal code embedding: entries `2l`, `2l+1` are
/// `sin(c / 10000^(2l/d))` and `cos(c / 10000^(e/d))` with `e = 2l+1`
/// (printed) or `e = 2l` (classic).
pub fn position_embed(code: u32, d_h: usize, variant: SinusoidVariant) -> Result<Vec<f64>> {
    if !d_h.is_multiple_of(2) {
        return Err(Error::Config(format!("hidden size must be even, got {d_h}")));
    }
    let c = code as f64;
    let mut out = Vec::with_capacity(d_h);
    for l in 0..d_h / 2 {
        let se = (2 * l) as f64 / d_h as f64;
        let ce = match variant {
            SinusoidVariant::Printed => (2 * l + 1) as f64 / d_h as f64,
            SinusoidVariant::Classic => se,
        };
        out.push((c / 10000f64.powf(se)).sin());
        out.push((c / 10000f64.powf(ce)).cos());
    }
    Ok(out)
}

/// Sum of the selected sinusoid sources for every batch row, shaped
/// `[batch, rows, d_h]`.
pub fn code_embeddings<T: Scalar>(
    batch: &SubgraphBatch,
    sources: EmbeddingSources,
    d_h: usize,
    variant: SinusoidVariant,
) -> Result<Tensor<T>> {
    let total = batch.nodes.len();
    let mut out = vec![0.0f64; total * d_h];
    let mut add = |codes: &[u32]| -> Result<()> {
        for (r, &c) in codes.iter().enumerate() {
            let e = position_embed(c, d_h, variant)?;
            for (o, v) in out[r * d_h..(r + 1) * d_h].iter_mut().zip(e) {
                *o += v;
            }
        }
        Ok(())
    };
    if sources.wl {
        add(&batch.wl)?;
    }
    if sources.position {
        add(&batch.positions)?;
    }
    if sources.hop {
        add(&batch.hops)?;
    }
    Ok(Tensor::new(
        &[batch.len(), batch.rows, d_h],
        out.into_iter().map(T::from_f64).collect(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_zero_alternates() {
        let e = position_embed(0, 8, SinusoidVariant::Printed).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn printed_formula_values() {
        let e = position_embed(1, 4, SinusoidVariant::Printed).unwrap();
        assert!((e[0] - 0.8415).abs() < 1e-4);
        assert!((e[1] - (1.0 / 10000f64.powf(0.25)).cos()).abs() < 1e-15);
        assert!((e[2] - (1.0 / 100.0f64).sin()).abs() < 1e-15);
        assert!((e[3] - (1.0 / 10000f64.powf(0.75)).cos()).abs() < 1e-15);
        let c = position_embed(1, 4, SinusoidVariant::Classic).unwrap();
        assert!((c[1] - 1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn odd_width_rejected() {
        assert!(position_embed(3, 7, SinusoidVariant::Printed).is_err());
    }

    #[test]
    fn distinct_codes_distinct_vectors() {
        let vecs: Vec<Vec<f64>> = (0..=1000)
            .map(|c| position_embed(c, 32, SinusoidVariant::Printed).unwrap())
            .collect();
        for a in 0..vecs.len() {
            for b in a + 1..vecs.len() {
                let d: f64 = vecs[a].iter().zip(&vecs[b]).map(|(x, y)| (x - y).abs()).sum();
                assert!(d > 1e-9, "codes {a} and {b} collide");
            }
        }
    }

    #[test]
    fn source_parsing() {
        assert_eq!("raw".parse::<EmbeddingSources>().unwrap().names(), vec!["raw"]);
        assert_eq!(
            "raw,wl,position,hop".parse::<EmbeddingSources>().unwrap(),
            EmbeddingSources::ALL
        );
        assert!("".parse::<EmbeddingSources>().is_err());
        assert!("raw,colour".parse::<EmbeddingSources>().is_err());
        assert_eq!(EmbeddingSources::ALL.to_string(), "raw,wl,position,hop");
    }
}
