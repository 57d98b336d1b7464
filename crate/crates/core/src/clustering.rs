//! KMeans over node representations and partition-agreement metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{GraphBert, GraphData};
use crate::objectives::embed_nodes;
use crate::preprocess::ContextCache;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iter: 300,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub l: usize,
    pub dim: usize,
    /// Row-major `l × dim` cluster means.
    pub centers: Vec<f64>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances to the assigned center; restarts are ranked by it.
    pub sse: f64,
    /// Sum of unsquared distances to the assigned center.
    pub distance_sum: f64,
    pub iterations: usize,
    pub restart: usize,
}

impl Clustering {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.l];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Points<'a> {
    data: &'a [f64],
    dim: usize,
}

impl Points<'_> {
    fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn plus_plus(p: &Points<'_>, l: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = p.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq(p.row(i), p.row(chosen[0]))).collect();
    while chosen.len() < l {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            if d2[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq(p.row(i), p.row(next)));
        }
    }
    chosen.iter().flat_map(|&c| p.row(c).to_vec()).collect()
}

fn assign(p: &Points<'_>, centers: &[f64], l: usize, out: &mut [usize]) -> bool {
    let mut changed = false;
    for (i, a) in out.iter_mut().enumerate() {
        let x = p.row(i);
        let mut best = (f64::INFINITY, 0);
        for j in 0..l {
            let d = sq(x, &centers[j * p.dim..(j + 1) * p.dim]);
            if d < best.0 {
                best = (d, j);
            }
        }
        changed |= *a != best.1;
        *a = best.1;
    }
    changed
}

/// Moves the farthest point of the largest cluster into each empty one.
fn repair(p: &Points<'_>, centers: &[f64], l: usize, assignment: &mut [usize]) -> bool {
    let mut moved = false;
    loop {
        let mut sizes = vec![0usize; l];
        for &a in assignment.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return moved;
        };
        let largest = (0..l).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).unwrap();
        let c = &centers[largest * p.dim..(largest + 1) * p.dim];
        let far = (0..p.len())
            .filter(|&i| assignment[i] == largest)
            .max_by(|&a, &b| sq(p.row(a), c).total_cmp(&sq(p.row(b), c)).then(b.cmp(&a)))
            .unwrap();
        assignment[far] = empty;
        moved = true;
    }
}

fn recenter(p: &Points<'_>, l: usize, assignment: &[usize]) -> Vec<f64> {
    let mut centers = vec![0.0; l * p.dim];
    let mut counts = vec![0usize; l];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a] += 1;
        for (c, x) in centers[a * p.dim..(a + 1) * p.dim].iter_mut().zip(p.row(i)) {
            *c += x;
        }
    }
    for (j, &n) in counts.iter().enumerate() {
        for c in &mut centers[j * p.dim..(j + 1) * p.dim] {
            *c /= n.max(1) as f64;
        }
    }
    centers
}

fn objectives(p: &Points<'_>, centers: &[f64], assignment: &[usize]) -> (f64, f64) {
    let mut sse = 0.0;
    let mut dist = 0.0;
    for (i, &a) in assignment.iter().enumerate() {
        let d = sq(p.row(i), &centers[a * p.dim..(a + 1) * p.dim]);
        sse += d;
        dist += d.sqrt();
    }
    (sse, dist)
}

fn run(p: &Points<'_>, l: usize, max_iter: usize, seed: u64, restart: usize) -> Clustering {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    let mut centers = plus_plus(p, l, &mut rng);
    let mut assignment = vec![usize::MAX; p.len()];
    let mut last = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        let changed = assign(p, &centers, l, &mut assignment) | repair(p, &centers, l, &mut assignment);
        if !changed {
            break;
        }
        centers = recenter(p, l, &assignment);
        iterations += 1;
        let (sse, _) = objectives(p, &centers, &assignment);
        assert!(
            sse <= last + 1e-9 * last.abs().max(1.0),
            "kmeans objective rose from {last} to {sse}"
        );
        last = sse;
    }
    let (sse, distance_sum) = objectives(p, &centers, &assignment);
    Clustering {
        l,
        dim: p.dim,
        centers,
        assignment,
        sse,
        distance_sum,
        iterations,
        restart,
    }
}

/// Best of `config.restarts` k-means++ seeded Lloyd runs over the rows of
/// `points` (row-major, `dim` columns). Ties go to the lower restart index.
pub fn kmeans(points: &[f64], dim: usize, l: usize, config: &KMeansConfig) -> Result<Clustering> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::Config(format!(
            "{} values do not form rows of width {dim}",
            points.len()
        )));
    }
    let p = Points { data: points, dim };
    let n = p.len();
    if l == 0 || l > n {
        return Err(Error::Config(format!("cannot form {l} clusters from {n} points")));
    }
    if config.restarts == 0 {
        return Err(Error::Config("kmeans needs at least one restart".into()));
    }
    let runs: Vec<Clustering> = (0..config.restarts)
        .into_par_iter()
        .map(|r| run(&p, l, config.max_iter, config.seed, r))
        .collect();
    Ok(runs
        .into_iter()
        .reduce(|best, c| if c.sse < best.sse { c } else { best })
        .expect("at least one restart"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringMetrics {
    /// Adjusted Rand index.
    pub rand: f64,
    pub raw_rand: f64,
    pub adjusted_mi: f64,
    pub normalized_mi: f64,
    pub homogeneity: f64,
    pub completeness: f64,
}

impl ClusteringMetrics {
    pub const NAMES: [&'static str; 6] = [
        "rand",
        "raw_rand",
        "adjusted_mi",
        "normalized_mi",
        "homogeneity",
        "completeness",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.rand,
            self.raw_rand,
            self.adjusted_mi,
            self.normalized_mi,
            self.homogeneity,
            self.completeness,
        ]
    }
}

struct Contingency {
    n: usize,
    table: Vec<Vec<usize>>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn relabel(v: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let out = v
        .iter()
        .map(|&x| {
            let next = map.len();
            *map.entry(x).or_insert(next)
        })
        .collect();
    (out, map.len())
}

impl Contingency {
    fn new(labels: &[usize], assignment: &[usize]) -> Self {
        let (a, r) = relabel(labels);
        let (b, c) = relabel(assignment);
        let mut table = vec![vec![0usize; c]; r];
        for (&i, &j) in a.iter().zip(&b) {
            table[i][j] += 1;
        }
        let rows = table.iter().map(|row| row.iter().sum()).collect();
        let cols = (0..c).map(|j| table.iter().map(|row| row[j]).sum()).collect();
        Self {
            n: labels.len(),
            table,
            rows,
            cols,
        }
    }
}

fn pairs(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn mutual_information(t: &Contingency) -> f64 {
    let n = t.n as f64;
    let mut mi = 0.0;
    for (i, row) in t.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (t.rows[i] as f64 * t.cols[j] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

fn ln_fact(x: usize) -> f64 {
    libm::lgamma(x as f64 + 1.0)
}

/// Expected mutual information under the permutation model.
fn expected_mutual_information(t: &Contingency) -> f64 {
    let n = t.n;
    let nf = n as f64;
    let mut emi = 0.0;
    for &a in &t.rows {
        for &b in &t.cols {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            let fixed = ln_fact(a) + ln_fact(b) + ln_fact(n - a) + ln_fact(n - b) - ln_fact(n);
            for nij in lo..=hi {
                let x = nij as f64;
                let term = x / nf * (nf * x / (a as f64 * b as f64)).ln();
                let log_p = fixed
                    - ln_fact(nij)
                    - ln_fact(a - nij)
                    - ln_fact(b - nij)
                    - ln_fact(n + nij - a - b);
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

/// Agreement between a cluster assignment and ground-truth labels.
pub fn clustering_metrics(assignment: &[usize], labels: &[usize]) -> Result<ClusteringMetrics> {
    if assignment.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} assignments for {} labels",
            assignment.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Config("cannot score an empty clustering".into()));
    }
    let t = Contingency::new(labels, assignment);
    let n = t.n;
    let total = pairs(n);

    let same_both: f64 = t.table.iter().flatten().map(|&c| pairs(c)).sum();
    let same_rows: f64 = t.rows.iter().map(|&c| pairs(c)).sum();
    let same_cols: f64 = t.cols.iter().map(|&c| pairs(c)).sum();
    let raw_rand = if total == 0.0 {
        1.0
    } else {
        (total + 2.0 * same_both - same_rows - same_cols) / total
    };
    let expected = if total == 0.0 { 0.0 } else { same_rows * same_cols / total };
    let max_index = (same_rows + same_cols) / 2.0;
    let rand = if max_index == expected {
        if same_both == max_index { 1.0 } else { 0.0 }
    } else {
        (same_both - expected) / (max_index - expected)
    };

    let h_labels = entropy(&t.rows, n);
    let h_clusters = entropy(&t.cols, n);
    let mi = mutual_information(&t);
    let trivial = (t.rows.len() == 1 && t.cols.len() == 1) || (t.rows.len() == n && t.cols.len() == n);
    let normalized_mi = if trivial {
        1.0
    } else {
        let mean = (h_labels + h_clusters) / 2.0;
        if mean > 0.0 { (mi / mean).min(1.0) } else { 0.0 }
    };
    let adjusted_mi = if trivial {
        1.0
    } else {
        let emi = expected_mutual_information(&t);
        let mean = (h_labels + h_clusters) / 2.0;
        let denom = mean - emi;
        let denom = if denom < 0.0 { denom.min(-f64::EPSILON) } else { denom.max(f64::EPSILON) };
        (mi - emi) / denom
    };
    let homogeneity = if h_labels == 0.0 { 1.0 } else { mi / h_labels };
    let completeness = if h_clusters == 0.0 { 1.0 } else { mi / h_clusters };
    Ok(ClusteringMetrics {
        rand,
        raw_rand,
        adjusted_mi,
        normalized_mi,
        homogeneity: homogeneity.min(1.0),
        completeness: completeness.min(1.0),
    })
}

/// What to cluster.
pub enum ClusterInput<'a> {
    RawFeatures,
    /// Fused representations from a trained encoder.
    Model(&'a GraphBert, &'a ContextCache),
}

/// Clusters every node into `l` groups and scores the result against the
/// node labels.
pub fn cluster_embeddings(
    graph: &Graph,
    input: ClusterInput<'_>,
    l: usize,
    config: &KMeansConfig,
) -> Result<(Clustering, ClusteringMetrics)> {
    let (points, dim) = match input {
        ClusterInput::RawFeatures => {
            let x = graph.features.to_dense();
            (x.iter().map(|&v| v as f64).collect::<Vec<_>>(), graph.feature_dim())
        }
        ClusterInput::Model(model, cache) => {
            let data = GraphData::new(graph, model.config.encoder.residual_mode);
            let all: Vec<usize> = (0..graph.node_count()).collect();
            let z = embed_nodes(model, &data, cache, &all)?;
            (z.data().iter().map(|&v| v as f64).collect(), model.hidden())
        }
    };
    let c = kmeans(&points, dim, l, config)?;
    let m = clustering_metrics(&c.assignment, &graph.labels)?;
    Ok((c, m))
}
