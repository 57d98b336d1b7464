//! Top-k intimate contexts and hop distances.

use std::cmp::Ordering;
use std::collections::VecDeque;

use rayon::prelude::*;

use super::intimacy::IntimacyMatrix;
use crate::graph::Graph;

/// Per-node context lists, row-major `n × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Contexts {
    pub k: usize,
    pub nodes: Vec<u32>,
    pub scores: Vec<f32>,
}

impl Contexts {
    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.nodes.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn of(&self, i: usize) -> &[u32] {
        &self.nodes[i * self.k..(i + 1) * self.k]
    }

    pub fn scores_of(&self, i: usize) -> &[f32] {
        &self.scores[i * self.k..(i + 1) * self.k]
    }
}

/// Context size actually used for `n` nodes.
pub fn effective_k(k: usize, n: usize) -> usize {
    if k >= n {
        log::warn!("k = {k} is not below |V| = {n}; using all {} other nodes", n.saturating_sub(1));
    }
    k.min(n.saturating_sub(1))
}

fn order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The `k` highest-scoring `j ≠ i` of `row`, by descending score then
/// ascending index.
pub fn topk_row(row: &[f64], i: usize, k: usize) -> Vec<(usize, f64)> {
    let mut cand: Vec<(usize, f64)> = row
        .iter()
        .copied()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .collect();
    let k = k.min(cand.len());
    if k == 0 {
        return Vec::new();
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
    }
    cand.sort_unstable_by(order);
    cand
}

/// Top-k contexts of every node from a dense intimacy matrix.
pub fn topk_context(s: &IntimacyMatrix, k: usize) -> Contexts {
    let k = effective_k(k, s.n);
    let rows: Vec<Vec<(usize, f64)>> = (0..s.n)
        .into_par_iter()
        .map(|i| topk_row(s.row(i), i, k))
        .collect();
    assemble(k, rows)
}

pub(crate) fn assemble(k: usize, rows: Vec<Vec<(usize, f64)>>) -> Contexts {
    let mut nodes = Vec::with_capacity(rows.len() * k);
    let mut scores = Vec::with_capacity(rows.len() * k);
    for r in rows {
        debug_assert_eq!(r.len(), k);
        for (j, v) in r {
            nodes.push(j as u32);
            scores.push(v as f32);
        }
    }
    Contexts { k, nodes, scores }
}

/// BFS hop distance from each target to its context nodes; unreachable
/// nodes get `|V|`.
pub fn hop_distances(graph: &Graph, contexts: &Contexts) -> Vec<u32> {
    let n = graph.node_count();
    let per_node: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .map(|i| bfs_to_targets(graph, i, contexts.of(i)))
        .collect();
    per_node.into_iter().flatten().collect()
}

fn bfs_to_targets(graph: &Graph, source: usize, wanted: &[u32]) -> Vec<u32> {
    let n = graph.node_count();
    let mut dist = vec![u32::MAX; n];
    let mut pending = wanted.iter().filter(|&&j| j as usize != source).count();
    dist[source] = 0;
    let mut q = VecDeque::from([source]);
    let mut is_wanted = vec![false; n];
    for &j in wanted {
        is_wanted[j as usize] = true;
    }
    while pending > 0 {
        let Some(u) = q.pop_front() else { break };
        for e in graph.neighbors(u) {
            let v = e.target;
            if dist[v] == u32::MAX {
                dist[v] = dist[u] + 1;
                if is_wanted[v] {
                    pending -= 1;
                }
                q.push_back(v);
            }
        }
    }
    wanted
        .iter()
        .map(|&j| match dist[j as usize] {
            u32::MAX => n as u32,
            d => d,
        })
        .collect()
}
