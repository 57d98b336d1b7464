//! Weisfeiler-Lehman color refinement with canonical integer codes.

use crate::graph::Graph;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WlCodes {
    pub codes: Vec<u32>,
    /// Refinement rounds whose coloring was kept.
    pub rounds: usize,
}

impl WlCodes {
    pub fn distinct(&self) -> usize {
        self.codes.iter().copied().max().map_or(0, |m| m as usize + 1)
    }
}

/// Refines from a uniform coloring. Each round colors a node by the
/// lexicographic rank of `(own color, sorted neighbor colors)` among all
/// distinct signatures, so codes do not depend on node order. Stops once the
/// number of colors stops growing, or after `max_iter` rounds (default `|V|`).
pub fn wl_codes(graph: &Graph, max_iter: Option<usize>) -> WlCodes {
    let n = graph.node_count();
    let max_iter = max_iter.unwrap_or(n);
    let mut colors = vec![0u32; n];
    let mut classes = usize::from(n > 0);
    let mut rounds = 0;
    for _ in 0..max_iter {
        let sigs: Vec<(u32, Vec<u32>)> = (0..n)
            .map(|i| {
                let mut nb: Vec<u32> = graph.neighbors(i).iter().map(|e| colors[e.target]).collect();
                nb.sort_unstable();
                (colors[i], nb)
            })
            .collect();
        let mut distinct: Vec<&(u32, Vec<u32>)> = sigs.iter().collect();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() <= classes {
            break;
        }
        classes = distinct.len();
        colors = sigs
            .iter()
            .map(|s| distinct.binary_search(&s).expect("signature present") as u32)
            .collect();
        rounds += 1;
    }
    WlCodes {
        codes: colors,
        rounds,
    }
}
