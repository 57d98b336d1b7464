#![allow(dead_code)]

use gbert_tensor::CsrMatrix;
use graphbert::graph::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Erdős–Rényi graph with sparse binary features and random labels.
pub fn random_graph(n: usize, d_x: usize, classes: usize, p: f64, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p) {
                edges.push((i, j, 1.0));
            }
        }
    }
    let mut dense = vec![0.0f32; n * d_x];
    for row in dense.chunks_mut(d_x) {
        for v in row.iter_mut() {
            if rng.gen_bool(0.3) {
                *v = 1.0;
            }
        }
        row[rng.gen_range(0..d_x)] = 1.0;
    }
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    Graph::new(
        (0..n).map(|i| format!("n{i}")).collect(),
        CsrMatrix::from_dense(n, d_x, &dense),
        labels,
        (0..classes).map(|c| format!("c{c}")).collect(),
        edges,
    )
    .unwrap()
}
