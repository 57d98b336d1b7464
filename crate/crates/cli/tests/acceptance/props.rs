//! Seeded re-runs of the property checks behind criterion 9.

use std::collections::VecDeque;
use std::sync::Arc;

use gbert_tensor::gradcheck::{grad_check, grad_check_many};
use gbert_tensor::{BoundParams, CsrMatrix, Reduction, Tape, Tensor, TensorError, Var};
use graphbert::clustering::{kmeans, KMeansConfig};
use graphbert::embedding::{EmbeddingSources, SubgraphBatch};
use graphbert::encoder::{EncoderConfig, ResidualMode};
use graphbert::graph::Graph;
use graphbert::model::{GraphBert, GraphData, ModelConfig};
use graphbert::objectives::{loss_classify, loss_reconstruction, loss_structure};
use graphbert::preprocess::{
    build_cache, hop_distances, intimacy_dense, intimacy_power, normalized_adjacency, topk_context, wl_codes,
    CacheConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.gen_range(lo..1.5);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn probe(t: &mut Tape<f64>, y: Var, seed: u64) -> gbert_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, t.shape(y));
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Worst relative gradient error over every primitive family for one
/// random shape draw.
fn primitives_at(seed: u64) -> gbert_tensor::Result<f64> {
    const EPS: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d: Vec<usize> = (0..4).map(|_| rng.gen_range(1..5)).collect();
    let mut worst = 0.0f64;

    let a = rand_tensor(&mut rng, &[d[0], d[1], d[2]]);
    let w = rand_tensor(&mut rng, &[d[2], d[3]]);
    let b = rand_tensor(&mut rng, &[d[0], d[2], d[3]]);
    let bt = rand_tensor(&mut rng, &[d[0], d[3], d[2]]);
    worst = worst.max(grad_check_many(
        |t, v| {
            let x = t.matmul(v[0], v[1])?;
            let y = t.matmul(v[0], v[2])?;
            let z = t.matmul_nt(v[0], v[3])?;
            let s = t.add(x, y)?;
            let s = t.add(s, z)?;
            probe(t, s, seed)
        },
        &[a.clone(), w, b, bt],
        EPS,
    )?);

    let dense: Vec<f64> = (0..d[0] * d[1])
        .map(|_| if rng.gen_bool(0.4) { rng.gen_range(-1.0..1.0) } else { 0.0 })
        .collect();
    let m = Arc::new(CsrMatrix::from_dense(d[0], d[1], &dense));
    let rhs = rand_tensor(&mut rng, &[d[1], d[2]]);
    worst = worst.max(grad_check(
        |t, v| {
            let y = t.spmm(&m, v)?;
            probe(t, y, seed)
        },
        &rhs,
        EPS,
    )?);

    let b2 = rand_tensor(&mut rng, &[d[1], d[2]]);
    let c1 = rand_tensor(&mut rng, &[d[2]]);
    worst = worst.max(grad_check_many(
        |t, v| {
            let x = t.add(v[0], v[1])?;
            let x = t.mul(x, v[2])?;
            let x = t.sub(x, v[1])?;
            let x = t.scale(x, 0.7);
            let x = t.add_scalar(x, -0.3);
            let y = t.mul(v[0], v[0])?;
            let x = t.sub(x, y)?;
            probe(t, x, seed)
        },
        &[a.clone(), b2, c1],
        EPS,
    )?);

    let wide = rand_tensor(&mut rng, &[d[0], d[1], d[2] + 1]);
    worst = worst.max(grad_check_many(
        |t, v| {
            let x = t.transpose(v[0])?;
            let x = t.transpose(x)?;
            let n = t.narrow(x, 1, d[2])?;
            let c = t.concat(&[n, v[1], v[0]])?;
            let r = t.reshape(c, &[d[0] * d[1], 3 * d[2] + 1])?;
            let g = t.gather_rows(r, &[0, d[0] * d[1] - 1, 0])?;
            let mean = t.mean_axis(c, 1)?;
            let ex = t.expand(mean, 1, 2)?;
            let p1 = probe(t, g, seed)?;
            let p2 = probe(t, ex, seed + 1)?;
            t.add(p1, p2)
        },
        &[wide, a.clone()],
        EPS,
    )?);

    let kinked = away_from_zero(&mut rng, &[d[0], d[1] + 1], 0.05);
    worst = worst.max(grad_check(
        |t, v| {
            let s = t.softmax(v);
            let g = t.gelu(v);
            let r = t.relu(v);
            let x = t.add(s, g)?;
            let x = t.add(x, r)?;
            probe(t, x, seed)
        },
        &kinked,
        EPS,
    )?);

    worst = worst.max(grad_check(
        |t, v| {
            let sq = t.mul(v, v)?;
            let s = t.sum(sq);
            let m = t.mean(v);
            let m = t.mul(m, m)?;
            let ax = t.mean_axis(v, 0)?;
            let p = probe(t, ax, seed)?;
            let x = t.add(s, m)?;
            t.add(x, p)
        },
        &a,
        EPS,
    )?);

    let w = d[1] + 1;
    // Rows keep their entries 0.1 apart so the normalization stays well
    // conditioned for finite differences.
    let x = Tensor::from_fn(&[d[0], w], |i| (i % w) as f64 * 0.5 - 0.75 + rng.gen_range(-0.2..0.2));
    let g = rand_tensor(&mut rng, &[w]);
    let bias = rand_tensor(&mut rng, &[w]);
    worst = worst.max(grad_check_many(
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            probe(t, y, seed)
        },
        &[x.clone(), g, bias],
        EPS,
    )?);

    worst = worst.max(grad_check(
        |t, v| {
            let y = t.dropout(v, 0.4)?;
            let y = t.mul(y, v)?;
            probe(t, y, seed)
        },
        &x,
        EPS,
    )?);

    let rows = away_from_zero(&mut rng, &[d[0] + 1, d[1] + 1], 0.2);
    worst = worst.max(grad_check(
        |t, v| {
            let n = t.row_norm(v)?;
            let c = t.pairwise_cosine(v)?;
            let p1 = probe(t, n, seed)?;
            let p2 = probe(t, c, seed + 7)?;
            t.add(p1, p2)
        },
        &rows,
        EPS,
    )?);

    let classes = d[1] + 1;
    let logits = rand_tensor(&mut rng, &[d[0], classes]);
    let other = rand_tensor(&mut rng, &[d[0], classes]);
    let targets: Vec<usize> = (0..d[0]).map(|_| rng.gen_range(0..classes)).collect();
    worst = worst.max(grad_check_many(
        |t, v| {
            let s = t.cross_entropy(v[0], &targets, Reduction::Sum)?;
            let m = t.cross_entropy(v[0], &targets, Reduction::Mean)?;
            let q = t.sq_dist(v[0], v[1])?;
            let x = t.add(s, m)?;
            t.add(x, q)
        },
        &[logits, other],
        EPS,
    )?);
    Ok(worst)
}

pub fn primitive_gradients() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        worst = worst.max(primitives_at(seed).map_err(|e| format!("shape draw {seed}: {e}"))?);
    }
    if worst < 1e-5 {
        Ok(format!("primitives max rel err {worst:.2e}"))
    } else {
        Err(format!("primitives max rel err {worst:.2e} >= 1e-5"))
    }
}

/// Erdős–Rényi graph with binary features and random labels.
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
    .expect("valid random graph")
}

fn small(hidden: usize, depth: usize, mode: ResidualMode, embeddings: EmbeddingSources) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            hidden,
            depth,
            heads: 2,
            intermediate_size: hidden,
            residual_mode: mode,
            ..EncoderConfig::default()
        },
        embeddings,
        ..ModelConfig::default()
    }
}

fn to_tensor(e: graphbert::Error) -> TensorError {
    match e {
        graphbert::Error::Tensor(t) => t,
        e => TensorError::Invalid(e.to_string()),
    }
}

fn full_model_error(mode: ResidualMode, sources: EmbeddingSources) -> Result<f64, String> {
    let g = random_graph(24, 6, 3, 0.15, 7);
    let cache = build_cache(&g, &CacheConfig { k: 3, ..CacheConfig::default() }).map_err(|e| e.to_string())?;
    let model = GraphBert::new(small(8, 1, mode, sources), g.feature_dim(), g.class_count(), 11)
        .map_err(|e| e.to_string())?;
    let data: GraphData<f64> = GraphData::new(&g, mode);
    let targets = [0, 5, 7, 12];
    let batch = SubgraphBatch::from_cache(&cache, &targets).map_err(|e| e.to_string())?;
    let inputs = model.prepare(&data, &batch).map_err(|e| e.to_string())?;
    let store = model.params.cast::<f64>();
    let x = g.features.gather_dense(&targets).cast::<f64>();
    let s = Tensor::from_fn(&[4, 4], |i| ((i * 7) % 5) as f64 / 10.0);
    let labels: Vec<usize> = targets.iter().map(|&i| g.labels[i]).collect();
    grad_check_many(
        |tape, vars| {
            let bp = BoundParams::from_vars(vars.to_vec());
            let enc = model.encode(tape, &bp, &inputs).map_err(to_tensor)?;
            let logits = model.classify(tape, &bp, enc.z).map_err(to_tensor)?;
            let l1 = loss_classify(tape, logits, &labels).map_err(to_tensor)?;
            let x_hat = model.reconstruct(tape, &bp, enc.z).map_err(to_tensor)?;
            let xc = tape.constant(x.clone());
            let l2 = loss_reconstruction(tape, x_hat, xc).map_err(to_tensor)?;
            let sc = tape.constant(s.clone());
            let l3 = loss_structure(tape, enc.z, sc, &targets).map_err(to_tensor)?;
            let l = tape.add(l1, l2)?;
            tape.add(l, l3)
        },
        store.tensors(),
        1e-6,
    )
    .map_err(|e| e.to_string())
}

pub fn full_model_gradients() -> Check {
    let mut worst = 0.0f64;
    for mode in [ResidualMode::GraphRaw, ResidualMode::Raw, ResidualMode::GraphRawAdjacency] {
        worst = worst.max(full_model_error(mode, EmbeddingSources::ALL)?);
    }
    worst = worst.max(full_model_error(ResidualMode::None, "wl,hop".parse().map_err(|e| format!("{e}"))?)?);
    if worst < 1e-4 {
        Ok(format!("full model max rel err {worst:.2e}"))
    } else {
        Err(format!("full model max rel err {worst:.2e} >= 1e-4"))
    }
}

fn random_edge_graph(rng: &mut ChaCha8Rng, max_n: usize) -> Graph {
    let n = rng.gen_range(2..=max_n);
    let m = rng.gen_range(0..2 * n);
    let edges: Vec<(usize, usize)> = (0..m).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
    Graph::from_edge_list(n, &edges)
}

pub fn intimacy() -> Check {
    let tol = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let (mut col, mut gap) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let g = random_edge_graph(&mut rng, 200);
        let abar = normalized_adjacency(&g);
        let d = intimacy_dense(&abar, 0.15).map_err(|e| e.to_string())?;
        let p = intimacy_power(&abar, 0.15, tol, 10_000).map_err(|e| e.to_string())?;
        col = d.column_sums().iter().fold(col, |m, c| m.max((c - 1.0).abs()));
        gap = d.data.iter().zip(&p.data).fold(gap, |m, (a, b)| m.max((a - b).abs()));
    }
    let detail = format!("column sums off by {col:.1e}, dense vs power {gap:.1e}");
    if col <= 1e-8 && gap <= 10.0 * tol {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn wl_permutation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(92);
    for case in 0..100 {
        let g = random_edge_graph(&mut rng, 50);
        let n = g.node_count();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let edges: Vec<(usize, usize)> = g.edges.iter().map(|e| (perm[e.source], perm[e.target])).collect();
        let h = Graph::from_edge_list(n, &edges);
        let (a, b) = (wl_codes(&g, None), wl_codes(&h, None));
        if (0..n).any(|i| a.codes[i] != b.codes[perm[i]]) {
            return Err(format!("WL codes changed under relabeling in case {case}"));
        }
    }
    Ok("WL invariant on 100 graphs".into())
}

fn permute_rows(batch: &SubgraphBatch, perm: &[usize]) -> SubgraphBatch {
    let mut out = batch.clone();
    let r = batch.rows;
    for b in 0..batch.len() {
        for (dst, &src) in perm.iter().enumerate() {
            out.nodes[b * r + dst] = batch.nodes[b * r + src];
            out.wl[b * r + dst] = batch.wl[b * r + src];
            out.positions[b * r + dst] = batch.positions[b * r + src];
            out.hops[b * r + dst] = batch.hops[b * r + src];
        }
    }
    out
}

pub fn encoder_permutation() -> Check {
    let mut worst = 0.0f32;
    for seed in 0..5 {
        let g = random_graph(24, 6, 3, 0.15, seed);
        let cache = build_cache(&g, &CacheConfig { k: 5, ..CacheConfig::default() }).map_err(|e| e.to_string())?;
        let model = GraphBert::new(
            small(16, 2, ResidualMode::GraphRaw, EmbeddingSources::ALL),
            g.feature_dim(),
            g.class_count(),
            seed,
        )
        .map_err(|e| e.to_string())?;
        let data = GraphData::new(&g, ResidualMode::GraphRaw);
        let targets: Vec<usize> = (0..g.node_count()).collect();
        let batch = SubgraphBatch::from_cache(&cache, &targets).map_err(|e| e.to_string())?;
        let z = |b: &SubgraphBatch| -> Result<Tensor<f32>, String> {
            let inputs = model.prepare(&data, b).map_err(|e| e.to_string())?;
            let mut tape = Tape::new(0);
            tape.set_training(false);
            let bp = model.params.bind_frozen(&mut tape);
            let enc = model.encode(&mut tape, &bp, &inputs).map_err(|e| e.to_string())?;
            Ok(tape.value(enc.z).clone())
        };
        let base = z(&batch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..3 {
            let mut perm: Vec<usize> = (0..batch.rows).collect();
            perm.shuffle(&mut rng);
            worst = worst.max(base.max_abs_diff(&z(&permute_rows(&batch, &perm))?));
        }
    }
    if worst < 1e-5 {
        Ok(format!("fused output moved {worst:.1e} under row reordering"))
    } else {
        Err(format!("fused output moved {worst:.1e} under row reordering"))
    }
}

fn bfs_all(g: &Graph, s: usize) -> Vec<u32> {
    let n = g.node_count();
    let mut d = vec![n as u32; n];
    d[s] = 0;
    let mut q = VecDeque::from([s]);
    while let Some(u) = q.pop_front() {
        for e in g.neighbors(u) {
            if d[e.target] == n as u32 {
                d[e.target] = d[u] + 1;
                q.push_back(e.target);
            }
        }
    }
    d
}

pub fn topk_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(93);
    for case in 0..50 {
        let g = random_edge_graph(&mut rng, 50);
        let k = rng.gen_range(1..12);
        let s = intimacy_dense(&normalized_adjacency(&g), 0.15).map_err(|e| e.to_string())?;
        let c = topk_context(&s, k);
        let hops = hop_distances(&g, &c);
        for i in 0..g.node_count() {
            let row = s.row(i);
            let mut idx: Vec<usize> = (0..row.len()).filter(|&j| j != i).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(k);
            let want: Vec<u32> = idx.iter().map(|&j| j as u32).collect();
            if c.of(i) != &want[..] {
                return Err(format!("context of node {i} differs from full sort in case {case}"));
            }
            let d = bfs_all(&g, i);
            if c.of(i).iter().enumerate().any(|(slot, &j)| hops[i * c.k + slot] != d[j as usize]) {
                return Err(format!("hop distances of node {i} differ from BFS in case {case}"));
            }
        }
    }
    Ok("top-k and hops match brute force on 50 graphs".into())
}

fn best_two_partition(points: &[f64], dim: usize) -> f64 {
    let n = points.len() / dim;
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << (n - 1)) {
        let mut sse = 0.0;
        for side in [0, 1] {
            let members: Vec<usize> = (0..n).filter(|&i| ((mask >> i) & 1) as usize == side).collect();
            for d in 0..dim {
                let mean = members.iter().map(|&i| points[i * dim + d]).sum::<f64>() / members.len() as f64;
                sse += members.iter().map(|&i| (points[i * dim + d] - mean).powi(2)).sum::<f64>();
            }
        }
        best = best.min(sse);
    }
    best
}

pub fn kmeans_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(94);
    let trials = 200;
    let mut hits = 0;
    for t in 0..trials {
        let n = rng.gen_range(3..=12);
        let points: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let oracle = best_two_partition(&points, 2);
        let c = kmeans(&points, 2, 2, &KMeansConfig { restarts: 32, max_iter: 300, seed: t })
            .map_err(|e| e.to_string())?;
        if (c.sse - oracle).abs() <= 1e-9 {
            hits += 1;
        }
    }
    let detail = format!("KMeans hit the exhaustive optimum on {hits}/{trials}");
    if hits * 100 >= trials * 95 {
        Ok(detail)
    } else {
        Err(detail)
    }
}
