//! PageRank intimacy `S = α·(I − (1−α)·Ā)⁻¹`.

use gbert_tensor::CsrMatrix;

use crate::error::{Error, Result};
use crate::graph::Graph;

pub const DEFAULT_ALPHA: f64 = 0.15;

/// Column-normalized adjacency `Ā = A·D⁻¹`. Isolated nodes get a unit
/// self-loop column; the graph's edge list is not touched.
pub fn normalized_adjacency(graph: &Graph) -> CsrMatrix<f64> {
    let n = graph.node_count();
    let mut col_sum = vec![0.0f64; n];
    for e in &graph.edges {
        col_sum[e.target] += e.weight as f64;
    }
    let mut triplets = Vec::with_capacity(graph.edges.len() + n);
    for e in &graph.edges {
        triplets.push((e.source, e.target, e.weight as f64 / col_sum[e.target]));
    }
    for (i, &s) in col_sum.iter().enumerate() {
        if s == 0.0 {
            triplets.push((i, i, 1.0));
        }
    }
    CsrMatrix::from_triplets(n, n, triplets)
}

/// Transpose of a square sparse matrix.
pub fn transpose(m: &CsrMatrix<f64>) -> CsrMatrix<f64> {
    let mut t = Vec::with_capacity(m.nnz());
    for r in 0..m.rows() {
        for (c, v) in m.row(r) {
            t.push((c, r, v));
        }
    }
    CsrMatrix::from_triplets(m.cols(), m.rows(), t)
}

/// Dense row-major `S`, entry `(i, j)` at `i·n + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntimacyMatrix {
    pub n: usize,
    pub alpha: f64,
    pub data: Vec<f64>,
}

impl IntimacyMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for r in 0..self.n {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

/// Solves `(I − (1−α)Ā)·X = α·I` by LU with partial pivoting.
pub fn intimacy_dense(abar: &CsrMatrix<f64>, alpha: f64) -> Result<IntimacyMatrix> {
    check_alpha(alpha)?;
    let n = abar.rows();
    let beta = 1.0 - alpha;
    let mut m = vec![0.0f64; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    for r in 0..n {
        for (c, v) in abar.row(r) {
            m[r * n + c] -= beta * v;
        }
    }
    let mut x = vec![0.0f64; n * n];
    for i in 0..n {
        x[i * n + i] = alpha;
    }
    for p in 0..n {
        let pivot_row = (p..n)
            .max_by(|&a, &b| m[a * n + p].abs().total_cmp(&m[b * n + p].abs()))
            .unwrap_or(p);
        if m[pivot_row * n + p].abs() < 1e-300 {
            return Err(Error::Numerical(format!("singular system at pivot {p}")));
        }
        if pivot_row != p {
            for c in 0..n {
                m.swap(p * n + c, pivot_row * n + c);
                x.swap(p * n + c, pivot_row * n + c);
            }
        }
        let (head, tail) = m.split_at_mut((p + 1) * n);
        let prow = &head[p * n..];
        let (xhead, xtail) = x.split_at_mut((p + 1) * n);
        let xrow = &xhead[p * n..];
        let inv = 1.0 / prow[p];
        for (mrow, xr) in tail.chunks_mut(n).zip(xtail.chunks_mut(n)) {
            let f = mrow[p] * inv;
            if f == 0.0 {
                continue;
            }
            for c in p..n {
                mrow[c] -= f * prow[c];
            }
            for (a, &b) in xr.iter_mut().zip(xrow) {
                *a -= f * b;
            }
        }
    }
    for p in (0..n).rev() {
        let inv = 1.0 / m[p * n + p];
        for c in 0..n {
            x[p * n + c] *= inv;
        }
        let (head, tail) = x.split_at_mut(p * n);
        let xrow = &tail[..n];
        for r in 0..p {
            let f = m[r * n + p];
            if f == 0.0 {
                continue;
            }
            for (a, &b) in head[r * n..(r + 1) * n].iter_mut().zip(xrow) {
                *a -= f * b;
            }
        }
    }
    let s = IntimacyMatrix {
        n,
        alpha,
        data: x,
    };
    let res = residual(abar, &s);
    if res > 1e-6 {
        return Err(Error::Numerical(format!("intimacy solve residual {res:e} exceeds 1e-6")));
    }
    Ok(s)
}

/// Max-abs entry of `(I − (1−α)Ā)·S − α·I`.
pub fn residual(abar: &CsrMatrix<f64>, s: &IntimacyMatrix) -> f64 {
    let n = s.n;
    let beta = 1.0 - s.alpha;
    let prod = abar.matmul(&s.data, n).expect("square operands");
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { s.alpha } else { 0.0 };
            let v = s.data[i * n + j] - beta * prod[i * n + j] - target;
            worst = worst.max(v.abs());
        }
    }
    worst
}

/// `α·e_seed + (1−α)·op·s` iterated to an L1 fixpoint. Returns the vector and
/// the number of iterations taken.
pub fn ppr_vector(
    op: &CsrMatrix<f64>,
    seed: usize,
    alpha: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize)> {
    let n = op.rows();
    let beta = 1.0 - alpha;
    let mut s = vec![0.0f64; n];
    s[seed] = alpha;
    let mut next = vec![0.0f64; n];
    for it in 1..=max_iter {
        for (r, o) in next.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (c, v) in op.row(r) {
                acc += v * s[c];
            }
            *o = beta * acc;
        }
        next[seed] += alpha;
        let change: f64 = next.iter().zip(&s).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut s, &mut next);
        if change < tol {
            return Ok((s, it));
        }
        if it == max_iter {
            return Err(Error::Numerical(format!(
                "personalized PageRank for node {seed} did not converge in {max_iter} iterations (L1 change {change:e})"
            )));
        }
    }
    Err(Error::Numerical(format!("max_iter must be positive for node {seed}")))
}

fn check_tol(tol: f64) -> Result<()> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    Ok(())
}

/// Column-wise power iteration for the full `S`.
pub fn intimacy_power(
    abar: &CsrMatrix<f64>,
    alpha: f64,
    tol: f64,
    max_iter: usize,
) -> Result<IntimacyMatrix> {
    check_alpha(alpha)?;
    check_tol(tol)?;
    let n = abar.rows();
    let mut data = vec![0.0f64; n * n];
    for j in 0..n {
        let (col, _) = ppr_vector(abar, j, alpha, tol, max_iter)?;
        for (i, v) in col.into_iter().enumerate() {
            data[i * n + j] = v;
        }
    }
    Ok(IntimacyMatrix { n, alpha, data })
}

/// Row `i` of `S`, computed by iterating with `Āᵀ`.
pub fn intimacy_row(
    abar_t: &CsrMatrix<f64>,
    i: usize,
    alpha: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    check_tol(tol)?;
    Ok(ppr_vector(abar_t, i, alpha, tol, max_iter)?.0)
}
