use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::kernels::{gemm, transpose};
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Spmm { m: Arc<CsrMatrix<T>>, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    AddScalar { a: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    Softmax { a: Var },
    Gelu { a: Var },
    Relu { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    MeanAxis { a: Var, axis: usize },
    Expand { a: Var, axis: usize, n: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { a: Var, mask: Vec<T> },
    Concat { parts: Vec<Var> },
    Narrow { a: Var, start: usize },
    Gather { a: Var, rows: Vec<usize> },
    RowNorm { a: Var },
    Cosine { a: Var, unit: Vec<T>, norms: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T>, clamped: Vec<bool>, reduction: Reduction },
    SqDist { a: Var, b: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Wengert list recording one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    rng: ChaCha8Rng,
    training: bool,
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const CE_FLOOR: f64 = 1e-12;
const LN_EPS: f64 = 1e-12;

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl<T: Scalar> Tape<T> {
    /// A tape in training mode whose dropout masks are drawn from `seed`.
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            training: true,
        }
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (dims, out_shape) = mm_dims(self.shape(a), self.shape(b), trans_b)?;
        let MmDims {
            batch,
            m,
            k,
            n,
            batched,
        } = dims;
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.val(a).data(), self.val(b).data());
        if batched {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        } else {
            gemm(batch * m, k, n, av, false, bv, trans_b, &mut out, false);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MatMul { a, b, trans_b }, ng))
    }

    /// `m · b` for a constant sparse `m` and dense 2-D `b`.
    pub fn spmm(&mut self, m: &Arc<CsrMatrix<T>>, b: Var) -> Result<Var> {
        let bs = self.shape(b);
        if bs.len() != 2 || bs[0] != m.cols() {
            return Err(mismatch("spmm", &[m.rows(), m.cols()], bs));
        }
        let n = bs[1];
        let out = m.matmul(self.val(b).data(), n)?;
        let ng = self.ng(b);
        Ok(self.push(
            Tensor::new(&[m.rows(), n], out)?,
            Op::Spmm { m: Arc::clone(m), b },
            ng,
        ))
    }

    fn broadcast_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (self.val(a), self.val(b));
        if !is_suffix(av.shape(), bv.shape()) {
            return Err(mismatch(op, av.shape(), bv.shape()));
        }
        let lb = bv.len().max(1);
        let mut data = Vec::with_capacity(av.len());
        for chunk in av.data().chunks(lb) {
            data.extend(chunk.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)));
        }
        Tensor::new(av.shape(), data)
    }

    /// Elementwise `a + b`; `b`'s shape must be a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.val(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale { a, c }, ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.val(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(t, Op::AddScalar { a }, ng)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a);
        let r = av.rank();
        if r < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: av.shape().to_vec(),
                reason: "need at least two axes".into(),
            });
        }
        let (rows, cols) = (av.shape()[r - 2], av.shape()[r - 1]);
        let mut shape = av.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let data = transpose_batched(av.data(), rows, cols);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Transpose { a }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape { a }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let c = av.cols();
        let mut data = av.data().to_vec();
        if c > 0 {
            for row in data.chunks_mut(c) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        let t = Tensor::new(av.shape(), data).expect("same extents");
        let ng = self.ng(a);
        self.push(t, Op::Softmax { a }, ng)
    }

    /// GELU with the exact erf form.
    pub fn gelu(&mut self, a: Var) -> Var {
        let half = T::from_f64(0.5);
        let r2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let t = self
            .val(a)
            .map(|x| half * x * (T::one() + (x * r2).erf()));
        let ng = self.ng(a);
        self.push(t, Op::Gelu { a }, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.val(a).map(|x| x.max(T::zero()));
        let ng = self.ng(a);
        self.push(t, Op::Relu { a }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.val(a).sum());
        let ng = self.ng(a);
        self.push(t, Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let t = Tensor::scalar(av.sum() / T::from_f64(av.len() as f64));
        let ng = self.ng(a);
        self.push(t, Op::Mean { a }, ng)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.val(a);
        if axis >= av.rank() {
            return Err(TensorError::IndexOutOfRange {
                op: "mean_axis",
                index: axis,
                extent: av.rank(),
            });
        }
        let (outer, n, inner) = split_axis(av.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let inv = T::one() / T::from_f64(n as f64);
        for o in 0..outer {
            for j in 0..n {
                let src = &av.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s * inv;
                }
            }
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MeanAxis { a, axis }, ng))
    }

    /// Insert a new axis at `axis` and repeat the input `n` times along it.
    pub fn expand(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let av = self.val(a);
        if axis > av.rank() {
            return Err(TensorError::IndexOutOfRange {
                op: "expand",
                index: axis,
                extent: av.rank() + 1,
            });
        }
        let outer: usize = av.shape()[..axis].iter().product();
        let inner: usize = av.shape()[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &av.data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(src);
            }
        }
        let mut shape = av.shape().to_vec();
        shape.insert(axis, n);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Expand { a, axis, n }, ng))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.val(x);
        let d = xv.cols();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(mismatch("layer_norm", xv.shape(), self.shape(p)));
            }
        }
        let (g, b) = (self.val(gamma).data(), self.val(beta).data());
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let inv_d = T::one() / T::from_f64(d as f64);
        let eps = T::from_f64(LN_EPS);
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mu) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Inverted dropout. Identity when `rate` is 0 or the tape is in eval mode.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if rate == 0.0 || !self.training {
            return Ok(a);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let n = self.val(a).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let av = self.val(a);
        let data = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::new(av.shape(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Dropout { a, mask }, ng))
    }

    /// Concatenate along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let rows = self.val(*first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != *lead {
                return Err(mismatch("concat", self.shape(*first), s));
            }
            total += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.val(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.val(a);
        let c = av.cols();
        if av.rank() == 0 || start + len > c {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                extent: c,
            });
        }
        let mut out = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Narrow { a, start }, ng))
    }

    /// Rows of a 2-D tensor selected by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = self.val(a);
        if av.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: av.shape().to_vec(),
                reason: "expected a matrix".into(),
            });
        }
        let (n, d) = (av.shape()[0], av.shape()[1]);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    extent: n,
                });
            }
            out.extend_from_slice(av.row(r));
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&[rows.len(), d], out)?,
            Op::Gather {
                a,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Euclidean norm over the last axis.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a);
        if av.rank() == 0 {
            return Err(TensorError::InvalidShape {
                op: "row_norm",
                shape: Vec::new(),
                reason: "scalar input".into(),
            });
        }
        let data = (0..av.rows())
            .map(|r| av.row(r).iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let shape = av.shape()[..av.rank() - 1].to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, data)?, Op::RowNorm { a }, ng))
    }

    /// Matrix of pairwise cosine similarities between the rows of `a`.
    pub fn pairwise_cosine(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a);
        if av.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "pairwise_cosine",
                shape: av.shape().to_vec(),
                reason: "expected a matrix".into(),
            });
        }
        let (n, d) = (av.shape()[0], av.shape()[1]);
        let mut unit = av.data().to_vec();
        let mut norms = vec![T::zero(); n];
        for r in 0..n {
            let nr = av.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
            if nr == T::zero() || !nr.is_finite() {
                return Err(TensorError::ZeroNorm {
                    op: "pairwise_cosine",
                    row: r,
                });
            }
            norms[r] = nr;
            unit[r * d..(r + 1) * d].iter_mut().for_each(|v| *v /= nr);
        }
        let mut out = vec![T::zero(); n * n];
        gemm(n, d, n, &unit, false, &unit, true, &mut out, false);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&[n, n], out)?,
            Op::Cosine { a, unit, norms },
            ng,
        ))
    }

    /// Softmax cross-entropy of `logits` (`n×c`) against integer targets.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let lv = self.val(logits);
        if lv.rank() != 2 || lv.shape()[0] != targets.len() {
            return Err(mismatch("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let c = lv.shape()[1];
        let floor = T::from_f64(CE_FLOOR);
        let mut probs = Vec::with_capacity(lv.len());
        let mut clamped = Vec::with_capacity(targets.len());
        let mut total = T::zero();
        for (r, &y) in targets.iter().enumerate() {
            if y >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: y,
                    extent: c,
                });
            }
            let row = lv.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let start = probs.len();
            probs.extend(row.iter().map(|&v| (v - mx).exp() / z));
            let p = probs[start + y];
            clamped.push(p < floor);
            total -= p.max(floor).ln();
        }
        if reduction == Reduction::Mean && !targets.is_empty() {
            total /= T::from_f64(targets.len() as f64);
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                clamped,
                reduction,
            },
            ng,
        ))
    }

    /// `‖a − b‖_F²` for equally shaped inputs.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("sq_dist", av.shape(), bv.shape()));
        }
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s), Op::SqDist { a, b }, ng))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are kept for leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.val(loss);
        if lv.len() != 1 {
            return Err(TensorError::InvalidShape {
                op: "backward",
                shape: lv.shape().to_vec(),
                reason: "loss must be a scalar".into(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (dims, _) = mm_dims(self.shape(*a), self.shape(*b), *trans_b)?;
                let MmDims {
                    batch,
                    m,
                    k,
                    n,
                    batched,
                } = dims;
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let (bb, mm) = if batched { (batch, m) } else { (1, batch * m) };
                if self.ng(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..bb {
                        gemm(
                            mm,
                            n,
                            k,
                            &gd[i * mm * n..(i + 1) * mm * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut da[i * mm * k..(i + 1) * mm * k],
                            false,
                        );
                    }
                    accumulate(grads, *a, self.shape(*a), da);
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); self.val(*b).len()];
                    for i in 0..bb {
                        let ga = &gd[i * mm * n..(i + 1) * mm * n];
                        let aa = &av[i * mm * k..(i + 1) * mm * k];
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, mm, k, ga, true, aa, false, dst, false);
                        } else {
                            gemm(k, mm, n, aa, true, ga, false, dst, false);
                        }
                    }
                    accumulate(grads, *b, self.shape(*b), db);
                }
            }
            Op::Spmm { m, b } => {
                let n = self.shape(*b)[1];
                let db = m.matmul_transposed(gd, n);
                accumulate(grads, *b, self.shape(*b), db);
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -T::one()
                } else {
                    T::one()
                };
                if self.ng(*a) {
                    accumulate(grads, *a, self.shape(*a), gd.to_vec());
                }
                if self.ng(*b) {
                    let lb = self.val(*b).len().max(1);
                    let mut db = vec![T::zero(); self.val(*b).len()];
                    for chunk in gd.chunks(lb) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d += sign * v;
                        }
                    }
                    accumulate(grads, *b, self.shape(*b), db);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let lb = bv.len().max(1);
                if self.ng(*a) {
                    let mut da = Vec::with_capacity(gd.len());
                    for c in gd.chunks(lb) {
                        da.extend(c.iter().zip(bv).map(|(&x, &y)| x * y));
                    }
                    accumulate(grads, *a, self.shape(*a), da);
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for (gc, ac) in gd.chunks(lb).zip(av.chunks(lb)) {
                        for ((d, &gv), &x) in db.iter_mut().zip(gc).zip(ac) {
                            *d += gv * x;
                        }
                    }
                    accumulate(grads, *b, self.shape(*b), db);
                }
            }
            Op::Scale { a, c } => {
                accumulate(grads, *a, self.shape(*a), gd.iter().map(|&v| v * *c).collect());
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                accumulate(grads, *a, self.shape(*a), gd.to_vec());
            }
            Op::Transpose { a } => {
                let s = out.shape();
                let r = s.len();
                let da = transpose_batched(gd, s[r - 2], s[r - 1]);
                accumulate(grads, *a, self.shape(*a), da);
            }
            Op::Softmax { a } => {
                let c = out.cols();
                let mut da = vec![T::zero(); gd.len()];
                if c > 0 {
                    for ((dr, gr), yr) in da.chunks_mut(c).zip(gd.chunks(c)).zip(out.data().chunks(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                        for ((d, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = y * (gv - dot);
                        }
                    }
                }
                accumulate(grads, *a, self.shape(*a), da);
            }
            Op::Gelu { a } => {
                let half = T::from_f64(0.5);
                let r2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::from_f64(0.398_942_280_401_432_7);
                let da = self
                    .val(*a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gv)| {
                        let cdf = half * (T::one() + (x * r2).erf());
                        let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                        gv * (cdf + x * pdf)
                    })
                    .collect();
                accumulate(grads, *a, self.shape(*a), da);
            }
            Op::Relu { a } => {
                let da = self
                    .val(*a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *a, self.shape(*a), da);
            }
            Op::Sum { a } => {
                let n = self.val(*a).len();
                accumulate(grads, *a, self.shape(*a), vec![gd[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.val(*a).len();
                let v = gd[0] / T::from_f64(n as f64);
                accumulate(grads, *a, self.shape(*a), vec![v; n]);
            }
            Op::MeanAxis { a, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*a), *axis);
                let inv = T::one() / T::from_f64(n as f64);
                let mut da = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for _ in 0..n {
                        da.extend(src.iter().map(|&v| v * inv));
                    }
                }
                accumulate(grads, *a, self.shape(*a), da);
            }
            Op::Expand { a, axis, n } => {
                let s = self.shape(*a);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis..].iter().product();
                let mut da = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..*n {
                        let src = &gd[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (d, &v) in da[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                accumulate(grads, *a, s, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let rows = out.rows();
                let gam = self.val(*gamma).data();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                            db[j] += gd[r * d + j];
                        }
                    }
                    if self.ng(*gamma) {
                        accumulate(grads, *gamma, &[d], dg);
                    }
                    if self.ng(*beta) {
                        accumulate(grads, *beta, &[d], db);
                    }
                }
                if self.ng(*x) {
                    let inv_d = T::one() / T::from_f64(d as f64);
                    let mut dx = vec![T::zero(); out.len()];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = gd[r * d + j] * gam[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = gd[r * d + j] * gam[j];
                            dx[r * d + j] = rstd[r] * (dh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
                        }
                    }
                    accumulate(grads, *x, self.shape(*x), dx);
                }
            }
            Op::Dropout { a, mask } => {
                let da = gd.iter().zip(mask).map(|(&v, &m)| v * m).collect();
                accumulate(grads, *a, self.shape(*a), da);
            }
            Op::Concat { parts } => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    if self.ng(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p, self.shape(p), dp);
                    }
                    offset += w;
                }
            }
            Op::Narrow { a, start } => {
                let c = self.val(*a).cols();
                let w = out.cols();
                let mut da = vec![T::zero(); self.val(*a).len()];
                for r in 0..out.rows() {
                    da[r * c + start..r * c + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                accumulate(grads, *a, self.shape(*a), da);
            }
            Op::Gather { a, rows } => {
                let d = out.cols();
                let mut da = vec![T::zero(); self.val(*a).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for (dst, &v) in da[r * d..(r + 1) * d].iter_mut().zip(&gd[i * d..(i + 1) * d]) {
                        *dst += v;
                    }
                }
                accumulate(grads, *a, self.shape(*a), da);
            }
            Op::RowNorm { a } => {
                let av = self.val(*a);
                let c = av.cols();
                let mut da = vec![T::zero(); av.len()];
                for r in 0..av.rows() {
                    let nr = out.data()[r];
                    if nr > T::zero() {
                        let s = gd[r] / nr;
                        for (d, &x) in da[r * c..(r + 1) * c].iter_mut().zip(av.row(r)) {
                            *d = s * x;
                        }
                    }
                }
                accumulate(grads, *a, av.shape(), da);
            }
            Op::Cosine { a, unit, norms } => {
                let n = norms.len();
                let d = self.val(*a).cols();
                let sym: Vec<T> = (0..n * n)
                    .map(|ij| gd[ij] + gd[(ij % n) * n + ij / n])
                    .collect();
                let mut du = vec![T::zero(); n * d];
                gemm(n, n, d, &sym, false, unit, false, &mut du, false);
                for r in 0..n {
                    let u = &unit[r * d..(r + 1) * d];
                    let dur = &mut du[r * d..(r + 1) * d];
                    let dot: T = u.iter().zip(dur.iter()).map(|(&x, &y)| x * y).sum();
                    for (g, &x) in dur.iter_mut().zip(u) {
                        *g = (*g - x * dot) / norms[r];
                    }
                }
                accumulate(grads, *a, self.shape(*a), du);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                clamped,
                reduction,
            } => {
                let c = self.val(*logits).cols();
                let mut scale = gd[0];
                if *reduction == Reduction::Mean && !targets.is_empty() {
                    scale /= T::from_f64(targets.len() as f64);
                }
                let mut dl = vec![T::zero(); probs.len()];
                for (r, &y) in targets.iter().enumerate() {
                    if clamped[r] {
                        continue;
                    }
                    for j in 0..c {
                        let ind = if j == y { T::one() } else { T::zero() };
                        dl[r * c + j] = scale * (probs[r * c + j] - ind);
                    }
                }
                accumulate(grads, *logits, self.shape(*logits), dl);
            }
            Op::SqDist { a, b } => {
                let two = T::from_f64(2.0) * gd[0];
                let diff: Vec<T> = self
                    .val(*a)
                    .data()
                    .iter()
                    .zip(self.val(*b).data())
                    .map(|(&x, &y)| two * (x - y))
                    .collect();
                if self.ng(*b) {
                    accumulate(grads, *b, self.shape(*b), diff.iter().map(|&v| -v).collect());
                }
                if self.ng(*a) {
                    accumulate(grads, *a, self.shape(*a), diff);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], data: Vec<T>) {
    let t = Tensor::new(shape, data).expect("gradient matches value shape");
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

struct MmDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    batched: bool,
}

fn mm_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<(MmDims, Vec<usize>)> {
    let bad = || mismatch("matmul", a, b);
    if a.len() < 2 || b.len() < 2 {
        return Err(bad());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (b0, b1) = (b[b.len() - 2], b[b.len() - 1]);
    let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
    if kb != k {
        return Err(bad());
    }
    let lead = &a[..a.len() - 2];
    let batched = b.len() > 2;
    if batched && b[..b.len() - 2] != *lead {
        return Err(bad());
    }
    let batch = lead.iter().product();
    let mut out = lead.to_vec();
    out.extend([m, n]);
    Ok((
        MmDims {
            batch,
            m,
            k,
            n,
            batched,
        },
        out,
    ))
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn transpose_batched<T: Scalar>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let block = rows * cols;
    if block == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(block) {
        out.extend(transpose(chunk, rows, cols));
    }
    out
}
