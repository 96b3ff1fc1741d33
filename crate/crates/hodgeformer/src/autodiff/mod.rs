//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients
//! for every node that (transitively) depends on a trainable leaf. Tapes are
//! single-threaded by design — batch parallelism runs one tape per mesh.
//!
//! The engine is generic over [`Scalar`] (`f32` for training, `f64` for
//! verification). In debug builds every produced value is checked to be
//! finite.

pub mod kernels;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::mesh::incidence::SignedCsr;
use crate::sparsity::SparsityPattern;
use kernels::Gemm;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Element type the tape computes with.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Gemm
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn from_f64(x: f64) -> Self {
        num_traits::cast(x).expect("f64 -> scalar")
    }

    fn to_f64(self) -> f64 {
        num_traits::cast(self).expect("scalar -> f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

/// Handle to a tape node; cheap to copy, only valid for the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sparse row-mixing matrix with fixed (non-learned) coefficients, e.g.
/// averaging vertex states onto faces. Stores its transpose for backward.
#[derive(Debug, Clone)]
pub struct PoolingMatrix {
    pub rows: usize,
    pub cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    coefs: Vec<f64>,
    t_indptr: Vec<usize>,
    t_indices: Vec<usize>,
    t_coefs: Vec<f64>,
}

impl PoolingMatrix {
    /// `rows[r]` lists `(column, coefficient)` pairs.
    pub fn from_rows(rows: &[Vec<(usize, f64)>], cols: usize) -> PoolingMatrix {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut coefs = Vec::new();
        indptr.push(0);
        for row in rows {
            for &(c, w) in row {
                assert!(c < cols);
                indices.push(c);
                coefs.push(w);
            }
            indptr.push(indices.len());
        }
        // Transpose by counting sort over columns.
        let mut t_indptr = vec![0usize; cols + 1];
        for &c in &indices {
            t_indptr[c + 1] += 1;
        }
        for c in 0..cols {
            t_indptr[c + 1] += t_indptr[c];
        }
        let mut next = t_indptr.clone();
        let mut t_indices = vec![0usize; indices.len()];
        let mut t_coefs = vec![0.0; indices.len()];
        for (r, w) in rows.iter().enumerate() {
            let _ = w;
            for k in indptr[r]..indptr[r + 1] {
                let c = indices[k];
                t_indices[next[c]] = r;
                t_coefs[next[c]] = coefs[k];
                next[c] += 1;
            }
        }
        PoolingMatrix {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            coefs,
            t_indptr,
            t_indices,
            t_coefs,
        }
    }

    fn forward<T: Scalar>(&self, x: &[T], d: usize, out: &mut [T]) {
        for r in 0..self.rows {
            let row_out = &mut out[r * d..(r + 1) * d];
            for k in self.indptr[r]..self.indptr[r + 1] {
                let w = T::from_f64(self.coefs[k]);
                let src = &x[self.indices[k] * d..self.indices[k] * d + d];
                for (o, s) in row_out.iter_mut().zip(src) {
                    *o += w * *s;
                }
            }
        }
    }

    fn backward<T: Scalar>(&self, g: &[T], d: usize, gx: &mut [T]) {
        for c in 0..self.cols {
            let col_grad = &mut gx[c * d..(c + 1) * d];
            for k in self.t_indptr[c]..self.t_indptr[c + 1] {
                let w = T::from_f64(self.t_coefs[k]);
                let src = &g[self.t_indices[k] * d..self.t_indices[k] * d + d];
                for (o, s) in col_grad.iter_mut().zip(src) {
                    *o += w * *s;
                }
            }
        }
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    AddBias {
        a: usize,
        bias: usize,
    },
    Scale {
        a: usize,
        c: T,
    },
    /// `A (n,k) * B (k,m)`.
    MatMul {
        a: usize,
        b: usize,
    },
    /// `A (n,k) * B^T` with `B (m,k)`.
    MatMulBT {
        a: usize,
        b: usize,
    },
    /// `A^T * B` with `A (n,k)`, `B (n,m)`.
    MatMulATB {
        a: usize,
        b: usize,
    },
    Relu {
        a: usize,
    },
    /// `elu(x) + 1`: `x + 1` for `x > 0`, `exp(x)` otherwise. Positive.
    EluPlusOne {
        a: usize,
    },
    /// Row-wise normalization without affine parameters.
    LayerNorm {
        a: usize,
        inv_std: Vec<T>,
    },
    Dropout {
        a: usize,
        mask: Vec<T>,
    },
    /// Signed ±1 incidence application; `bwd` is the transpose of the
    /// forward operator (the forward values are computed eagerly, so only
    /// the backward operator is retained).
    SignedApply {
        a: usize,
        bwd: Arc<SignedCsr>,
    },
    RowMix {
        a: usize,
        mat: Arc<PoolingMatrix>,
    },
    /// Masked scaled-dot-product attention over a sparsity pattern;
    /// `q`, `k`, `v` all have one row per element of the pattern.
    SparseAttention {
        q: usize,
        k: usize,
        v: usize,
        pattern: Arc<SparsityPattern>,
        weights: Vec<T>,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    SumRows {
        a: usize,
    },
    MeanRows {
        a: usize,
    },
    /// `a (n,m) / b (n,1)` broadcast over columns.
    DivColVec {
        a: usize,
        b: usize,
    },
    /// Class-weighted label-smoothed cross entropy, reduced to a 1x1 loss.
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        class_weights: Vec<T>,
        smoothing: T,
        probs: Vec<T>,
        norm: T,
    },
}

struct Node<T: Scalar> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients from one backward pass, indexed by tensor handle.
pub struct Gradients<T: Scalar> {
    inner: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, t: Tensor) -> Option<&[T]> {
        self.inner[t.id].as_deref()
    }

    pub fn take(&mut self, t: Tensor) -> Option<Vec<T>> {
        self.inner[t.id].take()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Tape<T> {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, t: Tensor) -> &[T] {
        &self.nodes[t.id].values
    }

    pub fn values_f64(&self, t: Tensor) -> Vec<f64> {
        self.values(t).iter().map(|&v| v.to_f64()).collect()
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<T>, op: Op<T>, needs_grad: bool) -> Tensor {
        debug_assert_eq!(values.len(), rows * cols);
        #[cfg(debug_assertions)]
        {
            assert!(
                values.iter().all(|v| v.is_finite()),
                "non-finite value produced by tape node {} ({rows}x{cols})",
                self.nodes.len()
            );
        }
        self.nodes.push(Node {
            rows,
            cols,
            values,
            op,
            needs_grad,
        });
        Tensor {
            id: self.nodes.len() - 1,
            rows,
            cols,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, values: Vec<T>, requires_grad: bool) -> Tensor {
        self.push(rows, cols, values, Op::Leaf, requires_grad)
    }

    pub fn leaf_from_f64(
        &mut self,
        rows: usize,
        cols: usize,
        values: &[f64],
        requires_grad: bool,
    ) -> Tensor {
        let converted = values.iter().map(|&v| T::from_f64(v)).collect();
        self.leaf(rows, cols, converted, requires_grad)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "add: shape mismatch");
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a.id) || self.needs(b.id);
        self.push(a.rows, a.cols, values, Op::Add { a: a.id, b: b.id }, needs)
    }

    pub fn add_bias(&mut self, a: Tensor, bias: Tensor) -> Tensor {
        assert_eq!((bias.rows, bias.cols), (1, a.cols), "add_bias: bias shape");
        let mut values = self.values(a).to_vec();
        let b = self.values(bias);
        for row in values.chunks_mut(a.cols) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let needs = self.needs(a.id) || self.needs(bias.id);
        self.push(
            a.rows,
            a.cols,
            values,
            Op::AddBias {
                a: a.id,
                bias: bias.id,
            },
            needs,
        )
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        let c = T::from_f64(c);
        let values = self.values(a).iter().map(|&x| x * c).collect();
        let needs = self.needs(a.id);
        self.push(a.rows, a.cols, values, Op::Scale { a: a.id, c }, needs)
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(a.cols, b.rows, "matmul: inner dimension");
        let mut values = vec![T::zero(); a.rows * b.cols];
        T::gemm_ab(self.values(a), self.values(b), &mut values, a.rows, a.cols, b.cols);
        let needs = self.needs(a.id) || self.needs(b.id);
        self.push(a.rows, b.cols, values, Op::MatMul { a: a.id, b: b.id }, needs)
    }

    pub fn matmul_bt(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(a.cols, b.cols, "matmul_bt: inner dimension");
        let mut values = vec![T::zero(); a.rows * b.rows];
        T::gemm_abt(self.values(a), self.values(b), &mut values, a.rows, a.cols, b.rows);
        let needs = self.needs(a.id) || self.needs(b.id);
        self.push(a.rows, b.rows, values, Op::MatMulBT { a: a.id, b: b.id }, needs)
    }

    pub fn matmul_atb(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(a.rows, b.rows, "matmul_atb: inner dimension");
        let mut values = vec![T::zero(); a.cols * b.cols];
        T::gemm_atb(self.values(a), self.values(b), &mut values, a.rows, a.cols, b.cols);
        let needs = self.needs(a.id) || self.needs(b.id);
        self.push(a.cols, b.cols, values, Op::MatMulATB { a: a.id, b: b.id }, needs)
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let values = self
            .values(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let needs = self.needs(a.id);
        self.push(a.rows, a.cols, values, Op::Relu { a: a.id }, needs)
    }

    pub fn elu_plus_one(&mut self, a: Tensor) -> Tensor {
        let one = T::one();
        let values = self
            .values(a)
            .iter()
            .map(|&x| if x > T::zero() { x + one } else { x.exp() })
            .collect();
        let needs = self.needs(a.id);
        self.push(a.rows, a.cols, values, Op::EluPlusOne { a: a.id }, needs)
    }

    /// Row-wise layer normalization without learned affine parameters.
    pub fn layer_norm(&mut self, a: Tensor) -> Tensor {
        let eps = T::from_f64(LAYER_NORM_EPS);
        let cols = T::from_f64(a.cols as f64);
        let mut values = vec![T::zero(); a.len()];
        let mut inv_std = Vec::with_capacity(a.rows);
        let x = self.values(a);
        for r in 0..a.rows {
            let row = &x[r * a.cols..(r + 1) * a.cols];
            let mean = row.iter().copied().sum::<T>() / cols;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / cols;
            let is = (var + eps).sqrt().recip();
            inv_std.push(is);
            for (o, &v) in values[r * a.cols..(r + 1) * a.cols].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let needs = self.needs(a.id);
        self.push(
            a.rows,
            a.cols,
            values,
            Op::LayerNorm {
                a: a.id,
                inv_std,
            },
            needs,
        )
    }

    /// Inverted dropout: keep probability `1 - p`, kept entries scaled by
    /// `1/(1-p)`. `p == 0` is the identity and consumes no randomness.
    pub fn dropout(&mut self, a: Tensor, p: f64, rng: &mut ChaCha8Rng) -> Tensor {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0, 1)");
        if p == 0.0 {
            return a;
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..a.len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let values = self
            .values(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let needs = self.needs(a.id);
        self.push(a.rows, a.cols, values, Op::Dropout { a: a.id, mask }, needs)
    }

    /// Applies a ±1 incidence matrix. `bwd` must be `fwd` transposed.
    pub fn signed_apply(&mut self, a: Tensor, fwd: &Arc<SignedCsr>, bwd: &Arc<SignedCsr>) -> Tensor {
        assert_eq!(a.rows, fwd.cols, "signed_apply: row count");
        debug_assert_eq!((bwd.rows, bwd.cols), (fwd.cols, fwd.rows));
        let mut values = vec![T::zero(); fwd.rows * a.cols];
        fwd.apply_acc(self.values(a), a.cols, &mut values);
        let needs = self.needs(a.id);
        self.push(
            fwd.rows,
            a.cols,
            values,
            Op::SignedApply {
                a: a.id,
                bwd: Arc::clone(bwd),
            },
            needs,
        )
    }

    /// Applies a fixed sparse mixing matrix (e.g. vertex-to-face averaging).
    pub fn row_mix(&mut self, a: Tensor, mat: &Arc<PoolingMatrix>) -> Tensor {
        assert_eq!(a.rows, mat.cols, "row_mix: row count");
        let mut values = vec![T::zero(); mat.rows * a.cols];
        mat.forward(self.values(a), a.cols, &mut values);
        let needs = self.needs(a.id);
        self.push(
            mat.rows,
            a.cols,
            values,
            Op::RowMix {
                a: a.id,
                mat: Arc::clone(mat),
            },
            needs,
        )
    }

    /// Row-stochastic masked attention: for each element `i`,
    /// `out_i = sum_t softmax_t(q_i . k_t / sqrt(d)) v_t` over the pattern's
    /// target list of `i`.
    pub fn sparse_attention(
        &mut self,
        q: Tensor,
        k: Tensor,
        v: Tensor,
        pattern: &Arc<SparsityPattern>,
    ) -> Tensor {
        let n = pattern.targets.len();
        assert_eq!(q.rows, n, "sparse_attention: q rows");
        assert_eq!(k.rows, n, "sparse_attention: k rows");
        assert_eq!(v.rows, n, "sparse_attention: v rows");
        assert_eq!(q.cols, k.cols, "sparse_attention: q/k width");
        let d = q.cols;
        let dv = v.cols;
        let scale = T::from_f64(1.0 / (d as f64).sqrt());

        let total: usize = pattern.targets.iter().map(|t| t.len()).sum();
        let mut weights = Vec::with_capacity(total);
        let mut values = vec![T::zero(); n * dv];
        {
            let qv = self.values(q);
            let kv = self.values(k);
            let vv = self.values(v);
            let mut logits: Vec<T> = Vec::new();
            for (i, targets) in pattern.targets.iter().enumerate() {
                logits.clear();
                let qrow = &qv[i * d..(i + 1) * d];
                let mut max = T::neg_infinity();
                for &t in targets {
                    let krow = &kv[t * d..(t + 1) * d];
                    let mut dot = T::zero();
                    for (x, y) in qrow.iter().zip(krow) {
                        dot += *x * *y;
                    }
                    let logit = dot * scale;
                    if logit > max {
                        max = logit;
                    }
                    logits.push(logit);
                }
                let mut denom = T::zero();
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    denom += *l;
                }
                let out_row = &mut values[i * dv..(i + 1) * dv];
                for (&t, &e) in targets.iter().zip(logits.iter()) {
                    let w = e / denom;
                    weights.push(w);
                    let vrow = &vv[t * dv..(t + 1) * dv];
                    for (o, &x) in out_row.iter_mut().zip(vrow) {
                        *o += w * x;
                    }
                }
            }
        }
        let needs = self.needs(q.id) || self.needs(k.id) || self.needs(v.id);
        self.push(
            n,
            dv,
            values,
            Op::SparseAttention {
                q: q.id,
                k: k.id,
                v: v.id,
                pattern: Arc::clone(pattern),
                weights,
            },
            needs,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let rows = parts[0].rows;
        assert!(parts.iter().all(|p| p.rows == rows), "concat_cols: rows");
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut values = vec![T::zero(); rows * cols];
        let mut offset = 0;
        for p in parts {
            let pv = self.values(*p);
            for r in 0..rows {
                values[r * cols + offset..r * cols + offset + p.cols]
                    .copy_from_slice(&pv[r * p.cols..(r + 1) * p.cols]);
            }
            offset += p.cols;
        }
        let needs = parts.iter().any(|p| self.needs(p.id));
        self.push(
            rows,
            cols,
            values,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            needs,
        )
    }

    pub fn sum_rows(&mut self, a: Tensor) -> Tensor {
        let mut values = vec![T::zero(); a.cols];
        for row in self.values(a).chunks(a.cols) {
            for (o, &x) in values.iter_mut().zip(row) {
                *o += x;
            }
        }
        let needs = self.needs(a.id);
        self.push(1, a.cols, values, Op::SumRows { a: a.id }, needs)
    }

    pub fn mean_rows(&mut self, a: Tensor) -> Tensor {
        assert!(a.rows > 0, "mean_rows: empty input");
        let inv = T::from_f64(1.0 / a.rows as f64);
        let mut values = vec![T::zero(); a.cols];
        for row in self.values(a).chunks(a.cols) {
            for (o, &x) in values.iter_mut().zip(row) {
                *o += x;
            }
        }
        for v in &mut values {
            *v *= inv;
        }
        let needs = self.needs(a.id);
        self.push(1, a.cols, values, Op::MeanRows { a: a.id }, needs)
    }

    /// Element-wise division of each row of `a` by the matching entry of the
    /// column vector `b`.
    pub fn div_col_vec(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!((b.rows, b.cols), (a.rows, 1), "div_col_vec: shape");
        let bv = self.values(b).to_vec();
        let values = self
            .values(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x / bv[i / a.cols])
            .collect();
        let needs = self.needs(a.id) || self.needs(b.id);
        self.push(
            a.rows,
            a.cols,
            values,
            Op::DivColVec { a: a.id, b: b.id },
            needs,
        )
    }

    /// Class-weighted cross entropy with label smoothing, averaged with the
    /// per-row weights: `L = sum_i w_{t_i} l_i / sum_i w_{t_i}`.
    pub fn cross_entropy(
        &mut self,
        logits: Tensor,
        targets: &[usize],
        class_weights: &[f64],
        smoothing: f64,
    ) -> Tensor {
        let (n, c) = (logits.rows, logits.cols);
        assert_eq!(targets.len(), n, "cross_entropy: one target per row");
        assert_eq!(class_weights.len(), c, "cross_entropy: weight per class");
        assert!((0.0..1.0).contains(&smoothing), "smoothing must be in [0, 1)");
        assert!(targets.iter().all(|&t| t < c), "target class out of range");
        let s = T::from_f64(smoothing);
        let uniform = s / T::from_f64(c as f64);
        let keep = T::one() - s;

        let x = self.values(logits);
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        let mut norm = T::zero();
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for &v in row {
                denom += (v - max).exp();
            }
            let lse = max + denom.ln();
            // l_i = lse - sum_c q_c * logit_c with q the smoothed target.
            let mut dot = T::zero();
            for (cc, &v) in row.iter().enumerate() {
                let q = if cc == targets[i] { keep + uniform } else { uniform };
                dot += q * v;
                probs[i * c + cc] = (v - lse).exp();
            }
            let w = T::from_f64(class_weights[targets[i]]);
            loss += w * (lse - dot);
            norm += w;
        }
        assert!(norm > T::zero(), "cross_entropy: zero total weight");
        let values = vec![loss / norm];
        let needs = self.needs(logits.id);
        self.push(
            1,
            1,
            values,
            Op::CrossEntropy {
                logits: logits.id,
                targets: targets.to_vec(),
                class_weights: class_weights.iter().map(|&w| T::from_f64(w)).collect(),
                smoothing: T::from_f64(smoothing),
                probs,
                norm,
            },
            needs,
        )
    }

    /// Row sums of every attention node recorded so far, in recording order.
    /// Row-stochasticity means every sum should be 1 up to rounding.
    pub fn attention_row_sums(&self) -> Vec<Vec<T>> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::SparseAttention {
                    pattern, weights, ..
                } => {
                    let mut sums = Vec::with_capacity(pattern.targets.len());
                    let mut off = 0;
                    for t in &pattern.targets {
                        sums.push(weights[off..off + t.len()].iter().copied().sum::<T>());
                        off += t.len();
                    }
                    Some(sums)
                }
                _ => None,
            })
            .collect()
    }

    pub fn backward(&self, loss: Tensor) -> Gradients<T> {
        self.backward_seeded(loss, T::one())
    }

    /// Backward pass seeding the loss gradient with `seed` (used to fold
    /// per-mesh losses into a weighted batch loss without a joint tape).
    pub fn backward_seeded(&self, loss: Tensor, seed: T) -> Gradients<T> {
        assert_eq!((loss.rows, loss.cols), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.id].needs_grad {
            return Gradients { inner: grads };
        }
        grads[loss.id] = Some(vec![seed]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.dispatch(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { inner: grads }
    }

    /// Runs `f` on the parent's gradient buffer, allocating it on first
    /// touch; skipped entirely when the parent cannot reach a trainable leaf.
    fn with_grad<F: FnOnce(&mut [T])>(&self, grads: &mut [Option<Vec<T>>], pid: usize, f: F) {
        if !self.nodes[pid].needs_grad {
            return;
        }
        let len = self.nodes[pid].values.len();
        let buf = grads[pid].get_or_insert_with(|| vec![T::zero(); len]);
        f(buf);
    }

    fn dispatch(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        macro_rules! with_grad {
            ($pid:expr, |$buf:ident| $body:block) => {
                self.with_grad(grads, $pid, |$buf: &mut [T]| $body);
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for &pid in &[*a, *b] {
                    with_grad!(pid, |buf| {
                        for (o, &x) in buf.iter_mut().zip(g) {
                            *o += x;
                        }
                    });
                }
            }
            Op::AddBias { a, bias } => {
                with_grad!(*a, |buf| {
                    for (o, &x) in buf.iter_mut().zip(g) {
                        *o += x;
                    }
                });
                let cols = node.cols;
                with_grad!(*bias, |buf| {
                    for row in g.chunks(cols) {
                        for (o, &x) in buf.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                with_grad!(*a, |buf| {
                    for (o, &x) in buf.iter_mut().zip(g) {
                        *o += c * x;
                    }
                });
            }
            Op::MatMul { a, b } => {
                let (na, nb) = (&self.nodes[*a], &self.nodes[*b]);
                let (n, k, m) = (na.rows, na.cols, nb.cols);
                with_grad!(*a, |buf| {
                    T::gemm_abt(g, &nb.values, buf, n, m, k);
                });
                with_grad!(*b, |buf| {
                    T::gemm_atb(&na.values, g, buf, n, k, m);
                });
            }
            Op::MatMulBT { a, b } => {
                let (na, nb) = (&self.nodes[*a], &self.nodes[*b]);
                let (n, k, m) = (na.rows, na.cols, nb.rows);
                with_grad!(*a, |buf| {
                    T::gemm_ab(g, &nb.values, buf, n, m, k);
                });
                with_grad!(*b, |buf| {
                    T::gemm_atb(g, &na.values, buf, n, m, k);
                });
            }
            Op::MatMulATB { a, b } => {
                let (na, nb) = (&self.nodes[*a], &self.nodes[*b]);
                let (n, k, m) = (na.rows, na.cols, nb.cols);
                with_grad!(*a, |buf| {
                    T::gemm_abt(&nb.values, g, buf, n, m, k);
                });
                with_grad!(*b, |buf| {
                    T::gemm_ab(&na.values, g, buf, n, k, m);
                });
            }
            Op::Relu { a } => {
                let av = &self.nodes[*a].values;
                with_grad!(*a, |buf| {
                    for ((o, &x), &v) in buf.iter_mut().zip(g).zip(av) {
                        if v > T::zero() {
                            *o += x;
                        }
                    }
                });
            }
            Op::EluPlusOne { a } => {
                let av = &self.nodes[*a].values;
                let out = &node.values;
                with_grad!(*a, |buf| {
                    for (((o, &x), &v), &y) in buf.iter_mut().zip(g).zip(av).zip(out) {
                        // Derivative is 1 above zero and exp(x) = y below.
                        *o += if v > T::zero() { x } else { x * y };
                    }
                });
            }
            Op::LayerNorm { a, inv_std } => {
                let cols = node.cols;
                let colsf = T::from_f64(cols as f64);
                let xhat = &node.values;
                with_grad!(*a, |buf| {
                    for r in 0..node.rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let xrow = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_g = T::zero();
                        let mut mean_gx = T::zero();
                        for (&gv, &xv) in grow.iter().zip(xrow) {
                            mean_g += gv;
                            mean_gx += gv * xv;
                        }
                        mean_g /= colsf;
                        mean_gx /= colsf;
                        let is = inv_std[r];
                        let brow = &mut buf[r * cols..(r + 1) * cols];
                        for ((o, &gv), &xv) in brow.iter_mut().zip(grow).zip(xrow) {
                            *o += is * (gv - mean_g - xv * mean_gx);
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => {
                with_grad!(*a, |buf| {
                    for ((o, &x), &m) in buf.iter_mut().zip(g).zip(mask) {
                        *o += x * m;
                    }
                });
            }
            Op::SignedApply { a, bwd } => {
                with_grad!(*a, |buf| {
                    bwd.apply_acc(g, node.cols, buf);
                });
            }
            Op::RowMix { a, mat } => {
                with_grad!(*a, |buf| {
                    mat.backward(g, node.cols, buf);
                });
            }
            Op::SparseAttention {
                q,
                k,
                v,
                pattern,
                weights,
            } => {
                let d = self.nodes[*q].cols;
                let dv = node.cols;
                let scale = T::from_f64(1.0 / (d as f64).sqrt());
                let qv = &self.nodes[*q].values;
                let kv = &self.nodes[*k].values;
                let vv = &self.nodes[*v].values;

                with_grad!(*v, |buf| {
                    let mut off = 0;
                    for (i, targets) in pattern.targets.iter().enumerate() {
                        let grow = &g[i * dv..(i + 1) * dv];
                        for (kk, &t) in targets.iter().enumerate() {
                            let w = weights[off + kk];
                            let dst = &mut buf[t * dv..t * dv + dv];
                            for (o, &gx) in dst.iter_mut().zip(grow) {
                                *o += w * gx;
                            }
                        }
                        off += targets.len();
                    }
                });

                if self.nodes[*q].needs_grad || self.nodes[*k].needs_grad {
                    // Softmax backward per row:
                    // dlogit_it = scale * w_it * (dot(g_i, v_t)
                    //             - sum_u w_iu * dot(g_i, v_u)).
                    let mut dlogits = vec![T::zero(); weights.len()];
                    let mut off = 0;
                    for (i, targets) in pattern.targets.iter().enumerate() {
                        let grow = &g[i * dv..(i + 1) * dv];
                        let mut weighted = T::zero();
                        for (kk, &t) in targets.iter().enumerate() {
                            let vrow = &vv[t * dv..t * dv + dv];
                            let mut dw = T::zero();
                            for (&gx, &vx) in grow.iter().zip(vrow) {
                                dw += gx * vx;
                            }
                            dlogits[off + kk] = dw;
                            weighted += weights[off + kk] * dw;
                        }
                        for kk in 0..targets.len() {
                            let w = weights[off + kk];
                            dlogits[off + kk] = scale * w * (dlogits[off + kk] - weighted);
                        }
                        off += targets.len();
                    }
                    with_grad!(*q, |buf| {
                        let mut off = 0;
                        for (i, targets) in pattern.targets.iter().enumerate() {
                            let dst = &mut buf[i * d..i * d + d];
                            for (kk, &t) in targets.iter().enumerate() {
                                let dl = dlogits[off + kk];
                                if dl == T::zero() {
                                    continue;
                                }
                                let krow = &kv[t * d..t * d + d];
                                for (o, &kx) in dst.iter_mut().zip(krow) {
                                    *o += dl * kx;
                                }
                            }
                            off += targets.len();
                        }
                    });
                    with_grad!(*k, |buf| {
                        let mut off = 0;
                        for (i, targets) in pattern.targets.iter().enumerate() {
                            let qrow = &qv[i * d..i * d + d];
                            for (kk, &t) in targets.iter().enumerate() {
                                let dl = dlogits[off + kk];
                                if dl == T::zero() {
                                    continue;
                                }
                                let dst = &mut buf[t * d..t * d + d];
                                for (o, &qx) in dst.iter_mut().zip(qrow) {
                                    *o += dl * qx;
                                }
                            }
                            off += targets.len();
                        }
                    });
                }
            }
            Op::ConcatCols { parts } => {
                let cols = node.cols;
                let mut offset = 0;
                for &pid in parts {
                    let pcols = self.nodes[pid].cols;
                    with_grad!(pid, |buf| {
                        for r in 0..node.rows {
                            let src = &g[r * cols + offset..r * cols + offset + pcols];
                            let dst = &mut buf[r * pcols..(r + 1) * pcols];
                            for (o, &x) in dst.iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                    });
                    offset += pcols;
                }
            }
            Op::SumRows { a } => {
                with_grad!(*a, |buf| {
                    for row in buf.chunks_mut(node.cols) {
                        for (o, &x) in row.iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                });
            }
            Op::MeanRows { a } => {
                let inv = T::from_f64(1.0 / self.nodes[*a].rows as f64);
                with_grad!(*a, |buf| {
                    for row in buf.chunks_mut(node.cols) {
                        for (o, &x) in row.iter_mut().zip(g) {
                            *o += x * inv;
                        }
                    }
                });
            }
            Op::DivColVec { a, b } => {
                let cols = node.cols;
                let bv = &self.nodes[*b].values;
                let out = &node.values;
                with_grad!(*a, |buf| {
                    for (i, (o, &x)) in buf.iter_mut().zip(g).enumerate() {
                        *o += x / bv[i / cols];
                    }
                });
                with_grad!(*b, |buf| {
                    for r in 0..node.rows {
                        let mut s = T::zero();
                        for cc in 0..cols {
                            s += g[r * cols + cc] * out[r * cols + cc];
                        }
                        buf[r] -= s / bv[r];
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                class_weights,
                smoothing,
                probs,
                norm,
            } => {
                let c = self.nodes[*logits].cols;
                let uniform = *smoothing / T::from_f64(c as f64);
                let keep = T::one() - *smoothing;
                let g0 = g[0] / *norm;
                with_grad!(*logits, |buf| {
                    for (i, &t) in targets.iter().enumerate() {
                        let w = class_weights[t] * g0;
                        for cc in 0..c {
                            let q = if cc == t { keep + uniform } else { uniform };
                            buf[i * c + cc] += w * (probs[i * c + cc] - q);
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests;
