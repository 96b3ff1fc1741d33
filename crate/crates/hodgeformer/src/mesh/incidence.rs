//! Signed incidence matrices stored as CSR with ±1 entries.
//!
//! `d0` (edges × vertices) holds -1 at an edge's lower vertex and +1 at its
//! higher vertex. `d1` (faces × edges) holds +1 where the face traversal
//! agrees with the canonical low-to-high edge direction and -1 where it
//! opposes it. Composing them is exactly zero in integer arithmetic, which
//! [`IncidenceOperators::d1_d0_is_zero`] verifies without any floating point.

use num_traits::Float;

use crate::mesh::Mesh;

/// Sparse matrix whose entries are all +1 or -1.
#[derive(Debug, Clone)]
pub struct SignedCsr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub signs: Vec<i8>,
}

impl SignedCsr {
    /// `out = self * x` where `x` is row-major `cols x d` and `out` is
    /// row-major `rows x d`. Entries are ±1 so the product is pure signed
    /// accumulation — no multiplies.
    pub fn apply_into<T: Float + std::ops::AddAssign + std::ops::SubAssign>(
        &self,
        x: &[T],
        d: usize,
        out: &mut [T],
    ) {
        out.fill(T::zero());
        self.apply_acc(x, d, out);
    }

    /// Like [`SignedCsr::apply_into`] but accumulates into `out` instead of
    /// overwriting it.
    pub fn apply_acc<T: Float + std::ops::AddAssign + std::ops::SubAssign>(
        &self,
        x: &[T],
        d: usize,
        out: &mut [T],
    ) {
        assert_eq!(x.len(), self.cols * d);
        assert_eq!(out.len(), self.rows * d);
        for r in 0..self.rows {
            let row_out = &mut out[r * d..(r + 1) * d];
            for k in self.indptr[r]..self.indptr[r + 1] {
                let src = &x[self.indices[k] * d..self.indices[k] * d + d];
                if self.signs[k] > 0 {
                    for (o, s) in row_out.iter_mut().zip(src) {
                        *o += *s;
                    }
                } else {
                    for (o, s) in row_out.iter_mut().zip(src) {
                        *o -= *s;
                    }
                }
            }
        }
    }

    pub fn apply<T: Float + std::ops::AddAssign + std::ops::SubAssign>(
        &self,
        x: &[T],
        d: usize,
    ) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows * d];
        self.apply_into(x, d, &mut out);
        out
    }

    pub fn transpose(&self) -> SignedCsr {
        let nnz = self.indices.len();
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.cols {
            counts[c + 1] += counts[c];
        }
        let indptr = counts.clone();
        let mut indices = vec![0usize; nnz];
        let mut signs = vec![0i8; nnz];
        let mut next = counts;
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[k];
                indices[next[c]] = r;
                signs[next[c]] = self.signs[k];
                next[c] += 1;
            }
        }
        SignedCsr {
            rows: self.cols,
            cols: self.rows,
            indptr,
            indices,
            signs,
        }
    }

    /// Integer column sums (the matrix applied transposed to a ones vector).
    pub fn signed_column_sums(&self) -> Vec<i64> {
        let mut sums = vec![0i64; self.cols];
        for (&c, &s) in self.indices.iter().zip(&self.signs) {
            sums[c] += s as i64;
        }
        sums
    }

    /// Dense `rows x cols` copy, for small oracle computations in tests.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                dense[r * self.cols + self.indices[k]] = self.signs[k] as f64;
            }
        }
        dense
    }
}

/// The signed incidence matrices of a mesh together with their transposes.
#[derive(Debug, Clone)]
pub struct IncidenceOperators {
    pub d0: SignedCsr,
    pub d0t: SignedCsr,
    pub d1: SignedCsr,
    pub d1t: SignedCsr,
}

impl IncidenceOperators {
    pub fn build(mesh: &Mesh) -> IncidenceOperators {
        let n_v = mesh.n_vertices();
        let n_e = mesh.n_edges();
        let n_f = mesh.n_faces();

        let mut d0 = SignedCsr {
            rows: n_e,
            cols: n_v,
            indptr: Vec::with_capacity(n_e + 1),
            indices: Vec::with_capacity(2 * n_e),
            signs: Vec::with_capacity(2 * n_e),
        };
        d0.indptr.push(0);
        for &(a, b) in mesh.edges() {
            // Canonical edges satisfy a < b, so indices stay ascending.
            d0.indices.extend([a, b]);
            d0.signs.extend([-1, 1]);
            d0.indptr.push(d0.indices.len());
        }

        let mut d1 = SignedCsr {
            rows: n_f,
            cols: n_e,
            indptr: Vec::with_capacity(n_f + 1),
            indices: Vec::with_capacity(3 * n_f),
            signs: Vec::with_capacity(3 * n_f),
        };
        d1.indptr.push(0);
        for f in 0..n_f {
            let mut sides = *mesh.face_edges(f);
            sides.sort_unstable_by_key(|&(e, _)| e);
            for (e, s) in sides {
                d1.indices.push(e);
                d1.signs.push(s);
            }
            d1.indptr.push(d1.indices.len());
        }

        let d0t = d0.transpose();
        let d1t = d1.transpose();
        IncidenceOperators { d0, d0t, d1, d1t }
    }

    /// Checks `d1 * d0 == 0` exactly, accumulating in `i64`.
    pub fn d1_d0_is_zero(&self) -> bool {
        let n_v = self.d0.cols;
        let mut acc = vec![0i64; n_v];
        let mut touched = Vec::new();
        for f in 0..self.d1.rows {
            touched.clear();
            for k in self.d1.indptr[f]..self.d1.indptr[f + 1] {
                let e = self.d1.indices[k];
                let se = self.d1.signs[k] as i64;
                for j in self.d0.indptr[e]..self.d0.indptr[e + 1] {
                    let v = self.d0.indices[j];
                    if acc[v] == 0 {
                        touched.push(v);
                    }
                    acc[v] += se * self.d0.signs[j] as i64;
                }
            }
            let mut ok = true;
            for &v in &touched {
                ok &= acc[v] == 0;
                acc[v] = 0;
            }
            if !ok {
                return false;
            }
        }
        true
    }
}
