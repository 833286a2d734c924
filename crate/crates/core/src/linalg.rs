//! Singular value decomposition and numerical rank.
//!
//! Two routes are provided:
//!
//! - [`jacobi_svd`]: one-sided (Hestenes) Jacobi applied directly to the
//!   columns of the input. Simple and accurate, `O(m n^2)` per sweep.
//! - [`svd`]: Householder QR with column pivoting first, truncated once the
//!   trailing columns fall to round-off level, then one-sided Jacobi on the
//!   small triangular factor. For the low-rank fused updates analyzed in this
//!   crate this is dramatically cheaper than direct Jacobi on the full matrix.
//!
//! Both return an economy decomposition: components annihilated at round-off
//! level by the pivoted QR are dropped, so `singular_values.len()` may be
//! smaller than `min(rows, cols)`.

use crate::matrix::{dot, Matrix};

/// Default relative threshold for [`numerical_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

const MAX_SWEEPS: usize = 80;

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// Non-increasing, non-negative.
    pub singular_values: Vec<f64>,
    /// `rows × p` with orthonormal columns.
    pub u: Matrix,
    /// `cols × p` with orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    /// `U · diag(σ) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        let p = self.singular_values.len();
        for i in 0..us.rows() {
            for (j, s) in self.singular_values.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        debug_assert_eq!(us.cols(), p);
        us.matmul_t(&self.v).expect("factor shapes agree")
    }
}

/// Column-major working copy; every Jacobi and Householder step touches
/// whole columns, so contiguous columns keep the inner loops streaming.
struct Columns {
    len: usize,
    cols: Vec<Vec<f64>>,
}

impl Columns {
    fn from_matrix(a: &Matrix) -> Self {
        let cols = (0..a.cols())
            .map(|j| (0..a.rows()).map(|i| a[(i, j)]).collect())
            .collect();
        Self { len: a.rows(), cols }
    }

    fn from_rows_of(a: &Matrix) -> Self {
        let cols = (0..a.rows()).map(|i| a.row(i).to_vec()).collect();
        Self { len: a.cols(), cols }
    }

    fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.len, self.cols.len(), |i, j| self.cols[j][i])
    }
}

/// One-sided Jacobi on the columns of `w`. Returns the column norms
/// (unsorted) after orthogonalization; `v`, when given, accumulates the
/// right rotations.
fn orthogonalize(w: &mut Columns, mut v: Option<&mut Columns>) -> Vec<f64> {
    let n = w.cols.len();
    let eps = f64::EPSILON;
    let mut norms: Vec<f64> = w.cols.iter().map(|c| dot(c, c)).collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = norms[i];
                let beta = norms[j];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&w.cols[i], &w.cols[j]);
                if gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w.cols, i, j, c, s);
                if let Some(v) = v.as_deref_mut() {
                    rotate(&mut v.cols, i, j, c, s);
                }
                norms[i] = alpha - t * gamma;
                norms[j] = beta + t * gamma;
            }
        }
        // refresh from the data to stop drift in the running updates
        for (nrm, c) in norms.iter_mut().zip(&w.cols) {
            *nrm = dot(c, c);
        }
        if !rotated {
            break;
        }
    }
    norms.into_iter().map(f64::sqrt).collect()
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    for (x, y) in left[i].iter_mut().zip(right[0].iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Sorts Jacobi output into an [`SvdResult`]: `w` holds `U·Σ` column-wise,
/// `v` the accumulated right rotations.
fn assemble(w: Columns, norms: Vec<f64>, v: Columns) -> SvdResult {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let p = order.len();
    let m = w.len;
    let mut u = Matrix::zeros(m, p);
    let mut vm = Matrix::zeros(v.len, p);
    let mut sv = Vec::with_capacity(p);
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        sv.push(sigma);
        if sigma > 0.0 {
            for i in 0..m {
                u[(i, dst)] = w.cols[src][i] / sigma;
            }
        }
        for i in 0..v.len {
            vm[(i, dst)] = v.cols[src][i];
        }
    }
    SvdResult {
        singular_values: sv,
        u,
        v: vm,
    }
}

/// Direct one-sided Jacobi SVD.
pub fn jacobi_svd(a: &Matrix) -> SvdResult {
    if a.rows() < a.cols() {
        let t = jacobi_svd(&a.transpose());
        return SvdResult {
            singular_values: t.singular_values,
            u: t.v,
            v: t.u,
        };
    }
    let mut w = Columns::from_matrix(a);
    let n = a.cols();
    let mut v = Columns::from_matrix(&Matrix::identity(n));
    let norms = orthogonalize(&mut w, Some(&mut v));
    assemble(w, norms, v)
}

/// Householder QR with column pivoting, stopped once every remaining column
/// norm is at round-off level relative to `‖A‖_F`.
struct PivotedQr {
    /// Householder vectors (unit-norm), one per completed step, stored over
    /// rows `step..`.
    reflectors: Vec<Vec<f64>>,
    /// Upper-trapezoidal factor, `p × n`, columns in pivoted order.
    r: Matrix,
    /// `perm[j]` is the original column index of pivoted column `j`.
    perm: Vec<usize>,
    rows: usize,
}

fn pivoted_qr(a: &Matrix) -> PivotedQr {
    let (m, n) = a.shape();
    let mut work = Columns::from_matrix(a);
    let mut perm: Vec<usize> = (0..n).collect();
    let total = a.frobenius_norm();
    let cutoff = 8.0 * f64::EPSILON * total;
    let mut norms: Vec<f64> = work.cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut reflectors = Vec::new();
    let steps = m.min(n);
    for step in 0..steps {
        let (best, &best_norm) = norms[step..]
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .map(|(i, v)| (i + step, v))
            .expect("non-empty pivot range");
        if best_norm <= cutoff {
            break;
        }
        work.cols.swap(step, best);
        norms.swap(step, best);
        perm.swap(step, best);

        let col = &work.cols[step][step..];
        let alpha = dot(col, col).sqrt();
        let head = col[0];
        let mut reflector = col.to_vec();
        let sign = if head >= 0.0 { 1.0 } else { -1.0 };
        reflector[0] = head + sign * alpha;
        let vnorm = dot(&reflector, &reflector).sqrt();
        for x in &mut reflector {
            *x /= vnorm;
        }
        for (j, col) in work.cols.iter_mut().enumerate().take(n).skip(step) {
            let c = &mut col[step..];
            let proj = 2.0 * dot(&reflector, c);
            for (x, h) in c.iter_mut().zip(&reflector) {
                *x -= proj * h;
            }
            if j > step {
                norms[j] = dot(&c[1..], &c[1..]).sqrt();
            }
        }
        reflectors.push(reflector);
    }
    let p = reflectors.len();
    let r = if p == 0 {
        Matrix::zeros(1, n)
    } else {
        Matrix::from_fn(p, n, |i, j| if i <= j { work.cols[j][i] } else { 0.0 })
    };
    PivotedQr {
        reflectors,
        r,
        perm,
        rows: m,
    }
}

impl PivotedQr {
    /// `Q · Z` for a `p × q` matrix `Z`, giving `rows × q`.
    fn apply_q(&self, z: &Matrix) -> Matrix {
        let q = z.cols();
        let mut out = Columns {
            len: self.rows,
            cols: (0..q)
                .map(|j| {
                    let mut c = vec![0.0; self.rows];
                    for i in 0..z.rows() {
                        c[i] = z[(i, j)];
                    }
                    c
                })
                .collect(),
        };
        for (step, h) in self.reflectors.iter().enumerate().rev() {
            for c in &mut out.cols {
                let seg = &mut c[step..];
                let proj = 2.0 * dot(h, seg);
                for (x, hv) in seg.iter_mut().zip(h) {
                    *x -= proj * hv;
                }
            }
        }
        out.to_matrix()
    }
}

fn zero_result(a: &Matrix) -> SvdResult {
    let mut u = Matrix::zeros(a.rows(), 1);
    u[(0, 0)] = 1.0;
    let mut v = Matrix::zeros(a.cols(), 1);
    v[(0, 0)] = 1.0;
    SvdResult {
        singular_values: vec![0.0],
        u,
        v,
    }
}

/// QR-preconditioned Jacobi SVD. Meets `‖U Σ Vᵀ − A‖_F ≤ 1e-9 · max(1, ‖A‖_F)`.
pub fn svd(a: &Matrix) -> SvdResult {
    if a.rows() < a.cols() {
        let t = svd(&a.transpose());
        return SvdResult {
            singular_values: t.singular_values,
            u: t.v,
            v: t.u,
        };
    }
    let qr = pivoted_qr(a);
    let p = qr.reflectors.len();
    if p == 0 {
        return zero_result(a);
    }
    // R = Z Σ Wᵀ via Jacobi on the columns of Rᵀ (n × p).
    let mut w = Columns::from_rows_of(&qr.r);
    let mut z = Columns::from_matrix(&Matrix::identity(p));
    let norms = orthogonalize(&mut w, Some(&mut z));
    let sorted = assemble(w, norms, z);
    // A P = Q R = (Q Z) Σ Wᵀ  =>  U = Q Z, V = P W
    let u = qr.apply_q(&sorted.v);
    let wmat = &sorted.u;
    let mut v = Matrix::zeros(a.cols(), p);
    for (pivoted, &orig) in qr.perm.iter().enumerate() {
        for j in 0..p {
            v[(orig, j)] = wmat[(pivoted, j)];
        }
    }
    SvdResult {
        singular_values: sorted.singular_values,
        u,
        v,
    }
}

/// Singular values only; skips the factor bookkeeping of [`svd`].
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    let a = if a.rows() < a.cols() {
        a.transpose()
    } else {
        a.clone()
    };
    let qr = pivoted_qr(&a);
    if qr.reflectors.is_empty() {
        return vec![0.0];
    }
    let mut w = Columns::from_rows_of(&qr.r);
    let mut sv = orthogonalize(&mut w, None);
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Number of singular values strictly above `rel_tol · σ_max`; 0 for the
/// zero matrix.
pub fn numerical_rank(a: &Matrix, rel_tol: f64) -> usize {
    assert!(
        rel_tol > 0.0 && rel_tol < 1.0,
        "rank tolerance must lie in (0, 1)"
    );
    count_above(&singular_values(a), rel_tol)
}

pub(crate) fn count_above(sv: &[f64], rel_tol: f64) -> usize {
    let top = sv.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}
