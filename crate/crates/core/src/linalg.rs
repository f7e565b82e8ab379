//! Small dense linear algebra for posterior covariances and network layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Matrix<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn from_diag(d: &[S]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn scale(&mut self, a: S) {
        for v in &mut self.data {
            *v *= a;
        }
    }

    /// `y = A x`
    pub fn matvec(&self, x: &[S]) -> Vec<S> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `y = Aᵀ x`
    pub fn matvec_t(&self, x: &[S]) -> Vec<S> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![S::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == S::zero() {
                continue;
            }
            for (yj, &a) in y.iter_mut().zip(self.row(i)) {
                *yj += a * xi;
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    /// Adds `a · u vᵀ` in place.
    pub fn add_outer(&mut self, a: S, u: &[S], v: &[S]) {
        for (i, &ui) in u.iter().enumerate() {
            let s = a * ui;
            for (j, &vj) in v.iter().enumerate() {
                self.data[i * self.cols + j] += s * vj;
            }
        }
    }

    /// `xᵀ A x`
    pub fn quad_form(&self, x: &[S]) -> S {
        dot(x, &self.matvec(x))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lower Cholesky factor of a symmetric positive-definite matrix.
    ///
    /// Pivots below `eps · max_diag` are treated as a loss of definiteness.
    pub fn cholesky(&self) -> Result<Self> {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let max_diag = (0..n)
            .map(|i| self[(i, i)].abs())
            .fold(S::zero(), S::max);
        let floor = S::epsilon() * max_diag;
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > floor) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite(format!(
                    "pivot {j} = {d} (floor {floor})"
                )));
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in j + 1..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(l)
    }

    /// Frobenius norm.
    pub fn frobenius(&self) -> S {
        self.data.iter().map(|&v| v * v).sum::<S>().sqrt()
    }
}

impl<S> std::ops::Index<(usize, usize)> for Matrix<S> {
    type Output = S;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.cols + j]
    }
}

impl<S> std::ops::IndexMut<(usize, usize)> for Matrix<S> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut s = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn norm2<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

/// Solves `L Lᵀ x = b` given the lower Cholesky factor `L`.
pub fn cholesky_solve<S: Scalar>(l: &Matrix<S>, b: &[S]) -> Vec<S> {
    let n = l.rows;
    let mut z = b.to_vec();
    for i in 0..n {
        let mut s = z[i];
        for k in 0..i {
            s -= l[(i, k)] * z[k];
        }
        z[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in i + 1..n {
            s -= l[(k, i)] * z[k];
        }
        z[i] = s / l[(i, i)];
    }
    z
}

/// Inverse of an SPD matrix from its lower Cholesky factor; the result is
/// symmetrized.
pub fn cholesky_inverse<S: Scalar>(l: &Matrix<S>) -> Matrix<S> {
    let n = l.rows;
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![S::zero(); n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = S::zero());
        e[j] = S::one();
        let col = cholesky_solve(l, &e);
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    let half = S::lit(0.5);
    for i in 0..n {
        for j in i + 1..n {
            let v = (inv[(i, j)] + inv[(j, i)]) * half;
            inv[(i, j)] = v;
            inv[(j, i)] = v;
        }
    }
    inv
}

/// Largest singular value by power iteration on `AᵀA`.
///
/// Iterates until the relative change of the estimate drops below
/// `max(1e-13, 16 eps)`; the returned value is accurate to well within 1e-6
/// relative for matrices with a non-degenerate top singular value.
pub fn spectral_norm<S: Scalar>(a: &Matrix<S>) -> S {
    let n = a.cols;
    if n == 0 || a.rows == 0 {
        return S::zero();
    }
    let tol = S::lit(1e-13).max(S::epsilon() * S::lit(16.0));
    let mut v: Vec<S> = (0..n)
        .map(|i| S::one() + S::lit(0.37) * S::lit(((i * 7919) % 13) as f64 / 13.0))
        .collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut sigma = S::zero();
    for _ in 0..100_000 {
        let av = a.matvec(&v);
        let mut w = a.matvec_t(&av);
        let nw = norm2(&w);
        if nw == S::zero() {
            return S::zero();
        }
        let next = nw.sqrt();
        w.iter_mut().for_each(|x| *x /= nw);
        v = w;
        if (next - sigma).abs() <= tol * next {
            sigma = next;
            break;
        }
        sigma = next;
    }
    // Rayleigh quotient refinement: ‖A v‖ for the converged unit vector.
    norm2(&a.matvec(&v)).max(sigma)
}
