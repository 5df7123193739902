//! Dense row-major matrices plus the SVD-backed pseudoinverse and
//! minimum-norm least squares used by semantic and patch solving.

use std::fmt;
use std::ops::{Deref, DerefMut, Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Relative singular-value cutoff used when callers have no preference.
pub const DEFAULT_TOLERANCE: f64 = 1e-10;

/// Norms at or below this are treated as zero by [`l2_normalize`].
pub const NORMALIZE_EPSILON: f64 = 1e-12;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries(self.data.chunks(self.cols.max(1)))
                .finish()?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(invalid("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vector {
        Vector((0..self.rows).map(|r| self[(r, c)]).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(invalid(format!(
                "matmul shape mismatch: {:?} x {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, b) in orow.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Row vector times matrix: `x · self`.
    pub fn left_mul(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.rows {
            return Err(invalid(format!(
                "vector of dim {} cannot multiply {:?}",
                x.len(),
                self.shape()
            )));
        }
        let mut out = vec![0.0; self.cols];
        vec_mat_into(x, self, &mut out);
        Ok(Vector(out))
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(invalid("shape mismatch in subtraction"));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    fn to_faer(&self) -> faer::Mat<f64> {
        faer::Mat::from_fn(self.rows, self.cols, |r, c| self[(r, c)])
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Dense vector of 64-bit floats.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `out = x · m`, overwriting `out`.
#[inline]
pub(crate) fn vec_mat_into(x: &[f64], m: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), m.rows);
    debug_assert_eq!(out.len(), m.cols);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (k, &a) in x.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (o, b) in out.iter_mut().zip(m.row(k)) {
            *o += a * b;
        }
    }
}

/// `out = m · y` (matrix times column vector), overwriting `out`.
#[inline]
pub(crate) fn mat_vec_into(m: &Matrix, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(y.len(), m.cols);
    debug_assert_eq!(out.len(), m.rows);
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(r), y);
    }
}

/// `g += xᵀ y` (outer product accumulate).
#[inline]
pub(crate) fn add_outer(g: &mut Matrix, x: &[f64], y: &[f64]) {
    debug_assert_eq!(g.rows, x.len());
    debug_assert_eq!(g.cols, y.len());
    for (r, &a) in x.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (o, b) in g.row_mut(r).iter_mut().zip(y) {
            *o += a * b;
        }
    }
}

/// Thin SVD `(U, σ, V)`.
fn svd(m: &Matrix) -> Result<(faer::Mat<f64>, Vec<f64>, faer::Mat<f64>)> {
    let svd = m
        .to_faer()
        .thin_svd()
        .map_err(|e| Error::NonFinite(format!("singular value decomposition: {e:?}")))?;
    let s = svd.S().column_vector();
    let sigma = (0..s.nrows()).map(|k| s[k]).collect();
    Ok((svd.U().to_owned(), sigma, svd.V().to_owned()))
}

/// Moore–Penrose pseudoinverse via SVD. Singular values below
/// `tolerance × σ_max` are treated as zero.
pub fn pinv(m: &Matrix, tolerance: f64) -> Result<Matrix> {
    if m.is_empty() {
        return Err(invalid("pinv of an empty matrix"));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("pinv input".into()));
    }
    if !(tolerance >= 0.0) {
        return Err(invalid("tolerance must be non-negative"));
    }
    let (u, sigma, v) = svd(m)?;
    let sigma_max = sigma.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = tolerance * sigma_max;

    // M⁺ = V Σ⁺ Uᵀ, shape cols × rows.
    let mut out = Matrix::zeros(m.cols, m.rows);
    for (k, &s) in sigma.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        for i in 0..m.cols {
            let vik = v[(i, k)] * inv;
            if vik == 0.0 {
                continue;
            }
            let row = out.row_mut(i);
            for (j, o) in row.iter_mut().enumerate() {
                *o += vik * u[(j, k)];
            }
        }
    }
    Ok(out)
}

/// Numerical rank under the same relative cutoff as [`pinv`].
pub fn rank(m: &Matrix, tolerance: f64) -> Result<usize> {
    let (_, sigma, _) = svd(m)?;
    let sigma_max = sigma.iter().cloned().fold(0.0_f64, f64::max);
    Ok(sigma
        .iter()
        .filter(|&&s| s > tolerance * sigma_max && s > 0.0)
        .count())
}

/// Minimum-Frobenius-norm solution `X` of `a · X ≈ b`, where `a` stacks
/// `k` rows of dimension `n` and `b` stacks `k` rows of dimension `m`.
pub fn lstsq(a: &Matrix, b: &Matrix, tolerance: f64) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(invalid(format!(
            "lstsq row mismatch: a has {} rows, b has {}",
            a.rows(),
            b.rows()
        )));
    }
    if !b.is_finite() {
        return Err(Error::NonFinite("lstsq rhs".into()));
    }
    // A single row is the common patch case: v⁺ = vᵀ / ‖v‖².
    if a.rows() == 1 {
        let v = a.row(0);
        let nn = dot(v, v);
        let mut x = Matrix::zeros(a.cols(), b.cols());
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("lstsq lhs".into()));
        }
        if nn == 0.0 {
            return Ok(x);
        }
        add_outer(&mut x, &v.iter().map(|e| e / nn).collect::<Vec<_>>(), b.row(0));
        return Ok(x);
    }
    pinv(a, tolerance)?.matmul(b)
}

/// Unit-length copy of `v`, or the zero vector when `‖v‖ ≤ 1e-12`.
pub fn l2_normalize(v: &[f64]) -> Vector {
    let n = norm(v);
    if n <= NORMALIZE_EPSILON {
        return Vector::zeros(v.len());
    }
    Vector(v.iter().map(|x| x / n).collect())
}
