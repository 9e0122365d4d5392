//! Dense linear algebra used by every correction: orthogonal-complement
//! projectors, column centering, tensor mode-1 products and QR-backed least
//! squares.
//!
//! A [`Projector`] never stores the `n x n` complement matrix. It keeps the
//! thin orthonormal factor `Q` of the protected design and applies
//! `I - Q Q^T` as two thin matrix products.

use nalgebra::{ColPivQR, DMatrix, DVector, RowDVector};

use crate::error::{OrthoError, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative tolerance on pivoted-QR diagonals below which a design is
/// treated as rank deficient.
pub const RANK_TOL: f64 = 1e-10;

pub fn check_finite(m: &Matrix, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(OrthoError::NonFinite(what))
    }
}

pub fn check_finite_vec(v: &Vector, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(OrthoError::NonFinite(what))
    }
}

/// Builds a matrix from row vectors, rejecting ragged or non-finite input.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let ncols = rows.first().map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(rows.len() * ncols);
    for row in rows {
        if row.len() != ncols {
            return Err(OrthoError::dims("row length", ncols, row.len()));
        }
        flat.extend_from_slice(row);
    }
    let m = Matrix::from_row_slice(rows.len(), ncols, &flat);
    check_finite(&m, "matrix")?;
    Ok(m)
}

/// Prepends a column of ones.
pub fn with_intercept(x: &Matrix) -> Matrix {
    x.clone().insert_column(0, 1.0)
}

/// Subtracts each column's mean.
pub fn center_columns(x: &Matrix) -> Matrix {
    let n = x.nrows();
    let mut out = x.clone();
    if n == 0 {
        return out;
    }
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
    }
    out
}

struct PivotedQr {
    qr: ColPivQR<f64, nalgebra::Dyn, nalgebra::Dyn>,
    r: Matrix,
    /// `order[k]` is the caller's column index that ended up in position `k`.
    order: Vec<usize>,
}

fn pivoted_qr(a: &Matrix) -> Result<PivotedQr> {
    let (n, p) = a.shape();
    if p == 0 {
        return Err(OrthoError::dims("column count", 1, 0));
    }
    if n < p {
        return Err(OrthoError::dims("row count (n >= p)", p, n));
    }
    check_finite(a, "design matrix")?;

    let qr = ColPivQR::new(a.clone());
    let mut order = RowDVector::from_iterator(p, (0..p).map(|j| j as f64));
    qr.p().permute_columns(&mut order);
    let order: Vec<usize> = order.iter().map(|&v| v as usize).collect();
    let r = qr.r();

    let max_diag = (0..p).map(|k| r[(k, k)].abs()).fold(0.0, f64::max);
    for k in 0..p {
        if !(r[(k, k)].abs() > RANK_TOL * max_diag) {
            return Err(OrthoError::RankDeficient { column: order[k] });
        }
    }
    Ok(PivotedQr { qr, r, order })
}

/// Fails with `RankDeficient` unless `a` has full column rank.
pub fn check_full_rank(a: &Matrix) -> Result<()> {
    pivoted_qr(a).map(|_| ())
}

/// Orthogonal projection onto `span(X)` and its complement, represented by
/// an orthonormal basis of `span(X)`.
#[derive(Debug, Clone)]
pub struct Projector {
    basis: Matrix,
}

impl Projector {
    pub fn n(&self) -> usize {
        self.basis.nrows()
    }

    pub fn p(&self) -> usize {
        self.basis.ncols()
    }

    /// Orthonormal basis `Q` of the protected column space (`n x p`).
    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    /// `P_X M`, the projection onto the protected column space.
    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        if m.nrows() != self.n() {
            return Err(OrthoError::dims("rows of projected matrix", self.n(), m.nrows()));
        }
        let coords = self.basis.tr_mul(m);
        Ok(&self.basis * coords)
    }

    /// `P⊥_X M = M - Q (Q^T M)`.
    pub fn apply_complement(&self, m: &Matrix) -> Result<Matrix> {
        let along = self.apply(m)?;
        Ok(m - along)
    }

    pub fn apply_complement_vec(&self, v: &Vector) -> Result<Vector> {
        if v.len() != self.n() {
            return Err(OrthoError::dims("length of projected vector", self.n(), v.len()));
        }
        let coords = self.basis.tr_mul(v);
        Ok(v - &self.basis * coords)
    }
}

/// Builds the projector for a full-column-rank protected design `X`.
///
/// `p == n` is allowed; the complement is then the zero operator.
pub fn build_projector(x: &Matrix) -> Result<Projector> {
    let qr = pivoted_qr(x)?;
    Ok(Projector { basis: qr.qr.q() })
}

/// Free-function form of [`Projector::apply_complement`].
pub fn apply_complement(proj: &Projector, m: &Matrix) -> Result<Matrix> {
    proj.apply_complement(m)
}

/// Least-squares solution of `A x = b` for every column of `b`.
pub fn least_squares(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.nrows() != a.nrows() {
        return Err(OrthoError::dims("rows of right-hand side", a.nrows(), b.nrows()));
    }
    check_finite(b, "right-hand side")?;
    let qr = pivoted_qr(a)?;
    let p = a.ncols();
    let mut qtb = b.clone();
    qr.qr.q_tr_mul(&mut qtb);
    let permuted = qr
        .r
        .solve_upper_triangular(&qtb.rows(0, p).into_owned())
        .ok_or(OrthoError::RankDeficient { column: qr.order[0] })?;
    let mut x = Matrix::zeros(a.ncols(), b.ncols());
    for (k, &col) in qr.order.iter().enumerate() {
        x.set_row(col, &permuted.row(k));
    }
    Ok(x)
}

pub fn least_squares_vec(a: &Matrix, b: &Vector) -> Result<Vector> {
    let x = least_squares(a, &Matrix::from_column_slice(b.len(), 1, b.as_slice()))?;
    Ok(x.column(0).into_owned())
}

/// An `n x d1 x ... x dR` array stored row-major (last index fastest).
///
/// The mode-1 matricization is the `n x d` matrix whose row `i` holds the
/// slice `T[i, ...]` flattened row-major, with `d = d1 * ... * dR`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(OrthoError::InvalidSpec(format!(
                "tensor needs an observation mode and at least one trailing mode, got dims {dims:?}"
            )));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(OrthoError::dims("tensor entry count", expected, data.len()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(OrthoError::NonFinite("tensor"));
        }
        Ok(DenseTensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, vec![0.0; len])
    }

    /// Folds an `n x d` matricization back into a tensor of shape `dims`.
    pub fn from_matricized(dims: Vec<usize>, mat: &Matrix) -> Result<Self> {
        let d: usize = dims.iter().skip(1).product();
        if mat.nrows() != dims[0] || mat.ncols() != d {
            return Err(OrthoError::dims(
                "matricized tensor size",
                dims[0] * d,
                mat.nrows() * mat.ncols(),
            ));
        }
        let mut data = Vec::with_capacity(mat.len());
        for row in mat.row_iter() {
            data.extend(row.iter().copied());
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn n(&self) -> usize {
        self.dims[0]
    }

    /// Product of the trailing dimensions.
    pub fn trailing_len(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn matricize(&self) -> Matrix {
        Matrix::from_row_slice(self.n(), self.trailing_len(), &self.data)
    }

    /// Column-stacked vectorization of the matricization, the ordering under
    /// which `vec(A M) = (I_d ⊗ A) vec(M)`.
    pub fn vectorize(&self) -> Vector {
        let mat = self.matricize();
        Vector::from_column_slice(mat.as_slice())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseTensor {
        DenseTensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `A ×₁ T`: left-multiplies the matricization by `A`.
    pub fn mode1_mul(&self, a: &Matrix) -> Result<DenseTensor> {
        if a.ncols() != self.n() {
            return Err(OrthoError::dims("mode-1 size", a.ncols(), self.n()));
        }
        let mut dims = self.dims.clone();
        dims[0] = a.nrows();
        DenseTensor::from_matricized(dims, &(a * self.matricize()))
    }
}

/// `P⊥_X ×₁ T`.
pub fn mode1_product(proj: &Projector, t: &DenseTensor) -> Result<DenseTensor> {
    if t.n() != proj.n() {
        return Err(OrthoError::dims("tensor mode-1 size", proj.n(), t.n()));
    }
    let corrected = proj.apply_complement(&t.matricize())?;
    DenseTensor::from_matricized(t.dims.clone(), &corrected)
}
