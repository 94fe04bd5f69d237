//! Matrix-free access to the residual Jacobian `J = [W; dh/dz]`.
//!
//! Columns are addressed 1-based. Every column `i` has at most one nonzero
//! in the diagonal top block (row `i`) and a contiguous run of equality rows
//! `nbar..end` (0-based, half-open), which [`ColumnOperator::support`]
//! reports so the QR and BVLS layers can restrict their arithmetic.

use std::borrow::Cow;

use crate::error::{check_len, Error, Result};
use crate::model::StageLinearization;
use crate::problem::ProblemDims;
use crate::scalar::Scalar;

/// Potentially nonzero rows of one Jacobian column: an optional isolated
/// row (0-based) plus the half-open range `lo..hi`.
///
/// The isolated row, when present, lies below `lo` for every column of the
/// same operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Support {
    pub top: Option<usize>,
    pub lo: usize,
    pub hi: usize,
}

/// Column-wise access to an `m x n` matrix.
pub trait ColumnOperator<T: Scalar> {
    fn nrows(&self) -> usize;

    fn ncols(&self) -> usize;

    /// Structural support of column `i` (1-based).
    fn support(&self, i: usize) -> Support;

    /// Writes `x * J_i` into `out` on the support of column `i`; other rows
    /// are left untouched.
    fn scatter(&self, i: usize, x: T, out: &mut [T]);

    /// `J_i . v`.
    fn dot(&self, i: usize, v: &[T]) -> T;

    /// `||J_i||^2`.
    fn norm_sq(&self, i: usize) -> T;

    /// Adds `x * J_i` to `out`.
    fn axpy(&self, i: usize, x: T, out: &mut [T]);
}

/// Where the per-step coefficients come from.
pub enum Coefficients<'a, T> {
    Stored(&'a [StageLinearization<T>]),
    /// Called with the 1-based prediction step each time a coefficient
    /// block is needed.
    OnDemand(&'a (dyn Fn(usize) -> StageLinearization<T> + Sync)),
}

/// The Jacobian of the penalty residual, described by weights and model
/// coefficients and never formed.
pub struct JacobianView<'a, T> {
    dims: ProblemDims,
    w: &'a [T],
    coeffs: Coefficients<'a, T>,
}

impl<'a, T: Scalar> JacobianView<'a, T> {
    /// View backed by stored coefficients, `lins[s - 1]` for step `k + s`.
    pub fn new(dims: ProblemDims, w: &'a [T], lins: &'a [StageLinearization<T>]) -> Result<Self> {
        check_len("weights", dims.n(), w.len())?;
        check_len("stage linearizations", dims.pred_horizon, lins.len())?;
        if lins.iter().any(|l| l.dims() != dims.model) {
            return Err(Error::Config(
                "linearization dimensions differ from the problem's".into(),
            ));
        }
        Ok(Self {
            dims,
            w,
            coeffs: Coefficients::Stored(lins),
        })
    }

    /// View that regenerates the coefficients of a step on every access.
    pub fn on_demand(
        dims: ProblemDims,
        w: &'a [T],
        linearize: &'a (dyn Fn(usize) -> StageLinearization<T> + Sync),
    ) -> Result<Self> {
        check_len("weights", dims.n(), w.len())?;
        Ok(Self {
            dims,
            w,
            coeffs: Coefficients::OnDemand(linearize),
        })
    }

    pub fn dims(&self) -> &ProblemDims {
        &self.dims
    }

    pub fn weights(&self) -> &[T] {
        self.w
    }

    pub fn n(&self) -> usize {
        self.dims.n()
    }

    pub fn m(&self) -> usize {
        self.dims.m()
    }

    fn stage(&self, step: usize) -> Cow<'_, StageLinearization<T>> {
        match &self.coeffs {
            Coefficients::Stored(l) => Cow::Borrowed(&l[step - 1]),
            Coefficients::OnDemand(f) => Cow::Owned(f(step)),
        }
    }

    fn check(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.n() {
            Err(Error::ColumnOutOfRange {
                index: i,
                n: self.n(),
            })
        } else {
            Ok(())
        }
    }

    /// Visits the equality-block nonzeros of column `i` block by block:
    /// `f(row_start, coefficient_column)` where the column has `ny` entries
    /// (`col_stride` apart) starting at `coefficient_column[0]`.
    fn for_each_block(&self, i: usize, mut f: impl FnMut(usize, &mut dyn Iterator<Item = T>)) {
        let d = &self.dims;
        let md = d.model;
        let (nu, ny) = (md.inputs, md.outputs);
        let (beta, eta) = d.decode_unchecked(i);
        let (nbar, end) = d.column_rows(i);
        let blocks = (end - nbar) / ny;
        let first_step = beta + 1;
        if eta > nu {
            let col = eta - nu - 1;
            for j in 0..blocks {
                let lin = self.stage(first_step + j);
                let a = lin.a(j);
                f(nbar + j * ny, &mut (0..ny).map(|r| a[r * ny + col]));
            }
        } else if beta + 1 < d.ctrl_horizon {
            let col = eta - 1;
            for j in 0..blocks {
                let lin = self.stage(first_step + j);
                let b = lin.b(j + 1);
                f(nbar + j * ny, &mut (0..ny).map(|r| b[r * nu + col]));
            }
        } else {
            let col = eta - 1;
            let mut acc = vec![T::zero(); ny];
            for j in 1..=blocks {
                let lin = self.stage(beta + j);
                for ip in 1..=j.min(md.in_lags) {
                    let b = lin.b(ip);
                    for (r, a) in acc.iter_mut().enumerate() {
                        *a = *a + b[r * nu + col];
                    }
                }
                f(nbar + (j - 1) * ny, &mut acc.iter().copied());
                acc.iter_mut().for_each(|a| *a = T::zero());
            }
        }
    }

    /// `v = x J_i`. Zeroes `v` first and returns the equality row range
    /// `(nbar, end)`, i.e. rows `nbar+1..=end` in 1-based terms.
    pub fn jix(&self, i: usize, x: T, v: &mut [T]) -> Result<(usize, usize)> {
        self.check(i)?;
        check_len("jix output", self.m(), v.len())?;
        v.iter_mut().for_each(|e| *e = T::zero());
        self.scatter(i, x, v);
        Ok(self.dims.column_rows(i))
    }

    /// `J_i . X`, touching only the structurally nonzero rows.
    pub fn jtix(&self, i: usize, x: &[T]) -> Result<T> {
        self.check(i)?;
        check_len("jtix input", self.m(), x.len())?;
        Ok(self.dot(i, x))
    }

    /// `||J_i||^2`.
    pub fn col_norm_sq(&self, i: usize) -> Result<T> {
        self.check(i)?;
        Ok(self.norm_sq(i))
    }

    /// `J' v` through `n` inner products.
    pub fn transpose_mul(&self, v: &[T], out: &mut [T]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.dot(c + 1, v);
        }
    }

    /// `out = J x`.
    pub fn mul(&self, x: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|e| *e = T::zero());
        for (c, &xc) in x.iter().enumerate() {
            if xc != T::zero() {
                self.axpy(c + 1, xc, out);
            }
        }
    }
}

impl<T: Scalar> ColumnOperator<T> for JacobianView<'_, T> {
    fn nrows(&self) -> usize {
        self.m()
    }

    fn ncols(&self) -> usize {
        self.n()
    }

    fn support(&self, i: usize) -> Support {
        let (lo, hi) = self.dims.column_rows(i);
        Support {
            top: Some(i - 1),
            lo,
            hi,
        }
    }

    fn scatter(&self, i: usize, x: T, out: &mut [T]) {
        out[i - 1] = self.w[i - 1] * x;
        self.for_each_block(i, |row, col| {
            for (k, c) in col.enumerate() {
                out[row + k] = c * x;
            }
        });
    }

    fn axpy(&self, i: usize, x: T, out: &mut [T]) {
        out[i - 1] = out[i - 1] + self.w[i - 1] * x;
        self.for_each_block(i, |row, col| {
            for (k, c) in col.enumerate() {
                out[row + k] = out[row + k] + c * x;
            }
        });
    }

    fn dot(&self, i: usize, v: &[T]) -> T {
        let mut acc = self.w[i - 1] * v[i - 1];
        self.for_each_block(i, |row, col| {
            for (k, c) in col.enumerate() {
                acc = acc + c * v[row + k];
            }
        });
        acc
    }

    fn norm_sq(&self, i: usize) -> T {
        let w = self.w[i - 1];
        let mut acc = w * w;
        self.for_each_block(i, |_, col| {
            for c in col {
                acc = acc + c * c;
            }
        });
        acc
    }
}

/// Explicit column-major `m x n` matrix; the reference path for the
/// structure-exploiting operator. Reports full-height support, so the QR
/// layer runs plain dense Gram-Schmidt on it.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseJacobian<T> {
    m: usize,
    n: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseJacobian<T> {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            m,
            n,
            data: vec![T::zero(); m * n],
        }
    }

    /// Assembles the matrix column by column from any operator.
    pub fn from_operator<O: ColumnOperator<T> + ?Sized>(op: &O) -> Self {
        let mut d = Self::zeros(op.nrows(), op.ncols());
        d.assign_from(op);
        d
    }

    /// Overwrites the matrix with the operator's columns, reusing storage.
    pub fn assign_from<O: ColumnOperator<T> + ?Sized>(&mut self, op: &O) {
        if self.m != op.nrows() || self.n != op.ncols() {
            *self = Self::zeros(op.nrows(), op.ncols());
        }
        self.data.iter_mut().for_each(|e| *e = T::zero());
        let m = self.m;
        for c in 0..self.n {
            op.scatter(c + 1, T::one(), &mut self.data[c * m..(c + 1) * m]);
        }
    }

    /// Builds from a column-major buffer.
    pub fn from_col_major(m: usize, n: usize, data: Vec<T>) -> Result<Self> {
        check_len("dense matrix data", m * n, data.len())?;
        Ok(Self { m, n, data })
    }

    /// Column `i` (1-based).
    pub fn col(&self, i: usize) -> &[T] {
        &self.data[(i - 1) * self.m..i * self.m]
    }

    pub fn col_mut(&mut self, i: usize) -> &mut [T] {
        let m = self.m;
        &mut self.data[(i - 1) * m..i * m]
    }

    /// Entry at 0-based `(row, col)`.
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[col * self.m + row]
    }
}

impl<T: Scalar> ColumnOperator<T> for DenseJacobian<T> {
    fn nrows(&self) -> usize {
        self.m
    }

    fn ncols(&self) -> usize {
        self.n
    }

    fn support(&self, _i: usize) -> Support {
        Support {
            top: None,
            lo: 0,
            hi: self.m,
        }
    }

    fn scatter(&self, i: usize, x: T, out: &mut [T]) {
        for (o, &c) in out.iter_mut().zip(self.col(i)) {
            *o = c * x;
        }
    }

    fn axpy(&self, i: usize, x: T, out: &mut [T]) {
        for (o, &c) in out.iter_mut().zip(self.col(i)) {
            *o = *o + c * x;
        }
    }

    fn dot(&self, i: usize, v: &[T]) -> T {
        self.col(i)
            .iter()
            .zip(v)
            .fold(T::zero(), |a, (&c, &x)| a + c * x)
    }

    fn norm_sq(&self, i: usize) -> T {
        self.col(i).iter().fold(T::zero(), |a, &c| a + c * c)
    }
}
