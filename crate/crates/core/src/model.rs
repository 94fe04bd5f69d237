//! Nonlinear parameter-varying input/output prediction models.
//!
//! A model is an implicit difference equation `M(Y, U, S) = 0` with
//!
//! * `Y = (y[k-na], ..., y[k])`, `na + 1` output vectors,
//! * `U = (u[k-nb], ..., u[k-1])`, `nb` input vectors,
//! * `S = (s[k-nc], ..., s[k-1])`, `nc` exogenous vectors.
//!
//! Histories are passed as flat slices stored oldest first, so the newest
//! output `y[k]` occupies the last `ny` entries of `Y`.

use std::sync::Arc;

use crate::error::{check_len, Error, Result};
use crate::scalar::Scalar;

/// Orders and channel counts of an input/output model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Output lag count `na`.
    pub out_lags: usize,
    /// Input lag count `nb`.
    pub in_lags: usize,
    /// Exogenous lag count `nc`.
    pub exo_lags: usize,
    /// Input channels `nu`.
    pub inputs: usize,
    /// Output channels `ny`.
    pub outputs: usize,
    /// Exogenous channels `ns`.
    pub exo_channels: usize,
}

impl ModelDims {
    pub fn new(
        out_lags: usize,
        in_lags: usize,
        exo_lags: usize,
        inputs: usize,
        outputs: usize,
        exo_channels: usize,
    ) -> Result<Self> {
        if out_lags == 0 || in_lags == 0 || inputs == 0 || outputs == 0 {
            return Err(Error::Config(format!(
                "model orders must satisfy na >= 1, nb >= 1, nu >= 1, ny >= 1 (got na={out_lags}, nb={in_lags}, nu={inputs}, ny={outputs})"
            )));
        }
        Ok(Self {
            out_lags,
            in_lags,
            exo_lags,
            inputs,
            outputs,
            exo_channels,
        })
    }

    /// Model without exogenous signals.
    pub fn io(out_lags: usize, in_lags: usize, inputs: usize, outputs: usize) -> Result<Self> {
        Self::new(out_lags, in_lags, 0, inputs, outputs, 0)
    }

    pub fn y_history_len(&self) -> usize {
        (self.out_lags + 1) * self.outputs
    }

    pub fn u_history_len(&self) -> usize {
        self.in_lags * self.inputs
    }

    /// Length of the exogenous history; zero whenever `nc = 0`.
    pub fn s_history_len(&self) -> usize {
        self.exo_lags * self.exo_channels
    }

    fn check_histories<T>(&self, y: &[T], u: &[T], s: &[T]) -> Result<()> {
        check_len("output history", self.y_history_len(), y.len())?;
        check_len("input history", self.u_history_len(), u.len())?;
        check_len("exogenous history", self.s_history_len(), s.len())
    }
}

/// Coefficients of the affine model obtained by linearizing `M` at a point.
///
/// `A_j = dM/dy[k-j]` for `j = 0..=na` (each `ny x ny`), `B_j = dM/du[k-j]`
/// for `j = 1..=nb` (each `ny x nu`), all stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLinearization<T> {
    dims: ModelDims,
    a: Vec<T>,
    b: Vec<T>,
    /// `M` evaluated at the linearization point.
    pub affine: Vec<T>,
}

impl<T: Scalar> StageLinearization<T> {
    pub fn zeros(dims: ModelDims) -> Self {
        let ny = dims.outputs;
        Self {
            dims,
            a: vec![T::zero(); (dims.out_lags + 1) * ny * ny],
            b: vec![T::zero(); dims.in_lags * ny * dims.inputs],
            affine: vec![T::zero(); ny],
        }
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    /// Row-major `A_j`, `j` in `0..=na`.
    pub fn a(&self, j: usize) -> &[T] {
        let sz = self.dims.outputs * self.dims.outputs;
        &self.a[j * sz..(j + 1) * sz]
    }

    pub fn a_mut(&mut self, j: usize) -> &mut [T] {
        let sz = self.dims.outputs * self.dims.outputs;
        &mut self.a[j * sz..(j + 1) * sz]
    }

    /// Row-major `B_j`, `j` in `1..=nb`.
    pub fn b(&self, j: usize) -> &[T] {
        debug_assert!(j >= 1);
        let sz = self.dims.outputs * self.dims.inputs;
        &self.b[(j - 1) * sz..j * sz]
    }

    pub fn b_mut(&mut self, j: usize) -> &mut [T] {
        debug_assert!(j >= 1);
        let sz = self.dims.outputs * self.dims.inputs;
        &mut self.b[(j - 1) * sz..j * sz]
    }

    #[inline]
    pub fn a_at(&self, j: usize, row: usize, col: usize) -> T {
        let ny = self.dims.outputs;
        self.a[(j * ny + row) * ny + col]
    }

    #[inline]
    pub fn b_at(&self, j: usize, row: usize, col: usize) -> T {
        let (ny, nu) = (self.dims.outputs, self.dims.inputs);
        self.b[((j - 1) * ny + row) * nu + col]
    }

    /// Multiplies every `A_j` and `B_j` by `factor`; the affine term is left alone.
    pub fn scale_coefficients(&mut self, factor: T) {
        self.a
            .iter_mut()
            .chain(self.b.iter_mut())
            .for_each(|v| *v = *v * factor);
    }

    /// Largest absolute entrywise difference of the `A`/`B` coefficients.
    pub fn max_coefficient_deviation(&self, other: &Self) -> T {
        self.a
            .iter()
            .zip(&other.a)
            .chain(self.b.iter().zip(&other.b))
            .fold(T::zero(), |acc, (&x, &y)| acc.max((x - y).abs()))
    }

    /// Reciprocal 1-norm condition number of `A_0`.
    pub fn a0_rcond(&self) -> T {
        rcond_1(self.a(0), self.dims.outputs)
    }
}

/// An implicit input/output difference equation `M(Y, U, S) = 0`.
///
/// Implementations must be pure: the same histories always produce the same
/// residual.
pub trait IoModel<T: Scalar>: Send + Sync {
    fn dims(&self) -> ModelDims;

    /// Writes `M(Y, U, S)` (length `ny`) into `out`.
    fn residual(&self, y: &[T], u: &[T], s: &[T], out: &mut [T]);

    /// Fills the `A`/`B` coefficients of `lin` analytically. Returns `false`
    /// when no analytic Jacobian is available, in which case central finite
    /// differences are used.
    fn jacobian(&self, _y: &[T], _u: &[T], _s: &[T], _lin: &mut StageLinearization<T>) -> bool {
        false
    }
}

impl<T: Scalar, M: IoModel<T> + ?Sized> IoModel<T> for Arc<M> {
    fn dims(&self) -> ModelDims {
        (**self).dims()
    }
    fn residual(&self, y: &[T], u: &[T], s: &[T], out: &mut [T]) {
        (**self).residual(y, u, s, out)
    }
    fn jacobian(&self, y: &[T], u: &[T], s: &[T], lin: &mut StageLinearization<T>) -> bool {
        (**self).jacobian(y, u, s, lin)
    }
}

impl<T: Scalar, M: IoModel<T> + ?Sized> IoModel<T> for &M {
    fn dims(&self) -> ModelDims {
        (**self).dims()
    }
    fn residual(&self, y: &[T], u: &[T], s: &[T], out: &mut [T]) {
        (**self).residual(y, u, s, out)
    }
    fn jacobian(&self, y: &[T], u: &[T], s: &[T], lin: &mut StageLinearization<T>) -> bool {
        (**self).jacobian(y, u, s, lin)
    }
}

type ResidualFn<T> = dyn Fn(&[T], &[T], &[T], &mut [T]) + Send + Sync;
type JacobianFn<T> = dyn Fn(&[T], &[T], &[T], &mut StageLinearization<T>) + Send + Sync;

/// Closure-backed model definition.
#[derive(Clone)]
pub struct ModelDef<T> {
    dims: ModelDims,
    residual_fn: Arc<ResidualFn<T>>,
    jacobian_fn: Option<Arc<JacobianFn<T>>>,
}

impl<T: Scalar> ModelDef<T> {
    pub fn new(
        dims: ModelDims,
        residual_fn: impl Fn(&[T], &[T], &[T], &mut [T]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            dims,
            residual_fn: Arc::new(residual_fn),
            jacobian_fn: None,
        }
    }

    pub fn with_jacobian(
        mut self,
        jacobian_fn: impl Fn(&[T], &[T], &[T], &mut StageLinearization<T>) + Send + Sync + 'static,
    ) -> Self {
        self.jacobian_fn = Some(Arc::new(jacobian_fn));
        self
    }

    pub fn has_jacobian(&self) -> bool {
        self.jacobian_fn.is_some()
    }
}

impl<T: Scalar> std::fmt::Debug for ModelDef<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelDef")
            .field("dims", &self.dims)
            .field("analytic_jacobian", &self.jacobian_fn.is_some())
            .finish()
    }
}

impl<T: Scalar> IoModel<T> for ModelDef<T> {
    fn dims(&self) -> ModelDims {
        self.dims
    }

    fn residual(&self, y: &[T], u: &[T], s: &[T], out: &mut [T]) {
        (self.residual_fn)(y, u, s, out)
    }

    fn jacobian(&self, y: &[T], u: &[T], s: &[T], lin: &mut StageLinearization<T>) -> bool {
        match &self.jacobian_fn {
            Some(f) => {
                f(y, u, s, lin);
                true
            }
            None => false,
        }
    }
}

/// Evaluates `M(Y, U, S)` after checking history shapes.
pub fn eval_residual<T: Scalar, M: IoModel<T> + ?Sized>(
    model: &M,
    y: &[T],
    u: &[T],
    s: &[T],
) -> Result<Vec<T>> {
    let dims = model.dims();
    dims.check_histories(y, u, s)?;
    let mut out = vec![T::zero(); dims.outputs];
    model.residual(y, u, s, &mut out);
    Ok(out)
}

/// Linearizes the model at `(Y, U, S)`.
///
/// Uses the model's analytic Jacobian when it has one, central finite
/// differences otherwise. Fails when `A_0` is numerically singular.
pub fn linearize<T: Scalar, M: IoModel<T> + ?Sized>(
    model: &M,
    y: &[T],
    u: &[T],
    s: &[T],
) -> Result<StageLinearization<T>> {
    let mut lin = StageLinearization::zeros(model.dims());
    linearize_into(model, y, u, s, &mut lin)?;
    Ok(lin)
}

/// In-place variant of [`linearize`] reusing the coefficient storage.
pub fn linearize_into<T: Scalar, M: IoModel<T> + ?Sized>(
    model: &M,
    y: &[T],
    u: &[T],
    s: &[T],
    lin: &mut StageLinearization<T>,
) -> Result<()> {
    let dims = model.dims();
    dims.check_histories(y, u, s)?;
    if lin.dims != dims {
        *lin = StageLinearization::zeros(dims);
    }
    model.residual(y, u, s, &mut lin.affine);
    if !model.jacobian(y, u, s, lin) {
        finite_difference_into(model, y, u, s, None, lin);
    }
    let rcond = lin.a0_rcond();
    if !(rcond >= T::lit(A0_RCOND_TOL)) {
        return Err(Error::IllPosedModel {
            step: 0,
            rcond: rcond.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

/// `A_0` is ill-posed when its reciprocal condition estimate drops below this.
pub const A0_RCOND_TOL: f64 = 1e-12;

fn fd_step<T: Scalar>(x: T, fixed: Option<T>) -> T {
    fixed.unwrap_or_else(|| {
        let base = T::lit(1e-6);
        base.max(base * x.abs())
    })
}

/// Central finite-difference coefficients. With `step = None` the per
/// coordinate step is `max(1e-6, 1e-6 |x|)`.
pub fn finite_difference_into<T: Scalar, M: IoModel<T> + ?Sized>(
    model: &M,
    y: &[T],
    u: &[T],
    s: &[T],
    step: Option<T>,
    lin: &mut StageLinearization<T>,
) {
    let dims = model.dims();
    let (ny, nu, na, nb) = (dims.outputs, dims.inputs, dims.out_lags, dims.in_lags);
    let mut yp = y.to_vec();
    let mut up = u.to_vec();
    let mut plus = vec![T::zero(); ny];
    let mut minus = vec![T::zero(); ny];
    let two = T::lit(2.0);

    for j in 0..=na {
        let block = na - j;
        for col in 0..ny {
            let idx = block * ny + col;
            let h = fd_step(y[idx], step);
            yp[idx] = y[idx] + h;
            model.residual(&yp, u, s, &mut plus);
            yp[idx] = y[idx] - h;
            model.residual(&yp, u, s, &mut minus);
            yp[idx] = y[idx];
            let a = lin.a_mut(j);
            for row in 0..ny {
                a[row * ny + col] = (plus[row] - minus[row]) / (two * h);
            }
        }
    }
    for j in 1..=nb {
        let block = nb - j;
        for col in 0..nu {
            let idx = block * nu + col;
            let h = fd_step(u[idx], step);
            up[idx] = u[idx] + h;
            model.residual(y, &up, s, &mut plus);
            up[idx] = u[idx] - h;
            model.residual(y, &up, s, &mut minus);
            up[idx] = u[idx];
            let b = lin.b_mut(j);
            for row in 0..ny {
                b[row * nu + col] = (plus[row] - minus[row]) / (two * h);
            }
        }
    }
}

/// Max-abs deviation between the model's Jacobian and a central-difference
/// estimate with the given step. Models without an analytic Jacobian compare
/// finite differences against themselves.
pub fn check_jacobian<T: Scalar, M: IoModel<T> + ?Sized>(
    model: &M,
    y: &[T],
    u: &[T],
    s: &[T],
    step: T,
) -> Result<T> {
    let dims = model.dims();
    dims.check_histories(y, u, s)?;
    if !(step > T::zero()) {
        return Err(Error::Config(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut analytic = StageLinearization::zeros(dims);
    if !model.jacobian(y, u, s, &mut analytic) {
        finite_difference_into(model, y, u, s, Some(step), &mut analytic);
    }
    let mut fd = StageLinearization::zeros(dims);
    finite_difference_into(model, y, u, s, Some(step), &mut fd);
    Ok(analytic.max_coefficient_deviation(&fd))
}

/// Affine input/output model `M = c + sum_j A_j (y[k-j] - y0_j) + sum_j B_j (u[k-j] - u0_j)`.
///
/// With zero offsets and `A_0 = I` this is an LTI ARX model in standard form.
#[derive(Debug, Clone, PartialEq)]
pub struct ArxModel<T> {
    coeffs: StageLinearization<T>,
    y_offset: Vec<T>,
    u_offset: Vec<T>,
}

impl<T: Scalar> ArxModel<T> {
    /// LTI model; `coeffs.affine` is used as a constant term (normally zero).
    pub fn lti(coeffs: StageLinearization<T>) -> Self {
        let dims = coeffs.dims();
        Self {
            y_offset: vec![T::zero(); dims.y_history_len()],
            u_offset: vec![T::zero(); dims.u_history_len()],
            coeffs,
        }
    }

    /// The affine model reconstructed from a linearization at `(y0, u0)`.
    pub fn from_linearization(lin: StageLinearization<T>, y0: &[T], u0: &[T]) -> Result<Self> {
        let dims = lin.dims();
        check_len("output history", dims.y_history_len(), y0.len())?;
        check_len("input history", dims.u_history_len(), u0.len())?;
        Ok(Self {
            coeffs: lin,
            y_offset: y0.to_vec(),
            u_offset: u0.to_vec(),
        })
    }

    pub fn coefficients(&self) -> &StageLinearization<T> {
        &self.coeffs
    }
}

impl<T: Scalar> IoModel<T> for ArxModel<T> {
    fn dims(&self) -> ModelDims {
        self.coeffs.dims()
    }

    fn residual(&self, y: &[T], u: &[T], _s: &[T], out: &mut [T]) {
        let dims = self.coeffs.dims();
        let (ny, nu, na, nb) = (dims.outputs, dims.inputs, dims.out_lags, dims.in_lags);
        out.copy_from_slice(&self.coeffs.affine);
        for j in 0..=na {
            let block = (na - j) * ny;
            let a = self.coeffs.a(j);
            for row in 0..ny {
                let mut acc = T::zero();
                for col in 0..ny {
                    acc = acc + a[row * ny + col] * (y[block + col] - self.y_offset[block + col]);
                }
                out[row] = out[row] + acc;
            }
        }
        for j in 1..=nb {
            let block = (nb - j) * nu;
            let b = self.coeffs.b(j);
            for row in 0..ny {
                let mut acc = T::zero();
                for col in 0..nu {
                    acc = acc + b[row * nu + col] * (u[block + col] - self.u_offset[block + col]);
                }
                out[row] = out[row] + acc;
            }
        }
    }

    fn jacobian(&self, _y: &[T], _u: &[T], _s: &[T], lin: &mut StageLinearization<T>) -> bool {
        lin.a.copy_from_slice(&self.coeffs.a);
        lin.b.copy_from_slice(&self.coeffs.b);
        true
    }
}

/// Reciprocal condition number of a small dense matrix in the 1-norm.
fn rcond_1<T: Scalar>(a: &[T], n: usize) -> T {
    let norm = |m: &[T]| {
        (0..n)
            .map(|c| (0..n).fold(T::zero(), |acc, r| acc + m[r * n + c].abs()))
            .fold(T::zero(), T::max)
    };
    let anorm = norm(a);
    if anorm == T::zero() {
        return T::zero();
    }
    match invert(a, n) {
        Some(inv) => T::one() / (anorm * norm(&inv)),
        None => T::zero(),
    }
}

/// Gauss-Jordan inverse with partial pivoting; `None` on an exact zero pivot.
fn invert<T: Scalar>(a: &[T], n: usize) -> Option<Vec<T>> {
    let mut m = a.to_vec();
    let mut inv = vec![T::zero(); n * n];
    for i in 0..n {
        inv[i * n + i] = T::one();
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&r1, &r2| {
            m[r1 * n + col]
                .abs()
                .partial_cmp(&m[r2 * n + col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if m[piv * n + col] == T::zero() || !m[piv * n + col].is_finite() {
            return None;
        }
        if piv != col {
            for c in 0..n {
                m.swap(piv * n + c, col * n + c);
                inv.swap(piv * n + c, col * n + c);
            }
        }
        let d = m[col * n + col];
        for c in 0..n {
            m[col * n + c] = m[col * n + c] / d;
            inv[col * n + c] = inv[col * n + c] / d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * n + col];
                if f != T::zero() {
                    for c in 0..n {
                        m[r * n + c] = m[r * n + c] - f * m[col * n + c];
                        inv[r * n + c] = inv[r * n + c] - f * inv[col * n + c];
                    }
                }
            }
        }
    }
    Some(inv)
}
