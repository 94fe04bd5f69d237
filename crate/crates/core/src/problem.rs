//! Penalty-reformulated MPC problem: decision-variable layout, residual
//! stacking over the horizon and the augmented-Lagrangian shift.
//!
//! Decision variables are ordered stage by stage,
//! `z = (u[k], y[k+1], u[k+1], y[k+2], ..., u[k+Nu-1], y[k+Nu], y[k+Nu+1], ..., y[k+Np])`,
//! and every input after `u[k+Nu-1]` is blocked to that last move. The
//! residual is `r(z) = ((1/sqrt(rho)) W (z - zref), h(z, phi))`, where block
//! `j` of `h` is the model residual of prediction step `k + j`.

use crate::error::{check_len, Error, Result};
use crate::model::{linearize_into, IoModel, ModelDims, StageLinearization};
use crate::scalar::{norm_sq, Scalar};

/// Model orders together with the prediction and control horizons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProblemDims {
    pub model: ModelDims,
    /// Prediction horizon `Np`.
    pub pred_horizon: usize,
    /// Control horizon `Nu`, `1 <= Nu <= Np`.
    pub ctrl_horizon: usize,
}

impl ProblemDims {
    pub fn new(model: ModelDims, pred_horizon: usize, ctrl_horizon: usize) -> Result<Self> {
        if ctrl_horizon == 0 || ctrl_horizon > pred_horizon {
            return Err(Error::Config(format!(
                "horizons must satisfy 1 <= Nu <= Np (got Nu={ctrl_horizon}, Np={pred_horizon})"
            )));
        }
        Ok(Self {
            model,
            pred_horizon,
            ctrl_horizon,
        })
    }

    #[inline]
    pub fn inputs(&self) -> usize {
        self.model.inputs
    }

    #[inline]
    pub fn outputs(&self) -> usize {
        self.model.outputs
    }

    /// Number of decision variables `n = Nu nu + Np ny`.
    #[inline]
    pub fn n(&self) -> usize {
        self.ctrl_horizon * self.model.inputs + self.pred_horizon * self.model.outputs
    }

    /// Number of residuals `m = n + Np ny`.
    #[inline]
    pub fn m(&self) -> usize {
        self.n() + self.pred_horizon * self.model.outputs
    }

    /// Number of equality residuals `Np ny`.
    #[inline]
    pub fn n_eq(&self) -> usize {
        self.pred_horizon * self.model.outputs
    }

    /// Maps a 1-based column index to `(beta, eta)` with
    /// `i = beta ny + nu min(beta, Nu - 1) + eta`.
    pub fn decode_index(&self, i: usize) -> Result<(usize, usize)> {
        let n = self.n();
        if i == 0 || i > n {
            return Err(Error::ColumnOutOfRange { index: i, n });
        }
        Ok(self.decode_unchecked(i))
    }

    #[inline]
    pub(crate) fn decode_unchecked(&self, i: usize) -> (usize, usize) {
        let (nu, ny) = (self.model.inputs, self.model.outputs);
        let stride = nu + ny;
        let mixed = self.ctrl_horizon * stride;
        if i <= mixed {
            let beta = (i - 1) / stride;
            (beta, i - beta * stride)
        } else {
            let rest = i - mixed - 1;
            (self.ctrl_horizon + rest / ny, nu + rest % ny + 1)
        }
    }

    /// Inverse of [`ProblemDims::decode_index`].
    #[inline]
    pub fn encode_index(&self, beta: usize, eta: usize) -> usize {
        beta * self.model.outputs + self.model.inputs * beta.min(self.ctrl_horizon - 1) + eta
    }

    /// 0-based position of input channel `ch` of `u[k + stage]`, with the
    /// stage clamped to the control horizon.
    #[inline]
    pub fn u_pos(&self, stage: usize, ch: usize) -> usize {
        let beta = stage.min(self.ctrl_horizon - 1);
        self.encode_index(beta, ch + 1) - 1
    }

    /// 0-based position of output channel `ch` of `y[k + step]`, `step >= 1`.
    #[inline]
    pub fn y_pos(&self, step: usize, ch: usize) -> usize {
        debug_assert!(step >= 1);
        self.encode_index(step - 1, self.model.inputs + ch + 1) - 1
    }

    /// Nonzero row range of the equality part of column `i` (1-based),
    /// returned as `(nbar, min(mbar, m))`; the rows are `nbar+1..=min(mbar, m)`
    /// in 1-based terms, which is the 0-based half-open range `nbar..end`.
    #[inline]
    pub fn column_rows(&self, i: usize) -> (usize, usize) {
        let (beta, eta) = self.decode_unchecked(i);
        let (nu, ny) = (self.model.inputs, self.model.outputs);
        let m = self.m();
        let nbar = self.ctrl_horizon * nu + (self.pred_horizon + beta) * ny;
        let mbar = if eta > nu {
            nbar + self.model.out_lags * ny + ny
        } else if beta == self.ctrl_horizon - 1 {
            m
        } else {
            nbar + self.model.in_lags * ny
        };
        (nbar, mbar.min(m))
    }
}

/// Tuning, bounds and references of one MPC problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig<T> {
    dims: ProblemDims,
    weights: Vec<T>,
    w: Vec<T>,
    rho: T,
    lower: Vec<T>,
    upper: Vec<T>,
    z_ref: Vec<T>,
    /// Optimality tolerance on the first-order conditions.
    pub gamma: T,
    /// Armijo constant in `(0, 0.5)`.
    pub c: T,
    /// Backtracking factor in `(0, 1)`.
    pub tau: T,
    /// Outer Gauss-Newton iteration cap.
    pub max_iters: usize,
    /// Inner BVLS tolerance, relative to the norm of the linearized residual.
    pub bvls_tol: T,
    /// Inner BVLS active-set change cap; `None` means `10 n`.
    pub bvls_max_iter: Option<usize>,
    /// Backtracking threshold update.
    pub line_search: LineSearchRule,
}

/// How the sufficient-decrease threshold evolves during backtracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LineSearchRule {
    /// `theta = c alpha d'dz`, recomputed at every trial step.
    #[default]
    Armijo,
    /// `theta <- alpha theta` after every cut, so after `k` cuts
    /// `theta = c tau^(k(k+1)/2) d'dz`.
    GeometricTheta,
}

impl<T: Scalar> MpcConfig<T> {
    pub fn builder(dims: ProblemDims) -> MpcConfigBuilder<T> {
        MpcConfigBuilder::new(dims)
    }

    pub fn dims(&self) -> &ProblemDims {
        &self.dims
    }

    /// Stage weights in decision-variable order, before the penalty scaling.
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Weights with `1/sqrt(rho)` folded in.
    pub fn w(&self) -> &[T] {
        &self.w
    }

    pub fn rho(&self) -> T {
        self.rho
    }

    pub fn set_rho(&mut self, rho: T) -> Result<()> {
        if !(rho > T::zero()) || !rho.is_finite() {
            return Err(Error::Config(
                "penalty rho must be positive and finite".into(),
            ));
        }
        self.rho = rho;
        let s = rho.sqrt();
        for (w, &raw) in self.w.iter_mut().zip(&self.weights) {
            *w = raw / s;
        }
        Ok(())
    }

    pub fn lower(&self) -> &[T] {
        &self.lower
    }

    pub fn upper(&self) -> &[T] {
        &self.upper
    }

    pub fn z_ref(&self) -> &[T] {
        &self.z_ref
    }

    /// Replaces the whole reference vector.
    pub fn set_reference(&mut self, z_ref: &[T]) -> Result<()> {
        check_len("reference", self.dims.n(), z_ref.len())?;
        self.z_ref.copy_from_slice(z_ref);
        Ok(())
    }

    /// Sets the output reference of every prediction step.
    pub fn set_output_reference(&mut self, y_ref: &[T]) -> Result<()> {
        check_len("output reference", self.dims.outputs(), y_ref.len())?;
        for step in 1..=self.dims.pred_horizon {
            for (ch, &v) in y_ref.iter().enumerate() {
                self.z_ref[self.dims.y_pos(step, ch)] = v;
            }
        }
        Ok(())
    }

    /// Sets the input reference of every control move.
    pub fn set_input_reference(&mut self, u_ref: &[T]) -> Result<()> {
        check_len("input reference", self.dims.inputs(), u_ref.len())?;
        for stage in 0..self.dims.ctrl_horizon {
            for (ch, &v) in u_ref.iter().enumerate() {
                self.z_ref[self.dims.u_pos(stage, ch)] = v;
            }
        }
        Ok(())
    }

    pub fn bvls_iteration_cap(&self) -> usize {
        self.bvls_max_iter.unwrap_or(10 * self.dims.n()).max(1)
    }

    /// Projects `z` onto `[p, q]`; returns whether anything moved.
    pub fn clip(&self, z: &mut [T]) -> bool {
        let mut moved = false;
        for ((v, &lo), &hi) in z.iter_mut().zip(&self.lower).zip(&self.upper) {
            let c = v.max(lo).min(hi);
            if c != *v {
                moved = true;
                *v = c;
            }
        }
        moved
    }
}

/// Builder for [`MpcConfig`]. Defaults: `sqrt(rho) = 1e4`, `gamma = 1e-6`,
/// `c = 1e-4`, `tau = 0.5`, at most 100 outer iterations, unit weights,
/// unbounded variables and zero references.
#[derive(Debug, Clone)]
pub struct MpcConfigBuilder<T> {
    dims: ProblemDims,
    wu: Vec<T>,
    wy: Vec<T>,
    u_bounds: (Vec<T>, Vec<T>),
    y_bounds: (Vec<T>, Vec<T>),
    u_ref: Vec<T>,
    y_ref: Vec<T>,
    rho: T,
    gamma: T,
    c: T,
    tau: T,
    max_iters: usize,
    bvls_tol: T,
    bvls_max_iter: Option<usize>,
    line_search: LineSearchRule,
    error: Option<Error>,
}

impl<T: Scalar> MpcConfigBuilder<T> {
    fn new(dims: ProblemDims) -> Self {
        let (nu, ny) = (dims.inputs(), dims.outputs());
        let big = T::unbounded();
        Self {
            dims,
            wu: vec![T::one(); nu],
            wy: vec![T::one(); ny],
            u_bounds: (vec![-big; nu], vec![big; nu]),
            y_bounds: (vec![-big; ny], vec![big; ny]),
            u_ref: vec![T::zero(); nu],
            y_ref: vec![T::zero(); ny],
            rho: T::lit(1e8),
            gamma: T::lit(1e-6),
            c: T::lit(1e-4),
            tau: T::lit(0.5),
            max_iters: 100,
            bvls_tol: T::lit(1e-8),
            bvls_max_iter: None,
            line_search: LineSearchRule::default(),
            error: None,
        }
    }

    fn record(&mut self, r: Result<()>) {
        if let (Err(e), None) = (r, &self.error) {
            self.error = Some(e);
        }
    }

    fn set_vec(&mut self, what: &'static str, target: fn(&mut Self) -> &mut Vec<T>, v: &[T]) {
        let expected = target(self).len();
        match check_len(what, expected, v.len()) {
            Ok(()) => target(self).copy_from_slice(v),
            Err(e) => self.record(Err(e)),
        }
    }

    /// Diagonal input weights `W_u` (length `nu`).
    pub fn input_weights(mut self, wu: &[T]) -> Self {
        self.set_vec("input weights", |s| &mut s.wu, wu);
        self
    }

    /// Diagonal output weights `W_y` (length `ny`).
    pub fn output_weights(mut self, wy: &[T]) -> Self {
        self.set_vec("output weights", |s| &mut s.wy, wy);
        self
    }

    /// Full `nu x nu` row-major input weight; rejected unless diagonal.
    pub fn input_weight_matrix(mut self, w: &[T]) -> Self {
        let nu = self.dims.inputs();
        match diagonal_of(w, nu, "input weight matrix") {
            Ok(d) => self.wu = d,
            Err(e) => self.record(Err(e)),
        }
        self
    }

    /// Full `ny x ny` row-major output weight; rejected unless diagonal.
    pub fn output_weight_matrix(mut self, w: &[T]) -> Self {
        let ny = self.dims.outputs();
        match diagonal_of(w, ny, "output weight matrix") {
            Ok(d) => self.wy = d,
            Err(e) => self.record(Err(e)),
        }
        self
    }

    pub fn input_bounds(mut self, lo: &[T], hi: &[T]) -> Self {
        self.set_vec("input lower bounds", |s| &mut s.u_bounds.0, lo);
        self.set_vec("input upper bounds", |s| &mut s.u_bounds.1, hi);
        self
    }

    pub fn output_bounds(mut self, lo: &[T], hi: &[T]) -> Self {
        self.set_vec("output lower bounds", |s| &mut s.y_bounds.0, lo);
        self.set_vec("output upper bounds", |s| &mut s.y_bounds.1, hi);
        self
    }

    pub fn input_reference(mut self, u_ref: &[T]) -> Self {
        self.set_vec("input reference", |s| &mut s.u_ref, u_ref);
        self
    }

    pub fn output_reference(mut self, y_ref: &[T]) -> Self {
        self.set_vec("output reference", |s| &mut s.y_ref, y_ref);
        self
    }

    pub fn rho(mut self, rho: T) -> Self {
        self.rho = rho;
        self
    }

    pub fn sqrt_rho(mut self, sqrt_rho: T) -> Self {
        self.rho = sqrt_rho * sqrt_rho;
        self
    }

    pub fn gamma(mut self, gamma: T) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn armijo_c(mut self, c: T) -> Self {
        self.c = c;
        self
    }

    pub fn tau(mut self, tau: T) -> Self {
        self.tau = tau;
        self
    }

    pub fn max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn bvls_tol(mut self, tol: T) -> Self {
        self.bvls_tol = tol;
        self
    }

    pub fn bvls_max_iter(mut self, cap: usize) -> Self {
        self.bvls_max_iter = Some(cap);
        self
    }

    pub fn line_search(mut self, rule: LineSearchRule) -> Self {
        self.line_search = rule;
        self
    }

    pub fn build(self) -> Result<MpcConfig<T>> {
        if let Some(e) = self.error {
            return Err(e);
        }
        let d = self.dims;
        let (nu, ny, np, nc) = (d.inputs(), d.outputs(), d.pred_horizon, d.ctrl_horizon);
        if self
            .wu
            .iter()
            .chain(&self.wy)
            .any(|w| !(*w >= T::zero()) || !w.is_finite())
        {
            return Err(Error::Config(
                "weights must be finite and non-negative".into(),
            ));
        }
        for (lo, hi) in [&self.u_bounds, &self.y_bounds] {
            if lo.iter().zip(hi.iter()).any(|(l, h)| !(l <= h)) {
                return Err(Error::Config(
                    "lower bounds must not exceed upper bounds".into(),
                ));
            }
        }
        if !(self.c > T::zero() && self.c < T::lit(0.5)) {
            return Err(Error::Config(
                "Armijo constant c must lie in (0, 0.5)".into(),
            ));
        }
        if !(self.tau > T::zero() && self.tau < T::one()) {
            return Err(Error::Config(
                "backtracking factor tau must lie in (0, 1)".into(),
            ));
        }
        if !(self.gamma >= T::zero()) || !(self.bvls_tol >= T::zero()) {
            return Err(Error::Config("tolerances must be non-negative".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        let n = d.n();
        let mut weights = vec![T::zero(); n];
        let mut lower = vec![T::zero(); n];
        let mut upper = vec![T::zero(); n];
        let mut z_ref = vec![T::zero(); n];
        let tail = T::from_usize(np - nc + 1).unwrap().sqrt();
        for stage in 0..nc {
            for ch in 0..nu {
                let i = d.u_pos(stage, ch);
                weights[i] = if stage == nc - 1 {
                    self.wu[ch] * tail
                } else {
                    self.wu[ch]
                };
                lower[i] = self.u_bounds.0[ch];
                upper[i] = self.u_bounds.1[ch];
                z_ref[i] = self.u_ref[ch];
            }
        }
        for step in 1..=np {
            for ch in 0..ny {
                let i = d.y_pos(step, ch);
                weights[i] = self.wy[ch];
                lower[i] = self.y_bounds.0[ch];
                upper[i] = self.y_bounds.1[ch];
                z_ref[i] = self.y_ref[ch];
            }
        }
        let mut cfg = MpcConfig {
            dims: d,
            w: weights.clone(),
            weights,
            rho: T::one(),
            lower,
            upper,
            z_ref,
            gamma: self.gamma,
            c: self.c,
            tau: self.tau,
            max_iters: self.max_iters,
            bvls_tol: self.bvls_tol,
            bvls_max_iter: self.bvls_max_iter,
            line_search: self.line_search,
        };
        cfg.set_rho(self.rho)?;
        Ok(cfg)
    }
}

fn diagonal_of<T: Scalar>(w: &[T], k: usize, what: &'static str) -> Result<Vec<T>> {
    check_len(what, k * k, w.len())?;
    for r in 0..k {
        for c in 0..k {
            if r != c && w[r * k + c] != T::zero() {
                return Err(Error::Config(format!("{what} must be diagonal")));
            }
        }
    }
    Ok((0..k).map(|i| w[i * k + i]).collect())
}

/// Past data `phi` the prediction starts from, plus any exogenous signal.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialCondition<T> {
    /// `y[k-na+1], ..., y[k]`, oldest first (`na ny` entries).
    pub past_outputs: Vec<T>,
    /// `u[k-nb+1], ..., u[k-1]`, oldest first (`(nb - 1) nu` entries).
    pub past_inputs: Vec<T>,
    /// `s[k-nc+1], ..., s[k+Np-1]`, oldest first; empty when `nc = 0`.
    pub exogenous: Vec<T>,
}

impl<T: Scalar> InitialCondition<T> {
    /// Initial condition at a constant operating point.
    pub fn steady(dims: &ProblemDims, y: &[T], u: &[T]) -> Result<Self> {
        let md = dims.model;
        check_len("steady output", md.outputs, y.len())?;
        check_len("steady input", md.inputs, u.len())?;
        Ok(Self {
            past_outputs: y.repeat(md.out_lags),
            past_inputs: u.repeat(md.in_lags - 1),
            exogenous: vec![T::zero(); Self::exo_len(dims)],
        })
    }

    pub fn exo_len(dims: &ProblemDims) -> usize {
        let md = dims.model;
        if md.exo_lags == 0 {
            0
        } else {
            (dims.pred_horizon + md.exo_lags - 1) * md.exo_channels
        }
    }

    pub fn validate(&self, dims: &ProblemDims) -> Result<()> {
        let md = dims.model;
        check_len(
            "past outputs",
            md.out_lags * md.outputs,
            self.past_outputs.len(),
        )?;
        check_len(
            "past inputs",
            (md.in_lags - 1) * md.inputs,
            self.past_inputs.len(),
        )?;
        check_len(
            "exogenous sequence",
            Self::exo_len(dims),
            self.exogenous.len(),
        )
    }

    /// Shifts the window one step: appends the applied input and the new
    /// measured output.
    pub fn advance(&mut self, dims: &ProblemDims, applied_u: &[T], measured_y: &[T]) {
        let md = dims.model;
        if md.in_lags > 1 {
            self.past_inputs.drain(..md.inputs);
            self.past_inputs.extend_from_slice(applied_u);
        }
        self.past_outputs.drain(..md.outputs);
        self.past_outputs.extend_from_slice(measured_y);
    }
}

/// Residual vector `r = (tracking, equality)` with `m = n + Np ny` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVector<T> {
    pub r: Vec<T>,
    n: usize,
}

impl<T: Scalar> ResidualVector<T> {
    pub fn tracking(&self) -> &[T] {
        &self.r[..self.n]
    }

    pub fn equality(&self) -> &[T] {
        &self.r[self.n..]
    }

    /// `r'r`.
    pub fn cost(&self) -> T {
        norm_sq(&self.r)
    }
}

/// Scratch buffers for assembling stage histories.
#[derive(Debug, Clone)]
pub(crate) struct HistoryBuf<T> {
    y: Vec<T>,
    u: Vec<T>,
    s: Vec<T>,
}

impl<T: Scalar> HistoryBuf<T> {
    pub(crate) fn new(md: &ModelDims) -> Self {
        Self {
            y: vec![T::zero(); md.y_history_len()],
            u: vec![T::zero(); md.u_history_len()],
            s: vec![T::zero(); md.s_history_len()],
        }
    }

    /// Fills the histories of prediction step `k + step` (`1 <= step <= Np`).
    pub(crate) fn fill(&mut self, d: &ProblemDims, z: &[T], ic: &InitialCondition<T>, step: usize) {
        let md = d.model;
        let (ny, nu, na, nb, nc, ns) = (
            md.outputs,
            md.inputs,
            md.out_lags,
            md.in_lags,
            md.exo_lags,
            md.exo_channels,
        );
        let step = step as isize;
        for (blk, l) in ((step - na as isize)..=step).enumerate() {
            let dst = &mut self.y[blk * ny..(blk + 1) * ny];
            if l >= 1 {
                for (ch, v) in dst.iter_mut().enumerate() {
                    *v = z[d.y_pos(l as usize, ch)];
                }
            } else {
                let src = (l + na as isize - 1) as usize * ny;
                dst.copy_from_slice(&ic.past_outputs[src..src + ny]);
            }
        }
        for (blk, l) in ((step - nb as isize)..step).enumerate() {
            let dst = &mut self.u[blk * nu..(blk + 1) * nu];
            if l >= 0 {
                for (ch, v) in dst.iter_mut().enumerate() {
                    *v = z[d.u_pos(l as usize, ch)];
                }
            } else {
                let src = (l + nb as isize - 1) as usize * nu;
                dst.copy_from_slice(&ic.past_inputs[src..src + nu]);
            }
        }
        if nc > 0 {
            let start = (step as usize - 1) * ns;
            self.s
                .copy_from_slice(&ic.exogenous[start..start + nc * ns]);
        }
    }
}

fn check_problem<T: Scalar, M: IoModel<T> + ?Sized>(
    z: &[T],
    ic: &InitialCondition<T>,
    model: &M,
    cfg: &MpcConfig<T>,
) -> Result<()> {
    let d = cfg.dims();
    if model.dims() != d.model {
        return Err(Error::Config(
            "model dimensions differ from the problem's".into(),
        ));
    }
    check_len("decision vector", d.n(), z.len())?;
    ic.validate(d)
}

/// Stacks the model residual over the horizon into `out` (`Np ny`).
pub(crate) fn equality_into<T: Scalar, M: IoModel<T> + ?Sized>(
    z: &[T],
    ic: &InitialCondition<T>,
    model: &M,
    d: &ProblemDims,
    buf: &mut HistoryBuf<T>,
    out: &mut [T],
) {
    let ny = d.outputs();
    for step in 1..=d.pred_horizon {
        buf.fill(d, z, ic, step);
        model.residual(&buf.y, &buf.u, &buf.s, &mut out[(step - 1) * ny..step * ny]);
    }
}

/// Equality residual `h(z, phi)` stacked over the prediction horizon.
pub fn build_equality_residual<T: Scalar, M: IoModel<T> + ?Sized>(
    z: &[T],
    ic: &InitialCondition<T>,
    model: &M,
    cfg: &MpcConfig<T>,
) -> Result<Vec<T>> {
    check_problem(z, ic, model, cfg)?;
    let d = cfg.dims();
    let mut out = vec![T::zero(); d.n_eq()];
    let mut buf = HistoryBuf::new(&d.model);
    equality_into(z, ic, model, d, &mut buf, &mut out);
    Ok(out)
}

/// Full NLLS-box residual at the configured penalty.
pub fn build_full_residual<T: Scalar, M: IoModel<T> + ?Sized>(
    z: &[T],
    ic: &InitialCondition<T>,
    model: &M,
    cfg: &MpcConfig<T>,
) -> Result<ResidualVector<T>> {
    check_problem(z, ic, model, cfg)?;
    let map = PenaltyResidual::new(model, cfg, ic);
    let mut r = vec![T::zero(); cfg.dims().m()];
    map.eval(z, &mut r);
    Ok(ResidualVector {
        r,
        n: cfg.dims().n(),
    })
}

/// Residual of the bound-constrained Lagrangian subproblem: tracking scaled
/// by `1/sqrt(rho_i)`, equality block shifted by `lambda / rho_i`.
pub fn alm_residual<T: Scalar, M: IoModel<T> + ?Sized>(
    z: &[T],
    ic: &InitialCondition<T>,
    model: &M,
    cfg: &MpcConfig<T>,
    lambda: &[T],
    rho_i: T,
) -> Result<ResidualVector<T>> {
    check_problem(z, ic, model, cfg)?;
    check_len("multipliers", cfg.dims().n_eq(), lambda.len())?;
    if !(rho_i > T::zero()) {
        return Err(Error::Config("penalty must be positive".into()));
    }
    let map = PenaltyResidual::with_multipliers(model, cfg, ic, lambda, rho_i);
    let mut r = vec![T::zero(); cfg.dims().m()];
    map.eval(z, &mut r);
    Ok(ResidualVector {
        r,
        n: cfg.dims().n(),
    })
}

/// Stage-shifted warm start: every stage takes the next stage's values, the
/// last move and last output repeat, and the result is clipped into `[p, q]`.
pub fn shift_warm_start<T: Scalar>(z_prev: &[T], cfg: &MpcConfig<T>) -> Result<Vec<T>> {
    let d = cfg.dims();
    check_len("previous solution", d.n(), z_prev.len())?;
    let mut z = shift_stages(z_prev, d);
    cfg.clip(&mut z);
    Ok(z)
}

/// The stage shift of [`shift_warm_start`] applied to any per-variable data.
pub fn shift_stages<V: Copy>(prev: &[V], d: &ProblemDims) -> Vec<V> {
    let mut out = prev.to_vec();
    for stage in 0..d.ctrl_horizon {
        let src = (stage + 1).min(d.ctrl_horizon - 1);
        for ch in 0..d.inputs() {
            out[d.u_pos(stage, ch)] = prev[d.u_pos(src, ch)];
        }
    }
    for step in 1..=d.pred_horizon {
        let src = (step + 1).min(d.pred_horizon);
        for ch in 0..d.outputs() {
            out[d.y_pos(step, ch)] = prev[d.y_pos(src, ch)];
        }
    }
    out
}

/// The residual map `z -> r(z)` of one NLLS-box solve together with its
/// linearization, optionally carrying augmented-Lagrangian multipliers.
pub struct PenaltyResidual<'a, T, M: ?Sized> {
    model: &'a M,
    cfg: &'a MpcConfig<T>,
    ic: &'a InitialCondition<T>,
    shift: Option<Vec<T>>,
    w: Vec<T>,
}

impl<'a, T: Scalar, M: IoModel<T> + ?Sized> PenaltyResidual<'a, T, M> {
    /// Quadratic-penalty residual at the configured `rho`.
    pub fn new(model: &'a M, cfg: &'a MpcConfig<T>, ic: &'a InitialCondition<T>) -> Self {
        Self {
            model,
            cfg,
            ic,
            shift: None,
            w: cfg.w().to_vec(),
        }
    }

    /// Augmented-Lagrangian residual at penalty `rho_i`.
    pub fn with_multipliers(
        model: &'a M,
        cfg: &'a MpcConfig<T>,
        ic: &'a InitialCondition<T>,
        lambda: &[T],
        rho_i: T,
    ) -> Self {
        let s = rho_i.sqrt();
        Self {
            model,
            cfg,
            ic,
            shift: Some(lambda.iter().map(|&l| l / rho_i).collect()),
            w: cfg.weights().iter().map(|&w| w / s).collect(),
        }
    }

    pub fn dims(&self) -> &ProblemDims {
        self.cfg.dims()
    }

    pub fn config(&self) -> &MpcConfig<T> {
        self.cfg
    }

    pub fn model(&self) -> &M {
        self.model
    }

    pub fn initial_condition(&self) -> &InitialCondition<T> {
        self.ic
    }

    /// Diagonal of the top Jacobian block.
    pub fn weights(&self) -> &[T] {
        &self.w
    }

    pub fn eval(&self, z: &[T], out: &mut [T]) {
        let mut buf = HistoryBuf::new(&self.dims().model);
        self.eval_with(z, out, &mut buf)
    }

    pub(crate) fn eval_with(&self, z: &[T], out: &mut [T], buf: &mut HistoryBuf<T>) {
        let d = self.cfg.dims();
        let n = d.n();
        let zr = self.cfg.z_ref();
        for i in 0..n {
            out[i] = self.w[i] * (z[i] - zr[i]);
        }
        let eq = &mut out[n..];
        equality_into(z, self.ic, self.model, d, buf, eq);
        if let Some(shift) = &self.shift {
            for (e, &s) in eq.iter_mut().zip(shift) {
                *e = *e + s;
            }
        }
    }

    /// Linearizes every prediction step at `z`; entry `s - 1` holds the
    /// coefficients of step `k + s`.
    pub fn linearize(&self, z: &[T], lins: &mut Vec<StageLinearization<T>>) -> Result<()> {
        let d = self.cfg.dims();
        let mut buf = HistoryBuf::new(&d.model);
        lins.resize_with(d.pred_horizon, || StageLinearization::zeros(d.model));
        for (idx, lin) in lins.iter_mut().enumerate() {
            buf.fill(d, z, self.ic, idx + 1);
            linearize_into(self.model, &buf.y, &buf.u, &buf.s, lin).map_err(|e| match e {
                Error::IllPosedModel { rcond, .. } => Error::IllPosedModel {
                    step: idx + 1,
                    rcond,
                },
                other => other,
            })?;
        }
        Ok(())
    }

    /// Linearization of a single prediction step (1-based).
    pub fn linearize_step(&self, z: &[T], step: usize) -> Result<StageLinearization<T>> {
        let d = self.cfg.dims();
        let mut buf = HistoryBuf::new(&d.model);
        buf.fill(d, z, self.ic, step);
        let mut lin = StageLinearization::zeros(d.model);
        linearize_into(self.model, &buf.y, &buf.u, &buf.s, &mut lin)?;
        Ok(lin)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDef;

    fn ref_dims() -> ProblemDims {
        ProblemDims::new(ModelDims::io(2, 4, 2, 2).unwrap(), 10, 4).unwrap()
    }

    fn scalar_model() -> ModelDef<f64> {
        ModelDef::new(ModelDims::io(1, 1, 1, 1).unwrap(), |y, u, _s, out| {
            out[0] = y[1] - 0.5 * y[0] - u[0];
        })
    }

    #[test]
    fn ref_dims_sizes() {
        let d = ref_dims();
        assert_eq!(d.n(), 28);
        assert_eq!(d.m(), 48);
    }

    #[test]
    fn decode_examples() {
        let d = ref_dims();
        assert_eq!(d.decode_index(1).unwrap(), (0, 1));
        assert_eq!(d.decode_index(9).unwrap(), (2, 1));
        assert_eq!(d.decode_index(28).unwrap(), (9, 4));
        assert!(matches!(
            d.decode_index(0),
            Err(Error::ColumnOutOfRange { .. })
        ));
        assert!(d.decode_index(29).is_err());
    }

    #[test]
    fn decode_matches_enumerated_ordering() {
        // walk the stage ordering explicitly and compare positions
        let d = ref_dims();
        let (nu, ny) = (2, 2);
        let mut i = 0;
        for stage in 0..d.pred_horizon {
            if stage < d.ctrl_horizon {
                for ch in 0..nu {
                    i += 1;
                    assert_eq!(d.decode_index(i).unwrap(), (stage, ch + 1));
                    assert_eq!(d.u_pos(stage, ch), i - 1);
                }
            }
            for ch in 0..ny {
                i += 1;
                assert_eq!(d.decode_index(i).unwrap(), (stage, nu + ch + 1));
                assert_eq!(d.y_pos(stage + 1, ch), i - 1);
            }
        }
        assert_eq!(i, d.n());
    }

    #[test]
    fn horizon_validation() {
        let md = ModelDims::io(1, 1, 1, 1).unwrap();
        assert!(ProblemDims::new(md, 5, 0).is_err());
        assert!(ProblemDims::new(md, 5, 6).is_err());
        assert!(ProblemDims::new(md, 5, 5).is_ok());
    }

    #[test]
    fn hand_stacked_equality_residual() {
        let d = ProblemDims::new(ModelDims::io(1, 1, 1, 1).unwrap(), 2, 2).unwrap();
        let cfg = MpcConfig::builder(d).build().unwrap();
        let ic = InitialCondition {
            past_outputs: vec![1.0],
            past_inputs: vec![],
            exogenous: vec![],
        };
        let h = build_equality_residual(&[0.0, 0.4, 0.0, 0.2], &ic, &scalar_model(), &cfg).unwrap();
        assert!((h[0] + 0.1).abs() < 1e-15);
        assert!(h[1].abs() < 1e-15);
    }

    #[test]
    fn penalty_scaling_of_tracking_block() {
        let d = ProblemDims::new(ModelDims::io(1, 1, 1, 1).unwrap(), 3, 2).unwrap();
        let ic = InitialCondition::steady(&d, &[0.3], &[0.0]).unwrap();
        let z = [0.5, 0.1, -0.4, 0.9, 0.2];
        let m = scalar_model();
        let c1 = MpcConfig::builder(d)
            .rho(4.0)
            .output_reference(&[1.0])
            .build()
            .unwrap();
        let c2 = MpcConfig::builder(d)
            .rho(16.0)
            .output_reference(&[1.0])
            .build()
            .unwrap();
        let r1 = build_full_residual(&z, &ic, &m, &c1).unwrap();
        let r2 = build_full_residual(&z, &ic, &m, &c2).unwrap();
        assert_eq!(r1.r.len(), d.m());
        let n1 = norm_sq(r1.tracking()).sqrt();
        let n2 = norm_sq(r2.tracking()).sqrt();
        assert!((n2 - 0.5 * n1).abs() < 1e-15);
        assert_eq!(r1.equality(), r2.equality());
    }

    #[test]
    fn last_move_weight_scaled_by_tail_length() {
        let d = ProblemDims::new(ModelDims::io(1, 1, 1, 1).unwrap(), 10, 4).unwrap();
        let cfg = MpcConfig::builder(d)
            .input_weights(&[2.0])
            .rho(1.0)
            .build()
            .unwrap();
        assert_eq!(cfg.weights()[d.u_pos(0, 0)], 2.0);
        assert!((cfg.weights()[d.u_pos(3, 0)] - 2.0 * 7f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn config_rejections() {
        let d = ProblemDims::new(ModelDims::io(1, 1, 1, 2).unwrap(), 3, 2).unwrap();
        assert!(MpcConfig::<f64>::builder(d)
            .output_weight_matrix(&[1.0, 0.1, 0.0, 1.0])
            .build()
            .is_err());
        assert!(MpcConfig::<f64>::builder(d)
            .output_weight_matrix(&[1.0, 0.0, 0.0, 2.0])
            .build()
            .is_ok());
        assert!(MpcConfig::<f64>::builder(d)
            .input_bounds(&[1.0], &[0.0])
            .build()
            .is_err());
        assert!(MpcConfig::<f64>::builder(d)
            .output_weights(&[1.0])
            .build()
            .is_err());
        assert!(MpcConfig::<f64>::builder(d).armijo_c(0.5).build().is_err());
        assert!(MpcConfig::<f64>::builder(d).tau(1.0).build().is_err());
    }

    #[test]
    fn alm_with_zero_multipliers_is_penalty_residual() {
        let d = ProblemDims::new(ModelDims::io(1, 1, 1, 1).unwrap(), 3, 3).unwrap();
        let ic = InitialCondition::steady(&d, &[0.3], &[0.1]).unwrap();
        let cfg = MpcConfig::builder(d)
            .rho(1e6)
            .output_reference(&[1.0])
            .build()
            .unwrap();
        let z = [0.5, 0.1, -0.4, 0.9, 0.2, 0.7];
        let m = scalar_model();
        let full = build_full_residual(&z, &ic, &m, &cfg).unwrap();
        let alm = alm_residual(&z, &ic, &m, &cfg, &[0.0; 3], 1e6).unwrap();
        assert_eq!(full, alm);
    }

    #[test]
    fn shift_cases() {
        let d = ProblemDims::new(ModelDims::io(1, 1, 1, 1).unwrap(), 3, 2).unwrap();
        let cfg = MpcConfig::builder(d).build().unwrap();
        let constant = vec![0.3; d.n()];
        assert_eq!(shift_warm_start(&constant, &cfg).unwrap(), constant);
        // z = (u0, y1, u1, y2, y3)
        let z = [1.0, 10.0, 2.0, 20.0, 30.0];
        assert_eq!(
            shift_warm_start(&z, &cfg).unwrap(),
            vec![2.0, 20.0, 2.0, 30.0, 30.0]
        );

        let d1 = ProblemDims::new(ModelDims::io(1, 1, 1, 1).unwrap(), 3, 1).unwrap();
        let cfg1 = MpcConfig::builder(d1)
            .output_bounds(&[-1.0], &[25.0])
            .build()
            .unwrap();
        // z = (u0, y1, y2, y3)
        let z1 = [4.0, 10.0, 20.0, 30.0];
        assert_eq!(
            shift_warm_start(&z1, &cfg1).unwrap(),
            vec![4.0, 20.0, 25.0, 25.0]
        );
    }

    #[test]
    fn column_rows_ref_dims() {
        let d = ref_dims();
        assert_eq!(d.column_rows(1), (28, 36));
        assert_eq!(d.column_rows(3), (28, 34));
        assert_eq!(d.column_rows(13), (34, 48));
        assert_eq!(d.column_rows(28), (46, 48));
    }

    #[test]
    fn exogenous_window_reaches_model() {
        // M = y_k - s_{k-1}: the h block for step j must read s_{k+j-1}
        let md = ModelDims::new(1, 1, 1, 1, 1, 1).unwrap();
        let model = ModelDef::new(md, |y, _u, s, out: &mut [f64]| out[0] = y[1] - s[0]);
        let d = ProblemDims::new(md, 3, 3).unwrap();
        let cfg = MpcConfig::builder(d).build().unwrap();
        let ic = InitialCondition {
            past_outputs: vec![0.0],
            past_inputs: vec![],
            exogenous: vec![1.0, 2.0, 3.0],
        };
        let mut z = vec![0.0; d.n()];
        for s in 1..=3 {
            z[d.y_pos(s, 0)] = s as f64;
        }
        let h = build_equality_residual(&z, &ic, &model, &cfg).unwrap();
        assert_eq!(h, vec![0.0, 0.0, 0.0]);
    }
}
