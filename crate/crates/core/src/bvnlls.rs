//! Gauss-Newton solver for the box-constrained penalty problem, with bounded
//! LS search directions and backtracking, plus an outer bound-constrained
//! Lagrangian loop.

use std::time::{Duration, Instant};

use crate::bvls::{ActiveSetState, BoundState, Bvls};
use crate::error::{check_len, Result};
use crate::jac_ops::{ColumnOperator, DenseJacobian, JacobianView};
use crate::model::{IoModel, StageLinearization};
use crate::problem::{
    build_equality_residual, shift_stages, InitialCondition, LineSearchRule, MpcConfig,
    PenaltyResidual,
};
use crate::scalar::{dot, norm_inf, norm_sq, Scalar};

/// Backtracking gives up below this step length.
pub const MIN_STEP: f64 = 1e-12;

/// Which linear-algebra path computes the search direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LinearAlgebra {
    /// Matrix-free operator and pattern-restricted QR.
    #[default]
    Structured,
    /// Explicit Jacobian and plain dense QR; the reference path.
    Dense,
}

/// Where the Jacobian coefficients live during a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoefficientMode {
    /// Linearize every step once per iteration and keep the coefficients.
    #[default]
    Stored,
    /// Re-linearize a step whenever one of its coefficients is read.
    OnDemand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// The line search underflowed or the direction was not a descent
    /// direction; the incumbent is returned.
    Stalled,
}

/// One accepted Gauss-Newton step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord<T> {
    /// Cost before the step.
    pub psi: T,
    /// Cost after the step.
    pub phi: T,
    pub alpha: T,
    /// `d' dz` with `d = J' r`.
    pub dtdz: T,
    pub backtracks: usize,
    pub bvls_changes: usize,
    /// Largest bound violation of the new iterate (0 when inside `[p, q]`).
    pub bound_violation: T,
}

/// Result of [`Solver::solve`].
#[derive(Debug, Clone)]
pub struct SolveReport<T> {
    pub z_star: Vec<T>,
    /// `r'r` at `z_star`.
    pub phi: T,
    pub lambda_p: Vec<T>,
    pub lambda_q: Vec<T>,
    /// Search directions computed (one BVLS solve each).
    pub iters: usize,
    pub bvls_changes: usize,
    pub ls_backtracks: usize,
    pub converged: bool,
    pub status: SolveStatus,
    /// The initial guess was outside `[p, q]` and got clipped.
    pub clipped_start: bool,
    /// Worst first-order violation at `z_star`.
    pub kkt_violation: T,
    /// Step length of the last accepted step (1 when none was taken).
    pub last_alpha: T,
    /// `||h(z_star)||_inf` of the plain model residual.
    pub h_inf: T,
    pub trace: Vec<IterationRecord<T>>,
    pub elapsed: Duration,
}

/// First-order test of the bound-constrained problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktOutcome<T> {
    pub optimal: bool,
    pub worst_violation: T,
}

/// Checks `d(j) >= -gamma` on lower-active, `-d(j) >= -gamma` on
/// upper-active and `|d(j)| <= gamma` on free variables. A variable active
/// at both bounds is fixed and imposes nothing.
pub fn kkt_check<T: Scalar>(
    d: &[T],
    at_lower: &[bool],
    at_upper: &[bool],
    gamma: T,
) -> KktOutcome<T> {
    let mut worst = T::zero();
    for ((&dj, &lo), &hi) in d.iter().zip(at_lower).zip(at_upper) {
        let v = match (lo, hi) {
            (true, true) => T::zero(),
            (true, false) => (-dj).max(T::zero()),
            (false, true) => dj.max(T::zero()),
            (false, false) => dj.abs(),
        };
        worst = worst.max(v);
    }
    KktOutcome {
        optimal: worst <= gamma,
        worst_violation: worst,
    }
}

/// Result of [`backtrack`].
#[derive(Debug, Clone, PartialEq)]
pub struct Backtrack<T> {
    pub alpha: T,
    pub phi: T,
    pub cuts: usize,
    /// `alpha` fell below [`MIN_STEP`] without sufficient decrease.
    pub stalled: bool,
}

/// Backtracking from `alpha = 1`: `eval(alpha, r)` writes the residual at
/// the trial point into `r` and returns its cost. On return `r` holds the
/// residual of the accepted (or last tried) point.
pub fn backtrack<T: Scalar>(
    psi: T,
    dtdz: T,
    mut eval: impl FnMut(T, &mut [T]) -> T,
    r: &mut [T],
    c: T,
    tau: T,
    rule: LineSearchRule,
) -> Backtrack<T> {
    let mut alpha = T::one();
    let mut theta = c * alpha * dtdz;
    let mut phi = eval(alpha, r);
    let mut cuts = 0;
    while !(phi <= psi + theta) {
        alpha = tau * alpha;
        if alpha < T::lit(MIN_STEP) {
            return Backtrack {
                alpha,
                phi,
                cuts,
                stalled: true,
            };
        }
        theta = match rule {
            LineSearchRule::Armijo => c * alpha * dtdz,
            LineSearchRule::GeometricTheta => alpha * theta,
        };
        phi = eval(alpha, r);
        cuts += 1;
    }
    Backtrack {
        alpha,
        phi,
        cuts,
        stalled: false,
    }
}

/// Reusable solver workspace. Keeps the final active set of the last solve
/// so a following MPC instance can start from it.
#[derive(Debug, Clone, Default)]
pub struct Solver<T> {
    pub linalg: LinearAlgebra,
    pub coefficients: CoefficientMode,
    lins: Vec<StageLinearization<T>>,
    bvls: Option<Bvls<T>>,
    dense: Option<DenseJacobian<T>>,
    warm: Option<ActiveSetState<T>>,
}

impl<T: Scalar> Solver<T> {
    pub fn new() -> Self {
        Self {
            linalg: LinearAlgebra::Structured,
            coefficients: CoefficientMode::Stored,
            lins: Vec::new(),
            bvls: None,
            dense: None,
            warm: None,
        }
    }

    pub fn with_linalg(mut self, linalg: LinearAlgebra) -> Self {
        self.linalg = linalg;
        self
    }

    pub fn with_coefficients(mut self, mode: CoefficientMode) -> Self {
        self.coefficients = mode;
        self
    }

    /// Drops the remembered active set.
    pub fn reset_warm_start(&mut self) {
        self.warm = None;
    }

    /// Active set the next solve starts from.
    pub fn warm_state(&self) -> Option<&ActiveSetState<T>> {
        self.warm.as_ref()
    }

    pub fn set_warm_state(&mut self, state: Option<ActiveSetState<T>>) {
        self.warm = state;
    }

    /// Stage-shifts the remembered active set, matching a shifted guess.
    pub fn shift_warm_state(&mut self, cfg: &MpcConfig<T>) {
        if let Some(w) = &mut self.warm {
            if w.status.len() == cfg.dims().n() {
                w.status = shift_stages(&w.status, cfg.dims());
                w.x = shift_stages(&w.x, cfg.dims());
            } else {
                self.warm = None;
            }
        }
    }

    /// Solves the quadratic-penalty problem from `z0`.
    pub fn solve<M: IoModel<T> + ?Sized>(
        &mut self,
        z0: &[T],
        ic: &InitialCondition<T>,
        model: &M,
        cfg: &MpcConfig<T>,
    ) -> Result<SolveReport<T>> {
        let map = PenaltyResidual::new(model, cfg, ic);
        self.solve_map(&map, z0)
    }

    /// Solves `min ||r(z)||^2` over `[p, q]` for a given residual map.
    pub fn solve_map<M: IoModel<T> + ?Sized>(
        &mut self,
        map: &PenaltyResidual<'_, T, M>,
        z0: &[T],
    ) -> Result<SolveReport<T>> {
        let start = Instant::now();
        let cfg = map.config();
        let d = *cfg.dims();
        let (n, m) = (d.n(), d.m());
        check_len("initial guess", n, z0.len())?;
        if map.model().dims() != d.model {
            return Err(crate::Error::Config(
                "model dimensions differ from the problem's".into(),
            ));
        }
        map.initial_condition().validate(&d)?;
        let (p, q) = (cfg.lower(), cfg.upper());

        let mut z = z0.to_vec();
        let clipped_start = cfg.clip(&mut z);
        let mut r = vec![T::zero(); m];
        map.eval(&z, &mut r);
        let mut phi = norm_sq(&r);

        let bvls = self.bvls.get_or_insert_with(|| Bvls::new(m));
        let mut g = vec![T::zero(); n];
        let mut pbar = vec![T::zero(); n];
        let mut qbar = vec![T::zero(); n];
        let mut at_lower = vec![false; n];
        let mut at_upper = vec![false; n];
        let mut trial = vec![T::zero(); n];
        let mut r_trial = vec![T::zero(); m];
        let mut warm = self.warm.take().filter(|w| w.status.len() == n);
        let mut trace = Vec::new();
        let (mut iters, mut changes, mut backtracks) = (0, 0, 0);
        let mut last_alpha = T::one();
        let mut status = SolveStatus::MaxIterations;
        let mut kkt;
        let cap = cfg.bvls_iteration_cap();

        loop {
            let gen;
            let view = match self.coefficients {
                CoefficientMode::Stored => {
                    map.linearize(&z, &mut self.lins)?;
                    JacobianView::new(d, map.weights(), &self.lins)?
                }
                CoefficientMode::OnDemand => {
                    for step in 1..=d.pred_horizon {
                        map.linearize_step(&z, step).map_err(|e| match e {
                            crate::Error::IllPosedModel { rcond, .. } => {
                                crate::Error::IllPosedModel { step, rcond }
                            }
                            other => other,
                        })?;
                    }
                    let zc = z.clone();
                    gen = move |step: usize| {
                        map.linearize_step(&zc, step)
                            .unwrap_or_else(|_| StageLinearization::zeros(d.model))
                    };
                    JacobianView::on_demand(d, map.weights(), &gen)?
                }
            };
            let op: &dyn ColumnOperator<T> = match self.linalg {
                LinearAlgebra::Structured => &view,
                LinearAlgebra::Dense => {
                    let dense = self.dense.get_or_insert_with(|| DenseJacobian::zeros(m, n));
                    dense.assign_from(&view);
                    dense
                }
            };

            for (j, gj) in g.iter_mut().enumerate() {
                *gj = op.dot(j + 1, &r);
                at_lower[j] = z[j] <= p[j];
                at_upper[j] = z[j] >= q[j];
            }
            kkt = kkt_check(&g, &at_lower, &at_upper, cfg.gamma);
            if kkt.optimal {
                status = SolveStatus::Converged;
                break;
            }
            if iters >= cfg.max_iters {
                break;
            }

            for j in 0..n {
                pbar[j] = p[j] - z[j];
                qbar[j] = q[j] - z[j];
            }
            let tol = cfg.bvls_tol * norm_sq(&r).sqrt();
            let sol = bvls.solve(op, &r, &pbar, &qbar, warm.as_ref(), tol, cap)?;
            iters += 1;
            changes += sol.active_set_changes;
            let dz = sol.x;
            let dtdz = dot(&g, &dz);
            warm = Some(sol.state);
            if !(dtdz < T::zero()) {
                status = SolveStatus::Stalled;
                break;
            }

            let bt = backtrack(
                phi,
                dtdz,
                |alpha, out| {
                    for j in 0..n {
                        trial[j] = (z[j] + alpha * dz[j]).max(p[j]).min(q[j]);
                    }
                    map.eval(&trial, out);
                    norm_sq(out)
                },
                &mut r_trial,
                cfg.c,
                cfg.tau,
                cfg.line_search,
            );
            backtracks += bt.cuts;
            if bt.stalled {
                status = SolveStatus::Stalled;
                break;
            }
            let mut violation = T::zero();
            for j in 0..n {
                violation = violation.max(p[j] - trial[j]).max(trial[j] - q[j]);
            }
            z.copy_from_slice(&trial);
            std::mem::swap(&mut r, &mut r_trial);
            trace.push(IterationRecord {
                psi: phi,
                phi: bt.phi,
                alpha: bt.alpha,
                dtdz,
                backtracks: bt.cuts,
                bvls_changes: changes,
                bound_violation: violation,
            });
            phi = bt.phi;
            last_alpha = bt.alpha;
        }

        let mut lambda_p = vec![T::zero(); n];
        let mut lambda_q = vec![T::zero(); n];
        for j in 0..n {
            match (at_lower[j], at_upper[j]) {
                (true, false) => lambda_p[j] = g[j],
                (false, true) => lambda_q[j] = -g[j],
                _ => {}
            }
        }
        let h = build_equality_residual(&z, map.initial_condition(), map.model(), cfg)?;
        self.warm = warm;
        Ok(SolveReport {
            z_star: z,
            phi,
            lambda_p,
            lambda_q,
            iters,
            bvls_changes: changes,
            ls_backtracks: backtracks,
            converged: status == SolveStatus::Converged,
            status,
            clipped_start,
            kkt_violation: kkt.worst_violation,
            last_alpha,
            h_inf: norm_inf(&h),
            trace,
            elapsed: start.elapsed(),
        })
    }
}

/// One-shot quadratic-penalty solve with a fresh workspace.
pub fn solve_bvnlls<T: Scalar, M: IoModel<T> + ?Sized>(
    z0: &[T],
    ic: &InitialCondition<T>,
    model: &M,
    cfg: &MpcConfig<T>,
) -> Result<SolveReport<T>> {
    Solver::new().solve(z0, ic, model, cfg)
}

/// Settings of the multiplier loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlmOptions<T> {
    pub outer_cap: usize,
    /// Stop once `||h||_inf` reaches this.
    pub feasibility_target: T,
    /// First penalty; `None` uses the configured `rho`.
    pub rho0: Option<T>,
    /// Penalty growth factor per outer iteration.
    pub rho_growth: T,
}

impl<T: Scalar> Default for BlmOptions<T> {
    fn default() -> Self {
        Self {
            outer_cap: 10,
            feasibility_target: T::lit(1e-8),
            rho0: None,
            rho_growth: T::lit(10.0),
        }
    }
}

/// Result of [`blm_solve`].
#[derive(Debug, Clone)]
pub struct BlmReport<T> {
    /// Report of the last inner solve, or of the most feasible one when
    /// the cap was hit.
    pub report: SolveReport<T>,
    /// Multipliers entering each outer iteration, plus the final ones.
    pub lambda_trace: Vec<Vec<T>>,
    pub rho_trace: Vec<T>,
    /// `||h||_inf` after each outer iteration.
    pub h_inf_trace: Vec<T>,
    pub converged: bool,
}

/// Bound-constrained Lagrangian loop: repeated solves of the shifted
/// residual with `Lambda <- Lambda + rho_i h(z*)` and a growing penalty.
pub fn blm_solve<T: Scalar, M: IoModel<T> + ?Sized>(
    z0: &[T],
    ic: &InitialCondition<T>,
    model: &M,
    cfg: &MpcConfig<T>,
    opts: &BlmOptions<T>,
) -> Result<BlmReport<T>> {
    let d = cfg.dims();
    let mut lambda = vec![T::zero(); d.n_eq()];
    let mut rho = opts.rho0.unwrap_or(cfg.rho());
    let mut z = z0.to_vec();
    let mut solver = Solver::new();
    let mut lambda_trace = vec![lambda.clone()];
    let mut rho_trace = Vec::new();
    let mut h_inf_trace = Vec::new();
    let mut best: Option<SolveReport<T>> = None;
    let mut converged = false;
    for _ in 0..opts.outer_cap.max(1) {
        let map = PenaltyResidual::with_multipliers(model, cfg, ic, &lambda, rho);
        let rep = solver.solve_map(&map, &z)?;
        let h = build_equality_residual(&rep.z_star, ic, model, cfg)?;
        rho_trace.push(rho);
        h_inf_trace.push(rep.h_inf);
        for (l, &hv) in lambda.iter_mut().zip(&h) {
            *l = *l + rho * hv;
        }
        lambda_trace.push(lambda.clone());
        z.clone_from(&rep.z_star);
        let done = rep.h_inf <= opts.feasibility_target;
        if done {
            converged = rep.converged;
            best = Some(rep);
            break;
        }
        if best.as_ref().map_or(true, |b| rep.h_inf <= b.h_inf) {
            best = Some(rep);
        }
        rho = rho * opts.rho_growth;
    }
    Ok(BlmReport {
        report: best.expect("at least one outer iteration"),
        lambda_trace,
        rho_trace,
        h_inf_trace,
        converged,
    })
}

/// Lower/upper status of `z` against `[p, q]`, as used by the stop test.
pub fn bound_status<T: Scalar>(z: &[T], cfg: &MpcConfig<T>) -> Vec<BoundState> {
    z.iter()
        .zip(cfg.lower().iter().zip(cfg.upper()))
        .map(|(&v, (&lo, &hi))| {
            if v <= lo {
                BoundState::Lower
            } else if v >= hi {
                BoundState::Upper
            } else {
                BoundState::Free
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kkt_examples() {
        let none = [false, false];
        assert!(kkt_check(&[0.0, 0.0], &none, &none, 1e-6).optimal);
        let k = kkt_check(&[0.5], &[true], &[false], 1e-6);
        assert!(k.optimal);
        let k = kkt_check(&[1e-3], &[false], &[false], 1e-6);
        assert!(!k.optimal);
        assert_eq!(k.worst_violation, 1e-3);
        assert!(!kkt_check(&[-0.5], &[true], &[false], 1e-6).optimal);
        assert!(!kkt_check(&[0.5], &[false], &[true], 1e-6).optimal);
        assert!(kkt_check(&[7.0], &[true], &[true], 1e-6).optimal);
    }

    fn square_minus_one(z0: f64, c: f64, rule: LineSearchRule) -> Backtrack<f64> {
        // r(z) = z^2 - 1, Gauss-Newton step from z0
        let r0 = z0 * z0 - 1.0;
        let jac = 2.0 * z0;
        let dz = -r0 / jac;
        let d = jac * r0;
        let mut r = [0.0];
        backtrack(
            r0 * r0,
            d * dz,
            |a, out| {
                let z = z0 + a * dz;
                out[0] = z * z - 1.0;
                out[0] * out[0]
            },
            &mut r,
            c,
            0.5,
            rule,
        )
    }

    #[test]
    fn backtrack_linear_takes_full_step() {
        // r(z) = 3 z - 1 from z = 2: the Gauss-Newton step is exact
        let dz = -5.0 / 3.0;
        let mut r = [0.0];
        let bt = backtrack(
            25.0,
            15.0 * dz,
            |a, out| {
                out[0] = 3.0 * (2.0 + a * dz) - 1.0;
                out[0] * out[0]
            },
            &mut r,
            1e-4,
            0.5,
            LineSearchRule::Armijo,
        );
        assert_eq!((bt.alpha, bt.cuts), (1.0, 0));
    }

    #[test]
    fn backtrack_nonlinear_satisfies_armijo() {
        for z0 in [2.0, 0.3, 0.1] {
            let r0: f64 = z0 * z0 - 1.0;
            let dz = -r0 / (2.0 * z0);
            let dtdz = 2.0 * z0 * r0 * dz;
            let bt = square_minus_one(z0, 1e-4, LineSearchRule::Armijo);
            assert!(!bt.stalled);
            assert!(bt.phi <= r0 * r0 + 1e-4 * bt.alpha * dtdz);
        }
        let small = square_minus_one(0.1, 1e-4, LineSearchRule::Armijo);
        let large = square_minus_one(0.1, 0.4999, LineSearchRule::Armijo);
        assert!(small.cuts > 0);
        assert!(large.alpha <= small.alpha);
    }

    #[test]
    fn geometric_rule_is_weaker() {
        let a = square_minus_one(0.1, 0.4999, LineSearchRule::Armijo);
        let g = square_minus_one(0.1, 0.4999, LineSearchRule::GeometricTheta);
        assert!(g.alpha >= a.alpha);
    }
}
