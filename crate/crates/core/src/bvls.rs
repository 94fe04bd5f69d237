//! Bounded-variable least squares, `min ||J x + b||^2` s.t. `pbar <= x <= qbar`,
//! by a primal active-set method on top of [`ThinQr`].
//!
//! Each inner iteration solves the LS problem over the free set and walks
//! toward its solution until the first bound blocks; that variable is bound
//! and its column deleted from the factorization. Once the free-set solution
//! is feasible, the bound variable with the most negative multiplier is
//! released. A released variable whose very next LS step pushes it straight
//! back through the bound it left is restored and skipped until progress is
//! made elsewhere.

use crate::error::{check_len, Error, Result};
use crate::jac_ops::ColumnOperator;
use crate::recqr::ThinQr;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundState {
    Free,
    Lower,
    Upper,
}

/// Partition of the variables into free, lower-bound and upper-bound sets,
/// with the iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSetState<T> {
    pub status: Vec<BoundState>,
    pub x: Vec<T>,
}

impl<T: Scalar> ActiveSetState<T> {
    /// 1-based indices with the given status.
    pub fn indices(&self, which: BoundState) -> Vec<usize> {
        self.status
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == which)
            .map(|(j, _)| j + 1)
            .collect()
    }
}

/// Outcome of one BVLS solve.
#[derive(Debug, Clone)]
pub struct BvlsResult<T> {
    pub x: Vec<T>,
    pub lambda_lower: Vec<T>,
    pub lambda_upper: Vec<T>,
    pub state: ActiveSetState<T>,
    /// Bind and release operations performed.
    pub active_set_changes: usize,
    /// Free-set LS solves.
    pub ls_solves: usize,
    pub converged: bool,
    /// Stopped because every candidate for release was blocked by the
    /// anti-cycling rule while still violating the multiplier test.
    pub stalled: bool,
    /// `||J x + b||^2`.
    pub objective: T,
}

/// Reusable BVLS workspace.
#[derive(Debug, Clone)]
pub struct Bvls<T> {
    qr: ThinQr<T>,
    b_eff: Vec<T>,
    resid: Vec<T>,
}

impl<T: Scalar> Bvls<T> {
    pub fn new(m: usize) -> Self {
        Self {
            qr: ThinQr::new(m),
            b_eff: vec![T::zero(); m],
            resid: vec![T::zero(); m],
        }
    }

    /// Factorization left behind by the last solve.
    pub fn qr(&self) -> &ThinQr<T> {
        &self.qr
    }

    #[allow(clippy::too_many_arguments)]
    pub fn solve<O: ColumnOperator<T> + ?Sized>(
        &mut self,
        op: &O,
        b: &[T],
        pbar: &[T],
        qbar: &[T],
        warm: Option<&ActiveSetState<T>>,
        tol: T,
        max_iter: usize,
    ) -> Result<BvlsResult<T>> {
        let (m, n) = (op.nrows(), op.ncols());
        check_len("right-hand side", m, b.len())?;
        check_len("lower bounds", n, pbar.len())?;
        check_len("upper bounds", n, qbar.len())?;
        if pbar.iter().zip(qbar).any(|(p, q)| !(p <= q)) {
            return Err(Error::Config(
                "lower bounds must not exceed upper bounds".into(),
            ));
        }
        if let Some(w) = warm {
            check_len("warm-start status", n, w.status.len())?;
        }
        if self.b_eff.len() != m {
            *self = Self::new(m);
        }

        let mut status = vec![BoundState::Free; n];
        let mut x = vec![T::zero(); n];
        for j in 0..n {
            let (p, q) = (pbar[j], qbar[j]);
            let wanted = match warm {
                Some(w) => w.status[j],
                None => {
                    let x0 = T::zero().max(p).min(q);
                    if x0 == p && p.is_finite_bound() {
                        BoundState::Lower
                    } else if x0 == q && q.is_finite_bound() {
                        BoundState::Upper
                    } else {
                        BoundState::Free
                    }
                }
            };
            let (st, v) = match wanted {
                BoundState::Lower if p.is_finite_bound() => (BoundState::Lower, p),
                BoundState::Upper if q.is_finite_bound() => (BoundState::Upper, q),
                _ if p == q => (BoundState::Lower, p),
                _ => (BoundState::Free, T::zero().max(p).min(q)),
            };
            status[j] = st;
            x[j] = v;
        }
        let free: Vec<usize> = (1..=n)
            .filter(|&c| status[c - 1] == BoundState::Free)
            .collect();
        self.qr.clear();
        self.qr.set_rhs(b)?;
        for &c in &free {
            self.qr.insert(op, c)?;
        }

        let mut changes = 0usize;
        let mut ls_solves = 0usize;
        let mut ineligible = vec![false; n];
        let mut just_released: Option<(usize, BoundState)> = None;
        let mut converged = false;
        let mut stalled = false;
        let mut grad = vec![T::zero(); n];

        'outer: loop {
            loop {
                if self.qr.is_empty() {
                    break;
                }
                self.effective_rhs(op, b, &x, &status);
                self.qr.set_rhs(&self.b_eff)?;
                let s = self.qr.solve_ls()?;
                ls_solves += 1;

                let mut alpha = T::one();
                let mut blocker: Option<(usize, BoundState)> = None;
                for (k, &c) in self.qr.free().iter().enumerate() {
                    let j = c - 1;
                    let (target, bound, side) = if s[k] < pbar[j] {
                        (s[k], pbar[j], BoundState::Lower)
                    } else if s[k] > qbar[j] {
                        (s[k], qbar[j], BoundState::Upper)
                    } else {
                        continue;
                    };
                    let a = ((bound - x[j]) / (target - x[j]))
                        .max(T::zero())
                        .min(T::one());
                    if blocker.is_none() || a < alpha {
                        alpha = a;
                        blocker = Some((c, side));
                    }
                }
                let released = just_released.take();
                let Some((c, side)) = blocker else {
                    for (k, &cf) in self.qr.free().iter().enumerate() {
                        x[cf - 1] = s[k];
                    }
                    ineligible.iter_mut().for_each(|e| *e = false);
                    break;
                };
                if let Some((t, from)) = released {
                    if t == c && from == side && alpha == T::zero() {
                        status[t - 1] = from;
                        x[t - 1] = if from == BoundState::Lower {
                            pbar[t - 1]
                        } else {
                            qbar[t - 1]
                        };
                        self.qr.delete(t)?;
                        ineligible[t - 1] = true;
                        changes += 1;
                        break;
                    }
                }
                let frees: Vec<usize> = self.qr.free().to_vec();
                for (k, &cf) in frees.iter().enumerate() {
                    let j = cf - 1;
                    x[j] = (x[j] + alpha * (s[k] - x[j])).max(pbar[j]).min(qbar[j]);
                }
                if alpha > T::zero() {
                    ineligible.iter_mut().for_each(|e| *e = false);
                }
                let j = c - 1;
                status[j] = side;
                x[j] = if side == BoundState::Lower {
                    pbar[j]
                } else {
                    qbar[j]
                };
                self.qr.delete(c)?;
                changes += 1;
                if changes >= max_iter {
                    break 'outer;
                }
            }

            self.residual(op, b, &x);
            let mut best: Option<(usize, T)> = None;
            let mut blocked_violation = false;
            for j in 0..n {
                let lam = match status[j] {
                    BoundState::Free => continue,
                    BoundState::Lower => op.dot(j + 1, &self.resid),
                    BoundState::Upper => -op.dot(j + 1, &self.resid),
                };
                if lam < -tol {
                    if ineligible[j] {
                        blocked_violation = true;
                    } else if best.map_or(true, |(_, bl)| lam < bl) {
                        best = Some((j, lam));
                    }
                }
            }
            let Some((j, _)) = best else {
                converged = !blocked_violation;
                stalled = blocked_violation;
                break;
            };
            if changes >= max_iter {
                break;
            }
            let from = status[j];
            status[j] = BoundState::Free;
            self.qr.insert(op, j + 1)?;
            just_released = Some((j + 1, from));
            changes += 1;
        }

        self.residual(op, b, &x);
        let mut lambda_lower = vec![T::zero(); n];
        let mut lambda_upper = vec![T::zero(); n];
        for j in 0..n {
            grad[j] = op.dot(j + 1, &self.resid);
            match status[j] {
                BoundState::Lower => lambda_lower[j] = grad[j],
                BoundState::Upper => lambda_upper[j] = -grad[j],
                BoundState::Free => {}
            }
        }
        let objective = self.resid.iter().map(|&v| v * v).sum();
        Ok(BvlsResult {
            x: x.clone(),
            lambda_lower,
            lambda_upper,
            state: ActiveSetState { status, x },
            active_set_changes: changes,
            ls_solves,
            converged,
            stalled,
            objective,
        })
    }

    fn effective_rhs<O: ColumnOperator<T> + ?Sized>(
        &mut self,
        op: &O,
        b: &[T],
        x: &[T],
        status: &[BoundState],
    ) {
        self.b_eff.copy_from_slice(b);
        for (j, st) in status.iter().enumerate() {
            if *st != BoundState::Free && x[j] != T::zero() {
                op.axpy(j + 1, x[j], &mut self.b_eff);
            }
        }
    }

    fn residual<O: ColumnOperator<T> + ?Sized>(&mut self, op: &O, b: &[T], x: &[T]) {
        self.resid.copy_from_slice(b);
        for (j, &v) in x.iter().enumerate() {
            if v != T::zero() {
                op.axpy(j + 1, v, &mut self.resid);
            }
        }
    }
}

/// One-shot BVLS solve; see [`Bvls::solve`].
pub fn solve_bvls<T: Scalar, O: ColumnOperator<T> + ?Sized>(
    op: &O,
    b: &[T],
    pbar: &[T],
    qbar: &[T],
    warm: Option<&ActiveSetState<T>>,
    tol: T,
    max_iter: usize,
) -> Result<BvlsResult<T>> {
    Bvls::new(op.nrows()).solve(op, b, pbar, qbar, warm, tol, max_iter)
}

/// Worst violation of the BVLS optimality conditions at `x`, using only
/// column inner products: `|g_j|` on free variables, the negative part of
/// the multiplier on bound ones.
pub fn kkt_residual<T: Scalar, O: ColumnOperator<T> + ?Sized>(
    op: &O,
    b: &[T],
    state: &ActiveSetState<T>,
) -> T {
    let mut r = b.to_vec();
    for (j, &v) in state.x.iter().enumerate() {
        if v != T::zero() {
            op.axpy(j + 1, v, &mut r);
        }
    }
    let mut worst = T::zero();
    for (j, st) in state.status.iter().enumerate() {
        let g = op.dot(j + 1, &r);
        let v = match st {
            BoundState::Free => g.abs(),
            BoundState::Lower => (-g).max(T::zero()),
            BoundState::Upper => g.max(T::zero()),
        };
        worst = worst.max(v);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jac_ops::DenseJacobian;

    fn eye(k: usize) -> DenseJacobian<f64> {
        let mut d = DenseJacobian::zeros(k, k);
        for i in 1..=k {
            d.col_mut(i)[i - 1] = 1.0;
        }
        d
    }

    #[test]
    fn interior_diagonal() {
        let j = eye(2);
        let r = solve_bvls(&j, &[-0.5, 0.3], &[-1.0; 2], &[1.0; 2], None, 1e-8, 20).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 0.5).abs() < 1e-15 && (r.x[1] + 0.3).abs() < 1e-15);
        assert!(r
            .lambda_lower
            .iter()
            .chain(&r.lambda_upper)
            .all(|v| *v == 0.0));
    }

    #[test]
    fn clamped_diagonal() {
        let j = eye(2);
        let r = solve_bvls(&j, &[-2.0, 0.5], &[-1.0; 2], &[1.0; 2], None, 1e-8, 20).unwrap();
        assert!(r.converged);
        assert_eq!(r.x[0], 1.0);
        assert!((r.x[1] + 0.5).abs() < 1e-15);
        assert!((r.lambda_upper[0] - 1.0).abs() < 1e-15);
        assert_eq!(r.state.status[0], BoundState::Upper);
    }

    #[test]
    fn warm_restart_is_idle() {
        let mut j = DenseJacobian::zeros(4, 3);
        let vals = [2.0, 1.0, 0.0, 0.5, 0.3, 1.0, 1.0, 0.0, -1.0, 0.2, 0.7, 1.5];
        for (k, v) in vals.iter().enumerate() {
            j.col_mut(k / 4 + 1)[k % 4] = *v;
        }
        let b = [-3.0, 2.0, 1.0, -4.0];
        let (p, q) = ([-0.5, -1.0, 0.0], [0.5, 1.0, 2.0]);
        let cold = solve_bvls(&j, &b, &p, &q, None, 1e-10, 30).unwrap();
        assert!(cold.converged);
        let warm = solve_bvls(&j, &b, &p, &q, Some(&cold.state), 1e-10, 30).unwrap();
        assert_eq!(warm.active_set_changes, 0);
        for (a, c) in warm.x.iter().zip(&cold.x) {
            assert!(f64::abs(a - c) < 1e-12);
        }
    }

    #[test]
    fn fixed_variable_stays_put() {
        let j = eye(2);
        let r = solve_bvls(&j, &[-2.0, -2.0], &[0.3, -1.0], &[0.3, 1.0], None, 1e-8, 20).unwrap();
        assert_eq!(r.x, vec![0.3, 1.0]);
    }
}
