//! Plant simulation for an implicit I/O model: each step solves
//! `M(y_new, ...) = 0` for the newest output.

use std::sync::Arc;

use cfmpc_core::model::{eval_residual, linearize};
use cfmpc_core::{Error, IoModel, Result};

const NEWTON_ITERS: usize = 50;
const NEWTON_TOL: f64 = 1e-14;

pub struct Plant {
    model: Arc<dyn IoModel<f64>>,
    /// Last `na` outputs, oldest first.
    y_hist: Vec<f64>,
    /// Last `nb - 1` inputs, oldest first.
    u_hist: Vec<f64>,
}

impl Plant {
    /// Plant resting at a steady operating point.
    pub fn at_rest(model: Arc<dyn IoModel<f64>>, y: &[f64], u: &[f64]) -> Result<Self> {
        let d = model.dims();
        if d.exo_lags > 0 {
            return Err(Error::Config(
                "plant models with exogenous inputs are not supported".into(),
            ));
        }
        if y.len() != d.outputs || u.len() != d.inputs {
            return Err(Error::Config(
                "plant operating point has the wrong size".into(),
            ));
        }
        Ok(Self {
            y_hist: y.repeat(d.out_lags),
            u_hist: u.repeat(d.in_lags - 1),
            model,
        })
    }

    /// Current (noise-free) output.
    pub fn output(&self) -> &[f64] {
        let ny = self.model.dims().outputs;
        &self.y_hist[self.y_hist.len() - ny..]
    }

    /// Applies `u` for one sample and returns the next output.
    pub fn step(&mut self, u: &[f64]) -> Result<Vec<f64>> {
        let d = self.model.dims();
        let ny = d.outputs;
        let mut uh = self.u_hist.clone();
        uh.extend_from_slice(u);
        let mut yh = self.y_hist.clone();
        yh.extend_from_slice(self.output().to_vec().as_slice());
        let new = yh.len() - ny;
        for _ in 0..NEWTON_ITERS {
            let res = eval_residual(self.model.as_ref(), &yh, &uh, &[])?;
            if res.iter().all(|r| {
                r.abs() <= NEWTON_TOL * (1.0 + yh[new..].iter().fold(0.0f64, |a, v| a.max(v.abs())))
            }) {
                break;
            }
            let lin = linearize(self.model.as_ref(), &yh, &uh, &[])?;
            let dy = solve_dense(lin.a(0), &res, ny).ok_or(Error::IllPosedModel {
                step: 0,
                rcond: 0.0,
            })?;
            for (y, d) in yh[new..].iter_mut().zip(&dy) {
                *y -= d;
            }
        }
        let y_new = yh[new..].to_vec();
        if d.in_lags > 1 {
            self.u_hist.drain(..d.inputs);
            self.u_hist.extend_from_slice(u);
        }
        self.y_hist.drain(..ny);
        self.y_hist.extend_from_slice(&y_new);
        Ok(y_new)
    }
}

/// Solves the row-major `k x k` system `a x = b` by Gaussian elimination
/// with partial pivoting.
fn solve_dense(a: &[f64], b: &[f64], k: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for c in 0..k {
        let p = (c..k).max_by(|&i, &j| m[i * k + c].abs().total_cmp(&m[j * k + c].abs()))?;
        if m[p * k + c] == 0.0 {
            return None;
        }
        if p != c {
            for j in 0..k {
                m.swap(p * k + j, c * k + j);
            }
            x.swap(p, c);
        }
        for i in c + 1..k {
            let f = m[i * k + c] / m[c * k + c];
            for j in c..k {
                m[i * k + j] -= f * m[c * k + j];
            }
            x[i] -= f * x[c];
        }
    }
    for c in (0..k).rev() {
        let mut s = x[c];
        for j in c + 1..k {
            s -= m[c * k + j] * x[j];
        }
        x[c] = s / m[c * k + c];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::builtin;

    #[test]
    fn steady_plant_stays_put() {
        let m = builtin("cstr").unwrap();
        let mut p = Plant::at_rest(m.model.clone(), &m.y_nominal, &m.u_nominal).unwrap();
        let y = p.step(&m.u_nominal).unwrap();
        for (a, b) in y.iter().zip(&m.y_nominal) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lti_plant_matches_recursion() {
        let m = builtin("lti-arx-demo").unwrap();
        let mut p = Plant::at_rest(m.model.clone(), &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let y1 = p.step(&[1.0, 0.0]).unwrap();
        // y1 = -A1 y0 - A2 y-1 - B1 u0 with zero history apart from u0.
        assert!((y1[0] - 0.5).abs() < 1e-14);
        assert!(y1[1].abs() < 1e-14);
    }

    #[test]
    fn dense_solve_pivots() {
        let x = solve_dense(&[0.0, 1.0, 2.0, 0.0], &[3.0, 4.0], 2).unwrap();
        assert_eq!(x, vec![2.0, 3.0]);
    }
}
