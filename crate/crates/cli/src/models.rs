//! Built-in prediction and plant models.

use std::sync::Arc;

use cfmpc_core::{ArxModel, IoModel, ModelDims, StageLinearization};

/// A named model together with its nominal operating point.
#[derive(Clone)]
pub struct BuiltinModel {
    pub name: &'static str,
    pub model: Arc<dyn IoModel<f64>>,
    pub y_nominal: Vec<f64>,
    pub u_nominal: Vec<f64>,
}

impl std::fmt::Debug for BuiltinModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BuiltinModel")
            .field("name", &self.name)
            .field("dims", &self.model.dims())
            .finish()
    }
}

pub const MODEL_NAMES: &[&str] = &["lti-arx-demo", "cstr", "cstr-fine"];

pub fn builtin(name: &str) -> Option<BuiltinModel> {
    match name {
        "lti-arx-demo" => Some(BuiltinModel {
            name: "lti-arx-demo",
            model: Arc::new(lti_arx_demo()),
            y_nominal: vec![0.0; 2],
            u_nominal: vec![0.0; 2],
        }),
        "cstr" | "cstr-fine" => {
            let cstr = if name == "cstr" {
                Cstr::default()
            } else {
                Cstr::fine()
            };
            let u = vec![Cstr::NOMINAL_QC / Cstr::U_SCALE];
            let y = cstr.scaled_steady_state(u[0]);
            Some(BuiltinModel {
                name: if name == "cstr" { "cstr" } else { "cstr-fine" },
                model: Arc::new(cstr),
                y_nominal: y,
                u_nominal: u,
            })
        }
        _ => None,
    }
}

/// Stable two-input, two-output ARX model with two output lags and four
/// input lags, `A_0 = I`.
pub fn lti_arx_demo() -> ArxModel<f64> {
    let dims = ModelDims::io(2, 4, 2, 2).expect("valid demo dimensions");
    let mut lin = StageLinearization::zeros(dims);
    lin.a_mut(0).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    lin.a_mut(1).copy_from_slice(&[-0.9, 0.1, -0.05, -0.7]);
    lin.a_mut(2).copy_from_slice(&[0.2, 0.0, 0.02, 0.1]);
    lin.b_mut(1).copy_from_slice(&[-0.5, 0.1, 0.0, -0.4]);
    lin.b_mut(2).copy_from_slice(&[-0.2, 0.0, 0.1, -0.2]);
    lin.b_mut(3).copy_from_slice(&[-0.1, 0.05, 0.0, -0.1]);
    lin.b_mut(4).copy_from_slice(&[-0.05, 0.0, 0.02, -0.05]);
    ArxModel::lti(lin)
}

/// Exothermic first-order reaction in a cooled CSTR, manipulated through
/// the coolant flow and discretized by fixed-step RK4.
///
/// Outputs are scaled as `y = (10 C_A, T / 100)`, the input as
/// `u = q_c / 100`. As an I/O model, `M = y_k - F(y_{k-1}, u_{k-1})`
/// where `F` is the sampled state map.
#[derive(Debug, Clone, PartialEq)]
pub struct Cstr {
    /// Sampling time, min.
    pub ts: f64,
    /// RK4 steps per sample.
    pub substeps: usize,
    pub q: f64,
    pub v: f64,
    pub ca0: f64,
    pub t0: f64,
    pub tc0: f64,
    pub dh: f64,
    pub rho: f64,
    pub rho_c: f64,
    pub cp: f64,
    pub cp_c: f64,
    pub k0: f64,
    pub e_over_r: f64,
    pub ha: f64,
}

impl Default for Cstr {
    fn default() -> Self {
        Self {
            ts: 0.1,
            substeps: 4,
            q: 100.0,
            v: 100.0,
            ca0: 1.0,
            t0: 350.0,
            tc0: 350.0,
            dh: -2e5,
            rho: 1e3,
            rho_c: 1e3,
            cp: 1.0,
            cp_c: 1.0,
            k0: 7.2e10,
            e_over_r: 1e4,
            ha: 7e5,
        }
    }
}

type Mat2 = [[f64; 2]; 2];

impl Cstr {
    pub const NOMINAL_QC: f64 = 103.41;
    pub const CA_SCALE: f64 = 10.0;
    pub const T_SCALE: f64 = 0.01;
    pub const U_SCALE: f64 = 100.0;

    /// Same plant integrated with a finer step.
    pub fn fine() -> Self {
        Self {
            substeps: 40,
            ..Self::default()
        }
    }

    /// Continuous dynamics in physical units and their partial derivatives
    /// with respect to the state and the coolant flow.
    pub fn rhs(&self, x: [f64; 2], qc: f64) -> ([f64; 2], Mat2, [f64; 2]) {
        let [ca, t] = x;
        let ex = (-self.e_over_r / t).exp();
        let rate = self.k0 * ca * ex;
        let drate_dca = self.k0 * ex;
        let drate_dt = rate * self.e_over_r / (t * t);
        let dil = self.q / self.v;
        let heat = -self.dh / (self.rho * self.cp);
        let cool = self.rho_c * self.cp_c / (self.rho * self.cp * self.v);
        let eq = (-self.ha / (qc * self.rho_c * self.cp_c)).exp();
        let g = qc * (1.0 - eq);
        let dg = (1.0 - eq) - eq * self.ha / (qc * self.rho_c * self.cp_c);

        let f = [
            dil * (self.ca0 - ca) - rate,
            dil * (self.t0 - t) + heat * rate + cool * g * (self.tc0 - t),
        ];
        let fx = [
            [-dil - drate_dca, -drate_dt],
            [heat * drate_dca, -dil + heat * drate_dt - cool * g],
        ];
        let fu = [0.0, cool * dg * (self.tc0 - t)];
        (f, fx, fu)
    }

    /// One sample of the state map with sensitivities `dx+/dx`, `dx+/dqc`.
    pub fn step(&self, x: [f64; 2], qc: f64) -> ([f64; 2], Mat2, [f64; 2]) {
        let h = self.ts / self.substeps as f64;
        let mut x = x;
        let mut sx: Mat2 = [[1.0, 0.0], [0.0, 1.0]];
        let mut su = [0.0, 0.0];
        for _ in 0..self.substeps {
            let (k1, a1, b1) = self.rhs(x, qc);
            let (d1x, d1u) = (mat_mul(&a1, &sx), add(&mat_vec(&a1, &su), &b1));

            let x2 = axpy(&x, 0.5 * h, &k1);
            let (k2, a2, b2) = self.rhs(x2, qc);
            let s2x = mat_axpy(&sx, 0.5 * h, &d1x);
            let s2u = axpy(&su, 0.5 * h, &d1u);
            let (d2x, d2u) = (mat_mul(&a2, &s2x), add(&mat_vec(&a2, &s2u), &b2));

            let x3 = axpy(&x, 0.5 * h, &k2);
            let (k3, a3, b3) = self.rhs(x3, qc);
            let s3x = mat_axpy(&sx, 0.5 * h, &d2x);
            let s3u = axpy(&su, 0.5 * h, &d2u);
            let (d3x, d3u) = (mat_mul(&a3, &s3x), add(&mat_vec(&a3, &s3u), &b3));

            let x4 = axpy(&x, h, &k3);
            let (k4, a4, b4) = self.rhs(x4, qc);
            let s4x = mat_axpy(&sx, h, &d3x);
            let s4u = axpy(&su, h, &d3u);
            let (d4x, d4u) = (mat_mul(&a4, &s4x), add(&mat_vec(&a4, &s4u), &b4));

            let w = h / 6.0;
            for i in 0..2 {
                x[i] += w * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                su[i] += w * (d1u[i] + 2.0 * d2u[i] + 2.0 * d3u[i] + d4u[i]);
                for j in 0..2 {
                    sx[i][j] += w * (d1x[i][j] + 2.0 * d2x[i][j] + 2.0 * d3x[i][j] + d4x[i][j]);
                }
            }
        }
        (x, sx, su)
    }

    /// Steady state of the continuous dynamics for a coolant flow, by Newton
    /// iteration from the upper operating branch.
    pub fn steady_state(&self, qc: f64) -> [f64; 2] {
        let mut x = [0.1, 440.0];
        for _ in 0..100 {
            let (f, fx, _) = self.rhs(x, qc);
            let det = fx[0][0] * fx[1][1] - fx[0][1] * fx[1][0];
            let dx = [
                (fx[1][1] * f[0] - fx[0][1] * f[1]) / det,
                (-fx[1][0] * f[0] + fx[0][0] * f[1]) / det,
            ];
            x = [x[0] - dx[0], x[1] - dx[1]];
            if dx[0].abs() < 1e-16 && dx[1].abs() < 1e-13 {
                break;
            }
        }
        x
    }

    /// Steady state of the sampled map (matches the continuous one up to
    /// the RK4 fixed-point error), scaled.
    pub fn scaled_steady_state(&self, u: f64) -> Vec<f64> {
        let qc = u * Self::U_SCALE;
        let mut x = self.steady_state(qc);
        for _ in 0..50 {
            let (xn, sx, _) = self.step(x, qc);
            let g = [xn[0] - x[0], xn[1] - x[1]];
            let a = [[sx[0][0] - 1.0, sx[0][1]], [sx[1][0], sx[1][1] - 1.0]];
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            let dx = [
                (a[1][1] * g[0] - a[0][1] * g[1]) / det,
                (-a[1][0] * g[0] + a[0][0] * g[1]) / det,
            ];
            x = [x[0] - dx[0], x[1] - dx[1]];
            if dx[0].abs() < 1e-17 && dx[1].abs() < 1e-14 {
                break;
            }
        }
        vec![x[0] * Self::CA_SCALE, x[1] * Self::T_SCALE]
    }

    /// Steady scaled input and outputs producing concentration `ca`
    /// (mol/L), by bisection on the coolant flow over `[qc_lo, qc_hi]`.
    pub fn steady_for_concentration(
        &self,
        ca: f64,
        qc_lo: f64,
        qc_hi: f64,
    ) -> Option<(f64, Vec<f64>)> {
        let conc = |qc: f64| self.steady_state(qc)[0];
        let (mut lo, mut hi) = (qc_lo, qc_hi);
        let (flo, fhi) = (conc(lo) - ca, conc(hi) - ca);
        if flo * fhi > 0.0 {
            return None;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (conc(mid) - ca) * flo > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let u = 0.5 * (lo + hi) / Self::U_SCALE;
        Some((u, self.scaled_steady_state(u)))
    }
}

impl IoModel<f64> for Cstr {
    fn dims(&self) -> ModelDims {
        ModelDims::io(1, 1, 1, 2).expect("valid CSTR dimensions")
    }

    fn residual(&self, y: &[f64], u: &[f64], _s: &[f64], out: &mut [f64]) {
        let x = [y[0] / Self::CA_SCALE, y[1] / Self::T_SCALE];
        let (xn, _, _) = self.step(x, u[0] * Self::U_SCALE);
        out[0] = y[2] - xn[0] * Self::CA_SCALE;
        out[1] = y[3] - xn[1] * Self::T_SCALE;
    }

    fn jacobian(
        &self,
        y: &[f64],
        u: &[f64],
        _s: &[f64],
        lin: &mut StageLinearization<f64>,
    ) -> bool {
        let x = [y[0] / Self::CA_SCALE, y[1] / Self::T_SCALE];
        let (_, sx, su) = self.step(x, u[0] * Self::U_SCALE);
        let ys = [Self::CA_SCALE, Self::T_SCALE];
        lin.a_mut(0).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let a1 = lin.a_mut(1);
        for i in 0..2 {
            for j in 0..2 {
                a1[i * 2 + j] = -ys[i] * sx[i][j] / ys[j];
            }
        }
        let b1 = lin.b_mut(1);
        for i in 0..2 {
            b1[i] = -ys[i] * su[i] * Self::U_SCALE;
        }
        true
    }
}

fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn mat_vec(a: &Mat2, v: &[f64; 2]) -> [f64; 2] {
    [
        a[0][0] * v[0] + a[0][1] * v[1],
        a[1][0] * v[0] + a[1][1] * v[1],
    ]
}

fn mat_axpy(a: &Mat2, s: f64, b: &Mat2) -> Mat2 {
    [
        [a[0][0] + s * b[0][0], a[0][1] + s * b[0][1]],
        [a[1][0] + s * b[1][0], a[1][1] + s * b[1][1]],
    ]
}

fn add(a: &[f64; 2], b: &[f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

fn axpy(a: &[f64; 2], s: f64, b: &[f64; 2]) -> [f64; 2] {
    [a[0] + s * b[0], a[1] + s * b[1]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use cfmpc_core::model::{check_jacobian, eval_residual};

    #[test]
    fn cstr_steady_pair_has_zero_residual() {
        let m = builtin("cstr").unwrap();
        let y = [m.y_nominal.clone(), m.y_nominal.clone()].concat();
        let r = eval_residual(m.model.as_ref(), &y, &m.u_nominal, &[]).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12), "{r:?}");
    }

    #[test]
    fn cstr_nominal_matches_published_operating_point() {
        let x = Cstr::default().steady_state(Cstr::NOMINAL_QC);
        assert!((x[0] - 0.1).abs() < 1e-4);
        assert!((x[1] - 438.54).abs() < 0.01);
    }

    #[test]
    fn cstr_sensitivities_match_finite_differences() {
        let m = Cstr::default();
        let y = [0.9, 4.40, 1.05, 4.37];
        let dev = check_jacobian(&m, &y, &[1.01], &[], 1e-6).unwrap();
        assert!(dev < 1e-6, "{dev}");
    }

    #[test]
    fn concentration_targets_are_reachable() {
        let c = Cstr::default();
        let (u, y) = c.steady_for_concentration(0.115, 85.0, 110.0).unwrap();
        assert!((y[0] - 1.15).abs() < 1e-9);
        assert!(u > 1.03 && u < 1.1);
    }

    #[test]
    fn demo_is_stable_at_rest() {
        let m = builtin("lti-arx-demo").unwrap();
        let r = eval_residual(m.model.as_ref(), &[0.0; 6], &[0.0; 8], &[]).unwrap();
        assert_eq!(r, vec![0.0, 0.0]);
    }
}
