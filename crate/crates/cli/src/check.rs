//! Cross-checks of the matrix-free path against dense oracles.
//!
//! The oracles here share no code with the operators they test: the dense
//! Jacobian is assembled row block by row block from the linearized model
//! equations, the QR reference is nalgebra's Householder QR, and the
//! reference NLLS-box solver is a plain dense Gauss-Newton with its own
//! active-set BVLS.

use std::time::{Duration, Instant};

use cfmpc_core::InitialCondition;
use cfmpc_core::{
    IoModel, JacobianView, ModelDims, MpcConfig, PenaltyResidual, ProblemDims, Solver,
    StageLinearization, ThinQr,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest deviations found, one field per comparison.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeviationReport {
    pub instances: usize,
    /// `max |jix - J e_i| / max |J|`.
    pub jix_rel: f64,
    /// `max |jtix - J' x| / (max |J| ||x||_1)`.
    pub jtix_rel: f64,
    pub qr_q: f64,
    /// Relative to `max |R|`.
    pub qr_r_rel: f64,
    pub qr_orthogonality: f64,
    pub qr_structure_violations: usize,
    pub solve_instances: usize,
    /// `max ||z*_structured - z*_dense||_inf`.
    pub solve_inf: f64,
    /// Instances where either solver failed to converge.
    pub solve_failures: usize,
    pub elapsed: Duration,
}

/// Pass thresholds of [`DeviationReport::violations`].
#[derive(Debug, Clone, Copy)]
pub struct Thresholds {
    pub operator_rel: f64,
    pub qr: f64,
    pub orthogonality: f64,
    pub solve: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            operator_rel: 1e-12,
            qr: 1e-9,
            orthogonality: 1e-10,
            solve: 1e-8,
        }
    }
}

impl DeviationReport {
    /// Names of the comparisons that exceed their threshold.
    pub fn violations(&self, t: &Thresholds) -> Vec<&'static str> {
        let mut v = Vec::new();
        if !(self.jix_rel <= t.operator_rel) {
            v.push("jix");
        }
        if !(self.jtix_rel <= t.operator_rel) {
            v.push("jtix");
        }
        if !(self.qr_q <= t.qr && self.qr_r_rel <= t.qr) {
            v.push("qr-factors");
        }
        if !(self.qr_orthogonality <= t.orthogonality) {
            v.push("qr-orthogonality");
        }
        if self.qr_structure_violations > 0 {
            v.push("qr-structure");
        }
        if !(self.solve_inf <= t.solve) || self.solve_failures > 0 {
            v.push("solve");
        }
        v
    }

    fn absorb(&mut self, o: &DeviationReport) {
        self.instances += o.instances;
        self.jix_rel = self.jix_rel.max(o.jix_rel);
        self.jtix_rel = self.jtix_rel.max(o.jtix_rel);
        self.qr_q = self.qr_q.max(o.qr_q);
        self.qr_r_rel = self.qr_r_rel.max(o.qr_r_rel);
        self.qr_orthogonality = self.qr_orthogonality.max(o.qr_orthogonality);
        self.qr_structure_violations += o.qr_structure_violations;
        self.solve_instances += o.solve_instances;
        self.solve_inf = self.solve_inf.max(o.solve_inf);
        self.solve_failures += o.solve_failures;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    /// Run the solver comparison on every `solve_every`-th instance; 0 skips it.
    pub solve_every: usize,
    /// Scale applied to every model coefficient.
    pub coefficient_scale: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            solve_every: 1,
            coefficient_scale: 1.0,
        }
    }
}

/// Random weights and stage linearizations of one problem size.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub dims: ProblemDims,
    pub w: Vec<f64>,
    pub lins: Vec<StageLinearization<f64>>,
}

pub fn random_instance(rng: &mut impl Rng, dims: ProblemDims, scale: f64) -> RandomInstance {
    let n = dims.n();
    let w = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
    let md = dims.model;
    let lins = (0..dims.pred_horizon)
        .map(|_| {
            let mut lin = StageLinearization::zeros(md);
            for j in 0..=md.out_lags {
                for (e, v) in lin.a_mut(j).iter_mut().enumerate() {
                    let diag = j == 0 && e % (md.outputs + 1) == 0;
                    *v = scale * (if diag { 1.0 } else { 0.0 } + rng.gen_range(-1.0..1.0));
                }
            }
            for j in 1..=md.in_lags {
                for v in lin.b_mut(j).iter_mut() {
                    *v = scale * rng.gen_range(-1.0..1.0);
                }
            }
            lin
        })
        .collect();
    RandomInstance { dims, w, lins }
}

/// Dense `m x n` Jacobian assembled from the stacked residual equations.
pub fn dense_jacobian(
    dims: &ProblemDims,
    w: &[f64],
    lins: &[StageLinearization<f64>],
) -> DMatrix<f64> {
    let (n, m) = (dims.n(), dims.m());
    let md = dims.model;
    let (nu, ny) = (md.inputs, md.outputs);
    let (np, ncu) = (dims.pred_horizon, dims.ctrl_horizon);
    // Decision layout: u(0), y(1), u(1), ..., u(Nu-1), y(Nu), y(Nu+1), ...
    let u_col = |t: usize, ch: usize| {
        let s = t.min(ncu - 1);
        s * (nu + ny) + ch
    };
    let y_col = |k: usize, ch: usize| {
        if k < ncu {
            (k - 1) * (nu + ny) + nu + ch
        } else {
            ncu * nu + (k - 1) * ny + ch
        }
    };
    let mut j = DMatrix::zeros(m, n);
    for (i, &wi) in w.iter().enumerate() {
        j[(i, i)] = wi;
    }
    for k in 1..=np {
        let lin = &lins[k - 1];
        let row0 = n + (k - 1) * ny;
        for lag in 0..=md.out_lags {
            if lag >= k {
                break;
            }
            for r in 0..ny {
                for c in 0..ny {
                    j[(row0 + r, y_col(k - lag, c))] += lin.a_at(lag, r, c);
                }
            }
        }
        for lag in 1..=md.in_lags {
            if lag > k {
                break;
            }
            for r in 0..ny {
                for c in 0..nu {
                    j[(row0 + r, u_col(k - lag, c))] += lin.b_at(lag, r, c);
                }
            }
        }
    }
    j
}

/// Runs the operator, QR and solver comparisons over `instances` random
/// problems of size `dims`.
pub fn compare_dense_oracle(
    dims: ProblemDims,
    instances: usize,
    seed: u64,
    opts: CheckOptions,
) -> DeviationReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = DeviationReport::default();
    for k in 0..instances {
        let inst = random_instance(&mut rng, dims, opts.coefficient_scale);
        let mut rep = operator_deviation(&inst, &mut rng);
        rep.absorb(&qr_deviation(&inst, &mut rng));
        if opts.solve_every > 0 && k % opts.solve_every == 0 {
            rep.absorb(&solve_deviation(dims, &mut rng, opts.coefficient_scale));
        }
        rep.instances = 1;
        total.absorb(&rep);
    }
    total.elapsed = start.elapsed();
    total
}

fn operator_deviation(inst: &RandomInstance, rng: &mut impl Rng) -> DeviationReport {
    let d = &inst.dims;
    let (n, m) = (d.n(), d.m());
    let view = JacobianView::new(*d, &inst.w, &inst.lins).expect("consistent instance");
    let jd = dense_jacobian(d, &inst.w, &inst.lins);
    let scale = jd.amax().max(f64::MIN_POSITIVE);
    let mut v = vec![0.0; m];
    let mut jix_dev = 0.0f64;
    for i in 1..=n {
        let x = rng.gen_range(-2.0..2.0);
        view.jix(i, x, &mut v).expect("column in range");
        for (row, &vr) in v.iter().enumerate() {
            jix_dev = jix_dev.max((vr - x * jd[(row, i - 1)]).abs() / x.abs().max(1e-300));
        }
    }
    let xm = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
    let jt = jd.transpose() * &xm;
    let xs = xm.as_slice();
    let x1: f64 = xs.iter().map(|a| a.abs()).sum();
    let mut jtix_dev = 0.0f64;
    for i in 1..=n {
        let got = view.jtix(i, xs).expect("column in range");
        jtix_dev = jtix_dev.max((got - jt[i - 1]).abs());
    }
    DeviationReport {
        jix_rel: jix_dev / scale,
        jtix_rel: jtix_dev / (scale * x1.max(f64::MIN_POSITIVE)),
        ..Default::default()
    }
}

fn qr_deviation(inst: &RandomInstance, rng: &mut impl Rng) -> DeviationReport {
    let d = &inst.dims;
    let n = d.n();
    let view = JacobianView::new(*d, &inst.w, &inst.lins).expect("consistent instance");
    let mut free: Vec<usize> = (1..=n).filter(|_| rng.gen_bool(0.7)).collect();
    if free.is_empty() {
        free.push(rng.gen_range(1..=n));
    }
    let qr = ThinQr::factorize(&view, &free).expect("full column rank");
    let jd = dense_jacobian(d, &inst.w, &inst.lins);
    let cols: Vec<usize> = free.iter().map(|c| c - 1).collect();
    let jf = jd.select_columns(&cols);
    let house = jf.qr();
    let (mut q, mut r) = (house.q(), house.r());
    let k = free.len();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            r.row_mut(j).neg_mut();
            q.column_mut(j).neg_mut();
        }
    }
    let qm = qr.dense_q();
    let rm = qr.dense_r();
    let m = d.m();
    let mut dq = 0.0f64;
    for j in 0..k {
        for i in 0..m {
            dq = dq.max((qm[j * m + i] - q[(i, j)]).abs());
        }
    }
    let mut dr = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            dr = dr.max((rm[i * k + j] - r[(i, j)]).abs());
        }
    }
    let stats = qr.stats();
    DeviationReport {
        qr_q: dq,
        qr_r_rel: dr / r.amax().max(f64::MIN_POSITIVE),
        qr_orthogonality: qr.orthogonality_error(),
        qr_structure_violations: qr.count_pattern_violations()
            + stats.structure_violations as usize,
        ..Default::default()
    }
}

/// ARX model plus small smooth nonlinear terms, so Gauss-Newton takes
/// several iterations.
#[derive(Debug, Clone)]
pub struct PerturbedArx {
    pub lin: StageLinearization<f64>,
    pub eps: f64,
}

impl IoModel<f64> for PerturbedArx {
    fn dims(&self) -> ModelDims {
        self.lin.dims()
    }

    fn residual(&self, y: &[f64], u: &[f64], _s: &[f64], out: &mut [f64]) {
        let d = self.lin.dims();
        let (na, nb, nu, ny) = (d.out_lags, d.in_lags, d.inputs, d.outputs);
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..=na {
                let yj = &y[(na - j) * ny..(na - j + 1) * ny];
                acc += (0..ny).map(|c| self.lin.a_at(j, i, c) * yj[c]).sum::<f64>();
            }
            for j in 1..=nb {
                let uj = &u[(nb - j) * nu..(nb - j + 1) * nu];
                acc += (0..nu).map(|c| self.lin.b_at(j, i, c) * uj[c]).sum::<f64>();
            }
            let y_prev = y[(na - 1) * ny + i];
            let u_prev = u[(nb - 1) * nu + i % nu];
            *o = acc + self.eps * (y_prev.sin() + u_prev * u_prev);
        }
    }
}

/// A random NLLS-box instance for the solver comparison.
pub fn random_problem(
    rng: &mut impl Rng,
    dims: ProblemDims,
    scale: f64,
) -> (
    PerturbedArx,
    MpcConfig<f64>,
    InitialCondition<f64>,
    Vec<f64>,
) {
    let md = dims.model;
    let (nu, ny) = (md.inputs, md.outputs);
    let mut lin = StageLinearization::zeros(md);
    for e in 0..ny {
        lin.a_mut(0)[e * ny + e] = scale;
    }
    for j in 1..=md.out_lags {
        for v in lin.a_mut(j).iter_mut() {
            *v = scale * rng.gen_range(-0.6..0.6) / (md.out_lags * ny) as f64;
        }
    }
    for j in 1..=md.in_lags {
        for v in lin.b_mut(j).iter_mut() {
            *v = scale * rng.gen_range(-1.0..1.0);
        }
    }
    let model = PerturbedArx {
        lin,
        eps: 0.05 * scale,
    };
    let wu: Vec<f64> = (0..nu).map(|_| rng.gen_range(0.1..1.0)).collect();
    let wy: Vec<f64> = (0..ny).map(|_| rng.gen_range(0.5..2.0)).collect();
    let y_ref: Vec<f64> = (0..ny).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cfg = MpcConfig::builder(dims)
        .input_weights(&wu)
        .output_weights(&wy)
        .input_bounds(&vec![-0.4; nu], &vec![0.4; nu])
        .output_bounds(&vec![-1.5; ny], &vec![1.5; ny])
        .output_reference(&y_ref)
        .sqrt_rho(SQRT_RHO)
        .gamma(1e-7)
        .max_iters(500)
        .bvls_tol(1e-12)
        .build()
        .expect("valid random config");
    let ic = InitialCondition {
        past_outputs: (0..md.out_lags * ny)
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect(),
        past_inputs: (0..(md.in_lags - 1) * nu)
            .map(|_| rng.gen_range(-0.3..0.3))
            .collect(),
        exogenous: Vec::new(),
    };
    let z0 = vec![0.0; dims.n()];
    (model, cfg, ic, z0)
}

const SQRT_RHO: f64 = 10.0;

fn solve_deviation(dims: ProblemDims, rng: &mut impl Rng, scale: f64) -> DeviationReport {
    let (model, cfg, ic, z0) = random_problem(rng, dims, scale);
    let structured = Solver::new().solve(&z0, &ic, &model, &cfg);
    let dense = dense_bvnlls(&z0, &ic, &model, &cfg);
    match (structured, dense) {
        (Ok(a), Some(b)) if a.converged => DeviationReport {
            solve_instances: 1,
            solve_inf: a
                .z_star
                .iter()
                .zip(&b)
                .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs())),
            ..Default::default()
        },
        _ => DeviationReport {
            solve_instances: 1,
            solve_failures: 1,
            ..Default::default()
        },
    }
}

/// Reference dense Gauss-Newton with Armijo backtracking over `[p, q]`.
/// Returns `None` if it does not meet the first-order test.
pub fn dense_bvnlls<M: IoModel<f64>>(
    z0: &[f64],
    ic: &InitialCondition<f64>,
    model: &M,
    cfg: &MpcConfig<f64>,
) -> Option<Vec<f64>> {
    let map = PenaltyResidual::new(model, cfg, ic);
    let d = *cfg.dims();
    let (n, m) = (d.n(), d.m());
    let (p, q) = (cfg.lower(), cfg.upper());
    let mut z: Vec<f64> = z0
        .iter()
        .zip(p.iter().zip(q))
        .map(|(v, (lo, hi))| v.max(*lo).min(*hi))
        .collect();
    let mut r = vec![0.0; m];
    map.eval(&z, &mut r);
    let mut lins = Vec::new();
    for _ in 0..=cfg.max_iters {
        map.linearize(&z, &mut lins).ok()?;
        let j = dense_jacobian(&d, map.weights(), &lins);
        let rv = DVector::from_column_slice(&r);
        let g = j.transpose() * &rv;
        let optimal = (0..n).all(|i| {
            let (lo, hi) = (z[i] <= p[i], z[i] >= q[i]);
            match (lo, hi) {
                (true, true) => true,
                (true, false) => g[i] >= -cfg.gamma,
                (false, true) => -g[i] >= -cfg.gamma,
                (false, false) => g[i].abs() <= cfg.gamma,
            }
        });
        if optimal {
            return Some(z);
        }
        let lo: Vec<f64> = (0..n).map(|i| p[i] - z[i]).collect();
        let hi: Vec<f64> = (0..n).map(|i| q[i] - z[i]).collect();
        let dz = dense_bvls(&j, &rv, &lo, &hi)?;
        let dtdz = g.dot(&DVector::from_column_slice(&dz));
        if !(dtdz < 0.0) {
            return None;
        }
        let psi: f64 = r.iter().map(|v| v * v).sum();
        let mut alpha = 1.0;
        let mut trial = vec![0.0; n];
        let mut rt = vec![0.0; m];
        loop {
            for i in 0..n {
                trial[i] = (z[i] + alpha * dz[i]).max(p[i]).min(q[i]);
            }
            map.eval(&trial, &mut rt);
            let phi: f64 = rt.iter().map(|v| v * v).sum();
            if phi <= psi + cfg.c * alpha * dtdz {
                break;
            }
            alpha *= cfg.tau;
            if alpha < 1e-12 {
                return None;
            }
        }
        z.copy_from_slice(&trial);
        r.copy_from_slice(&rt);
    }
    None
}

/// `min ||J x + b||` over `lo <= x <= hi` by a textbook active-set method;
/// the free-set subproblems are solved through the normal equations.
pub fn dense_bvls(j: &DMatrix<f64>, b: &DVector<f64>, lo: &[f64], hi: &[f64]) -> Option<Vec<f64>> {
    let n = j.ncols();
    let gram = j.tr_mul(j);
    let c = j.tr_mul(b);
    let mut x: Vec<f64> = (0..n).map(|i| 0.0f64.max(lo[i]).min(hi[i])).collect();
    let mut free: Vec<bool> = (0..n).map(|i| lo[i] < 0.0 && 0.0 < hi[i]).collect();
    let tol = 1e-13 * j.amax() * b.amax().max(1.0);
    for _ in 0..(20 * n + 20) {
        // Feasible LS over the free set.
        for _ in 0..=n {
            let fidx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
            if fidx.is_empty() {
                break;
            }
            let k = fidx.len();
            let g_ff = DMatrix::from_fn(k, k, |a, b| gram[(fidx[a], fidx[b])]);
            let rhs = DVector::from_fn(k, |a, _| {
                let i = fidx[a];
                -c[i]
                    - (0..n)
                        .filter(|&l| !free[l])
                        .map(|l| gram[(i, l)] * x[l])
                        .sum::<f64>()
            });
            let sol = g_ff.cholesky()?.solve(&rhs);
            let mut alpha = 1.0f64;
            let mut block = None;
            for (a, &i) in fidx.iter().enumerate() {
                let t = sol[a];
                if t < lo[i] || t > hi[i] {
                    let bound = if t < lo[i] { lo[i] } else { hi[i] };
                    let step = (bound - x[i]) / (t - x[i]);
                    if step < alpha {
                        alpha = step;
                        block = Some(i);
                    }
                }
            }
            for (a, &i) in fidx.iter().enumerate() {
                x[i] += alpha * (sol[a] - x[i]);
            }
            let Some(bi) = block else { break };
            for &i in &fidx {
                let at_lo = x[i] <= lo[i] + 1e-15 * (1.0 + lo[i].abs());
                let at_hi = x[i] >= hi[i] - 1e-15 * (1.0 + hi[i].abs());
                if i == bi || at_lo || at_hi {
                    let nearer_hi = (x[i] - hi[i]).abs() < (x[i] - lo[i]).abs();
                    x[i] = if at_hi || (i == bi && nearer_hi) {
                        hi[i]
                    } else {
                        lo[i]
                    };
                    free[i] = false;
                }
            }
        }
        // Release the bound variable with the most promising multiplier.
        let g = &gram * DVector::from_column_slice(&x) + &c;
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !free[i] && lo[i] < hi[i]) {
            let gain = if x[i] <= lo[i] { -g[i] } else { g[i] };
            if gain > tol && best.is_none_or(|(_, v)| gain > v) {
                best = Some((i, gain));
            }
        }
        match best {
            None => return Some(x),
            Some((i, _)) => free[i] = true,
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ref_dims() -> ProblemDims {
        ProblemDims::new(ModelDims::io(2, 4, 2, 2).unwrap(), 10, 4).unwrap()
    }

    #[test]
    fn small_check_passes() {
        let rep = compare_dense_oracle(ref_dims(), 10, 7, CheckOptions::default());
        assert!(rep.violations(&Thresholds::default()).is_empty(), "{rep:?}");
        assert_eq!(rep.instances, 10);
    }

    #[test]
    fn zero_coefficients_give_zero_operator_deviation() {
        let opts = CheckOptions {
            solve_every: 0,
            coefficient_scale: 0.0,
        };
        let rep = compare_dense_oracle(ref_dims(), 5, 3, opts);
        assert_eq!(rep.jix_rel, 0.0);
        assert_eq!(rep.jtix_rel, 0.0);
    }

    #[test]
    fn dense_bvls_clamps() {
        let j = DMatrix::identity(2, 2);
        let b = DVector::from_vec(vec![-2.0, 0.5]);
        let x = dense_bvls(&j, &b, &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(x[0], 1.0);
        assert!((x[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn dense_jacobian_matches_column_patterns() {
        let d = ref_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = random_instance(&mut rng, d, 1.0);
        let j = dense_jacobian(&d, &inst.w, &inst.lins);
        for i in 1..=d.n() {
            let (lo, hi) = d.column_rows(i);
            for row in 0..d.m() {
                if row != i - 1 && (row < lo || row >= hi) {
                    assert_eq!(j[(row, i - 1)], 0.0, "col {i} row {row}");
                }
            }
        }
    }
}
