//! BVLS, BVNLLS and multiplier-loop results against closed forms and
//! brute-force enumeration.

use cfmpc_core::{
    blm_solve, build_full_residual, solve_bvls, ArxModel, BlmOptions, BoundState, DenseJacobian,
    InitialCondition, ModelDef, ModelDims, MpcConfig, ProblemDims, Solver, SolverF32,
    StageLinearization,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimizes `||A x + b||^2` over the box by trying every free/lower/upper
/// assignment.
fn enumerate_bvls(a: &DMatrix<f64>, b: &DVector<f64>, lo: &[f64], hi: &[f64]) -> (Vec<f64>, f64) {
    let n = a.ncols();
    let mut best = (vec![], f64::INFINITY);
    for code in 0..3usize.pow(n as u32) {
        let mut x = vec![0.0; n];
        let mut free = vec![];
        let mut c = code;
        for j in 0..n {
            match c % 3 {
                0 => free.push(j),
                1 => x[j] = lo[j],
                _ => x[j] = hi[j],
            }
            c /= 3;
        }
        let xfix = DVector::from_column_slice(&x);
        let rhs = -(b + a * &xfix);
        if !free.is_empty() {
            let af = DMatrix::from_fn(a.nrows(), free.len(), |r, c| a[(r, free[c])]);
            let sol = af.svd(true, true).solve(&rhs, 1e-14).unwrap();
            for (k, &j) in free.iter().enumerate() {
                x[j] = sol[k];
            }
        }
        if x.iter()
            .zip(lo.iter().zip(hi))
            .any(|(v, (l, h))| *v < l - 1e-12 || *v > h + 1e-12)
        {
            continue;
        }
        let f = (b + a * DVector::from_column_slice(&x)).norm_squared();
        if f < best.1 {
            best = (x, f);
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bvls_matches_enumeration(seed in any::<u64>(), n in 1usize..7, extra in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = n + extra;
        let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0)) + DMatrix::identity(m, n);
        let b = DVector::from_fn(m, |_, _| rng.gen_range(-3.0..3.0));
        let lo: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..0.0)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.gen_range(0.1..1.5)).collect();
        let op = DenseJacobian::from_col_major(m, n, a.as_slice().to_vec()).unwrap();
        let res = solve_bvls(&op, b.as_slice(), &lo, &hi, None, 1e-12, 100).unwrap();
        let (x_ref, f_ref) = enumerate_bvls(&a, &b, &lo, &hi);
        prop_assert!(res.converged && !res.stalled);
        prop_assert!((res.objective - f_ref).abs() <= 1e-8 * (1.0 + f_ref));
        for (x, r) in res.x.iter().zip(&x_ref) {
            prop_assert!((x - r).abs() <= 1e-8);
        }
        for j in 0..n {
            prop_assert!(res.lambda_lower[j] >= 0.0 && res.lambda_upper[j] >= 0.0);
            match res.state.status[j] {
                BoundState::Free => prop_assert!(res.lambda_lower[j] == 0.0 && res.lambda_upper[j] == 0.0),
                BoundState::Lower => prop_assert!(res.x[j] == lo[j] && res.lambda_upper[j] == 0.0),
                BoundState::Upper => prop_assert!(res.x[j] == hi[j] && res.lambda_lower[j] == 0.0),
            }
        }
    }

    #[test]
    fn bvls_warm_start_reaches_same_point(seed in any::<u64>(), n in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = n + 2;
        let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0)) + DMatrix::identity(m, n);
        let b = DVector::from_fn(m, |_, _| rng.gen_range(-3.0..3.0));
        let lo = vec![-0.5; n];
        let hi = vec![0.5; n];
        let op = DenseJacobian::from_col_major(m, n, a.as_slice().to_vec()).unwrap();
        let cold = solve_bvls(&op, b.as_slice(), &lo, &hi, None, 1e-12, 100).unwrap();
        let warm = solve_bvls(&op, b.as_slice(), &lo, &hi, Some(&cold.state), 1e-12, 100).unwrap();
        prop_assert_eq!(warm.active_set_changes, 0);
        for (x, y) in warm.x.iter().zip(&cold.x) {
            prop_assert!(f64::abs(x - y) <= 1e-10);
        }
    }
}

/// Scalar model `M = y_k - u_{k-1}^2`.
fn square_model() -> ModelDef<f64> {
    ModelDef::new(ModelDims::io(1, 1, 1, 1).unwrap(), |y, u, _s, out| {
        out[0] = y[1] - u[0] * u[0]
    })
    .with_jacobian(|_y, u, _s, lin| {
        lin.a_mut(0)[0] = 1.0;
        lin.a_mut(1)[0] = 0.0;
        lin.b_mut(1)[0] = -2.0 * u[0];
    })
}

#[test]
fn nonlinear_scalar_problem_hits_grid_minimum() {
    let dims = ProblemDims::new(ModelDims::io(1, 1, 1, 1).unwrap(), 1, 1).unwrap();
    let cfg = MpcConfig::builder(dims)
        .sqrt_rho(1.0)
        .input_weights(&[0.5])
        .output_weights(&[1.0])
        .output_reference(&[2.0])
        .input_bounds(&[0.2], &[3.0])
        .gamma(1e-10)
        .build()
        .unwrap();
    let model = square_model();
    let ic = InitialCondition::steady(&dims, &[0.0], &[0.0]).unwrap();
    let cost = |u: f64, y: f64| 0.25 * u * u + (y - 2.0).powi(2) + (y - u * u).powi(2);
    // the library residual reproduces the hand-written cost
    let r = build_full_residual(&[0.7, 1.3], &ic, &model, &cfg).unwrap();
    assert!((r.cost() - cost(0.7, 1.3)).abs() <= 1e-14);

    // for fixed u the cost is quadratic in y with minimizer (2 + u^2) / 2
    let steps = 1_000_000;
    let (mut u_best, mut f_best) = (0.0, f64::INFINITY);
    for k in 0..=steps {
        let u = 0.2 + 2.8 * k as f64 / steps as f64;
        let f = cost(u, 0.5 * (2.0 + u * u));
        if f < f_best {
            (u_best, f_best) = (u, f);
        }
    }
    let rep = Solver::new().solve(&[0.5, 0.0], &ic, &model, &cfg).unwrap();
    assert!(rep.converged, "{:?}", rep.status);
    assert!(
        (rep.z_star[0] - u_best).abs() <= 1e-5,
        "{} vs {}",
        rep.z_star[0],
        u_best
    );
    assert!(rep.phi <= f_best + 1e-12);
    assert!((rep.z_star[0] - 1.75f64.sqrt()).abs() <= 1e-6);
    assert!((rep.z_star[1] - 1.875).abs() <= 1e-6);
    for it in &rep.trace {
        assert!(it.phi <= it.psi + cfg.c * it.alpha * it.dtdz);
        assert!(it.bound_violation <= 0.0);
    }
}

#[test]
fn lower_bound_binds_on_nonlinear_problem() {
    let dims = ProblemDims::new(ModelDims::io(1, 1, 1, 1).unwrap(), 1, 1).unwrap();
    let cfg = MpcConfig::builder(dims)
        .sqrt_rho(1.0)
        .input_weights(&[0.5])
        .output_reference(&[2.0])
        .input_bounds(&[1.5], &[3.0])
        .gamma(1e-10)
        .build()
        .unwrap();
    let ic = InitialCondition::steady(&dims, &[0.0], &[0.0]).unwrap();
    let rep = Solver::new()
        .solve(&[2.5, 0.0], &ic, &square_model(), &cfg)
        .unwrap();
    assert!(rep.converged);
    assert_eq!(rep.z_star[0], 1.5);
    assert!((rep.z_star[1] - 0.5 * (2.0 + 2.25)).abs() <= 1e-8);
    // the cost increases into the box, so the lower multiplier is positive
    assert!(rep.lambda_p[0] > 0.0);
    assert_eq!(rep.lambda_q[0], 0.0);
    assert_eq!(rep.lambda_p[1], 0.0);
}

/// `M = y_k - a u_{k-1}` with one move and one output.
fn gain_model(a: f64) -> ArxModel<f64> {
    let mut lin = StageLinearization::zeros(ModelDims::io(1, 1, 1, 1).unwrap());
    lin.a_mut(0)[0] = 1.0;
    lin.b_mut(1)[0] = -a;
    ArxModel::lti(lin)
}

#[test]
fn multiplier_loop_solves_equality_qp() {
    let (a, wu, wy, ur, yr) = (2.0, 0.7, 1.3, 0.4, 3.0);
    let dims = ProblemDims::new(ModelDims::io(1, 1, 1, 1).unwrap(), 1, 1).unwrap();
    let cfg = MpcConfig::builder(dims)
        .input_weights(&[wu])
        .output_weights(&[wy])
        .input_reference(&[ur])
        .output_reference(&[yr])
        .gamma(1e-12)
        .build()
        .unwrap();
    let ic = InitialCondition::steady(&dims, &[0.0], &[0.0]).unwrap();
    let opts = BlmOptions {
        outer_cap: 12,
        feasibility_target: 1e-10,
        rho0: Some(1e2),
        rho_growth: 10.0,
    };
    let rep = blm_solve(&[0.0, 0.0], &ic, &gain_model(a), &cfg, &opts).unwrap();
    let (wu2, wy2) = (wu * wu, wy * wy);
    let u = (wu2 * ur + a * wy2 * yr) / (wu2 + a * a * wy2);
    let y = a * u;
    assert!(rep.converged);
    assert!(rep.report.h_inf <= 1e-9);
    assert!((rep.report.z_star[0] - u).abs() <= 1e-8);
    assert!((rep.report.z_star[1] - y).abs() <= 1e-8);
    for w in rep.h_inf_trace.windows(2) {
        assert!(w[1] <= w[0], "{:?}", rep.h_inf_trace);
    }
    // stationarity of ||W(z - z_ref)||^2 + 2 lambda' h in y
    let lambda = rep.lambda_trace.last().unwrap()[0];
    assert!((lambda + wy2 * (y - yr)).abs() <= 1e-6, "{lambda}");
    assert_eq!(rep.rho_trace[0], 1e2);
}

fn lti_demo() -> ArxModel<f64> {
    let dims = ModelDims::io(2, 4, 2, 2).unwrap();
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

fn lti_config(lo: f64, hi: f64) -> MpcConfig<f64> {
    let dims = ProblemDims::new(ModelDims::io(2, 4, 2, 2).unwrap(), 10, 4).unwrap();
    MpcConfig::builder(dims)
        .output_weights(&[100.0, 100.0])
        .input_weights(&[1.0, 1.0])
        .input_bounds(&[lo, lo], &[hi, hi])
        .output_reference(&[0.5, -0.2])
        .build()
        .unwrap()
}

#[test]
fn linear_model_needs_one_direction() {
    for (lo, hi) in [(-10.0, 10.0), (-0.1, 0.1)] {
        let cfg = lti_config(lo, hi);
        let ic = InitialCondition::steady(cfg.dims(), &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let z0 = vec![0.0; cfg.dims().n()];
        let rep = Solver::new().solve(&z0, &ic, &lti_demo(), &cfg).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iters, 1);
        assert_eq!(rep.trace.len(), 1);
        assert_eq!(rep.trace[0].alpha, 1.0);
        assert_eq!(rep.ls_backtracks, 0);
    }
}

#[test]
fn optimal_guess_takes_no_step() {
    let cfg = lti_config(-0.1, 0.1);
    let ic = InitialCondition::steady(cfg.dims(), &[0.0, 0.0], &[0.0, 0.0]).unwrap();
    let z0 = vec![0.0; cfg.dims().n()];
    let model = lti_demo();
    let first = Solver::new().solve(&z0, &ic, &model, &cfg).unwrap();
    let again = Solver::new()
        .solve(&first.z_star, &ic, &model, &cfg)
        .unwrap();
    assert!(again.converged);
    assert!(again.trace.is_empty());
    assert_eq!(again.z_star, first.z_star);
}

#[test]
fn dense_and_structured_paths_agree() {
    let cfg = lti_config(-0.1, 0.1);
    let ic = InitialCondition::steady(cfg.dims(), &[0.0, 0.0], &[0.0, 0.0]).unwrap();
    let z0 = vec![0.0; cfg.dims().n()];
    let model = lti_demo();
    let a = Solver::new().solve(&z0, &ic, &model, &cfg).unwrap();
    let b = Solver::new()
        .with_linalg(cfmpc_core::LinearAlgebra::Dense)
        .solve(&z0, &ic, &model, &cfg)
        .unwrap();
    for (x, y) in a.z_star.iter().zip(&b.z_star) {
        assert!((x - y).abs() <= 1e-10);
    }
}

#[test]
fn single_precision_solve() {
    let mut lin = StageLinearization::<f32>::zeros(ModelDims::io(1, 1, 1, 1).unwrap());
    lin.a_mut(0)[0] = 1.0;
    lin.a_mut(1)[0] = -0.8;
    lin.b_mut(1)[0] = -0.5;
    let model = ArxModel::lti(lin);
    let dims = ProblemDims::new(ModelDims::io(1, 1, 1, 1).unwrap(), 6, 3).unwrap();
    let cfg = MpcConfig::<f32>::builder(dims)
        .sqrt_rho(100.0)
        .output_weights(&[10.0])
        .input_weights(&[0.1])
        .output_reference(&[1.0])
        .input_bounds(&[-1.0], &[1.0])
        .gamma(1e-3)
        .build()
        .unwrap();
    let ic = InitialCondition::steady(&dims, &[0.0], &[0.0]).unwrap();
    let rep = SolverF32::new()
        .solve(&vec![0.0; dims.n()], &ic, &model, &cfg)
        .unwrap();
    assert!(rep.converged);
    // steady gain 2.5, so about u = 0.4 reaches y = 1
    let y_end = rep.z_star[dims.y_pos(6, 0)];
    assert!((y_end - 1.0).abs() < 0.05, "{y_end}");
}
