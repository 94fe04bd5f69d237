//! Closed-loop receding-horizon simulation and its CSV trace.

use std::io::Write;
use std::time::Instant;

use cfmpc_core::{
    shift_warm_start, ActiveSetState, InitialCondition, IterationRecord, LinearAlgebra,
    ProblemDims, Result, Solver,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::SimConfig;
use crate::plant::Plant;

pub const SCHEMA: &str = "schema=1";

/// One closed-loop step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub solve_us: u128,
    pub outer_iters: usize,
    pub bvls_iters: usize,
    pub alpha: f64,
    pub phi: f64,
    pub h_inf: f64,
    /// Whether the solve met its tolerances; the input is applied either way.
    pub converged: bool,
    /// Input applied at this step.
    pub u: Vec<f64>,
    /// Output measured at this step, before solving.
    pub y: Vec<f64>,
}

/// A solve as seen by the loop, kept for replay by the benchmark.
#[derive(Debug, Clone)]
pub struct Instance {
    pub step: usize,
    pub ic: InitialCondition<f64>,
    pub z0: Vec<f64>,
    pub warm: Option<ActiveSetState<f64>>,
    pub z_star: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ClosedLoop {
    pub rows: Vec<TraceRow>,
    /// Outer-iteration records of every solve, by step.
    pub iterations: Vec<Vec<IterationRecord<f64>>>,
    /// Final iterate bound violation of every solve.
    pub final_violation: Vec<f64>,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub dense: bool,
    pub record_instances: bool,
}

/// Runs the configured closed loop.
pub fn run_closed_loop(cfg: &SimConfig) -> Result<ClosedLoop> {
    run_closed_loop_with(
        cfg,
        RunOptions {
            dense: cfg.dense,
            record_instances: false,
        },
    )
}

pub fn run_closed_loop_with(cfg: &SimConfig, opts: RunOptions) -> Result<ClosedLoop> {
    let pred = cfg.prediction_model();
    let model = pred.model.as_ref();
    let (y0, u0) = cfg.initial_point();
    let mut plant = Plant::at_rest(cfg.plant_model().model, &y0, &u0)?;
    let mut mpc = cfg.mpc_config(0)?;
    let dims = *mpc.dims();
    let mut ic = InitialCondition::steady(&dims, &y0, &u0)?;
    let mut z = steady_guess(&dims, &y0, &u0);
    mpc.clip(&mut z);
    let mut solver = Solver::new().with_linalg(if opts.dense {
        LinearAlgebra::Dense
    } else {
        LinearAlgebra::Structured
    });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise: Vec<Option<Normal<f64>>> = cfg
        .noise
        .iter()
        .map(|&s| {
            if s > 0.0 {
                Normal::new(0.0, s).ok()
            } else {
                None
            }
        })
        .collect();

    let mut out = ClosedLoop::default();
    let mut y_meas = y0.clone();
    let mut u_prev = u0.clone();
    for step in 0..cfg.steps {
        if let Some(y) = cfg.y_ref.value_at(step) {
            mpc.set_output_reference(y)?;
        }
        if let Some(u) = cfg.u_ref.value_at(step) {
            mpc.set_input_reference(u)?;
        }
        let warm = solver.warm_state().cloned();
        let t = Instant::now();
        let solved = solver.solve(&z, &ic, model, &mpc);
        let solve_us = t.elapsed().as_micros();
        let (u, row) = match solved {
            Ok(rep) => {
                let u: Vec<f64> = (0..dims.inputs())
                    .map(|ch| rep.z_star[dims.u_pos(0, ch)])
                    .collect();
                let row = TraceRow {
                    step,
                    solve_us,
                    outer_iters: rep.iters,
                    bvls_iters: rep.bvls_changes,
                    alpha: rep.last_alpha,
                    phi: rep.phi,
                    h_inf: rep.h_inf,
                    converged: rep.converged,
                    u: u.clone(),
                    y: y_meas.clone(),
                };
                let viol = rep
                    .z_star
                    .iter()
                    .zip(mpc.lower().iter().zip(mpc.upper()))
                    .fold(0.0f64, |a, (v, (lo, hi))| a.max(lo - v).max(v - hi));
                if opts.record_instances {
                    out.instances.push(Instance {
                        step,
                        ic: ic.clone(),
                        z0: z.clone(),
                        warm,
                        z_star: rep.z_star.clone(),
                    });
                }
                out.iterations.push(rep.trace);
                out.final_violation.push(viol);
                z = shift_warm_start(&rep.z_star, &mpc)?;
                solver.shift_warm_state(&mpc);
                (u, row)
            }
            Err(e @ cfmpc_core::Error::Dimension { .. })
            | Err(e @ cfmpc_core::Error::Config(_)) => return Err(e),
            Err(_) => {
                // Keep the incumbent input and restart the guess from rest.
                solver.reset_warm_start();
                let row = TraceRow {
                    step,
                    solve_us,
                    outer_iters: 0,
                    bvls_iters: 0,
                    alpha: f64::NAN,
                    phi: f64::NAN,
                    h_inf: f64::NAN,
                    converged: false,
                    u: u_prev.clone(),
                    y: y_meas.clone(),
                };
                out.iterations.push(Vec::new());
                out.final_violation.push(0.0);
                z = steady_guess(&dims, &y_meas, &u_prev);
                mpc.clip(&mut z);
                (u_prev.clone(), row)
            }
        };
        out.rows.push(row);
        let y_true = plant.step(&u)?;
        y_meas = y_true
            .iter()
            .zip(&noise)
            .map(|(y, n)| y + n.map_or(0.0, |d| d.sample(&mut rng)))
            .collect();
        ic.advance(&dims, &u, &y_meas);
        u_prev = u;
    }
    Ok(out)
}

/// Decision vector holding `y` at every step and `u` at every move.
pub fn steady_guess(dims: &ProblemDims, y: &[f64], u: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; dims.n()];
    for stage in 0..dims.ctrl_horizon {
        for (ch, &v) in u.iter().enumerate() {
            z[dims.u_pos(stage, ch)] = v;
        }
    }
    for step in 1..=dims.pred_horizon {
        for (ch, &v) in y.iter().enumerate() {
            z[dims.y_pos(step, ch)] = v;
        }
    }
    z
}

pub fn write_trace<W: Write>(w: W, rows: &[TraceRow], nu: usize, ny: usize) -> std::io::Result<()> {
    let mut out = csv::WriterBuilder::new().flexible(true).from_writer(w);
    out.write_record([SCHEMA])?;
    let mut header: Vec<String> = [
        "step",
        "solve_us",
        "outer_iters",
        "bvls_iters",
        "alpha",
        "phi",
        "h_inf",
        "converged",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=nu).map(|i| format!("u{i}")));
    header.extend((1..=ny).map(|i| format!("y{i}")));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.step.to_string(),
            r.solve_us.to_string(),
            r.outer_iters.to_string(),
            r.bvls_iters.to_string(),
            fmt_f(r.alpha),
            fmt_f(r.phi),
            fmt_f(r.h_inf),
            (r.converged as u8).to_string(),
        ];
        rec.extend(r.u.iter().map(|v| fmt_f(*v)));
        rec.extend(r.y.iter().map(|v| fmt_f(*v)));
        out.write_record(&rec)?;
    }
    out.flush()
}

/// Shortest representation that round-trips exactly.
pub fn fmt_f(x: f64) -> String {
    format!("{x:e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn rest_stays_at_rest() {
        let cfg = parse_config("model = cstr\nmpc.Np = 10\nmpc.Nu = 5\nref.u = 1.0341\nsim.steps = 5\nmpc.wy = 1000\nmpc.wu = 100\n")
            .unwrap();
        let run = run_closed_loop(&cfg).unwrap();
        let un = cfg.prediction_model().u_nominal[0];
        for r in &run.rows {
            assert!((r.u[0] - un).abs() < 1e-8, "{:?}", r);
            assert!(r.h_inf <= 1e-8);
        }
    }

    #[test]
    fn lti_tracks_reachable_reference() {
        let cfg = parse_config(
            "model = lti-arx-demo\nmpc.Np = 10\nmpc.Nu = 4\nmpc.wu = 0\nmpc.wy = 100\nref.y = 0.5, -0.2\nsim.steps = 60\nmpc.gamma = 1e-12\n",
        )
        .unwrap();
        let run = run_closed_loop(&cfg).unwrap();
        let last = run.rows.last().unwrap();
        assert!(
            (last.y[0] - 0.5).abs() < 1e-6 && (last.y[1] + 0.2).abs() < 1e-6,
            "{last:?}"
        );
    }

    #[test]
    fn trace_header_is_versioned() {
        let mut buf = Vec::new();
        let row = TraceRow {
            step: 0,
            solve_us: 3,
            outer_iters: 1,
            bvls_iters: 2,
            alpha: 1.0,
            phi: 0.25,
            h_inf: 0.0,
            converged: true,
            u: vec![1.0],
            y: vec![2.0, 3.0],
        };
        write_trace(&mut buf, &[row], 1, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("schema=1"));
        assert_eq!(
            lines.next(),
            Some("step,solve_us,outer_iters,bvls_iters,alpha,phi,h_inf,converged,u1,y1,y2")
        );
        assert_eq!(lines.next(), Some("0,3,1,2,1e0,2.5e-1,0e0,1,1e0,2e0,3e0"));
    }
}
