//! Horizon sweep timing of the structured and dense solver paths.

use std::io::Write;
use std::time::{Duration, Instant};

use cfmpc_core::{LinearAlgebra, Result, Solver};

use crate::config::SimConfig;
use crate::sim::{run_closed_loop_with, RunOptions};

/// Largest allowed `||z*_structured - z*_dense||_inf` on any instance.
pub const AGREEMENT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub horizon: usize,
    pub instances: usize,
    pub structured_median_us: f64,
    pub structured_worst_us: f64,
    pub dense_median_us: f64,
    pub dense_worst_us: f64,
    /// Dense median over structured median.
    pub speedup: f64,
    pub max_deviation: f64,
    /// Whether every instance agreed within [`AGREEMENT_TOL`].
    pub agree: bool,
}

/// Runs the closed loop at each `Np = Nu` and replays every solve on both
/// paths from the same guess and warm start.
pub fn benchmark(cfg: &SimConfig, horizons: &[usize]) -> Result<Vec<BenchRow>> {
    horizons.iter().map(|&h| bench_horizon(cfg, h)).collect()
}

pub fn bench_horizon(cfg: &SimConfig, horizon: usize) -> Result<BenchRow> {
    let run_cfg = cfg.with_horizon(horizon, horizon);
    let run = run_closed_loop_with(
        &run_cfg,
        RunOptions {
            dense: false,
            record_instances: true,
        },
    )?;
    let model = run_cfg.prediction_model();
    let mut structured = Solver::new();
    let mut dense = Solver::new().with_linalg(LinearAlgebra::Dense);
    let mut ts = Vec::with_capacity(run.instances.len());
    let mut td = Vec::with_capacity(run.instances.len());
    let mut max_dev = 0.0f64;
    for inst in &run.instances {
        let mpc = run_cfg.mpc_config(inst.step)?;
        let time = |solver: &mut Solver<f64>, out: &mut Vec<Duration>| -> Result<Vec<f64>> {
            solver.set_warm_state(inst.warm.clone());
            let t = Instant::now();
            let rep = solver.solve(&inst.z0, &inst.ic, model.model.as_ref(), &mpc)?;
            out.push(t.elapsed());
            Ok(rep.z_star)
        };
        let a = time(&mut structured, &mut ts)?;
        let b = time(&mut dense, &mut td)?;
        max_dev = a
            .iter()
            .zip(&b)
            .fold(max_dev, |m, (x, y)| m.max((x - y).abs()));
    }
    let (sm, sw) = median_worst(&mut ts);
    let (dm, dw) = median_worst(&mut td);
    Ok(BenchRow {
        horizon,
        instances: run.instances.len(),
        structured_median_us: sm,
        structured_worst_us: sw,
        dense_median_us: dm,
        dense_worst_us: dw,
        speedup: dm / sm,
        max_deviation: max_dev,
        agree: max_dev <= AGREEMENT_TOL,
    })
}

fn median_worst(t: &mut [Duration]) -> (f64, f64) {
    if t.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    t.sort();
    let us = |d: Duration| d.as_secs_f64() * 1e6;
    let k = t.len();
    let med = if k % 2 == 1 {
        us(t[k / 2])
    } else {
        0.5 * (us(t[k / 2 - 1]) + us(t[k / 2]))
    };
    (med, us(t[k - 1]))
}

pub fn write_bench<W: Write>(w: W, rows: &[BenchRow]) -> std::io::Result<()> {
    let mut out = csv::WriterBuilder::new().flexible(true).from_writer(w);
    out.write_record([crate::sim::SCHEMA])?;
    out.write_record([
        "horizon",
        "instances",
        "structured_median_us",
        "structured_worst_us",
        "dense_median_us",
        "dense_worst_us",
        "speedup",
        "max_deviation",
        "agree",
    ])?;
    for r in rows {
        out.write_record([
            r.horizon.to_string(),
            r.instances.to_string(),
            format!("{:.1}", r.structured_median_us),
            format!("{:.1}", r.structured_worst_us),
            format!("{:.1}", r.dense_median_us),
            format!("{:.1}", r.dense_worst_us),
            format!("{:.3}", r.speedup),
            format!("{:e}", r.max_deviation),
            (r.agree as u8).to_string(),
        ])?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_count() {
        let mut t = vec![
            Duration::from_micros(4),
            Duration::from_micros(1),
            Duration::from_micros(2),
            Duration::from_micros(3),
        ];
        assert_eq!(median_worst(&mut t), (2.5, 4.0));
    }

    #[test]
    fn one_row_per_horizon() {
        let cfg = crate::config::parse_config(
            "model = lti-arx-demo\nmpc.Np = 5\nmpc.Nu = 5\nsim.steps = 3\nref.y = 0.2, 0.1\n",
        )
        .unwrap();
        let rows = benchmark(&cfg, &[3, 6]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.agree && r.instances == 3));
    }
}
