//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, keys use dotted section
//! prefixes (`mpc.Np = 60`). Vector values are comma separated; a single
//! number is broadcast over all channels. See `docs/config.md`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use cfmpc_core::{LineSearchRule, ModelDims, MpcConfig, ProblemDims};
use thiserror::Error;

use crate::models::{builtin, BuiltinModel, MODEL_NAMES};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: key `{key}`: {msg}")]
pub struct ParseError {
    /// 1-based line; 0 when the problem is not tied to a line.
    pub line: usize,
    pub key: String,
    pub msg: String,
}

impl ParseError {
    fn new(line: usize, key: &str, msg: impl Into<String>) -> Self {
        Self {
            line,
            key: key.to_string(),
            msg: msg.into(),
        }
    }
}

/// Piecewise-constant reference: each entry holds from its step onward.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Schedule {
    pub points: Vec<(usize, Vec<f64>)>,
}

impl Schedule {
    pub fn value_at(&self, step: usize) -> Option<&[f64]> {
        self.points
            .iter()
            .rev()
            .find(|(k, _)| *k <= step)
            .map(|(_, v)| v.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub model: String,
    pub plant: String,
    pub np: usize,
    pub nu: usize,
    pub sqrt_rho: f64,
    pub gamma: f64,
    pub c: f64,
    pub tau: f64,
    pub max_iters: usize,
    pub bvls_tol: f64,
    pub bvls_max_iter: Option<usize>,
    pub line_search: LineSearchRule,
    pub dense: bool,
    pub wu: Vec<f64>,
    pub wy: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub y_min: Vec<f64>,
    pub y_max: Vec<f64>,
    pub y_ref: Schedule,
    pub u_ref: Schedule,
    pub init_y: Option<Vec<f64>>,
    pub init_u: Option<Vec<f64>>,
    pub steps: usize,
    pub seed: u64,
    pub noise: Vec<f64>,
    pub trace_path: Option<String>,
    pub bench_path: Option<String>,
    pub bench_horizons: Vec<usize>,
    pub check_instances: usize,
    /// Solver comparison on every k-th check instance; 0 disables it.
    pub check_solve_every: usize,
}

/// Documented defaults, echoed by `--help`.
pub const DEFAULTS_HELP: &str = "\
Config keys (required: model, mpc.Np, mpc.Nu):
  model = lti-arx-demo | cstr | cstr-fine
  plant = <model name>              default: same as model
  mpc.Np, mpc.Nu                    horizons, 1 <= Nu <= Np
  mpc.sqrt_rho = 1e4                or mpc.rho = 1e8 (not both)
  mpc.gamma = 1e-6    mpc.c = 1e-4    mpc.tau = 0.5
  mpc.max_iters = 100    mpc.bvls_tol = 1e-8    mpc.bvls_max_iter = 10 n
  mpc.line_search = armijo | geometric          default: armijo
  mpc.wu = 0.1    mpc.wy = 1        diagonal weights, scalar or per channel
  mpc.dense = false                 dense linear algebra path
  bounds.u_min, bounds.u_max, bounds.y_min, bounds.y_max   default: unbounded
  ref.y, ref.u                      references; default: nominal outputs, zero inputs
  ref.y@K, ref.u@K                  reference change from step K on
  init.y, init.u                    initial steady point; default: model nominal
  sim.steps = 100    sim.seed = 0    sim.noise = 0 (output noise std)
  out.trace, out.bench              CSV paths
  bench.horizons = 10,20,40,60,120
  check.instances = 100    check.solve_every = 5 (0 skips the solver comparison)";

const KNOWN: &[&str] = &[
    "model",
    "plant",
    "mpc.Np",
    "mpc.Nu",
    "mpc.sqrt_rho",
    "mpc.rho",
    "mpc.gamma",
    "mpc.c",
    "mpc.tau",
    "mpc.max_iters",
    "mpc.bvls_tol",
    "mpc.bvls_max_iter",
    "mpc.line_search",
    "mpc.wu",
    "mpc.wy",
    "mpc.dense",
    "bounds.u_min",
    "bounds.u_max",
    "bounds.y_min",
    "bounds.y_max",
    "ref.y",
    "ref.u",
    "init.y",
    "init.u",
    "sim.steps",
    "sim.seed",
    "sim.noise",
    "out.trace",
    "out.bench",
    "bench.horizons",
    "check.instances",
    "check.solve_every",
];

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn get(&self, key: &str) -> Option<(usize, &str)> {
        self.map.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn string(&self, key: &str) -> Option<String> {
        self.get(key).map(|(_, v)| v.to_string())
    }

    fn parsed<V: std::str::FromStr>(&self, key: &str, kind: &str) -> Result<Option<V>, ParseError> {
        match self.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| ParseError::new(line, key, format!("expected {kind}, got `{v}`"))),
        }
    }

    fn float(&self, key: &str, default: f64) -> Result<f64, ParseError> {
        Ok(self.parsed(key, "a number")?.unwrap_or(default))
    }

    fn vector(&self, key: &str) -> Result<Option<(usize, Vec<f64>)>, ParseError> {
        match self.get(key) {
            None => Ok(None),
            Some((line, v)) => parse_vector(v).map(|x| Some((line, x))).map_err(|_| {
                ParseError::new(
                    line,
                    key,
                    format!("expected comma-separated numbers, got `{v}`"),
                )
            }),
        }
    }
}

fn parse_vector(v: &str) -> Result<Vec<f64>, ()> {
    let out: Result<Vec<f64>, _> = v.split(',').map(|s| parse_number(s.trim())).collect();
    match out {
        Ok(x) if !x.is_empty() => Ok(x),
        _ => Err(()),
    }
}

fn parse_number(s: &str) -> Result<f64, ()> {
    match s {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => {
            let x: f64 = s.parse().map_err(|_| ())?;
            if x.is_nan() {
                Err(())
            } else {
                Ok(x)
            }
        }
    }
}

fn broadcast(key: &str, line: usize, v: Vec<f64>, k: usize) -> Result<Vec<f64>, ParseError> {
    match v.len() {
        1 => Ok(vec![v[0]; k]),
        l if l == k => Ok(v),
        l => Err(ParseError::new(
            line,
            key,
            format!("expected 1 or {k} values, got {l}"),
        )),
    }
}

/// Parses and validates a configuration.
pub fn parse_config(text: &str) -> Result<SimConfig, ParseError> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(ParseError::new(line, content, "expected `key = value`"));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ParseError::new(line, k, "empty key"));
        }
        if !KNOWN.contains(&k) && schedule_step(k).is_none() {
            return Err(ParseError::new(line, k, "unknown key"));
        }
        if v.is_empty() {
            return Err(ParseError::new(line, k, "missing value"));
        }
        if let Some((first, _)) = map.insert(k.to_string(), (line, v.to_string())) {
            return Err(ParseError::new(
                line,
                k,
                format!("duplicate key, first set on line {first}"),
            ));
        }
    }
    let e = Entries { map };

    let model = e
        .string("model")
        .ok_or_else(|| ParseError::new(0, "model", "missing required key"))?;
    let plant = e.string("plant").unwrap_or_else(|| model.clone());
    let pred = resolve_model(&e, "model", &model)?;
    let plant_model = resolve_model(&e, "plant", &plant)?;
    if plant_model.model.dims().inputs != pred.model.dims().inputs
        || plant_model.model.dims().outputs != pred.model.dims().outputs
    {
        let line = e.get("plant").map_or(0, |(l, _)| l);
        return Err(ParseError::new(
            line,
            "plant",
            "plant and model channel counts differ",
        ));
    }
    let md = pred.model.dims();

    let np: usize = e
        .parsed("mpc.Np", "a positive integer")?
        .ok_or_else(|| ParseError::new(0, "mpc.Np", "missing required key"))?;
    let nu: usize = e
        .parsed("mpc.Nu", "a positive integer")?
        .ok_or_else(|| ParseError::new(0, "mpc.Nu", "missing required key"))?;
    let nu_line = e.get("mpc.Nu").map_or(0, |(l, _)| l);
    if np == 0 {
        return Err(ParseError::new(
            e.get("mpc.Np").map_or(0, |(l, _)| l),
            "mpc.Np",
            "must be at least 1",
        ));
    }
    if nu == 0 || nu > np {
        return Err(ParseError::new(
            nu_line,
            "mpc.Nu",
            "must satisfy 1 <= Nu <= Np",
        ));
    }

    let sqrt_rho = match (e.get("mpc.sqrt_rho"), e.get("mpc.rho")) {
        (Some(_), Some((line, _))) => {
            return Err(ParseError::new(
                line,
                "mpc.rho",
                "set either mpc.rho or mpc.sqrt_rho, not both",
            ))
        }
        (None, Some(_)) => e.float("mpc.rho", 1e8)?.sqrt(),
        _ => e.float("mpc.sqrt_rho", 1e4)?,
    };
    let line_search = match e.get("mpc.line_search") {
        None | Some((_, "armijo")) => LineSearchRule::Armijo,
        Some((_, "geometric")) => LineSearchRule::GeometricTheta,
        Some((line, v)) => {
            return Err(ParseError::new(
                line,
                "mpc.line_search",
                format!("expected armijo or geometric, got `{v}`"),
            ))
        }
    };

    let chan = |key: &str, k: usize, default: f64| -> Result<Vec<f64>, ParseError> {
        match e.vector(key)? {
            None => Ok(vec![default; k]),
            Some((line, v)) => broadcast(key, line, v, k),
        }
    };
    let (nuc, nyc) = (md.inputs, md.outputs);

    let mut y_ref = schedule(&e, "ref.y", nyc)?;
    let mut u_ref = schedule(&e, "ref.u", nuc)?;
    let init_y = chan_opt(&e, "init.y", nyc)?;
    let init_u = chan_opt(&e, "init.u", nuc)?;
    if y_ref.value_at(0).is_none() {
        y_ref.points.insert(
            0,
            (0, init_y.clone().unwrap_or_else(|| pred.y_nominal.clone())),
        );
    }
    if u_ref.value_at(0).is_none() {
        u_ref.points.insert(0, (0, vec![0.0; nuc]));
    }

    let bench_horizons = match e.get("bench.horizons") {
        None => vec![10, 20, 40, 60, 120],
        Some((line, v)) => {
            parse_horizons(v).map_err(|msg| ParseError::new(line, "bench.horizons", msg))?
        }
    };

    let cfg = SimConfig {
        model,
        plant,
        np,
        nu,
        sqrt_rho,
        gamma: e.float("mpc.gamma", 1e-6)?,
        c: e.float("mpc.c", 1e-4)?,
        tau: e.float("mpc.tau", 0.5)?,
        max_iters: e
            .parsed("mpc.max_iters", "a positive integer")?
            .unwrap_or(100),
        bvls_tol: e.float("mpc.bvls_tol", 1e-8)?,
        bvls_max_iter: e.parsed("mpc.bvls_max_iter", "a positive integer")?,
        line_search,
        dense: e.parsed("mpc.dense", "true or false")?.unwrap_or(false),
        wu: chan("mpc.wu", nuc, 0.1)?,
        wy: chan("mpc.wy", nyc, 1.0)?,
        u_min: chan("bounds.u_min", nuc, f64::NEG_INFINITY)?,
        u_max: chan("bounds.u_max", nuc, f64::INFINITY)?,
        y_min: chan("bounds.y_min", nyc, f64::NEG_INFINITY)?,
        y_max: chan("bounds.y_max", nyc, f64::INFINITY)?,
        y_ref,
        u_ref,
        init_y,
        init_u,
        steps: e.parsed("sim.steps", "a positive integer")?.unwrap_or(100),
        seed: e.parsed("sim.seed", "a non-negative integer")?.unwrap_or(0),
        noise: chan("sim.noise", nyc, 0.0)?,
        trace_path: e.string("out.trace"),
        bench_path: e.string("out.bench"),
        bench_horizons,
        check_instances: e
            .parsed("check.instances", "a positive integer")?
            .unwrap_or(100),
        check_solve_every: e
            .parsed("check.solve_every", "a non-negative integer")?
            .unwrap_or(5),
    };
    validate(&cfg, &e)?;
    Ok(cfg)
}

fn chan_opt(e: &Entries, key: &str, k: usize) -> Result<Option<Vec<f64>>, ParseError> {
    match e.vector(key)? {
        None => Ok(None),
        Some((line, v)) => broadcast(key, line, v, k).map(Some),
    }
}

fn resolve_model(e: &Entries, key: &str, name: &str) -> Result<BuiltinModel, ParseError> {
    builtin(name).ok_or_else(|| {
        let line = e.get(key).map_or(0, |(l, _)| l);
        ParseError::new(
            line,
            key,
            format!("unknown model `{name}` (known: {})", MODEL_NAMES.join(", ")),
        )
    })
}

fn schedule_step(key: &str) -> Option<(&str, usize)> {
    let (base, step) = key.split_once('@')?;
    if base != "ref.y" && base != "ref.u" {
        return None;
    }
    step.parse().ok().map(|s| (base, s))
}

fn schedule(e: &Entries, base: &str, k: usize) -> Result<Schedule, ParseError> {
    let mut points = Vec::new();
    if let Some((line, v)) = e.vector(base)? {
        points.push((0, broadcast(base, line, v, k)?));
    }
    for (key, (line, _)) in &e.map {
        if let Some((b, step)) = schedule_step(key) {
            if b == base {
                if step == 0 && !points.is_empty() {
                    return Err(ParseError::new(
                        *line,
                        key,
                        "step 0 repeats the base reference",
                    ));
                }
                let (_, v) = e.vector(key)?.expect("key present");
                points.push((step, broadcast(key, *line, v, k)?));
            }
        }
    }
    points.sort_by_key(|(s, _)| *s);
    Ok(Schedule { points })
}

pub fn parse_horizons(v: &str) -> Result<Vec<usize>, String> {
    let hs: Result<Vec<usize>, _> = v.split(',').map(|s| s.trim().parse::<usize>()).collect();
    let hs = hs.map_err(|_| format!("expected comma-separated horizons, got `{v}`"))?;
    if hs.is_empty() || hs.contains(&0) {
        return Err("horizons must be positive".into());
    }
    if hs.windows(2).any(|w| w[0] >= w[1]) {
        return Err("horizons must be strictly ascending".into());
    }
    Ok(hs)
}

fn validate(cfg: &SimConfig, e: &Entries) -> Result<(), ParseError> {
    let line = |k: &str| e.get(k).map_or(0, |(l, _)| l);
    let positive = |k: &str, v: f64, strict: bool| -> Result<(), ParseError> {
        if (strict && v > 0.0 || !strict && v >= 0.0) && v.is_finite() {
            Ok(())
        } else {
            Err(ParseError::new(line(k), k, "out of range"))
        }
    };
    positive("mpc.sqrt_rho", cfg.sqrt_rho, true)?;
    positive("mpc.gamma", cfg.gamma, false)?;
    positive("mpc.bvls_tol", cfg.bvls_tol, false)?;
    if !(cfg.c > 0.0 && cfg.c < 0.5) {
        return Err(ParseError::new(
            line("mpc.c"),
            "mpc.c",
            "must lie in (0, 0.5)",
        ));
    }
    if !(cfg.tau > 0.0 && cfg.tau < 1.0) {
        return Err(ParseError::new(
            line("mpc.tau"),
            "mpc.tau",
            "must lie in (0, 1)",
        ));
    }
    if cfg.max_iters == 0 {
        return Err(ParseError::new(
            line("mpc.max_iters"),
            "mpc.max_iters",
            "must be at least 1",
        ));
    }
    if cfg.steps == 0 {
        return Err(ParseError::new(
            line("sim.steps"),
            "sim.steps",
            "must be at least 1",
        ));
    }
    for (k, w) in [
        ("mpc.wu", &cfg.wu),
        ("mpc.wy", &cfg.wy),
        ("sim.noise", &cfg.noise),
    ] {
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(ParseError::new(
                line(k),
                k,
                "entries must be finite and non-negative",
            ));
        }
    }
    for (klo, khi, lo, hi) in [
        ("bounds.u_min", "bounds.u_max", &cfg.u_min, &cfg.u_max),
        ("bounds.y_min", "bounds.y_max", &cfg.y_min, &cfg.y_max),
    ] {
        if lo.iter().zip(hi).any(|(a, b)| a > b) {
            return Err(ParseError::new(line(khi), khi, format!("below {klo}")));
        }
    }
    Ok(())
}

impl SimConfig {
    pub fn prediction_model(&self) -> BuiltinModel {
        builtin(&self.model).expect("validated model name")
    }

    pub fn plant_model(&self) -> BuiltinModel {
        builtin(&self.plant).expect("validated plant name")
    }

    pub fn model_dims(&self) -> ModelDims {
        self.prediction_model().model.dims()
    }

    pub fn with_horizon(&self, np: usize, nu: usize) -> Self {
        Self {
            np,
            nu,
            ..self.clone()
        }
    }

    pub fn initial_point(&self) -> (Vec<f64>, Vec<f64>) {
        let m = self.prediction_model();
        (
            self.init_y.clone().unwrap_or(m.y_nominal),
            self.init_u.clone().unwrap_or(m.u_nominal),
        )
    }

    /// Solver configuration for the current horizons with the references
    /// in force at `step`.
    pub fn mpc_config(&self, step: usize) -> cfmpc_core::Result<MpcConfig<f64>> {
        let dims = ProblemDims::new(self.model_dims(), self.np, self.nu)?;
        let mut b = MpcConfig::builder(dims)
            .input_weights(&self.wu)
            .output_weights(&self.wy)
            .input_bounds(&self.u_min, &self.u_max)
            .output_bounds(&self.y_min, &self.y_max)
            .sqrt_rho(self.sqrt_rho)
            .gamma(self.gamma)
            .armijo_c(self.c)
            .tau(self.tau)
            .max_iters(self.max_iters)
            .bvls_tol(self.bvls_tol)
            .line_search(self.line_search);
        if let Some(cap) = self.bvls_max_iter {
            b = b.bvls_max_iter(cap);
        }
        if let Some(y) = self.y_ref.value_at(step) {
            b = b.output_reference(y);
        }
        if let Some(u) = self.u_ref.value_at(step) {
            b = b.input_reference(u);
        }
        b.build()
    }

    /// Effective configuration as text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let v = |x: &[f64]| x.iter().map(|a| fmt_num(*a)).collect::<Vec<_>>().join(", ");
        let _ = writeln!(s, "model = {}", self.model);
        let _ = writeln!(s, "plant = {}", self.plant);
        let _ = writeln!(s, "mpc.Np = {}", self.np);
        let _ = writeln!(s, "mpc.Nu = {}", self.nu);
        let _ = writeln!(s, "mpc.sqrt_rho = {}", fmt_num(self.sqrt_rho));
        let _ = writeln!(s, "mpc.gamma = {}", fmt_num(self.gamma));
        let _ = writeln!(s, "mpc.c = {}", fmt_num(self.c));
        let _ = writeln!(s, "mpc.tau = {}", fmt_num(self.tau));
        let _ = writeln!(s, "mpc.max_iters = {}", self.max_iters);
        let _ = writeln!(s, "mpc.bvls_tol = {}", fmt_num(self.bvls_tol));
        if let Some(cap) = self.bvls_max_iter {
            let _ = writeln!(s, "mpc.bvls_max_iter = {cap}");
        }
        let rule = match self.line_search {
            LineSearchRule::Armijo => "armijo",
            LineSearchRule::GeometricTheta => "geometric",
        };
        let _ = writeln!(s, "mpc.line_search = {rule}");
        let _ = writeln!(s, "mpc.wu = {}", v(&self.wu));
        let _ = writeln!(s, "mpc.wy = {}", v(&self.wy));
        let _ = writeln!(s, "mpc.dense = {}", self.dense);
        let _ = writeln!(s, "bounds.u_min = {}", v(&self.u_min));
        let _ = writeln!(s, "bounds.u_max = {}", v(&self.u_max));
        let _ = writeln!(s, "bounds.y_min = {}", v(&self.y_min));
        let _ = writeln!(s, "bounds.y_max = {}", v(&self.y_max));
        for (name, sch) in [("ref.y", &self.y_ref), ("ref.u", &self.u_ref)] {
            for (k, val) in &sch.points {
                if *k == 0 {
                    let _ = writeln!(s, "{name} = {}", v(val));
                } else {
                    let _ = writeln!(s, "{name}@{k} = {}", v(val));
                }
            }
        }
        if let Some(y) = &self.init_y {
            let _ = writeln!(s, "init.y = {}", v(y));
        }
        if let Some(u) = &self.init_u {
            let _ = writeln!(s, "init.u = {}", v(u));
        }
        let _ = writeln!(s, "sim.steps = {}", self.steps);
        let _ = writeln!(s, "sim.seed = {}", self.seed);
        let _ = writeln!(s, "sim.noise = {}", v(&self.noise));
        if let Some(p) = &self.trace_path {
            let _ = writeln!(s, "out.trace = {p}");
        }
        if let Some(p) = &self.bench_path {
            let _ = writeln!(s, "out.bench = {p}");
        }
        let hs: Vec<String> = self.bench_horizons.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(s, "bench.horizons = {}", hs.join(", "));
        let _ = writeln!(s, "check.instances = {}", self.check_instances);
        let _ = writeln!(s, "check.solve_every = {}", self.check_solve_every);
        s
    }
}

fn fmt_num(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x:?}")
    }
}
