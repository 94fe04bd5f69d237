//! Subcommands and exit codes of the `cfmpc` binary.

use std::path::{Path, PathBuf};
use std::process::Command;

use cfmpc_cli::cli::{self, EXIT_NOT_CONVERGED, EXIT_OK, EXIT_PARSE, EXIT_USAGE};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cfmpc-commands-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn write_config(name: &str, text: &str) -> PathBuf {
    let p = scratch(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["cfmpc"];
    full.extend_from_slice(args);
    let code = cli::run(full, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_cfmpc");
    let lti = configs().join("lti.conf");
    let ok = Command::new(bin)
        .args(["solve", "--config", path_str(&lti)])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("converged = true"));
    let usage = Command::new(bin).arg("frobnicate").output().unwrap();
    assert_eq!(usage.status.code(), Some(EXIT_USAGE));
}

#[test]
fn help_lists_defaults() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("mpc.sqrt_rho = 1e4"));
}

#[test]
fn missing_config_is_usage_error() {
    let (code, _, err) = run(&["solve"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("--config"));
}

#[test]
fn unreadable_and_malformed_configs_are_parse_errors() {
    assert_eq!(
        run(&["solve", "--config", "/nonexistent/cfmpc.conf"]).0,
        EXIT_PARSE
    );
    let bad = write_config(
        "bad.conf",
        "model = lti-arx-demo\nmpc.Np = 10\nmpc.Nu = 12\n",
    );
    let (code, _, err) = run(&["config-dump", "--config", path_str(&bad)]);
    assert_eq!(code, EXIT_PARSE);
    assert!(err.contains("mpc.Nu"), "{err}");
    let unknown = write_config(
        "unknown.conf",
        "model = lti-arx-demo\nmpc.Np = 10\nmpc.Nu = 4\nmpc.nope = 1\n",
    );
    let (code, _, err) = run(&["config-dump", "--config", path_str(&unknown)]);
    assert_eq!(code, EXIT_PARSE);
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn config_dump_round_trips() {
    let cstr = configs().join("cstr.conf");
    let (code, out, _) = run(&["config-dump", "--config", path_str(&cstr)]);
    assert_eq!(code, EXIT_OK);
    let again = write_config("dump.conf", &out);
    let (code2, out2, _) = run(&["config-dump", "--config", path_str(&again)]);
    assert_eq!(code2, EXIT_OK);
    assert_eq!(out, out2);
}

#[test]
fn horizon_override_changes_dimensions() {
    let lti = configs().join("lti.conf");
    let (code, out, _) = run(&["config-dump", "--config", path_str(&lti), "--horizon", "7"]);
    assert_eq!(code, EXIT_OK);
    assert!(
        out.contains("mpc.Np = 7") && out.contains("mpc.Nu = 7"),
        "{out}"
    );
    assert_eq!(
        run(&["solve", "--config", path_str(&lti), "--horizon", "x"]).0,
        EXIT_USAGE
    );
}

#[test]
fn solve_reports_non_convergence() {
    let text = "model = cstr\nmpc.Np = 10\nmpc.Nu = 10\nmpc.max_iters = 1\nmpc.gamma = 1e-14\n\
                mpc.wy = 1000, 1000\nref.y = 1.2, 4.346408\n";
    let p = write_config("capped.conf", text);
    let (code, out, _) = run(&["solve", "--config", path_str(&p)]);
    assert_eq!(code, EXIT_NOT_CONVERGED, "{out}");
    assert!(out.contains("status = MaxIterations"));
}

#[test]
fn simulate_writes_versioned_trace() {
    let lti = configs().join("lti.conf");
    let out_path = scratch("trace.csv");
    let (code, _, _) = run(&[
        "simulate",
        "--config",
        path_str(&lti),
        "--out",
        path_str(&out_path),
    ]);
    assert_eq!(code, EXIT_OK);
    let text = std::fs::read_to_string(&out_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("schema=1"));
    assert_eq!(
        lines.next(),
        Some("step,solve_us,outer_iters,bvls_iters,alpha,phi,h_inf,converged,u1,u2,y1,y2")
    );
    assert_eq!(lines.count(), 40);
}

#[test]
fn simulate_dense_matches_structured() {
    let lti = configs().join("lti.conf");
    let strip = |t: &str| -> Vec<String> {
        t.lines()
            .map(|l| {
                let mut c: Vec<&str> = l.split(',').collect();
                if c.len() > 1 {
                    c.remove(1);
                }
                // u and y columns only
                c.iter()
                    .skip(c.len().saturating_sub(4))
                    .copied()
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect()
    };
    let (_, a, _) = run(&["simulate", "--config", path_str(&lti)]);
    let (_, b, _) = run(&["simulate", "--config", path_str(&lti), "--dense"]);
    let (a, b) = (strip(&a), strip(&b));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b).skip(2) {
        for (p, q) in x.split(',').zip(y.split(',')) {
            let (p, q): (f64, f64) = (p.parse().unwrap(), q.parse().unwrap());
            assert!((p - q).abs() <= 1e-9, "{x} vs {y}");
        }
    }
}

#[test]
fn check_passes_on_small_dims_and_rejects_huge() {
    let lti = configs().join("lti.conf");
    let (code, out, err) = run(&["check", "--config", path_str(&lti), "--instances", "20"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("instances = 20"));
    assert_eq!(
        run(&["check", "--config", path_str(&lti), "--horizon", "100"]).0,
        EXIT_USAGE
    );
}

#[test]
fn bench_emits_one_row_per_horizon() {
    let lti = configs().join("lti.conf");
    let (code, out, err) = run(&["bench", "--config", path_str(&lti), "--horizon", "4,8"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "schema=1");
    assert!(lines[1].starts_with("horizon,instances,"));
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("4,40,") && lines[3].starts_with("8,40,"));
}
