//! End-to-end harness behavior through the compiled binary.

use std::path::Path;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_bqo-bench")
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path
}

fn fast_config(out: &Path, reps: usize, budget: usize) -> String {
    format!(
        r#"{{
  "problem": {{"tag": "analytic"}},
  "algorithms": ["bqo_disc"],
  "budget": {budget},
  "design": 4,
  "reps": {reps},
  "seed": 7,
  "out": "{}",
  "workers": 2,
  "inference": {{"mode": "fixed"}},
  "adam": {{"iters": 8, "restarts": 1}},
  "inner": {{"starts": 2, "steps": 12}},
  "disc_grid": 12
}}"#,
        out.display()
    )
}

#[test]
fn zero_budget_single_rep_trace_has_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = write_config(tmp.path(), &fast_config(&out, 1, 0));
    let status = Command::new(bin())
        .args(["run", "--config"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert!(status.success());
    let trace = std::fs::read_to_string(out.join("trace_bqo_disc_r000.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines.len(), 2, "header plus one row:\n{trace}");
    assert!(lines[0].starts_with("replication,iteration,algorithm"));
}

/// Strip the trailing wall-clock column, the one field that legitimately
/// varies between repeated runs.
fn without_elapsed(text: &str) -> String {
    text.lines()
        .map(|line| match line.rfind(',') {
            Some(k) => &line[..k],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn identical_config_and_seed_reproduce_byte_identical_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let out1 = tmp.path().join("a");
    let out2 = tmp.path().join("b");
    let cfg1 = write_config(tmp.path(), &fast_config(&out1, 2, 3));
    let status = Command::new(bin())
        .args(["run", "--config"])
        .arg(&cfg1)
        .status()
        .unwrap();
    assert!(status.success());
    let cfg2 = tmp.path().join("config2.json");
    std::fs::write(&cfg2, fast_config(&out2, 2, 3)).unwrap();
    let status = Command::new(bin())
        .args(["run", "--config"])
        .arg(&cfg2)
        .status()
        .unwrap();
    assert!(status.success());
    for rep in 0..2 {
        let a =
            std::fs::read_to_string(out1.join(format!("trace_bqo_disc_r{rep:03}.csv"))).unwrap();
        let b =
            std::fs::read_to_string(out2.join(format!("trace_bqo_disc_r{rep:03}.csv"))).unwrap();
        assert_eq!(
            without_elapsed(&a).into_bytes(),
            without_elapsed(&b).into_bytes(),
            "trace bytes differ for rep {rep}"
        );
    }
}

#[test]
fn replication_seeds_are_isolated() {
    // Replication 1's trace must not depend on whether replication 0 ran.
    let tmp = tempfile::tempdir().unwrap();
    let out_both = tmp.path().join("both");
    let cfg = write_config(tmp.path(), &fast_config(&out_both, 2, 3));
    assert!(Command::new(bin())
        .args(["run", "--config"])
        .arg(&cfg)
        .status()
        .unwrap()
        .success());

    // Rerun with reps=2 starting fresh is the same harness path; emulate
    // "skipping replication 0" by running reps=2 and comparing rep 1
    // against a single-shot recomputation through the library with the
    // same derived seed.
    let rep1 = std::fs::read_to_string(out_both.join("trace_bqo_disc_r001.csv")).unwrap();
    let seed = bqo::normal::derive_seed(bqo::normal::derive_seed(7, 7919), 1);
    let p = bqo::problems::analytic_problem(true);
    let mut s = bqo::driver::RunSettings::new(bqo::driver::Algorithm::BqoDisc);
    s.n0 = 4;
    s.budget = 3;
    s.theta_mode = bqo::driver::ThetaMode::Fixed;
    s.adam.iters = 8;
    s.adam.restarts = 1;
    s.inner = bqo::driver::InnerCfg {
        starts: 2,
        steps: 12,
    };
    s.disc_grid_per_dim = 12;
    let out = bqo::driver::run(&p, &s, seed).unwrap();
    // Compare the candidate sequence: byte forms match the trace fields.
    for (line, row) in rep1.lines().skip(2).zip(out.rows.iter().skip(1)) {
        let y_field: f64 = line.split(',').nth(5).unwrap().parse().unwrap();
        assert_eq!(y_field, row.y.unwrap());
    }
}

#[test]
fn invalid_config_exits_one_with_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"problem": {"tag": "nope"}, "algorithms": ["bqo_mc"], "budget": 1, "out": "x"}"#,
    );
    let output = Command::new(bin())
        .args(["run", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("problem.tag"), "stderr: {err}");
}

#[test]
fn malformed_json_exits_one_with_line_info() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "{\n  \"problem\": oops\n}");
    let output = Command::new(bin())
        .args(["run", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("line"), "stderr: {err}");
}

#[test]
fn plotdata_reaggregates_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = write_config(tmp.path(), &fast_config(&out, 2, 2));
    assert!(Command::new(bin())
        .args(["run", "--config"])
        .arg(&cfg)
        .status()
        .unwrap()
        .success());
    let output = Command::new(bin())
        .args(["plotdata", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let plot = std::fs::read_to_string(out.join("plotdata.csv")).unwrap();
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(plot, summary);
}

#[test]
fn plotdata_on_empty_dir_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let output = Command::new(bin())
        .args(["plotdata", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn cli_flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let override_out = tmp.path().join("elsewhere");
    let cfg = write_config(tmp.path(), &fast_config(&out, 2, 2));
    let status = Command::new(bin())
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--reps", "1", "--budget", "1", "--out"])
        .arg(&override_out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(override_out.join("trace_bqo_disc_r000.csv").exists());
    assert!(!override_out.join("trace_bqo_disc_r001.csv").exists());
    let trace = std::fs::read_to_string(override_out.join("trace_bqo_disc_r000.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3, "{trace}");
}
