use std::path::Path;
use std::process::{Command, Output};

fn activis(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_activis"));
    cmd.args(args).env_remove("ACTIVIS_OUT_DIR");
    if let Some(dir) = out_env {
        cmd.env("ACTIVIS_OUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn lists_bundled_scenarios() {
    let o = activis(&["scenarios"], None);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for name in ["follower_basic", "sharp_turns", "clutter_multi_actor", "lighting_change", "dual_dominant", "dueling_room_like"] {
        assert!(text.contains(name), "{name}");
    }
}

#[test]
fn run_writes_log_trace_and_metrics() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    let o = activis(
        &["run", "--scenario", "lighting_change", "--agent", "oracle", "--seed", "3", "--max-steps", "20", "--out", out],
        None,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = std::fs::read_to_string(d.path().join("lighting_change_oracle_seed3.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 22);
    assert!(log.lines().next().unwrap().contains("\"config_hash\""));
    let csv = std::fs::read_to_string(d.path().join("lighting_change_oracle_seed3_metrics.csv")).unwrap();
    assert!(csv.starts_with("# config_hash="));
    assert!(csv.lines().nth(1).unwrap().starts_with("scenario,seed,recall"));
    assert!(d.path().join("lighting_change_oracle_seed3_trace.csv").is_file());
}

#[test]
fn output_dir_comes_from_the_environment() {
    let d = tempfile::tempdir().unwrap();
    let o = activis(&["run", "--agent", "random", "--max-steps", "5"], Some(d.path()));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.path().join("follower_basic_random_seed0.jsonl").is_file());
}

#[test]
fn frames_are_dumped_on_request() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    let o = activis(&["run", "--agent", "oracle", "--max-steps", "3", "--frames", "--out", out], None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let frame = std::fs::read(d.path().join("frames/ep0_t2.pgm")).unwrap();
    assert!(frame.starts_with(b"P5\n# config_hash="));
}

#[test]
fn config_errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    std::fs::write(&cfg, "agent = \"oracle\"\nmax_stepz = 3\n").unwrap();
    let o = activis(&["run", "--config", cfg.to_str().unwrap(), "--out", d.path().to_str().unwrap()], None);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("max_stepz"));

    let o = activis(&["run", "--scenario", "no_such_scene", "--out", d.path().to_str().unwrap()], None);
    assert_eq!(code(&o), 2);

    let o = activis(&["run", "--agent", "human"], None);
    assert_eq!(code(&o), 2);

    let grid = d.path().join("grid.toml");
    std::fs::write(&grid, "[[variant]]\nname = \"x\"\nset = { \"gains.lambda_z\" = 1.0 }\n").unwrap();
    let o = activis(
        &["ablate", "--grid", grid.to_str().unwrap(), "--seeds", "0", "--out", d.path().to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 2);
    assert!(!d.path().join("ablation.csv").exists());
}

#[test]
fn suite_writes_per_agent_csv_and_summary() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    let o = activis(
        &["suite", "--scenario", "dual_dominant", "--agents", "oracle,random", "--seeds", "0..2", "--max-steps", "15", "--out", out],
        None,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let oracle = std::fs::read_to_string(d.path().join("dual_dominant_oracle_metrics.csv")).unwrap();
    assert_eq!(oracle.lines().count(), 2 + 3);
    let summary = std::fs::read_to_string(d.path().join("dual_dominant_summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert!(lines[0].starts_with("# config_hash="));
    assert!(lines[1].starts_with("agent,episodes,recall_mean,recall_std"));
    assert!(lines[2].starts_with("oracle,3,1,0,"));
    assert!(lines[3].starts_with("random,3,"));

    let plots = d.path().join("plots");
    let o = activis(
        &["plot", "--in", d.path().join("dual_dominant_oracle_metrics.csv").to_str().unwrap(), "--out", plots.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(plots.join("dual_dominant_oracle_metrics_recall.svg").is_file());
}

#[test]
fn plot_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.csv");
    std::fs::write(&bad, "# x\nscenario,seed,recall\na,0,1\na,1,oops\n").unwrap();
    let o = activis(&["plot", "--in", bad.to_str().unwrap(), "--out", d.path().to_str().unwrap()], None);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bad.csv:4:"), "{}", stderr(&o));

    let o = activis(&["plot", "--in", d.path().join("missing.csv").to_str().unwrap()], None);
    assert_eq!(code(&o), 1);
}
