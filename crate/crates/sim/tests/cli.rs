use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contact-mpc")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn sha(o: &Output) -> String {
    stdout(o).lines().find_map(|l| l.strip_prefix("trace sha256 ")).expect("sha line").to_string()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(cli(&["simulate"]).status.code(), Some(2));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_configs_exit_2() {
    let path = scenario("scenario1.toml");
    let p = path.to_str().unwrap();
    assert_eq!(cli(&["simulate", "/nonexistent.toml"]).status.code(), Some(2));
    assert_eq!(cli(&["simulate", p, "--dry-run", "--override", "no_equals_sign"]).status.code(), Some(2));
    assert_eq!(cli(&["simulate", p, "--dry-run", "--override", "plant.bogus=1"]).status.code(), Some(2));
    assert_eq!(cli(&["simulate", p, "--dry-run", "--override", "costs.barrier_scale=1.0"]).status.code(), Some(2));
}

#[test]
fn simulate_writes_traces_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("scenario1.toml");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = cli(&[
            "simulate",
            path.to_str().unwrap(),
            "--deterministic",
            "--override",
            "duration_s=0.8",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join("trace.csv").is_file());
        assert!(out.join("contacts.csv").is_file());
        (sha(&o), std::fs::read(out.join("trace.csv")).unwrap())
    };
    let (sa, ta) = run("a");
    let (sb, tb) = run("b");
    assert_eq!(sa, sb);
    assert_eq!(ta, tb);
    let header = String::from_utf8_lossy(&ta).lines().next().unwrap().to_string();
    assert!(header.starts_with("t_s,phase,q1_rad"));
    assert_eq!(String::from_utf8_lossy(&ta).lines().count(), 801);
}

#[test]
fn seed_changes_the_noisy_trace() {
    let path = scenario("scenario2.toml");
    let p = path.to_str().unwrap();
    let a = cli(&["simulate", p, "--dry-run", "--override", "duration_s=2.6", "--seed", "1"]);
    let b = cli(&["simulate", p, "--dry-run", "--override", "duration_s=2.6", "--seed", "2"]);
    assert_ne!(sha(&a), sha(&b));
}

#[test]
fn failed_thresholds_exit_1() {
    let path = scenario("scenario1_no_feedback.toml");
    // Contact starts about 1.9 s in, so a short run never reaches 30 N.
    let o = cli(&["simulate", path.to_str().unwrap(), "--dry-run", "--override", "duration_s=0.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn solve_lqr_fixture_warm_starts() {
    let o = cli(&["solve", scenario("lqr.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("cold:") && text.contains("warm: iterations 1"));
}

#[test]
fn bench_reports_three_rows() {
    let o = cli(&["bench", scenario("scenario1.toml").to_str().unwrap(), "--cycles", "20"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for k in 0..3 {
        assert!(text.contains(&format!("{k} contacts:")));
    }
    assert!(text.contains("reference 6.8 kHz"));
}

#[test]
fn check_passes() {
    let o = cli(&["check", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.contains(": PASS (")).count(), 6);
}
