//! End-to-end tests of the `capsim` binary: exit codes and report formats.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn capsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capsim"))
        .args(args)
        .env_remove("CAPSIM_SEED")
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> String {
    scenarios_dir().join(name).display().to_string()
}

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_fig3_reports_one_violation() {
    let out = capsim(&["run", &scenario("fig3.cap")]);
    assert_eq!(out.status.code(), Some(2));
    let text = stdout(&out);
    assert!(text.contains("1 violation"), "{text}");
    assert!(text.contains("invalid-capability-store"), "{text}");
    assert!(text.contains("parent chain 1 -> 2 -> 3"), "{text}");
}

#[test]
fn run_fig3_json() {
    let out = capsim(&["run", "--report", "json", &scenario("fig3.cap")]);
    assert_eq!(out.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["version"], 1);
    assert_eq!(v["events"], 6);
    let viol = v["violations"].as_array().unwrap();
    assert_eq!(viol.len(), 1);
    assert_eq!(viol[0]["kind"], "invalid-capability-store");
    assert_eq!(viol[0]["event_index"], 4);
    assert_eq!(viol[0]["cap"], 3);
    assert_eq!(viol[0]["parents"], serde_json::json!([1, 2, 3]));
    assert_eq!(viol[0]["addr"], 0x1000);
    assert_eq!(viol[0]["width"], 8);
    assert!(v["stats"]["caps_invalidated"].as_u64() <= v["stats"]["caps_created"].as_u64());
}

#[test]
fn run_uaf_and_helloworld() {
    let out = capsim(&["run", &scenario("uaf.cap")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("invalid-capability-store"));
    let out = capsim(&["run", &scenario("helloworld.cap")]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
}

#[test]
fn run_strict_mode_rejects_foreign_stack() {
    let out = capsim(&["run", &scenario("stack_spill.cap")]);
    assert!(stdout(&out).contains("invalid-capability-store"));
    let out = capsim(&["run", "--mode", "strict", &scenario("stack_spill.cap")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("untracked-access"), "{}", stdout(&out));
}

#[test]
fn run_continue_reports_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("two.cap");
    std::fs::write(
        &path,
        "alloc r1, 0x1000, 8\ndrop r1\nsd r0, 0(r1), 8\nld r2, 0(r1), 8\ndrop r1\n",
    )
    .unwrap();
    let path = path.display().to_string();
    let out = capsim(&["run", "--report", "json", &path]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["violations"].as_array().unwrap().len(), 1);
    let out = capsim(&["run", "--report", "json", "--on-violation", "continue", &path]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    // the first violation strips r1, the rest go to freed (foreign) memory
    assert_eq!(v["violations"].as_array().unwrap().len(), 1);
}

#[test]
fn run_parse_error_is_located() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cap");
    std::fs::write(&path, "alloc r1, 0x1000, 8\nfrobnicate r1\n").unwrap();
    let out = capsim(&["run", &path.display().to_string()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("bad.cap:2:1"), "{err}");
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(capsim(&["run"]).status.code(), Some(1));
    assert_eq!(capsim(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(capsim(&["run", "--mode", "lax", "x.cap"]).status.code(), Some(1));
    assert_eq!(capsim(&["run", "/nonexistent/x.cap"]).status.code(), Some(1));
    assert_eq!(capsim(&["--help"]).status.code(), Some(0));
}

#[test]
fn check_corpus_passes() {
    let out = capsim(&["check", &scenarios_dir().display().to_string()]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("11 files, 11 passed"), "{}", stdout(&out));
}

#[test]
fn check_flipped_expectation_fails_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenarios_dir().join("fig3.cap")).unwrap();
    let flipped = text.replace("expect violation invalid-capability-store", "expect ok");
    let path = dir.path().join("fig3.cap");
    std::fs::write(&path, flipped).unwrap();
    let out = capsim(&["check", &path.display().to_string()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stdout(&out).contains("line 13: expect ok, observed violation invalid-capability-store"),
        "{}",
        stdout(&out)
    );
}

#[test]
fn check_directory_with_malformed_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(scenarios_dir().join("fig3.cap"), dir.path().join("a.cap")).unwrap();
    std::fs::write(dir.path().join("broken.cap"), "expect ok\n").unwrap();
    let out = capsim(&["check", &dir.path().display().to_string()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("broken.cap"), "{}", stderr(&out));
}

#[test]
fn check_relaxation_controls_flip() {
    let raw = scenario("raw_interleave.cap");
    let cell = scenario("cell_siblings.cap");
    assert_eq!(capsim(&["check", &raw]).status.code(), Some(0));
    assert_eq!(capsim(&["check", "--no-raw-relax", &raw]).status.code(), Some(2));
    assert_eq!(capsim(&["check", "--no-cell-relax", &raw]).status.code(), Some(0));
    assert_eq!(capsim(&["check", &cell]).status.code(), Some(0));
    assert_eq!(capsim(&["check", "--no-cell-relax", &cell]).status.code(), Some(2));
    assert_eq!(capsim(&["check", "--no-raw-relax", &cell]).status.code(), Some(0));
}

#[test]
fn fuzz_zero_traces() {
    let out = capsim(&["fuzz", "--traces", "0"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("0 traces"), "{}", stdout(&out));
}

#[test]
fn fuzz_small_run_is_clean_and_seed_env_wins() {
    let out = capsim(&[
        "fuzz", "--traces", "100", "--events", "64", "--report", "json", "--seed", "3",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["seed"], 3);
    assert_eq!(v["discrepancies"], 0);
    let out = Command::new(env!("CARGO_BIN_EXE_capsim"))
        .args(["fuzz", "--traces", "10", "--report", "json", "--seed", "3"])
        .env("CAPSIM_SEED", "99")
        .output()
        .unwrap();
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["seed"], 99);
}

#[test]
fn fuzz_buggy_kernel_writes_reproducers() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("repro");
    let out = capsim(&[
        "fuzz",
        "--traces",
        "50",
        "--inject-fault",
        "skip-disconnect",
        "--out",
        &out_dir.display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stdout(&out));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    let first = &summary["discrepancies"][0];
    let shrunk = first["shrunk_file"].as_str().unwrap();
    let text = std::fs::read_to_string(shrunk).unwrap();
    assert!(text.starts_with("# seed 0 trace "), "{text}");
    // a reproducer is itself a valid trace
    assert_eq!(capsim(&["check", shrunk]).status.code(), Some(0));
}
