//! End-to-end runs of the `multionlab` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn smoke_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml").display().to_string()
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multionlab")).current_dir(dir).env("MULTIONLAB_THREADS", "1").args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn gen_episodes_is_deterministic_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = smoke_config();
    let args = |out: &'static str| vec!["gen-episodes", "--split", "val", "--count", "5", "--seed", "3", "--config", &cfg, "--out", out];
    assert_eq!(code(&run(d, &args("a.jsonl"))), 0);
    assert_eq!(code(&run(d, &args("b.jsonl"))), 0);
    assert_eq!(fs::read(d.join("a.jsonl")).unwrap(), fs::read(d.join("b.jsonl")).unwrap());

    let again = run(d, &args("a.jsonl"));
    assert_eq!(code(&again), 1, "{}", text(&again));
    let mut forced = args("a.jsonl");
    forced.push("--force");
    assert_eq!(code(&run(d, &forced)), 0);

    let one = run(d, &["gen-episodes", "--split", "test", "--count", "1", "--out", "one.jsonl"]);
    assert_eq!(code(&one), 0, "{}", text(&one));
    let ds = multionlab::dataset::Dataset::from_text(&fs::read_to_string(d.join("one.jsonl")).unwrap()).unwrap();
    assert_eq!(ds.episodes.len(), 1);
}

#[test]
fn bad_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["gen-episodes", "--split", "nowhere", "--count", "1", "--out", "x"])), 1);
    assert_eq!(code(&run(d, &["train", "--config", "missing.toml"])), 1);
    fs::write(d.join("bad.toml"), "version = 1\n[agent]\nhiden = 3\n").unwrap();
    let bad = run(d, &["train", "--config", "bad.toml"]);
    assert_eq!(code(&bad), 1);
    assert!(text(&bad).contains("line 3"), "{}", text(&bad));
    assert_eq!(code(&run(d, &["verify", "--suite", "nonsense"])), 1);
    assert_eq!(code(&run(d, &["no-such-command"])), 1);
}

#[test]
fn verify_reports_injected_defects() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(dir.path(), &["verify", "--suite", "labels", "--suite", "ppo"]);
    assert_eq!(code(&ok), 0, "{}", text(&ok));
    for defect in ["label-sign-flip", "wrong-clip-bound"] {
        let o = run(dir.path(), &["verify", "--inject", defect]);
        assert_eq!(code(&o), 2, "{defect}: {}", text(&o));
    }
}

#[test]
fn train_eval_and_replay_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = smoke_config();
    let t = run(d, &["train", "--config", &cfg, "--aux", "dir+dist", "--out", "run", "--seed", "2"]);
    assert_eq!(code(&t), 0, "{}", text(&t));
    assert!(d.join("run/config.toml").exists());
    // A finished run is not silently overwritten.
    assert_eq!(code(&run(d, &["train", "--config", &cfg, "--out", "run"])), 1);
    let r = run(d, &["train", "--resume", "run"]);
    assert_eq!(code(&r), 0, "{}", text(&r));

    assert_eq!(code(&run(d, &["gen-episodes", "--split", "val", "--count", "3", "--config", &cfg, "--out", "val.jsonl"])), 0);
    let e = run(d, &["eval", "--checkpoint", "run", "--checkpoint", "run", "--dataset", "val.jsonl", "--mode", "sample", "--emit-csv", "r.csv", "--record", "rec.jsonl"]);
    assert_eq!(code(&e), 0, "{}", text(&e));
    assert!(text(&e).contains("mean of 2 runs"));
    assert_eq!(fs::read_to_string(d.join("rec.jsonl")).unwrap().lines().count(), 6);

    let one = run(d, &["replay", "--trajectory", "rec.jsonl", "--out", "ep.jsonl", "--episode", "0", "--csv"]);
    assert_eq!(code(&one), 0, "{}", text(&one));
    let all = run(d, &["replay", "--trajectory", "rec.jsonl", "--out", "ep.jsonl"]);
    assert_eq!(code(&all), 0, "{}", text(&all));
    assert!(d.join("ep-r5-ep2.jsonl").exists());
    assert_eq!(code(&run(d, &["replay", "--check", "ep-r5-ep2.jsonl"])), 0);
    fs::write(d.join("cut.jsonl"), fs::read_to_string(d.join("ep-r5-ep2.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(code(&run(d, &["replay", "--check", "cut.jsonl"])), 2);
}
