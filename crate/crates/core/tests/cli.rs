use std::path::Path;
use std::process::Command;

use pitchpilot::cli::{run, EXIT_DATA, EXIT_OK, EXIT_USAGE};

fn pp(args: &[&str]) -> (i32, String, String) {
    let mut out = vec![];
    let mut err = vec![];
    let code = run(
        std::iter::once("pitchpilot").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    for p in [&a, &b] {
        let (code, out, _) = pp(&["gen-data", "--episodes", "1", "--seed", "6", "--out", s(p)]);
        assert_eq!(code, EXIT_OK);
        assert!(out.starts_with("config: command=gen-data episodes=1 seed=6"));
        assert!(out.contains("episode seed=6"));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(pp(&["gen-data", "--episodes", "0", "--out", "x"]).0, EXIT_USAGE);
    assert_eq!(pp(&["train", "--model", "cnn", "--out", "x"]).0, EXIT_USAGE);
    assert_eq!(pp(&["train", "--model", "mlp", "--data", "d", "--out", "x"]).0, EXIT_USAGE);
    assert_eq!(pp(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(pp(&["--help"]).0, EXIT_OK);
}

#[test]
fn bad_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk");
    std::fs::write(&junk, b"not a dataset").unwrap();
    let out = dir.path().join("m");
    let (code, stdout, err) = pp(&["train", "--model", "cnn", "--paper-scale", "--data", s(&junk), "--out", s(&out)]);
    assert_eq!(code, EXIT_DATA);
    // the resolved budget is echoed before any work starts
    assert!(stdout.contains("model=cnn iterations=1000000"), "{stdout}");
    assert!(err.starts_with("error:"));
    assert_eq!(pp(&["eval", "--model", s(&junk), "--n", "1"]).0, EXIT_DATA);
    assert_eq!(pp(&["bench", "--model", s(&dir.path().join("absent"))]).0, EXIT_DATA);
    let (code, _, _) = pp(&["gen-data", "--episodes", "1", "--out", s(&dir.path().join("no/such/dir/d.bin"))]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn train_eval_bench_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    assert_eq!(pp(&["gen-data", "--episodes", "1", "--seed", "3", "--out", s(&data)]).0, EXIT_OK);
    let model = dir.path().join("r.model");
    let (code, out, err) = pp(&[
        "train", "--model", "rcnn", "--data", s(&data), "--out", s(&model), "--iters", "30", "--seed", "5",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("iterations=30") && out.contains("ref R-CNN"));
    let report = std::fs::read_to_string(dir.path().join("r.model.csv")).unwrap();
    assert!(report.starts_with("# pitchpilot "));
    let last = report.lines().last().unwrap();
    assert!(last.starts_with("30,"), "{last}");
    let text_head = std::fs::read(&model).unwrap();
    assert!(String::from_utf8_lossy(&text_head[..200]).contains("# pitchpilot "));

    let export = dir.path().join("ex");
    let (code, out, err) = pp(&["eval", "--model", s(&model), "--seeds", "700", "--n", "2", "--export", s(&export)]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("test_rms") && out.contains("goals") && out.contains("\"E_mean\""));
    assert_eq!(std::fs::read_dir(&export).unwrap().count(), 4);

    let (code, out, _) = pp(&["bench", "--model", s(&model), "--n", "1"]);
    assert!(code == EXIT_OK || code == 3);
    let line = out.lines().find(|l| l.starts_with("mean_ms=")).unwrap();
    let fields: Vec<f64> = line
        .split_whitespace()
        .take(3)
        .map(|kv| kv.split_once('=').unwrap().1.parse().unwrap())
        .collect();
    assert_eq!(fields.len(), 3);
    assert!(out.contains("latency gate (mean < 10 ms): "));
}

#[test]
fn expert_sentinel_scores() {
    let (code, out, _) = pp(&["eval", "--model", "expert", "--n", "20", "--jobs", "1"]);
    assert_eq!(code, EXIT_OK);
    let summary = out.lines().find(|l| l.starts_with("summary: ")).unwrap();
    let goals: usize = summary
        .split("\"goals\": ")
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(goals >= 18, "{summary}");
}

#[test]
fn seed_env_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pitchpilot"))
        .args(["gen-data", "--episodes", "1", "--out"])
        .arg(dir.path().join("d.bin"))
        .env("PITCHPILOT_SEED", "42")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("seed=42") && stdout.contains("episode seed=42 "));
    let bad = Command::new(env!("CARGO_BIN_EXE_pitchpilot"))
        .args(["gen-data", "--episodes", "0", "--out", "x"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
