use std::path::Path;
use std::process::{Command, Output};

fn nesy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nesy")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_writes_header_plus_samples() {
    let dir = tempfile::tempdir().unwrap();
    let o = nesy(&["gen", "--task", "xor", "--L", "20", "--N", "9000", "--seed", "1", "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 9001);
    assert!(dir.path().join("config.resolved.json").exists());
}

#[test]
fn check_props_reports_both_suites() {
    let o = nesy(&["check-props", "--seed", "7", "--instances", "50"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("prop1: 50/50, prop2: 50/50"), "{}", stdout(&o));
}

#[test]
fn grad_check_passes() {
    let o = nesy(&["grad-check"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("grad-check: 20/20"), "{}", stdout(&o));
}

#[test]
fn exit_codes() {
    assert_eq!(nesy(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(nesy(&["gen", "--task", "xor"]).status.code(), Some(1));
    assert_eq!(nesy(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(nesy(&["train", "--data", p(&missing), "--out", p(dir.path())]).status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    nesy(&["gen", "--task", "xor", "--L", "3", "--N", "20", "--out", p(dir.path())]);
    let data = dir.path().join("train.jsonl");
    let o = nesy(&["train", "--data", p(&data), "--out", p(dir.path()), "--set", "lamda=0.2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda"));
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"t1": {"step_fraction": 0.01, "bogus": 1}}"#).unwrap();
    let o = nesy(&["train", "--data", p(&data), "--out", p(dir.path()), "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_help_lists_every_key() {
    let o = nesy(&["train", "--help"]);
    let text = stdout(&o);
    for key in ["alpha", "lambda", "gamma", "eta", "epochs", "t1.step_fraction", "t2.eps", "ablation", "b_values", "coverage"] {
        assert!(text.contains(key), "missing {key} in\n{text}");
    }
    assert!(text.contains("0.5") && text.contains("0.1") && text.contains("0.001"));
}

#[test]
fn train_export_solve_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = |split: &str, n: &str| {
        let o = nesy(&["gen", "--task", "sudoku", "--size", "4", "--N", n, "--seed", "2", "--split", split, "--out", p(d)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    gen("train", "400");
    gen("test", "50");
    let (train, test) = (d.join("train.jsonl"), d.join("test.jsonl"));
    let run_dir = d.join("run");
    let o = nesy(&["train", "--data", p(&train), "--out", p(&run_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("epochs: "));
    for f in ["constraints.json", "metrics.csv", "metrics.jsonl", "model.ckpt.json", "config.resolved.json"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }

    // interrupted and resumed run lands on the same bytes
    let split_dir = d.join("split");
    let o = nesy(&["train", "--data", p(&train), "--out", p(&split_dir), "--stop-after", "40"]);
    assert!(o.status.success());
    let ckpt = split_dir.join("model.ckpt.json");
    let o = nesy(&["train", "--data", p(&train), "--out", p(&split_dir), "--resume", p(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "constraints.json"] {
        assert_eq!(std::fs::read(run_dir.join(f)).unwrap(), std::fs::read(split_dir.join(f)).unwrap(), "{f} differs");
    }

    let cons = run_dir.join("constraints.json");
    let o = nesy(&["export", "--constraints", p(&cons), "--out", p(&run_dir)]);
    assert!(o.status.success());
    let opb = run_dir.join("export.opb");
    assert!(std::fs::read_to_string(&opb).unwrap().starts_with("* #variable= 64"));
    assert!(std::fs::read_to_string(run_dir.join("export.smt2")).unwrap().contains("(check-sat)"));

    let o = nesy(&["solve", "--constraints", p(&cons), "--data", p(&test), "--index", "3"]);
    assert!(o.status.success());
    let sol: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(sol["assignment"].as_array().unwrap().len(), 64);
    let o = nesy(&["solve", "--constraints", p(&opb), "--assign", &"x".repeat(64)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let eval_dir = d.join("eval");
    let o = nesy(&["eval", "--constraints", p(&cons), "--data", p(&test), "--out", p(&eval_dir)]);
    assert!(o.status.success());
    let line = stdout(&o);
    assert!(line.starts_with("perception: ") && line.contains("solving: ") && line.contains("total: "), "{line}");
    assert!(eval_dir.join("eval.json").exists());
}
