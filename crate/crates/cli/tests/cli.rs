use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
    "corpus": {"samples": 200},
    "pretrain": {"steps": 12, "log_interval": 4},
    "evolve": {"steps": 6},
    "finetune": {"steps": 10},
    "prompt": {"steps": 10},
    "transductive": {"t_max": 2}
}"#;

fn evolm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evolm"))
        .current_dir(dir)
        .args(args)
        .env_remove("EVOLM_LOG_LEVEL")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = evolm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), config).unwrap();
    ok(dir.path(), &["--config", "run.json", "gen-corpus"]);
    ok(dir.path(), &["--config", "run.json", "gen-tasks"]);
    dir
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn pretraining_twice_gives_identical_files() {
    let (a, b) = (setup(SMALL), setup(SMALL));
    for d in [a.path(), b.path()] {
        ok(d, &["--config", "run.json", "pretrain"]);
    }
    for f in ["corpus.txt", "vocab.json", "metrics/pretrain.jsonl", "encoder.ckpt"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f} differs");
    }
    let c = setup(SMALL);
    ok(c.path(), &["--config", "run.json", "--seed", "1", "pretrain"]);
    assert_ne!(read(a.path(), "encoder.ckpt"), read(c.path(), "encoder.ckpt"));
}

#[test]
fn scan_leaves_the_checkpoint_untouched() {
    let dir = setup(SMALL);
    let d = dir.path();
    ok(d, &["--config", "run.json", "pretrain"]);
    let before = read(d, "encoder.ckpt");
    ok(d, &["--config", "run.json", "scan"]);
    assert_eq!(read(d, "encoder.ckpt"), before);
    let index = String::from_utf8(read(d, "neglected.jsonl")).unwrap();
    assert!(index.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));

    ok(d, &["--config", "run.json", "evolve"]);
    assert_eq!(read(d, "encoder.ckpt"), before);
    assert!(d.join("evolved.ckpt").is_file());
    let eval = ok(d, &["--config", "run.json", "--checkpoint", "evolved.ckpt", "eval"]);
    let v: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(v["kind"], "encoder");
    assert!(v["neglected_count"].is_u64());
}

#[test]
fn large_target_task_gets_a_routing_warning() {
    let config = SMALL.replacen('{', r#"{"low_resource_threshold": 16,"#, 1);
    let dir = setup(&config);
    let d = dir.path();
    ok(d, &["--config", "run.json", "prompt-tune"]);
    assert!(d.join("prompts/source.prompt").is_file());
    let out = ok(d, &["--config", "run.json", "prompt-transfer"]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("low_resource_threshold"), "{stderr}");
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["target"], "target");
    assert!(d.join("prompts/target.prompt").is_file());

    let quiet = setup(SMALL);
    ok(quiet.path(), &["--config", "run.json", "prompt-tune"]);
    let out = ok(quiet.path(), &["--config", "run.json", "prompt-transfer"]);
    assert!(!String::from_utf8_lossy(&out.stderr).contains("low_resource_threshold"));
}

#[test]
fn downstream_commands_write_their_outputs() {
    let dir = setup(SMALL);
    let d = dir.path();
    let out = ok(d, &["--config", "run.json", "finetune"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["test_accuracy"].as_f64().unwrap() >= 0.0);
    let eval = ok(d, &["--config", "run.json", "--checkpoint", "target.classifier.ckpt", "eval"]);
    let e: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(e["accuracy"], v["test_accuracy"]);

    let out = ok(d, &["--config", "run.json", "transductive"]);
    let t: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(t["agreements"][0], 0.0);
    assert!(d.join("shift.transductive.ckpt").is_file());
}

#[test]
fn report_summarizes_metrics_and_plots() {
    let dir = setup(SMALL);
    let d = dir.path();
    ok(d, &["--config", "run.json", "pretrain"]);
    ok(d, &["--config", "run.json", "evolve"]);
    let out = ok(d, &["report", "metrics/pretrain.jsonl", "metrics/evolve.jsonl", "--plot", "curves.png"]);
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("run,phase,steps,loss"));
    assert!(lines[1].starts_with("pretrain,mlm,12,"));
    assert!(lines[2].starts_with("evolve,evolve,6,"));
    assert!(lines[3].starts_with("median,"));
    let png = read(d, "curves.png");
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");

    std::fs::write(d.join("bad.jsonl"), "{\"step\": 1, \"phase\": \"x\"}\nnot json\n").unwrap();
    let out = evolm(d, &["report", "bad.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn usage_and_input_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(evolm(d, &["--no-such-flag", "scan"]).status.code(), Some(1));
    assert_eq!(evolm(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(evolm(d, &["--help"]).status.code(), Some(0));

    let out = evolm(d, &["scan"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));

    std::fs::write(d.join("typo.json"), r#"{"pretrain": {"stpes": 3}}"#).unwrap();
    let out = evolm(d, &["--config", "typo.json", "gen-corpus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stpes"));
}

#[test]
fn divergence_exits_two() {
    let dir = setup(r#"{"corpus": {"samples": 50}, "pretrain": {"steps": 5, "lr": 1e300}}"#);
    let out = evolm(dir.path(), &["--config", "run.json", "pretrain"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    assert!(!dir.path().join("encoder.ckpt").exists());
}

#[test]
fn build_vocab_reads_any_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("text.txt"), "a b c\na b\na\n").unwrap();
    ok(d, &["build-vocab", "--corpus", "text.txt", "--max-vocab", "6"]);
    let v: serde_json::Value = serde_json::from_slice(&read(d, "vocab.json")).unwrap();
    let s = v.to_string();
    assert!(s.contains("\"a\"") && s.contains("\"b\"") && !s.contains("\"c\""), "{s}");
}
