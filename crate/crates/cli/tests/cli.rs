//! The binary end to end: exit codes and artifacts.

use std::path::Path;
use std::process::{Command, Output};

const QUICK: [&str; 6] = [
    "--override",
    "pretrain.train.max_steps=5",
    "--override",
    "train.max_steps=5",
    "--override",
    "corpus.max_held_out_windows=3",
];

fn gatedkv(out: &Path, args: &[&str]) -> Output {
    let cpt = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/cpt.json");
    Command::new(env!("CARGO_BIN_EXE_gatedkv"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--config")
        .arg(cpt)
        .args(QUICK)
        .output()
        .expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn trained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = gatedkv(dir.path(), &["train"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn train_writes_checkpoint_metrics_and_summary() {
    let dir = trained();
    for f in ["model.ckpt", "metrics.csv", "pretrain_metrics.csv", "config.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("step,lm_loss,evict_loss,mean_retention,eviction_l0,eviction_l1")
    );
    assert_eq!(lines.count(), 5);
    let o = gatedkv(dir.path(), &["train"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("\"tau\": 0.5"), "effective config printed");
    assert!(stdout.contains("final lm_loss"));
}

#[test]
fn bench_rows_share_the_budget() {
    let dir = trained();
    let o = gatedkv(dir.path(), &["bench", "--policy", "none,ag"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "none");
    assert_eq!(rows[0][7], "0");

    let o = gatedkv(dir.path(), &["bench"]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r.get(0).unwrap()).collect();
    assert_eq!(names, ["none", "local", "streaming_llm", "h2o", "random", "ag"]);
    let budget = |name: &str| -> i64 {
        rows.iter().find(|r| r.get(0) == Some(name)).unwrap().get(4).unwrap().parse().unwrap()
    };
    for name in ["local", "streaming_llm", "h2o", "random"] {
        assert!((budget(name) - budget("ag")).abs() <= 1, "{name}");
    }
}

#[test]
fn eval_and_viz_write_artifacts() {
    let dir = trained();
    let o = gatedkv(dir.path(), &["eval"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trend.csv", "eviction.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let o = gatedkv(dir.path(), &["viz", "--text", "a=1234;....a>1234\n"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["evict_l1_h3.pgm", "attention_l0_h0.pgm", "flags.csv", "cache.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let pgm = std::fs::read(dir.path().join("evict_l0_h0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n18 18\n255\n"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = trained();
    let long = "x".repeat(65);
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--override", "corpus.train=/nonexistent/corpus.txt"],
        vec!["train", "--override", "model.tau=2"],
        vec!["train", "--override", "model.no_such_field=1"],
        vec!["bench", "--policy", "none,bogus"],
        vec!["viz", "--text", &long],
        vec!["bench", "--checkpoint", "/nonexistent/model.ckpt"],
        vec!["train", "--bogus-flag"],
    ];
    for args in cases {
        let o = gatedkv(dir.path(), &args);
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("model.ckpt"), b"not a checkpoint").unwrap();
    let o = gatedkv(dir.path(), &["bench"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_corpus_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gatedkv(dir.path(), &["gen-corpus"])), 0);
    let text = std::fs::read_to_string(dir.path().join("train.txt")).unwrap();
    assert_eq!(text, gatedkv::corpus::synthetic_corpus(60_000, 1));
    assert!(dir.path().join("held_out.txt").is_file());
}
