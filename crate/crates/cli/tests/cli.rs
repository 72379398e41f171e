use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn s2s() -> Command {
    Command::new(env!("CARGO_BIN_EXE_s2s"))
}

fn run(args: &[&str]) -> Output {
    s2s().args(args).output().expect("binary runs")
}

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/table1_ratings")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn corpus_gen_writes_requested_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.jsonl");
    let o = run(&["corpus", "gen", "--pairs", "300", "--seed", "42", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 300);

    let again = dir.path().join("d.jsonl");
    run(&["corpus", "gen", "--pairs", "300", "--seed", "42", "--out", p(&again)]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn zero_temperature_is_a_usage_error() {
    let o = run(&["chat", "--model", "x.bundle", "--temperature", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
    let o = run(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["perplexity", "--model", "/nonexistent.bundle", "--corpus", p(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_aggregate_reports_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let o = run(&["eval", "aggregate", "--records", p(&fixture_dir()), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.lines().any(|l| l.starts_with("personality") && l.contains("73.8")), "{table}");
    let json = std::fs::read_to_string(&out).unwrap();
    assert!(json.contains("\"n_responses\": 105"), "{json}");
}

#[test]
fn train_export_chat_perplexity_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    assert!(run(&["corpus", "gen", "--pairs", "12", "--seed", "3", "--out", p(&corpus)]).status.success());

    let train = |out: &Path| {
        run(&[
            "train", "--corpus", p(&corpus), "--out", p(out), "--hidden", "8", "--embed", "6",
            "--epochs", "3", "--batch", "4", "--seed", "5", "--deterministic", "--checkpoint-every", "2",
        ])
    };
    let a = dir.path().join("a");
    let o = train(&a);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(a.join("epoch_2.bundle").exists());
    assert!(a.join("epoch_3.bundle").exists());
    assert_eq!(std::fs::read_to_string(a.join("latest")).unwrap(), "epoch_3.bundle");

    let b = dir.path().join("b");
    assert!(train(&b).status.success());
    assert_eq!(
        std::fs::read(a.join("model.bundle")).unwrap(),
        std::fs::read(b.join("model.bundle")).unwrap()
    );

    let exported = dir.path().join("e.bundle");
    let o = run(&["export", "--checkpoint", p(&a), "--out", p(&exported)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&exported).unwrap(), std::fs::read(a.join("epoch_3.bundle")).unwrap());

    let o = run(&["perplexity", "--model", p(&exported), "--corpus", p(&corpus)]);
    assert!(o.status.success());
    let ppl: f64 = String::from_utf8(o.stdout).unwrap().trim().parse().unwrap();
    assert!(ppl.is_finite() && ppl >= 1.0);

    let mut child = s2s()
        .args(["chat", "--model", p(&exported), "--max-len", "5"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"do you like mondays?\n/temp 0.5\nhello\n/temp -1\n/quit\nignored\n")
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("invalid temperature"));
}
