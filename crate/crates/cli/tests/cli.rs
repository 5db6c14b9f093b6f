use std::process::{Command, Output};

use iclscope::backend::trace::import_trace;
use iclscope::experiments::{ExperimentReport, Metrics, SUMMARY_FILE};

fn iclscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iclscope"))
        .args(args)
        .env_remove("ICLSCOPE_MODEL")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = iclscope(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn lists_datasets() {
    let out = ok(&["datasets", "list"]);
    assert!(out.contains("capitals"));
    assert!(out.contains("triplets-trec"));
    assert!(out.contains("sst2"));
}

#[test]
fn experiment_writes_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let stdout = ok(&[
        "experiment", "q2-random-labels", "--model", "toy", "--seeds", "0,1", "--max-samples", "3", "--out", out_dir,
    ]);
    let report = ExperimentReport::read(&dir.path().join(SUMMARY_FILE)).unwrap();
    assert_eq!(report.seeds, [0, 1]);
    assert_eq!(report.samples, 3);
    assert!(matches!(report.metrics, Metrics::Q2RandomLabels { .. }));
    let printed: Metrics = serde_json::from_str(&stdout).unwrap();
    assert_eq!(printed, report.metrics);
}

#[test]
fn diagnose_a_single_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let prompt = dir.path().join("prompt.json");
    std::fs::write(
        &prompt,
        r#"{"instruction":null,"demos":[{"input":"France","label":"Paris"},{"input":"Japan","label":"Tokyo"}],
            "markers":{"input":"Word:","label":"Label:"},"test_input":"Germany","seed":null}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let stdout = ok(&[
        "diagnose", "--model", "toy", "--prompt", prompt.to_str().unwrap(), "--out", out_dir.to_str().unwrap(),
    ]);
    let reports: Vec<serde_json::Value> = serde_json::from_str(&stdout).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0]["evidence"]["profiles"].as_array().unwrap().len(), 2);
}

#[test]
fn pir_with_irrelevant_labels() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&[
        "pir", "--model", "toy", "--k", "2", "--max-samples", "3", "--seeds", "0",
        "--irrelevant-labels", "foo,bar", "--out", dir.path().to_str().unwrap(),
    ]);
    assert!(stdout.starts_with("mean PIR of \"capital\""));
    let report = ExperimentReport::read(&dir.path().join(SUMMARY_FILE)).unwrap();
    let Metrics::Pir { run } = report.metrics else { panic!() };
    assert_eq!(run.irrelevant_labels, Some(vec!["foo".into(), "bar".into()]));
    assert_eq!(run.samples.len(), 3);
}

#[test]
fn trace_export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.icltrace");
    ok(&[
        "trace", "export", "--model", "toy", "--text", "Word: France\nLabel: Paris", "--positions", "0,3",
        "--attention-layers", "2", "--out", path.to_str().unwrap(),
    ]);
    let trace = import_trace(&path).unwrap();
    assert_eq!(trace.capture.num_layers, 4);
    assert_eq!(trace.capture.hidden.len(), 8);
    assert!(trace.capture.hidden.contains_key(&(4, 3)));
    assert_eq!(trace.capture.attention_rows.len(), 2);
    assert_eq!(trace.tokens.surface, "Word: France\nLabel: Paris");
}

#[test]
fn bad_input_fails_cleanly() {
    let out = iclscope(&["experiment", "q9", "--model", "toy"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("q9"));
    let out = iclscope(&["diagnose", "--model", "toy", "--tau-y", "1.5"]);
    assert!(!out.status.success());
    let out = iclscope(&["pir", "--model", "no-such-model", "--max-samples", "1"]);
    assert!(!out.status.success());
}
