//! End-to-end tests of the `scalebench` binary: exit codes, artifact
//! shapes, and the pipeline → report chain.

use std::path::Path;
use std::process::{Command, Output};

fn scalebench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scalebench"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{path:?}: {e}"));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{path:?}: {e}"))
}

#[test]
fn help_exits_zero_and_usage_errors_exit_one() {
    assert_eq!(scalebench(&["--help"]).status.code(), Some(0));
    assert_eq!(scalebench(&[]).status.code(), Some(1));
    assert_eq!(scalebench(&["bench", "--no-such-flag"]).status.code(), Some(1));

    // Valid flags, inconsistent values.
    let descending = scalebench(&[
        "bench",
        "--corpus",
        "synthetic:64",
        "--lengths",
        "32,16",
    ]);
    assert_eq!(descending.status.code(), Some(1));
    assert!(stderr(&descending).contains("ascending"), "{}", stderr(&descending));

    let file_without_labels = scalebench(&[
        "shifts",
        "--corpus",
        "synthetic-shifts:2x24",
        "--label-source",
        "file",
    ]);
    assert_eq!(file_without_labels.status.code(), Some(1));
    assert!(stderr(&file_without_labels).contains("--labels"));
}

#[test]
fn missing_corpus_directory_is_a_stage_failure() {
    let output = scalebench(&[
        "bench",
        "--corpus",
        "/no/such/directory",
        "--lengths",
        "8,16",
        "--runs",
        "1",
        "--warmup",
        "0",
    ]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("directory"), "{}", stderr(&output));
}

#[test]
fn bench_then_fit_produces_records_fits_and_ratio_table() {
    let dir = tempfile::tempdir().unwrap();
    let records_path = dir.path().join("records.json");
    let events_path = dir.path().join("events.json");

    let bench = scalebench(&[
        "bench",
        "--arch",
        "both",
        "--corpus",
        "synthetic:64",
        "--lengths",
        "8,16,32",
        "--runs",
        "1",
        "--warmup",
        "0",
        "--budget-gb",
        "none",
        "--seed",
        "7",
        "--config",
        "mini",
        "--out",
        records_path.to_str().unwrap(),
        "--events",
        events_path.to_str().unwrap(),
    ]);
    assert_eq!(bench.status.code(), Some(0), "{}", stderr(&bench));
    let records = read_json(&records_path);
    assert_eq!(records["records"].as_array().unwrap().len(), 6);
    let run_id = records["run_id"].as_str().unwrap();
    assert_eq!(run_id.len(), 16);
    let events = read_json(&events_path);
    assert_eq!(events["run_id"].as_str().unwrap(), run_id);
    assert!(!events["events"].as_array().unwrap().is_empty());

    let fits_dir = dir.path().join("fits");
    let fit = scalebench(&[
        "fit",
        "--records",
        records_path.to_str().unwrap(),
        "--out-dir",
        fits_dir.to_str().unwrap(),
    ]);
    assert_eq!(fit.status.code(), Some(0), "{}", stderr(&fit));
    let fits = read_json(&fits_dir.join("fits.json"));
    assert_eq!(fits["run_id"].as_str().unwrap(), run_id);
    assert_eq!(fits["cells"].as_array().unwrap().len(), 4);
    assert!(fits_dir.join("crossover.json").exists());
    let ratios = std::fs::read_to_string(fits_dir.join("ratios.csv")).unwrap();
    assert!(ratios.starts_with("n,mem_ratio,time_ratio\n"));
    assert_eq!(ratios.lines().count(), 4);
}

#[test]
fn analyze_writes_one_analysis_per_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("repr.json");
    let output = scalebench(&[
        "analyze",
        "--corpus",
        "synthetic:64",
        "--length",
        "16",
        "--stability-window",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));
    let doc = read_json(&out);
    let analyses = doc["analyses"].as_array().unwrap();
    assert_eq!(analyses.len(), 2);
    assert_eq!(analyses[0]["architecture"], "transformer");
    assert!(analyses[0]["attention"].is_object());
    assert!(analyses[0]["context"].is_null());
    assert_eq!(analyses[1]["architecture"], "mamba");
    assert!(analyses[1]["attention"].is_null());
    assert!(analyses[1]["context"].is_object());
}

#[test]
fn shifts_with_synthetic_ground_truth_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("shifts.json");
    let output = scalebench(&[
        "shifts",
        "--corpus",
        "synthetic-shifts:4x32",
        "--arch",
        "mamba",
        "--label-source",
        "synthetic",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));
    let doc = read_json(&out);
    let reports = doc["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 1);
    let report = &reports[0];
    assert_eq!(report["architecture"], "mamba");
    assert_eq!(report["label_source"], "synthetic");
    // 4 sessions × 3 internal boundaries.
    assert_eq!(report["pooled_scores"].as_array().unwrap().len(), 12);
    assert_eq!(report["labels"].as_array().unwrap().len(), 12);
    assert!(report["metrics"]["auc"].is_number());
}

#[test]
fn gen_corpus_feeds_directory_backed_commands() {
    let dir = tempfile::tempdir().unwrap();
    let sessions = dir.path().join("sessions");
    let generated = scalebench(&[
        "gen-corpus",
        "--out",
        sessions.to_str().unwrap(),
        "--sessions",
        "3",
        "--turns",
        "6",
    ]);
    assert_eq!(generated.status.code(), Some(0), "{}", stderr(&generated));
    assert_eq!(std::fs::read_dir(&sessions).unwrap().count(), 3);

    let out = dir.path().join("shifts.json");
    let shifts = scalebench(&[
        "shifts",
        "--corpus",
        sessions.to_str().unwrap(),
        "--arch",
        "transformer",
        "--segments",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(shifts.status.code(), Some(0), "{}", stderr(&shifts));
    let doc = read_json(&out);
    assert_eq!(doc["reports"][0]["label_source"], "self-percentile");
    assert_eq!(
        doc["reports"][0]["sessions"].as_array().unwrap().len(),
        3
    );
}

#[test]
fn pipeline_then_report_emits_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.cfg");
    std::fs::write(
        &config_path,
        "\
[run]
seed = 11

[bench]
corpus = synthetic:48
lengths = 8, 16, 32
runs = 1
warmup = 0
budget_gib = none

[analyze]
length = 16
stability_window = 8

[shifts]
corpus = synthetic-shifts:3x24
",
    )
    .unwrap();
    let out = dir.path().join("run");
    let pipeline = scalebench(&[
        "pipeline",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(pipeline.status.code(), Some(0), "{}", stderr(&pipeline));
    for artifact in [
        "records.json",
        "events.json",
        "fits/fits.json",
        "fits/crossover.json",
        "fits/ratios.csv",
        "repr.json",
        "shifts.json",
        "manifest.json",
    ] {
        assert!(out.join(artifact).exists(), "missing {artifact}");
    }
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["scale"], "mini");

    let report_dir = out.join("report");
    let report = scalebench(&[
        "report",
        "--in",
        out.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert_eq!(report.status.code(), Some(0), "{}", stderr(&report));
    for artifact in [
        "table1_efficiency_ratios.csv",
        "table2_benchmark_summary.csv",
        "table3_layer_dynamics.csv",
        "table4_context_utilization.csv",
        "table5_shift_detection.csv",
        "memory_vs_n.svg",
        "time_vs_n.svg",
    ] {
        assert!(report_dir.join(artifact).exists(), "missing {artifact}");
    }
    let table5 = std::fs::read_to_string(report_dir.join("table5_shift_detection.csv")).unwrap();
    assert_eq!(table5.lines().count(), 3, "{table5}");

    // Reporting from a directory that is missing artifacts fails cleanly.
    let broken = scalebench(&[
        "report",
        "--in",
        dir.path().to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert_eq!(broken.status.code(), Some(2));
    assert!(stderr(&broken).contains("missing artifact"));
}
