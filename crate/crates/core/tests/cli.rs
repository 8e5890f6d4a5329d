use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn scsrec(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_scsrec")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "scsrec {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_evaluate_fit() {
    let dir = tempfile::tempdir().unwrap();
    let trials = dir.path().join("trials");
    let out = scsrec(&[
        "simulate", "--patients", "3", "--days", "40", "--seed", "5", "--out", path(&trials),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("wrote 3 of 3 trials"), "{stdout}");
    for id in ["sim-000", "sim-001", "sim-002"] {
        for f in ["reports.jsonl", "device_log.jsonl", "mobility.jsonl", "patient.json", "trial.json"] {
            assert!(trials.join(id).join(f).exists(), "{id}/{f}");
        }
    }

    let summary = dir.path().join("eval").join("summary.json");
    fs::create_dir_all(summary.parent().unwrap()).unwrap();
    let out = scsrec(&[
        "evaluate",
        "--patient-dir",
        path(&trials),
        "--resamples",
        "500",
        "--out",
        path(&summary),
        "--plot",
    ]);
    let csv = String::from_utf8_lossy(&out.stdout);
    assert!(csv.starts_with("class,N,"), "{csv}");
    assert!(csv.lines().last().unwrap().starts_with("Total,3,"), "{csv}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(report["patients"].as_array().unwrap().len(), 3);
    assert_eq!(report["summary"]["n"], 3);
    let eval_dir = summary.parent().unwrap();
    assert!(eval_dir.join("summary_cohort.csv").exists());
    let plot = fs::read_to_string(eval_dir.join("summary_dwell_plot.csv")).unwrap();
    // Header plus 3 patients x 2 periods x 5 states.
    assert_eq!(plot.lines().count(), 1 + 30);
    assert!(eval_dir.join("patients/sim-001.comparison_dwell.csv").exists());

    let model = dir.path().join("states.json");
    scsrec(&["fit-states", "--patient-dir", path(&trials), "--seed", "1", "--out", path(&model)]);
    scsrec::patient_state::StateModel::from_json(&fs::read_to_string(&model).unwrap()).unwrap();
    let again = dir.path().join("eval2.json");
    scsrec(&[
        "evaluate",
        "--patient-dir",
        path(&trials.join("sim-000")),
        "--resamples",
        "200",
        "--state-model",
        path(&model),
        "--out",
        path(&again),
    ]);
    assert!(again.exists());
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_scsrec"))
        .args(["evaluate", "--patient-dir", path(dir.path()), "--out", path(&dir.path().join("s.json"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no patient directories"));
}
