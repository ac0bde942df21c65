use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn p31(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p31"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Simulates and analyzes a small cohort with first-point spikes, returning
/// the raw and analyzed directories.
fn analyzed_cohort(dir: &Path) -> (PathBuf, PathBuf) {
    let raw = dir.join("raw");
    let an = dir.join("an");
    let o = p31(&[
        "simulate", "--out", s(&raw), "--patients", "6", "--controls", "6", "--first-point", "0.2", "--seed", "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = p31(&["analyze", s(&raw), "--out", s(&an)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    (raw, an)
}

#[test]
fn simulate_analyze_compare() {
    let dir = tempfile::tempdir().unwrap();
    let (_, an) = analyzed_cohort(dir.path());
    assert_eq!(std::fs::read_dir(&an).unwrap().count(), 12);

    let (json, csv) = (dir.path().join("r.json"), dir.path().join("r.csv"));
    let o = p31(&["cohort-compare", s(&an), "--json", s(&json), "--csv", s(&csv)]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.starts_with("mode,qcs,marker,phase,patient_n"));
    assert!(out.lines().skip(1).all(|l| l.starts_with("individual,with_qcs,")));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["comparisons"].as_array().unwrap().len(), 6);

    // Same inputs give byte-identical reports.
    let first = (std::fs::read(&json).unwrap(), std::fs::read(&csv).unwrap());
    p31(&["cohort-compare", s(&an), "--json", s(&json), "--csv", s(&csv)]);
    assert_eq!(first, (std::fs::read(&json).unwrap(), std::fs::read(&csv).unwrap()));

    let o = p31(&["cohort-compare", s(&an), "--t1-mode", "fixed", "--no-qcs"]);
    assert!(stdout(&o).lines().skip(1).all(|l| l.starts_with("fixed,without_qcs,")));
}

#[test]
fn qc_approval_rewrites_subject() {
    let dir = tempfile::tempdir().unwrap();
    let (_, an) = analyzed_cohort(dir.path());
    let o = p31(&["qc", s(&an)]);
    let table = stdout(&o);
    let flagged: Vec<&str> = table
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(6) == Some("true"))
        .collect();
    assert!(!flagged.is_empty());
    let id = flagged[0].split(',').next().unwrap();
    let unflagged = table
        .lines()
        .skip(1)
        .find(|l| l.split(',').nth(6) == Some("false"))
        .unwrap()
        .split(',')
        .next()
        .unwrap();

    let o = p31(&["qc", s(&an), "--approve", &format!("{unflagged}=1")]);
    assert_eq!(o.status.code(), Some(1));

    let o = p31(&["qc", s(&an), "--approve", &format!("{id}=1"), "--operator", "op"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let row = stdout(&o).lines().find(|l| l.starts_with(id)).unwrap().to_string();
    assert!(row.ends_with(",1"), "{row}");
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(an.join(format!("{id}.json"))).unwrap()).unwrap();
    assert_eq!(saved["analysis"]["qc"]["reselection"]["operator"], "op");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    p31(&["simulate", "--out", s(&raw), "--patients", "1", "--controls", "1"]);
    let file = raw.join("patient-000.json");
    let mut subject: Value = serde_json::from_str(&std::fs::read_to_string(&file).unwrap()).unwrap();

    // Missing short-TR block: parses, fails individual-mode analysis.
    subject["resting"].as_object_mut().unwrap().remove("short_tr");
    std::fs::write(&file, subject.to_string()).unwrap();
    let out = dir.path().join("an");
    let o = p31(&["analyze", s(&raw), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("patient-000"));
    let o = p31(&["analyze", s(&raw), "--out", s(&out), "--t1-mode", "fixed"]);
    assert_eq!(o.status.code(), Some(0));

    // Frame-count mismatch is a validation failure.
    subject["dynamic"]["amplitudes"]["PCr"].as_array_mut().unwrap().pop();
    std::fs::write(&file, subject.to_string()).unwrap();
    let o = p31(&["analyze", s(&raw), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));

    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"alpha": 3}"#).unwrap();
    let o = p31(&["power", "--config", s(&config), "--control-mean", "1", "--control-sd", "1", "--control-n", "5",
        "--patient-mean", "2", "--patient-sd", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(p31(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn power_csv() {
    let o = p31(&[
        "power", "--control-mean", "32.45", "--control-sd", "10.66", "--control-n", "9", "--patient-mean", "43.33",
        "--patient-sd", "11.22", "--n-min", "20", "--n-max", "20",
    ]);
    assert!(o.status.success());
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("n_control,n_patient,power"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..2], ["9", "20"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("17 per group"));
}

#[test]
fn bland_altman_on_default_truth() {
    let dir = tempfile::tempdir().unwrap();
    let (_, an) = analyzed_cohort(dir.path());
    let o = p31(&["bland-altman", s(&an), "--marker", "pcr_rest"]);
    assert!(o.status.success());
    let ba: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(ba["n"], 12);
    assert!(ba["bias"].as_f64().unwrap() > 0.0);
    assert_eq!(p31(&["bland-altman", s(&an), "--marker", "nope"]).status.code(), Some(1));
}

#[test]
fn quantify_fids() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let o = p31(&["simulate", "--out", s(&raw), "--patients", "1", "--controls", "0", "--fids"]);
    assert!(o.status.success());
    let o = p31(&["quantify", s(&raw.join("patient-000.json"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let q: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(q["data"]["amplitudes"]["PCr"].as_array().unwrap().len(), 130);
    assert!(q["quant"]["failed_frames"].as_array().unwrap().is_empty());
}
