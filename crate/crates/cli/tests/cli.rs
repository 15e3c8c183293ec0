use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kt_core::models::{HmmParams, ModelParams, MultiViewParams};
use kt_core::Cp;
use nalgebra::{DMatrix, DVector};
use serde_json::Value;
use tempfile::TempDir;

fn kt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kt")).args(args).env_remove("KT_THREADS").output().expect("spawn kt")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json report")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_json<T: serde::Serialize>(dir: &TempDir, name: &str, v: &T) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, serde_json::to_string(v).unwrap()).unwrap();
    path
}

fn multiview_truth(dir: &TempDir) -> PathBuf {
    let m = DMatrix::from_row_slice(3, 2, &[0.7, 0.1, 0.2, 0.2, 0.1, 0.7]);
    let params = MultiViewParams::new(DVector::from_vec(vec![0.4, 0.6]), vec![m.clone(), m.clone(), m]).unwrap();
    write_json(dir, "mv.json", &ModelParams::Multiview(params))
}

fn hmm_truth(dir: &TempDir) -> PathBuf {
    let params = HmmParams::new(
        DMatrix::from_row_slice(2, 2, &[0.8, 0.3, 0.2, 0.7]),
        DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.1, 0.8]),
    )
    .unwrap();
    write_json(dir, "hmm.json", &ModelParams::Hmm(params))
}

/// A rank-2 decomposition with well-separated columns and its noisy tensor.
fn planted(dir: &TempDir) -> (PathBuf, PathBuf) {
    let cp = dir.path().join("cp.json");
    let t = dir.path().join("t.json");
    assert_eq!(code(&kt(&["generate", "cp", "--dim", "3", "--rank", "2", "--seed", "3", "--out", p(&cp)])), 0);
    assert_eq!(code(&kt(&["generate", "tensor", "--truth", p(&cp), "--eta", "0.01", "--seed", "4", "--out", p(&t)])), 0);
    (cp, t)
}

#[test]
fn decompose_round_trip() {
    let dir = TempDir::new().unwrap();
    let (_, t) = planted(&dir);
    let report = stdout_json(&kt(&["decompose", p(&t), "--rank", "2", "--eps", "0.01", "--seed", "1"]));
    assert_eq!(report["command"], "decompose");
    let out = &report["output"];
    assert!(out["achieved_error"].as_f64().unwrap() <= 0.05);
    assert_eq!(out["partial"], false);
}

#[test]
fn decompose_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (_, t) = planted(&dir);
    let args = ["decompose", p(&t), "--rank", "2", "--eps", "0.01", "--seed", "9"];
    assert_eq!(kt(&args).stdout, kt(&args).stdout);
}

#[test]
fn budget_exhaustion_exits_two() {
    let dir = TempDir::new().unwrap();
    let (_, t) = planted(&dir);
    let out = kt(&["decompose", p(&t), "--rank", "2", "--eps", "0.01", "--strategy", "exhaustive", "--budget", "10"]);
    assert_eq!(code(&out), 2);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["output"]["partial"], true);
}

#[test]
fn certify_passes_generic_decomposition() {
    let dir = TempDir::new().unwrap();
    let (cp, _) = planted(&dir);
    let report = stdout_json(&kt(&["certify", p(&cp), "--tau", "10"]));
    assert_eq!(report["output"]["kruskal"]["passes"], true);
}

#[test]
fn certify_failure_exits_four_with_witness() {
    let dir = TempDir::new().unwrap();
    let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    let cp = write_json(&dir, "bad.json", &Cp::new(vec![a.clone(), a.clone(), a]).unwrap());
    let out = kt(&["certify", p(&cp)]);
    assert_eq!(code(&out), 4);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["output"]["kruskal"]["passes"], false);
    let text = report["output"]["kruskal"].to_string();
    assert!(text.contains("witness"), "{text}");
}

#[test]
fn align_recovers_permutation() {
    let dir = TempDir::new().unwrap();
    let (cp, _) = planted(&dir);
    let reference = Cp::read_json(&cp).unwrap();
    let swapped = write_json(&dir, "swapped.json", &reference.permute_columns(&[1, 0]).unwrap());
    let report = stdout_json(&kt(&["align", p(&cp), p(&swapped)]));
    assert_eq!(report["output"]["permutation"], serde_json::json!([1, 0]));
}

#[test]
fn learn_from_truth_reports_alignment() {
    let dir = TempDir::new().unwrap();
    let truth = multiview_truth(&dir);
    let report = stdout_json(&kt(&["learn", "multiview", "--truth", p(&truth), "--samples", "100000", "--seed", "2"]));
    let out = &report["output"];
    assert_eq!(out["params"]["kind"], "multiview");
    assert!(out["alignment"]["max"].as_f64().unwrap() <= 0.05);
}

#[test]
fn generate_then_learn_from_file() {
    let dir = TempDir::new().unwrap();
    let truth = hmm_truth(&dir);
    let samples = dir.path().join("seqs.csv");
    assert_eq!(code(&kt(&["generate", "hmm", "--truth", p(&truth), "--samples", "100000", "--out", p(&samples)])), 0);
    let report = stdout_json(&kt(&["learn", "hmm", "--input", p(&samples)]));
    assert!(report["output"].get("alignment").is_none());
    assert_eq!(report["inputs"]["sample_count"], 100000);
    let with_truth = stdout_json(&kt(&["learn", "hmm", "--input", p(&samples), "--truth", p(&truth)]));
    assert!(with_truth["output"]["alignment"]["max"].as_f64().unwrap() <= 0.2);
}

#[test]
fn window_budget_refusal_exits_one() {
    let dir = TempDir::new().unwrap();
    let truth = hmm_truth(&dir);
    let out = kt(&["learn", "hmm", "--truth", p(&truth), "--samples", "10", "--window-q", "20"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_rows_and_replications() {
    let dir = TempDir::new().unwrap();
    let truth = multiview_truth(&dir);
    let run = |reps: &str| {
        let out = kt(&["sweep", "multiview", "--truth", p(&truth), "--n-grid", "5000", "--replications", reps, "--seed", "5"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8(out.stdout).unwrap();
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let head = rd.headers().unwrap().clone();
        let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
        (head, rows)
    };
    let (h1, r1) = run("1");
    let (h5, r5) = run("5");
    assert_eq!((r1.len(), r5.len()), (1, 1));
    let rep1 = |h: &csv::StringRecord, r: &csv::StringRecord| r[h.iter().position(|c| c == "rep_1").unwrap()].to_string();
    assert_eq!(rep1(&h1, &r1[0]), rep1(&h5, &r5[0]));
    assert_eq!(&r5[0][0], "5000");
}

#[test]
fn sweep_rejects_unsorted_grid() {
    let dir = TempDir::new().unwrap();
    let truth = multiview_truth(&dir);
    assert_eq!(code(&kt(&["sweep", "multiview", "--truth", p(&truth), "--n-grid", "100,10"])), 1);
}

#[test]
fn show_config_applies_overrides() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"version": 1, "rank": 4, "seed": 11}"#).unwrap();
    let s = stdout_json(&kt(&["show-config", "--config", p(&cfg), "--seed", "12"]));
    assert_eq!(s["rank"], 4);
    assert_eq!(s["seed"], 12);
    assert_eq!(s["tau"], serde_json::json!([10.0]));
}

#[test]
fn bad_inputs_exit_one() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"version": 2}"#).unwrap();
    assert_eq!(code(&kt(&["show-config", "--config", p(&cfg)])), 1);
    assert_eq!(code(&kt(&["decompose", p(&dir.path().join("missing.json"))])), 1);
    let truth = multiview_truth(&dir);
    assert_eq!(code(&kt(&["learn", "hmm", "--truth", p(&truth)])), 1);
    assert_eq!(code(&kt(&["learn", "gaussian"])), 1);
}

#[test]
fn numerical_failure_exits_three() {
    // two repeated rows give a moment tensor with no valid rank-2 model
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("degenerate.csv");
    let rows: String = (0..50).map(|_| "1,1,1\n0,1,0\n").collect();
    std::fs::write(&path, format!("view_1,view_2,view_3\n{rows}")).unwrap();
    let out = kt(&["learn", "multiview", "--input", p(&path), "--rank", "2"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn rank_one_exact_tensor_has_zero_error() {
    let dir = TempDir::new().unwrap();
    let u = DMatrix::from_column_slice(2, 1, &[0.6, 0.8]);
    let t = write_json(&dir, "r1.json", &Cp::new(vec![u.clone(), u.clone(), u]).unwrap().expand().unwrap());
    let report = stdout_json(&kt(&["decompose", p(&t), "--rank", "1"]));
    assert!(report["output"]["achieved_error"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn identity_factors_certify() {
    let dir = TempDir::new().unwrap();
    let i = DMatrix::<f64>::identity(3, 3);
    let cp = write_json(&dir, "id.json", &Cp::new(vec![i.clone(), i.clone(), i]).unwrap());
    let report = stdout_json(&kt(&["certify", p(&cp), "--tau", "1"]));
    assert_eq!(report["output"]["kruskal"]["passes"], true);
}

#[test]
fn certify_matches_library_call() {
    let dir = TempDir::new().unwrap();
    let (cp, _) = planted(&dir);
    let report = stdout_json(&kt(&["certify", p(&cp), "--tau", "10"]));
    let direct = kt_core::check_kruskal_condition(&Cp::read_json(&cp).unwrap(), &[10.0]).unwrap();
    assert_eq!(report["output"]["kruskal"], serde_json::to_value(&direct).unwrap());
}
