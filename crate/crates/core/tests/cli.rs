use std::path::Path;
use std::process::{Command, Output};

fn autoslo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autoslo")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&autoslo(&["run", "--config", "nope", "--scaler", "hpa", "--out-dir", p(&out)])), 2);
    assert_eq!(code(&autoslo(&["run", "--scaler", "autoslo", "--out-dir", p(&out)])), 2);
    assert_eq!(code(&autoslo(&["run", "--scaler", "magic", "--out-dir", p(&out)])), 2);
    assert_eq!(code(&autoslo(&["run", "--scaler", "hpa", "--reps", "0", "--out-dir", p(&out)])), 2);
    assert_eq!(code(&autoslo(&["fit", "--data", "/nonexistent.csv", "--out", p(&out)])), 2);
    assert_eq!(code(&autoslo(&["traindata", "--hours", "-1", "--out", p(&out)])), 2);
    assert_eq!(code(&autoslo(&["run", "--bogus-flag"])), 2);
}

#[test]
fn bad_config_file_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "version = 1\nname = \"x\"\n").unwrap();
    let out = autoslo(&["run", "--config", p(&cfg), "--scaler", "hpa", "--out-dir", p(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn traindata_fit_run_compare_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.csv");
    let again = dir.path().join("train2.csv");
    let model = dir.path().join("model.json");

    assert_eq!(code(&autoslo(&["traindata", "--config", "shop", "--seed", "3", "--out", p(&data)])), 0);
    // 10 simulated hours at one record per 15 s, plus the header
    let text = std::fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 2401);
    assert_eq!(
        text.lines().next().unwrap(),
        "cpu_frontend,cpu_productcatalog,mem_frontend,mem_productcatalog,qps,pods_frontend,pods_productcatalog,slo_value"
    );
    assert_eq!(code(&autoslo(&["traindata", "--config", "shop", "--seed", "3", "--out", p(&again)])), 0);
    assert_eq!(std::fs::read(&data).unwrap(), std::fs::read(&again).unwrap());

    let fitted = autoslo(&["fit", "--data", p(&data), "--out", p(&model)]);
    assert_eq!(code(&fitted), 0);
    assert!(String::from_utf8_lossy(&fitted.stdout).contains("R2="));

    for scaler in ["autoslo", "hpa", "ran"] {
        let out_dir = dir.path().join(scaler);
        let out = autoslo(&["run", "--scaler", scaler, "--model", p(&model), "--reps", "3", "--out-dir", p(&out_dir)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(std::fs::read_to_string(out_dir.join("runs.csv")).unwrap().lines().count(), 4);
        assert!(out_dir.join(format!("trace_{scaler}_02.csv")).is_file());
        assert!(out_dir.join("best_formulas.csv").is_file());
    }

    let table = dir.path().join("table.csv");
    let cmp = autoslo(&[
        "compare",
        "--autoslo",
        p(&dir.path().join("autoslo")),
        "--hpa",
        p(&dir.path().join("hpa")),
        "--ran",
        p(&dir.path().join("ran")),
        "--out",
        p(&table),
    ]);
    assert_eq!(code(&cmp), 0, "{}", String::from_utf8_lossy(&cmp.stderr));
    let rows = std::fs::read_to_string(&table).unwrap();
    // header plus pods and violations against each baseline
    assert_eq!(rows.lines().count(), 5);
}

#[test]
fn model_for_another_case_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("chat.csv");
    let model = dir.path().join("chat.json");
    assert_eq!(code(&autoslo(&["traindata", "--config", "chatbot", "--hours", "1", "--out", p(&data)])), 0);
    assert_eq!(code(&autoslo(&["fit", "--data", p(&data), "--out", p(&model)])), 0);
    let out = autoslo(&["run", "--config", "shop", "--model", p(&model), "--out-dir", p(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
}
