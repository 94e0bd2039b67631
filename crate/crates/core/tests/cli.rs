use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn sgasp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgasp"))
        .args(args)
        .env("SGASP_THREADS", "2")
        .output()
        .expect("run sgasp")
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fitted_theta(model: &Path) -> Vec<f64> {
    let v: Value = serde_json::from_str(&fs::read_to_string(model).unwrap()).unwrap();
    v["fit"]["theta"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t.as_f64().unwrap())
        .collect()
}

fn fit_args<'a>(data: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut a = vec![
        "fit", "--data", data, "--out", out, "--simulator", "sine", "--theta-bounds", "0:10,-3:5", "--starts", "4",
    ];
    a.extend_from_slice(extra);
    a
}

#[test]
fn fit_then_predict_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    let out = sgasp(&["fit", "--config", s(&data_dir().join("example3.ini")), "--out", s(&model)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let theta = fitted_theta(&model);
    assert!(theta[0] > 4.0 && theta[0] < 8.0, "{theta:?}");

    let test = dir.path().join("test.csv");
    let out = sgasp(&["design", "--n", "7", "--p", "2", "--kind", "uniform", "--seed", "3", "--out", s(&test)]);
    assert!(out.status.success());
    let pred = dir.path().join("pred.csv");
    let out = sgasp(&["predict", "--model", s(&model), "--test", s(&test), "--out", s(&pred)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&pred).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "x1,x2,mean_reality,var_reality,mean_field,var_field");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 7);
    for r in &rows {
        assert!(r.iter().all(|v| v.is_finite()));
        assert!(r[3] >= 0.0 && r[5] > r[3]);
        assert_eq!(r[2], r[4]);
    }
}

#[test]
fn sgasp_with_zero_lambda_z_matches_gasp() {
    let dir = tempfile::tempdir().unwrap();
    let data = data_dir().join("example3_n30.csv");
    let g = dir.path().join("g.json");
    let z = dir.path().join("z.json");
    assert!(sgasp(&fit_args(s(&data), s(&g), &["--model", "gasp"])).status.success());
    assert!(sgasp(&fit_args(s(&data), s(&z), &["--model", "sgasp", "--lambda-z", "0"])).status.success());
    let (tg, tz) = (fitted_theta(&g), fitted_theta(&z));
    for (a, b) in tg.iter().zip(&tz) {
        assert!((a - b).abs() <= 1e-6, "{tg:?} vs {tz:?}");
    }
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    let out = sgasp(&[
        "fit", "--config", s(&data_dir().join("example3.ini")), "--out", s(&model), "--model", "gasp",
    ]);
    assert!(out.status.success());
    let v: Value = serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(v["fit"]["kind"], "gasp");
    assert_eq!(v["fit"]["lambda_z"], 0.0);
}

#[test]
fn malformed_csv_reports_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    fs::write(&data, "x1,x2,y\n0.1,0.2,1.0\n0.3,0.4,1.5\n0.5,oops,2.0\n").unwrap();
    let out = sgasp(&fit_args(s(&data), s(&dir.path().join("m.json")), &[]));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 3"), "{err}");
}

#[test]
fn usage_errors_exit_two() {
    let out = sgasp(&["bench", "example9"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("example3") && err.contains("example2-iv"), "{err}");
    assert_eq!(sgasp(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = sgasp(&fit_args(s(&data_dir().join("example3_n30.csv")), s(&dir.path().join("m.json")), &["--simulator-cmd", "x"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn external_simulator_matches_builtin() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("const.sh");
    fs::write(&script, "read p q\nwhile read x1 x2 t1; do echo \"$t1\"; done\n").unwrap();
    let data = data_dir().join("example3_n30.csv");
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let base = |out: &Path| -> Vec<String> {
        ["fit", "--data", s(&data), "--out", s(out), "--theta-bounds", "-5:5", "--starts", "2", "--model", "gasp"]
            .iter()
            .map(|v| v.to_string())
            .collect()
    };
    let mut args = base(&a);
    args.extend(["--simulator", "constant"].map(String::from));
    assert!(sgasp(&args.iter().map(String::as_str).collect::<Vec<_>>()).status.success());
    let mut args = base(&b);
    let cmd = format!("sh {}", s(&script));
    args.extend(["--simulator-cmd".to_string(), cmd, "--simulator-params".into(), "1".into()]);
    let out = sgasp(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fitted_theta(&a), fitted_theta(&b));
}

#[test]
fn design_check_reports_stratification() {
    let out = sgasp(&["design", "--n", "12", "--p", "3", "--kind", "lhs", "--seed", "9", "--check"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("latin hypercube: true"));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("x1,x2,x3"));
    assert_eq!(text.lines().count(), 13);
}

#[test]
fn bench_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let strip = |p: PathBuf| -> Value {
        let mut v: Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        for m in v["results"].as_array_mut().unwrap() {
            m.as_object_mut().unwrap().remove("seconds");
        }
        v
    };
    let mut runs = Vec::new();
    for (k, threads) in ["1", "3"].iter().enumerate() {
        let out_dir = dir.path().join(format!("run{k}"));
        let out = sgasp(&["--threads", threads, "bench", "example2-i", "--replicates", "3", "--seed", "5", "--out", s(&out_dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let csv = fs::read_to_string(out_dir.join("example2-i.csv")).unwrap();
        assert!(csv.starts_with("experiment,method,n,replicate,metric,value"));
        runs.push((strip(out_dir.join("example2-i.json")), csv));
    }
    assert_eq!(runs[0].0, runs[1].0);
    assert_eq!(runs[0].1, runs[1].1);
}
