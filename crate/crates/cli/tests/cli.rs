use std::path::Path;
use std::process::{Command, Output};

fn qfc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfc"))
        .current_dir(dir)
        .env_remove("QFC_CONFIG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn chain_reports_rates_and_writes_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qfc(tmp.path(), &["chain", "--out", "run"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("SNR 427.6"), "{stdout}");
    let doc = json(&tmp.path().join("run/chain.json"));
    assert!((doc["rates"]["output"].as_f64().unwrap() - 1.361e6).abs() < 1e3);
    assert!(doc["config"]["chain"].is_object());
    let manifest = json(&tmp.path().join("run/manifest.json"));
    assert_eq!(manifest["command"], "chain");
    assert_eq!(manifest["files"][0], "chain.json");
}

#[test]
fn zero_pulses_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qfc(tmp.path(), &["simulate", "--setup", "hbt", "--pulses", "0"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("pulses must be at least 1"));
}

#[test]
fn missing_config_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qfc(tmp.path(), &["chain", "nowhere/run.toml"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("nowhere/run.toml"), "{}", stderr(&out));
}

#[test]
fn config_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_qfc"))
        .current_dir(tmp.path())
        .env("QFC_CONFIG", "absent.toml")
        .args(["chain"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("absent.toml"));
}

#[test]
fn unknown_keys_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.toml"), "[emitter]\nbrightnes = 0.03\n").unwrap();
    let out = qfc(tmp.path(), &["chain", "c.toml"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("brightnes"), "{}", stderr(&out));
}

#[test]
fn unreachable_signal_is_a_solver_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qfc(tmp.path(), &["phasematch", "--signal", "920"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no root"));
}

#[test]
fn bad_tag_files_are_analysis_errors() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.tags"), b"not a tag file").unwrap();
    assert_eq!(code(&qfc(tmp.path(), &["correlate", "bad.tags"])), 4);
    assert_eq!(code(&qfc(tmp.path(), &["correlate", "missing.tags"])), 4);
}

#[test]
fn usage_errors_exit_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&qfc(tmp.path(), &["--no-such-flag"])), 1);
    assert_eq!(code(&qfc(tmp.path(), &["simulate", "--setup", "sideways"])), 1);
    assert_eq!(code(&qfc(tmp.path(), &["--help"])), 0);
}

#[test]
fn simulate_correlate_hom_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for setup in ["hbt", "hom-co", "hom-cross"] {
        let out = qfc(dir, &["simulate", "--setup", setup, "--pulses", "3000000", "--seed", "5", "--out", "sim"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    assert!(dir.join("sim/nir_hbt.tags.meta.json").exists());
    let out = qfc(dir, &["correlate", "sim/nir_hbt.tags", "--out", "corr"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let corr = json(&dir.join("corr/correlation.json"));
    let g2 = corr["g2"]["g2"]["value"].as_f64().unwrap();
    assert!(g2 < 0.2, "g2 = {g2}");
    assert!((corr["period"].as_f64().unwrap() - 1e12 / 76e6).abs() < 1e-6);

    let out = qfc(
        dir,
        &["hom", "sim/nir_hom-co.tags", "sim/nir_hom-cross.tags", "--g2", "corr/correlation.json", "--out", "hom"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let hom = json(&dir.join("hom/hom.json"));
    let v = hom["hom"]["v_hom"]["value"].as_f64().unwrap();
    assert!(v > 0.5 && v < 0.9, "V = {v}");
    assert_eq!(hom["g2"]["value"].as_f64().unwrap(), g2);

    let out = qfc(
        dir,
        &["hom", "sim/nir_hom-co.tags", "sim/nir_hom-cross.tags", "--g2", "0.044:0.002", "--out", "hom2"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn mismatched_period_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    qfc(dir, &["simulate", "--setup", "hbt", "--pulses", "2000000", "--out", "sim"]);
    let out = qfc(
        dir,
        &["correlate", "sim/nir_hbt.tags", "--period", "13050", "--window", "3000", "--out", "c"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("mismatched"), "{}", stderr(&out));
    let doc = json(&dir.join("c/correlation.json"));
    assert!(!doc["warnings"].as_array().unwrap().is_empty());
}

#[test]
fn fit_recovers_parameters_from_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut csv = String::from("# efficiency sweep\nx,y,sigma\n");
    for i in 1..=15 {
        let p = 0.025 * i as f64;
        let y = 0.6 * (4.0 * (0.5 * p).sqrt()).sin().powi(2);
        csv.push_str(&format!("{p},{y},0.005\n"));
    }
    std::fs::write(dir.join("d.csv"), csv).unwrap();
    let out = qfc(dir, &["fit", "d.csv", "--guess", "0.5,0.4,4", "--fix", "length=4", "--out", "f"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc = json(&dir.join("f/fit.json"));
    let params = doc["result"]["parameters"].as_array().unwrap();
    assert!((params[0].as_f64().unwrap() - 0.6).abs() < 1e-6);
    assert!((params[1].as_f64().unwrap() - 0.5).abs() < 1e-6);

    assert_eq!(code(&qfc(dir, &["fit", "d.csv", "--guess", "0.5,0.4"])), 1);
    assert_eq!(code(&qfc(dir, &["fit", "d.csv", "--guess", "0.5,0.4,4", "--fix", "width=1"])), 1);
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut tags = Vec::new();
    let mut docs = Vec::new();
    for threads in ["1", "4", "16"] {
        let sim = format!("sim{threads}");
        let out = qfc(
            dir,
            &["--threads", threads, "simulate", "--setup", "hom-co", "--arm", "telecom", "--pulses", "1500000", "--out", &sim],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        tags.push(std::fs::read(dir.join(&sim).join("telecom_hom-co.tags")).unwrap());
        let tagfile = format!("{sim}/telecom_hom-co.tags");
        let corr = format!("corr{threads}");
        let out = qfc(dir, &["--threads", threads, "correlate", &tagfile, "--out", &corr]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let mut doc = json(&dir.join(&corr).join("correlation.json"));
        doc["tag_file"] = serde_json::Value::Null;
        docs.push(doc);
    }
    assert!(tags.windows(2).all(|w| w[0] == w[1]));
    assert!(docs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn report_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qfc(tmp.path(), &["report", "--pulses", "400000", "--out", "rep"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("eta_ext_max"));
    let manifest = json(&tmp.path().join("rep/manifest.json"));
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    assert!(files.contains(&"report.json") && files.contains(&"histogram_telecom_hom-cross.csv"));
    let report = json(&tmp.path().join("rep/report.json"));
    assert_eq!(report["pulses"], 400000);
}
