use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

use healthgen::data::load_archive;
use tempfile::TempDir;

fn healthgen(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_healthgen"));
    cmd.args(args).env_remove("HEALTHGEN_OUT");
    if let Some(out) = env_out {
        cmd.env("HEALTHGEN_OUT", out);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "expected one stderr line, got {stderr:?}");
    serde_json::from_str(lines[0]).unwrap()
}

const SMALL_TOY: &str = r#"{"data": {"toy": {"n": 120}}}"#;

#[test]
fn prepare_data_writes_a_loadable_archive() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL_TOY);
    let out = dir.path().join("run");
    let res = healthgen(&["prepare-data", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let cohort = load_archive(&out.join("cohort")).unwrap();
    assert_eq!(cohort.len(), 120);
    assert_eq!(cohort.label_names, vec!["vent".to_string()]);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifests/prepare-data.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "prepare-data");
    assert!(!manifest["outputs"].as_array().unwrap().is_empty());
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"data": {"toy": {"n": 120, "patients": 5}}}"#);
    let res = healthgen(&["prepare-data", "--config", &cfg, "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(res.status.code(), Some(2));
    let err = error_json(&res);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("patients"));
}

#[test]
fn bad_flag_is_a_config_error() {
    let res = healthgen(&["tstr", "--bogus"], None);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_json(&res)["error"], "config");
}

#[test]
fn missing_upstream_artifact_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL_TOY);
    let res = healthgen(&["train-gen", "--config", &cfg, "--out", dir.path().join("empty").to_str().unwrap()], None);
    assert_eq!(res.status.code(), Some(3));
    let err = error_json(&res);
    assert_eq!(err["error"], "missing_artifact");
    assert!(err["message"].as_str().unwrap().contains("prepare-data"));
}

#[test]
fn out_flag_beats_environment_which_beats_file() {
    let dir = TempDir::new().unwrap();
    let file_out = dir.path().join("from-file");
    let body = format!(r#"{{"out": {:?}, "data": {{"toy": {{"n": 120}}}}}}"#, file_out.to_str().unwrap());
    let cfg = write_config(dir.path(), &body);
    let env_out = dir.path().join("from-env");
    let flag_out = dir.path().join("from-flag");

    let res = healthgen(&["prepare-data", "--config", &cfg], Some(&env_out));
    assert!(res.status.success());
    assert!(env_out.join("cohort").exists());
    assert!(!file_out.exists());

    let res = healthgen(
        &["prepare-data", "--config", &cfg, "--out", flag_out.to_str().unwrap()],
        Some(&env_out),
    );
    assert!(res.status.success());
    assert!(flag_out.join("cohort").exists());

    let res = healthgen(&["prepare-data", "--config", &cfg], None);
    assert!(res.status.success());
    assert!(file_out.join("cohort").exists());
}

#[test]
fn command_guard_rejects_other_subcommands() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"command": "tstr", "data": {"toy": {"n": 120}}}"#);
    let res = healthgen(&["prepare-data", "--config", &cfg, "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(res.status.code(), Some(2));
}

/// 30 patients, every tenth one too short to label.
fn write_csv_export(dir: &Path) {
    let (mut events, mut statics, mut interventions) = (
        String::from("patient_id,timestamp_hours,feature_name,value\n"),
        String::from("patient_id,var_name,category\n"),
        String::from("patient_id,step,label_name,active\n"),
    );
    for i in 0..30 {
        let id = format!("p{i:02}");
        for k in 0..6 {
            let t = 0.5 * k as f64 + 0.1 * (i % 3) as f64;
            writeln!(events, "{id},{t},hr,{}", 70 + i + k).unwrap();
            if k % 2 == 0 {
                writeln!(events, "{id},{t},sbp,{}", 110 + i).unwrap();
            }
        }
        writeln!(statics, "{id},sex,{}", if i % 2 == 0 { "f" } else { "m" }).unwrap();
        let last = if i % 10 == 9 { 20 } else { 47 };
        writeln!(interventions, "{id},{last},vent,0").unwrap();
        if i % 3 == 0 {
            writeln!(interventions, "{id},40,vent,1").unwrap();
        }
    }
    std::fs::write(dir.join("events.csv"), events).unwrap();
    std::fs::write(dir.join("statics.csv"), statics).unwrap();
    std::fs::write(dir.join("interventions.csv"), interventions).unwrap();
}

#[test]
fn csv_source_builds_cohort_and_lists_rejections() {
    let dir = TempDir::new().unwrap();
    write_csv_export(dir.path());
    let cfg = write_config(
        dir.path(),
        r#"{
          "data": {"csv": {
            "events": "events.csv",
            "statics": "statics.csv",
            "interventions": "interventions.csv",
            "features": ["hr", "sbp"],
            "vocab": {"variables": [{"name": "sex", "categories": ["f", "m"]}]},
            "labels": ["vent"]
          }}
        }"#,
    );
    let out = dir.path().join("run");
    let res = healthgen(&["prepare-data", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let cohort = load_archive(&out.join("cohort")).unwrap();
    assert_eq!(cohort.len(), 27);
    assert_eq!(cohort.manifest.features(), 2);
    let positives = cohort.records.iter().filter(|r| r.y[0] == 1).count();
    // i % 3 == 0 among the 27 kept: 0, 3, 6, 12, 15, 18, 21, 24, 27.
    assert_eq!(positives, 9);
    let rejections = std::fs::read_to_string(out.join("rejections.csv")).unwrap();
    for id in ["p09", "p19", "p29"] {
        assert!(rejections.contains(id), "{id} missing from {rejections}");
    }
}

#[test]
fn export_preselection_shrinks_sample_table() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{
          "data": {"toy": {"n": 200}},
          "models": [{"healthgen": {"epochs": 1, "dim_h": 16, "dim_g": 16}}],
          "export": {"figures": ["samples"], "samples": 200}
        }"#,
    );
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    for cmd in ["prepare-data", "train-gen", "generate", "export-figures"] {
        let res = healthgen(&[cmd, "--config", &cfg, "--out", o], None);
        assert!(res.status.success(), "{cmd}: {}", String::from_utf8_lossy(&res.stderr));
    }
    let all = std::fs::read_to_string(out.join("figures/samples_healthgen.csv")).unwrap();
    let res = healthgen(&["export-figures", "--config", &cfg, "--out", o, "--preselect-low-missingness"], None);
    assert!(res.status.success());
    let sparse = std::fs::read_to_string(out.join("figures/samples_healthgen.csv")).unwrap();
    assert!(sparse.lines().count() < all.lines().count());
    assert!(sparse.lines().count() > 1);
}
