mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use common::fixture_dir;

fn debris(store: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_debris"))
        .arg("--store")
        .arg(store)
        .args(args)
        .env_remove("DEBRIS_CONFIG")
        .env_remove("DEBRIS_STORE")
        .output()
        .expect("run debris")
}

fn fixture_config_arg() -> String {
    fixture_dir().join("survey.toml").display().to_string()
}

#[track_caller]
fn json_error(out: &Output, code: i32, kind: &str) -> Value {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert_eq!(err["error"], kind);
    assert_eq!(err["exit_code"], code);
    assert!(!err["message"].as_str().unwrap().is_empty());
    err
}

fn ingested(store: &Path) {
    let cfg = fixture_config_arg();
    let images = fixture_dir().join("images");
    let out = debris(store, &["--config", &cfg, "--json", "ingest", images.to_str().unwrap(), "--survey", "s"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn broken_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[pipeline]\noverlap_threshold = 7\n").unwrap();
    let out = debris(&dir.path().join("store"), &["--config", bad.to_str().unwrap(), "--json", "config"]);
    json_error(&out, 2, "config");

    std::fs::write(&bad, "[camera\n").unwrap();
    let out = debris(&dir.path().join("store"), &["--config", bad.to_str().unwrap(), "--json", "config"]);
    json_error(&out, 2, "config");

    let missing = dir.path().join("nope.toml");
    let out = debris(&dir.path().join("store"), &["--config", missing.to_str().unwrap(), "config"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn config_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[pipeline]\noverlap_threshold = 0.5\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_debris"))
        .args(["--json", "config"])
        .env("DEBRIS_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["pipeline"]["overlap_threshold"], 0.5);

    // the printed TOML reads back to the same config
    let out = Command::new(env!("CARGO_BIN_EXE_debris"))
        .arg("config")
        .env("DEBRIS_CONFIG", &cfg)
        .output()
        .unwrap();
    let printed = dir.path().join("printed.toml");
    std::fs::write(&printed, &out.stdout).unwrap();
    let again = Command::new(env!("CARGO_BIN_EXE_debris"))
        .args(["--json", "config", "--config", printed.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(serde_json::from_slice::<Value>(&again.stdout).unwrap(), v);
}

#[test]
fn unreachable_provider_exits_3_and_keeps_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    ingested(&store);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = dir.path().join("remote.toml");
    std::fs::write(
        &cfg,
        format!("[provider]\nkind = \"remote\"\nbase_url = \"http://127.0.0.1:{port}\"\ntimeout_secs = 2.0\n"),
    )
    .unwrap();
    let out = debris(&store, &["--config", cfg.to_str().unwrap(), "--json", "detect", "--survey", "s"]);
    json_error(&out, 3, "provider");

    let out = debris(&store, &["export", "--survey", "s", "--format", "csv"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1, "only the header");
}

#[test]
fn data_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let cfg = fixture_config_arg();

    let out = debris(&store, &["--json", "stats", "--survey", "ghost"]);
    json_error(&out, 4, "data");

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = debris(&store, &["--json", "ingest", empty.to_str().unwrap()]);
    json_error(&out, 4, "data");

    ingested(&store);
    let out = debris(&store, &["--config", &cfg, "--json", "dedup", "--survey", "s"]);
    json_error(&out, 4, "data");

    let out = debris(&store, &["--json", "evaluate", "--survey", "s", "--truth", "/no/such/truth.json"]);
    json_error(&out, 4, "data");

    let csv = dir.path().join("bad.csv");
    std::fs::write(
        &csv,
        "record_id,image_id,x_min,y_min,x_max,y_max,score,label,corrected,latitude,longitude,altitude,duplicate_group,is_canonical\n\
         a,IMG_0001,1,1,5,5,0.5,glass,false,,,,,false\n",
    )
    .unwrap();
    let out = debris(&store, &["--json", "import", "--survey", "s", csv.to_str().unwrap()]);
    let err = json_error(&out, 4, "data");
    assert!(err["message"].as_str().unwrap().contains("line 2"), "{err}");

    std::fs::write(&csv, "record_id,image_id\n").unwrap();
    let out = debris(&store, &["--json", "import", "--survey", "s", csv.to_str().unwrap()]);
    let err = json_error(&out, 4, "data");
    assert!(err["message"].as_str().unwrap().contains("x_min"), "{err}");
}

#[test]
fn survey_commands_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let cfg = fixture_config_arg();
    let images = fixture_dir().join("images");

    let out = debris(&store, &["--config", &cfg, "ingest", images.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("survey survey-0001\n"), "{text}");
    assert!(text.contains("IMG_0012") && text.contains("unmapped (no GPS)"));

    let run = |args: &[&str]| {
        let mut full = vec!["--config", cfg.as_str(), "--json"];
        full.extend_from_slice(args);
        let out = debris(&store, &full);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice::<Value>(&out.stdout).unwrap()
    };
    let det = run(&["detect", "--survey", "survey-0001"]);
    assert_eq!(det["records"], 24);
    assert_eq!(det["images"], 12);
    let dd = run(&["dedup", "--survey", "survey-0001"]);
    assert_eq!(dd["groups"].as_array().unwrap().len(), 3);
    let st = run(&["stats", "--survey", "survey-0001"]);
    assert_eq!(st["surviving_records"], 21);
    assert_eq!(st["unmapped_records"], 1);

    let geo = dir.path().join("map.geojson");
    let out = debris(
        &store,
        &["--config", &cfg, "export", "--survey", "survey-0001", "--format", "geojson", "-o", geo.to_str().unwrap()],
    );
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let fc: Value = serde_json::from_slice(&std::fs::read(&geo).unwrap()).unwrap();
    assert_eq!(fc["features"].as_array().unwrap().len(), 20);

    let truth = fixture_dir().join("truth.json");
    let out = debris(&store, &["--config", &cfg, "evaluate", "--survey", "survey-0001", "--truth", truth.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("macro F1") || text.contains("macro_f1"), "{text}");
    assert!(text.contains("\"mean_iou\""), "JSON follows the table");
}
