#![allow(dead_code)]

pub mod metrics_oracle;

use std::path::PathBuf;
use std::sync::OnceLock;

use debris_core::config::SurveyConfig;
use serde_json::Value;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixture_dir() -> PathBuf {
    repo_root().join("fixtures/coastal-survey")
}

pub fn fixture_config() -> SurveyConfig {
    SurveyConfig::load(&fixture_dir().join("survey.toml")).expect("fixture config")
}

fn load_schema(name: &str) -> Value {
    let text = std::fs::read_to_string(repo_root().join("schemas").join(name)).expect("schema file");
    serde_json::from_str(&text).expect("schema json")
}

pub fn api_schema() -> &'static Value {
    static DOC: OnceLock<Value> = OnceLock::new();
    DOC.get_or_init(|| load_schema("api.schema.json"))
}

pub fn protocol_schema() -> &'static Value {
    static DOC: OnceLock<Value> = OnceLock::new();
    DOC.get_or_init(|| load_schema("inference-protocol.schema.json"))
}

/// Errors from validating `instance` against `#/$defs/{def}` of `doc`.
pub fn schema_errors(doc: &Value, def: &str, instance: &Value) -> Vec<String> {
    assert!(doc["$defs"].get(def).is_some(), "schema has no definition {def}");
    let mut root = doc.clone();
    root["$ref"] = Value::String(format!("#/$defs/{def}"));
    let validator = jsonschema::validator_for(&root).expect("schema compiles");
    validator.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path)).collect()
}

#[track_caller]
pub fn assert_api(def: &str, instance: &Value) {
    let errs = schema_errors(api_schema(), def, instance);
    assert!(errs.is_empty(), "{def} does not validate: {errs:#?}\n{instance:#}");
}

#[track_caller]
pub fn assert_protocol(def: &str, instance: &Value) {
    let errs = schema_errors(protocol_schema(), def, instance);
    assert!(errs.is_empty(), "{def} does not validate: {errs:#?}\n{instance:#}");
}
