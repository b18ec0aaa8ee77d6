//! Helpers for driving the `didmed` binary.

#![allow(dead_code)]

use std::path::Path;
use std::process::Command;

use serde_json::Value;

pub struct Run {
    pub code: i32,
    pub json: Value,
    pub stdout: String,
    pub stderr: String,
}

pub fn didmed(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_didmed")).args(args).output().expect("binary runs");
    let stdout = String::from_utf8(out.stdout).expect("utf-8 output");
    let json = serde_json::from_str(&stdout).unwrap_or(Value::Null);
    Run { code: out.status.code().unwrap_or(-1), json, stdout, stderr: String::from_utf8_lossy(&out.stderr).into_owned() }
}

pub fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    let text = std::fs::read_to_string(&path).expect("schema file");
    jsonschema::validator_for(&serde_json::from_str(&text).expect("schema JSON")).expect("valid schema")
}

pub fn assert_valid(name: &str, doc: &Value) {
    let v = schema(name);
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{e} at {}", e.instance_path)).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}\n{doc:#}");
}

/// Effect values of an estimate report, by name.
pub fn effects(doc: &Value) -> Vec<(String, f64, f64)> {
    doc["estimates"]
        .as_array()
        .expect("estimates")
        .iter()
        .map(|e| (e["name"].as_str().unwrap().to_string(), e["effect"].as_f64().unwrap(), e["se"].as_f64().unwrap()))
        .collect()
}
