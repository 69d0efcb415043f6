//! The documented JSON schemas accept what the runner writes and reject
//! malformed documents.

use std::path::Path;

use padro::experiments::{Experiment, ExperimentConfig, Fault};
use padro::validation::{gradient_suite, sinkhorn_suite, ValidationReport};
use serde_json::{json, Value};

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs").join(name);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&doc).unwrap()
}

fn errors(v: &jsonschema::Validator, doc: &Value) -> Vec<String> {
    v.iter_errors(doc).map(|e| e.to_string()).collect()
}

#[test]
fn every_default_config_matches_the_schema() {
    let v = schema("config.schema.json");
    for e in [
        Experiment::InvertIso,
        Experiment::InvertAniso,
        Experiment::Deconv,
        Experiment::Validate,
    ] {
        let mut cfg = ExperimentConfig::for_experiment(e);
        cfg.validation.inject_fault = Some(Fault::EntropyGradientSign);
        let doc = serde_json::to_value(&cfg).unwrap();
        assert!(v.is_valid(&doc), "{}: {:?}", e.name(), errors(&v, &doc));
    }
    assert!(!v.is_valid(&json!({"seed": 1, "bsmd": {"lr": 0.1}})));
    assert!(!v.is_valid(&json!({"noise_grid": [{"kind": "gaussian"}]})));
}

#[test]
fn validation_report_matches_the_schema() {
    let v = schema("validate-report.schema.json");
    let mut suites = vec![gradient_suite(0, 2, None).unwrap(), sinkhorn_suite(0, 1).unwrap()];
    let mut broken = suites[0].clone();
    broken.max_error = f64::INFINITY;
    suites.extend([broken.clone(), broken.clone(), broken]);
    let report = ValidationReport {
        seed: 0,
        passed: false,
        fault: Some(Fault::EntropyGradientSign),
        suites,
    };
    let doc = serde_json::to_value(&report).unwrap();
    assert!(v.is_valid(&doc), "{:?}", errors(&v, &doc));

    let mut bad = doc.clone();
    bad["suites"][0]["name"] = json!("unknown");
    assert!(!v.is_valid(&bad));
    bad = doc;
    bad.as_object_mut().unwrap().remove("passed");
    assert!(!v.is_valid(&bad));
}
