//! Published JSON schemas and the check every outgoing explanation passes.

use exemplar_core::explainer::{ExplanationRecord, Status};
use jsonschema::Validator;
use serde_json::Value;

pub const EXPLANATION_SCHEMA: &str = include_str!("../../../schemas/explanation.json");
pub const SESSION_SCHEMA: &str = include_str!("../../../schemas/session.json");

pub fn schema_text(name: &str) -> Option<&'static str> {
    match name {
        "explanation.json" => Some(EXPLANATION_SCHEMA),
        "session.json" => Some(SESSION_SCHEMA),
        _ => None,
    }
}

fn compile(text: &str) -> Validator {
    let schema: Value = serde_json::from_str(text).expect("bundled schema is valid JSON");
    jsonschema::validator_for(&schema).expect("bundled schema compiles")
}

pub fn explanation_validator() -> Validator {
    compile(EXPLANATION_SCHEMA)
}

pub fn session_validator() -> Validator {
    compile(SESSION_SCHEMA)
}

/// Messages for every schema violation in `instance`.
pub fn violations(v: &Validator, instance: &Value) -> Vec<String> {
    v.iter_errors(instance).map(|e| format!("{}: {}", e.instance_path, e)).collect()
}

/// Schema validity plus the invariants a schema cannot express.
pub fn check_record(v: &Validator, record: &ExplanationRecord) -> Result<(), String> {
    let value = serde_json::to_value(record).map_err(|e| e.to_string())?;
    let errs = violations(v, &value);
    if !errs.is_empty() {
        return Err(errs.join("; "));
    }
    let total: usize = record.neighborhood_stats.values().sum();
    if total != record.neighborhood_total {
        return Err(format!("neighborhood stats sum to {total}, total is {}", record.neighborhood_total));
    }
    if record.scores.len() <= record.label.id {
        return Err("label id outside the score vector".into());
    }
    if record.counterexemplars.iter().any(|c| c.label == record.label) {
        return Err("a counterexemplar carries the explained label".into());
    }
    if record.counter_rules.iter().any(|r| r.consequent == record.label) {
        return Err("a counter-rule predicts the explained label".into());
    }
    if record.exemplars.is_empty() != record.saliency.is_none() {
        return Err("saliency must be present exactly when exemplars are".into());
    }
    if record.status == Status::Degenerate && !record.counterexemplars.is_empty() {
        return Err("degenerate explanation with counterexemplars".into());
    }
    Ok(())
}
