//! Optional JSON config files. A config is a flat object keyed by flag
//! name; its values fill flags left unset on the command line.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{usage, CliError};

/// Parses config bytes into a flag map.
pub fn parse_config(bytes: &[u8]) -> Result<Map<String, Value>, CliError> {
    let v: Value = serde_json::from_slice(bytes).map_err(|e| usage(format!("config: {e}")))?;
    match v {
        Value::Object(m) => Ok(m),
        _ => Err(usage("config: top level must be an object")),
    }
}

/// Fills unset (`null`) fields of `args` from `config`. Keys that name no
/// flag of the command, or values of the wrong type, are usage errors.
pub fn apply_config<A: Serialize + DeserializeOwned>(args: A, config: &Map<String, Value>) -> Result<A, CliError> {
    let mut obj = match serde_json::to_value(&args)? {
        Value::Object(m) => m,
        _ => unreachable!("argument structs serialize to objects"),
    };
    for (key, value) in config {
        match obj.get_mut(key) {
            Some(slot) if slot.is_null() => *slot = value.clone(),
            Some(_) => {}
            None => return Err(usage(format!("config: unknown key `{key}`"))),
        }
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| usage(format!("config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(rename_all = "kebab-case")]
    struct A {
        lr: Option<f64>,
        fool_data: Option<String>,
    }

    #[test]
    fn flags_override_config() {
        let cfg = parse_config(br#"{"lr": 0.5, "fool-data": "x"}"#).unwrap();
        let a = apply_config(A { lr: Some(0.1), fool_data: None }, &cfg).unwrap();
        assert_eq!(a, A { lr: Some(0.1), fool_data: Some("x".into()) });
    }

    #[test]
    fn unknown_key_and_bad_type_rejected() {
        let a = || A { lr: None, fool_data: None };
        let unknown = parse_config(br#"{"lrr": 1}"#).unwrap();
        assert!(matches!(apply_config(a(), &unknown), Err(CliError::Usage(_))));
        let typed = parse_config(br#"{"lr": "fast"}"#).unwrap();
        assert!(matches!(apply_config(a(), &typed), Err(CliError::Usage(_))));
        assert!(parse_config(b"[1]").is_err());
        assert!(parse_config(b"{").is_err());
    }
}
