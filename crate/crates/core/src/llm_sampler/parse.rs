//! Reply parsing for the structured objects the prompts ask for.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::json_text::{coerce_numeric_strings, extract_first_object};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no JSON object found in the reply")]
    NoObject,
    #[error("reply object is missing or has a malformed `{0}`")]
    Schema(String),
}

/// Reply to an initialization prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitDecision {
    pub param_ranges: Map<String, Value>,
    pub initial_params: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Reply to a fully-LLM optimization prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmDecision {
    pub update_param_ranges: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_param_ranges: Option<Map<String, Value>>,
    pub next_params: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExpectedShape {
    Init { require_reason: bool },
    Opt { require_reason: bool },
    /// `{param_name: value, ...}`; `known` lists the space's parameters, at
    /// least one of which must be present.
    TpeRelative { known: Vec<String> },
    TpeIndependent { param: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Parsed {
    Init(InitDecision),
    Opt(LlmDecision),
    /// Parameter values keyed by name.
    Fragment(Map<String, Value>),
}

fn object_field(obj: &Map<String, Value>, key: &str) -> Result<Map<String, Value>, ParseError> {
    match obj.get(key) {
        Some(Value::Object(m)) => Ok(m.clone()),
        _ => Err(ParseError::Schema(key.into())),
    }
}

fn reason_field(obj: &Map<String, Value>, required: bool) -> Result<Option<String>, ParseError> {
    let reason = match obj.get("reason") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(other) => Some(other.to_string()),
    };
    match reason {
        Some(r) if !r.trim().is_empty() => Ok(Some(r)),
        _ if required => Err(ParseError::Schema("reason".into())),
        _ => Ok(None),
    }
}

fn bool_field(obj: &Map<String, Value>, key: &str) -> Result<bool, ParseError> {
    match obj.get(key) {
        Some(Value::Bool(b)) => Ok(*b),
        Some(Value::String(s)) if s.eq_ignore_ascii_case("true") => Ok(true),
        Some(Value::String(s)) if s.eq_ignore_ascii_case("false") => Ok(false),
        _ => Err(ParseError::Schema(key.into())),
    }
}

/// Extracts the first object from `text` and checks it against `shape`.
pub fn parse_decision(text: &str, shape: &ExpectedShape) -> Result<Parsed, ParseError> {
    let obj = extract_first_object(text).ok_or(ParseError::NoObject)?;
    match shape {
        ExpectedShape::Init { require_reason } => {
            let param_ranges = object_field(&obj, "param_ranges")?;
            let mut initial_params = object_field(&obj, "initial_params")?;
            coerce_numeric_strings(&mut initial_params);
            initial_params.retain(|k, _| param_ranges.contains_key(k));
            let reason = reason_field(&obj, *require_reason)?;
            Ok(Parsed::Init(InitDecision { param_ranges, initial_params, reason }))
        }
        ExpectedShape::Opt { require_reason } => {
            let update_param_ranges = bool_field(&obj, "update_param_ranges")?;
            let new_param_ranges = match obj.get("new_param_ranges") {
                Some(Value::Object(m)) => Some(m.clone()),
                _ if update_param_ranges => return Err(ParseError::Schema("new_param_ranges".into())),
                _ => None,
            };
            let mut next_params = object_field(&obj, "next_params")?;
            coerce_numeric_strings(&mut next_params);
            let reason = reason_field(&obj, *require_reason)?;
            Ok(Parsed::Opt(LlmDecision { update_param_ranges, new_param_ranges, next_params, reason }))
        }
        ExpectedShape::TpeRelative { known } => {
            // some models nest the values one level down
            let mut map = match obj.get("next_params").or_else(|| obj.get("params")) {
                Some(Value::Object(inner)) if !known.iter().any(|k| obj.contains_key(k)) => inner.clone(),
                _ => obj,
            };
            map.retain(|k, _| known.contains(k));
            if map.is_empty() {
                return Err(ParseError::Schema(known.first().cloned().unwrap_or_default()));
            }
            coerce_numeric_strings(&mut map);
            Ok(Parsed::Fragment(map))
        }
        ExpectedShape::TpeIndependent { param } => {
            let v = obj.get(param).ok_or_else(|| ParseError::Schema(param.clone()))?;
            let mut map = Map::new();
            map.insert(param.clone(), v.clone());
            coerce_numeric_strings(&mut map);
            Ok(Parsed::Fragment(map))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn well_formed_opt() {
        let p = parse_decision(r#"{"update_param_ranges": false, "next_params": {"x": 0.3}}"#, &ExpectedShape::Opt { require_reason: false });
        let Ok(Parsed::Opt(d)) = p else { panic!("{p:?}") };
        assert!(!d.update_param_ranges);
        assert_eq!(d.next_params["x"], json!(0.3));
    }

    #[test]
    fn fenced_fragment() {
        let p = parse_decision("```json\n{\"x\": 0.3}\n```", &ExpectedShape::TpeIndependent { param: "x".into() }).unwrap();
        assert_eq!(p, Parsed::Fragment(json!({"x": 0.3}).as_object().unwrap().clone()));
    }

    #[test]
    fn independent_missing_key() {
        let p = parse_decision(r#"here you go {"y": 1}"#, &ExpectedShape::TpeIndependent { param: "x".into() });
        assert_eq!(p, Err(ParseError::Schema("x".into())));
        assert_eq!(parse_decision("nothing here", &ExpectedShape::TpeIndependent { param: "x".into() }), Err(ParseError::NoObject));
    }

    #[test]
    fn update_requires_ranges() {
        let shape = ExpectedShape::Opt { require_reason: false };
        let p = parse_decision(r#"{"update_param_ranges": true, "next_params": {"x": 1}}"#, &shape);
        assert_eq!(p, Err(ParseError::Schema("new_param_ranges".into())));
        let p = parse_decision(r#"{"update_param_ranges": "true", "new_param_ranges": {"x": [0, 2]}, "next_params": {"x": "1"}}"#, &shape);
        let Ok(Parsed::Opt(d)) = p else { panic!() };
        assert_eq!(d.next_params["x"], json!(1));
    }

    #[test]
    fn reasoning_requires_reason() {
        let shape = ExpectedShape::Opt { require_reason: true };
        let text = r#"{"update_param_ranges": false, "next_params": {"x": 1}, "reason": "  "}"#;
        assert_eq!(parse_decision(text, &shape), Err(ParseError::Schema("reason".into())));
        let text = r#"{"update_param_ranges": false, "next_params": {"x": 1}, "reason": "exploit"}"#;
        assert!(parse_decision(text, &shape).is_ok());
    }

    #[test]
    fn init_shape() {
        let text = r#"Sure: {"param_ranges": {"x": [0, 5]}, "initial_params": {"x": 2, "junk": 1}, "reason": "r"}"#;
        let Ok(Parsed::Init(d)) = parse_decision(text, &ExpectedShape::Init { require_reason: true }) else { panic!() };
        assert_eq!(d.initial_params, json!({"x": 2}).as_object().unwrap().clone());
        assert_eq!(d.reason.as_deref(), Some("r"));
        assert!(parse_decision(r#"{"param_ranges": {}}"#, &ExpectedShape::Init { require_reason: false }).is_err());
    }

    #[test]
    fn relative_fragment() {
        let known = vec!["x".to_string(), "n".to_string()];
        let p = parse_decision(r#"{"x": 0.5, "extra": 1}"#, &ExpectedShape::TpeRelative { known: known.clone() }).unwrap();
        assert_eq!(p, Parsed::Fragment(json!({"x": 0.5}).as_object().unwrap().clone()));
        let p = parse_decision(r#"{"next_params": {"n": 3}}"#, &ExpectedShape::TpeRelative { known: known.clone() }).unwrap();
        assert_eq!(p, Parsed::Fragment(json!({"n": 3}).as_object().unwrap().clone()));
        assert!(parse_decision(r#"{"z": 1}"#, &ExpectedShape::TpeRelative { known }).is_err());
    }

    fn arb_param_value() -> impl Strategy<Value = Value> {
        prop_oneof![
            (-1e6..1e6f64).prop_map(|x| json!(x)),
            (-1000i64..1000).prop_map(|x| json!(x)),
            "[a-z]{1,6}".prop_map(|s| json!(s)),
        ]
    }

    fn arb_decision() -> impl Strategy<Value = LlmDecision> {
        (
            any::<bool>(),
            proptest::collection::btree_map("[a-z]{1,5}", arb_param_value(), 1..5),
            proptest::collection::btree_map("[a-z]{1,5}", (-100.0..100.0f64, 0.0..50.0f64), 1..4),
            proptest::option::of("[ -~]{1,40}"),
        )
            .prop_map(|(update, next, ranges, reason)| LlmDecision {
                update_param_ranges: update,
                new_param_ranges: update.then(|| ranges.into_iter().map(|(k, (lo, w))| (k, json!([lo, lo + w]))).collect()),
                next_params: next.into_iter().collect(),
                reason: reason.filter(|r| !r.trim().is_empty()),
            })
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(d in arb_decision(), prose in "[a-z ]{0,10}") {
            let text = format!("{prose}{}", serde_json::to_string(&d).unwrap());
            let parsed = parse_decision(&text, &ExpectedShape::Opt { require_reason: false }).unwrap();
            prop_assert_eq!(parsed, Parsed::Opt(d));
        }
    }
}
