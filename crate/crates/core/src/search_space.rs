//! Search space definitions shared by every sampler.
//!
//! A [`SearchSpace`] is an ordered set of named [`ParamSpec`]s. Its parameter
//! set is fixed once the study starts; only ranges change, through
//! [`apply_space_update`], which bumps the version counter.

use std::fmt;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::json_text::{format_number, to_prompt_string};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("parameter `{name}`: {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("duplicate parameter `{0}`")]
    Duplicate(String),
    #[error("search space is empty")]
    Empty,
    #[error("assignment keys do not match the space (missing: {missing:?}, extra: {extra:?})")]
    KeyMismatch { missing: Vec<String>, extra: Vec<String> },
    #[error("malformed search space document: {0}")]
    Wire(String),
}

/// Value domain of a single parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Float { low: f64, high: f64, log_scale: bool },
    Int { low: i64, high: i64, log_scale: bool },
    Categorical { choices: Vec<String> },
}

impl Domain {
    pub fn float(low: f64, high: f64) -> Self {
        Domain::Float { low, high, log_scale: false }
    }

    pub fn int(low: i64, high: i64) -> Self {
        Domain::Int { low, high, log_scale: false }
    }

    pub fn categorical<S: Into<String>>(choices: impl IntoIterator<Item = S>) -> Self {
        Domain::Categorical { choices: choices.into_iter().map(Into::into).collect() }
    }

    pub fn is_numeric(&self) -> bool {
        !matches!(self, Domain::Categorical { .. })
    }

    pub fn log_scale(&self) -> bool {
        match self {
            Domain::Float { log_scale, .. } | Domain::Int { log_scale, .. } => *log_scale,
            Domain::Categorical { .. } => false,
        }
    }

    /// Numeric bounds as reals; `None` for categorical domains.
    pub fn bounds(&self) -> Option<(f64, f64)> {
        match *self {
            Domain::Float { low, high, .. } => Some((low, high)),
            Domain::Int { low, high, .. } => Some((low as f64, high as f64)),
            Domain::Categorical { .. } => None,
        }
    }

    fn check(&self) -> Result<(), String> {
        match self {
            Domain::Float { low, high, log_scale } => {
                if !(low.is_finite() && high.is_finite()) {
                    return Err("bounds must be finite".into());
                }
                if low >= high {
                    return Err(format!("low {low} must be below high {high}"));
                }
                if *log_scale && *low <= 0.0 {
                    return Err("log-scale ranges need a positive low bound".into());
                }
            }
            Domain::Int { low, high, log_scale } => {
                if high - low < 1 {
                    return Err(format!("integer range [{low}, {high}] needs high - low >= 1"));
                }
                if *log_scale && *low <= 0 {
                    return Err("log-scale ranges need a positive low bound".into());
                }
            }
            Domain::Categorical { choices } => {
                if choices.is_empty() {
                    return Err("no choices".into());
                }
                for (i, c) in choices.iter().enumerate() {
                    if choices[..i].contains(c) {
                        return Err(format!("duplicate choice `{c}`"));
                    }
                }
            }
        }
        Ok(())
    }

    /// The `[min, max]` or `[options...]` form used in `param_ranges`.
    pub fn range_value(&self) -> Value {
        match self {
            Domain::Float { low, high, .. } => Value::from(vec![*low, *high]),
            Domain::Int { low, high, .. } => Value::from(vec![*low, *high]),
            Domain::Categorical { choices } => Value::from(choices.clone()),
        }
    }
}

/// A named parameter and its domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub domain: Domain,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, domain: Domain) -> Result<Self, SpaceError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(SpaceError::InvalidSpec { name, reason: "empty name".into() });
        }
        domain.check().map_err(|reason| SpaceError::InvalidSpec { name: name.clone(), reason })?;
        Ok(Self { name, domain })
    }
}

/// One parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Choice(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(i) => Some(*i as f64),
            ParamValue::Float(f) => Some(*f),
            ParamValue::Choice(_) => None,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            ParamValue::Int(i) => Value::from(*i),
            ParamValue::Float(f) => serde_json::Number::from_f64(*f).map(Value::Number).unwrap_or(Value::Null),
            ParamValue::Choice(s) => Value::from(s.clone()),
        }
    }

    /// Converts a raw JSON value, guided by the target domain. Non-whole
    /// numbers for integer domains stay `Float` so that clamping can round
    /// them.
    pub fn from_json(v: &Value, domain: &Domain) -> Option<Self> {
        match (v, domain) {
            (Value::Number(n), Domain::Int { .. }) => match n.as_i64() {
                Some(i) => Some(ParamValue::Int(i)),
                None => n.as_f64().map(|f| {
                    if f.fract() == 0.0 && f.abs() < 9e15 {
                        ParamValue::Int(f as i64)
                    } else {
                        ParamValue::Float(f)
                    }
                }),
            },
            (Value::Number(n), Domain::Float { .. }) => n.as_f64().map(ParamValue::Float),
            (Value::Number(n), Domain::Categorical { .. }) => {
                Some(ParamValue::Choice(n.as_f64().map(format_number).unwrap_or_else(|| n.to_string())))
            }
            (Value::String(s), _) => Some(ParamValue::Choice(s.clone())),
            (Value::Bool(b), Domain::Categorical { .. }) => {
                Some(ParamValue::Choice(if *b { "True".into() } else { "False".into() }))
            }
            _ => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(i) => write!(f, "{i}"),
            ParamValue::Float(x) => write!(f, "{}", format_number(*x)),
            ParamValue::Choice(s) => write!(f, "{s}"),
        }
    }
}

/// Parameter name to value, in search-space order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamAssignment(pub IndexMap<String, ParamValue>);

impl ParamAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, value: ParamValue) -> Self {
        self.0.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ParamValue) {
        self.0.insert(name.into(), value);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamValue)> {
        self.0.iter()
    }

    pub fn to_json(&self) -> Value {
        Value::Object(self.0.iter().map(|(k, v)| (k.clone(), v.to_json())).collect())
    }

    /// Rendering used inside prompts, e.g. `{"x": 0.5, "c": "a"}`.
    pub fn to_prompt_string(&self) -> String {
        to_prompt_string(&self.to_json())
    }

    /// Builds an assignment from a raw JSON map. Keys are kept as given so
    /// that validation can report extras; values for keys outside the space
    /// are carried over as best effort.
    pub fn from_json_map(space: &SearchSpace, map: &Map<String, Value>) -> Self {
        let mut out = IndexMap::new();
        for (k, v) in map {
            let converted = match space.get(k) {
                Some(spec) => ParamValue::from_json(v, &spec.domain),
                None => serde_json::from_value::<ParamValue>(v.clone()).ok(),
            };
            if let Some(pv) = converted {
                out.insert(k.clone(), pv);
            }
        }
        ParamAssignment(out)
    }
}

/// Ordered parameter specs plus an update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    params: IndexMap<String, ParamSpec>,
    version: u64,
}

impl SearchSpace {
    pub fn new(specs: impl IntoIterator<Item = ParamSpec>) -> Result<Self, SpaceError> {
        let mut params = IndexMap::new();
        for spec in specs {
            spec.domain.check().map_err(|reason| SpaceError::InvalidSpec { name: spec.name.clone(), reason })?;
            if params.contains_key(&spec.name) {
                return Err(SpaceError::Duplicate(spec.name));
            }
            params.insert(spec.name.clone(), spec);
        }
        if params.is_empty() {
            return Err(SpaceError::Empty);
        }
        Ok(Self { params, version: 0 })
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    pub fn get(&self, name: &str) -> Option<&ParamSpec> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn specs(&self) -> impl Iterator<Item = &ParamSpec> {
        self.params.values()
    }

    /// Names of integer-kind parameters, in space order.
    pub fn integer_params(&self) -> Vec<&str> {
        self.specs().filter(|s| matches!(s.domain, Domain::Int { .. })).map(|s| s.name.as_str()).collect()
    }

    /// `param_ranges` object: name to `[low, high]` or list of choices.
    pub fn param_ranges(&self) -> Map<String, Value> {
        self.specs().map(|s| (s.name.clone(), s.domain.range_value())).collect()
    }

    /// Serialises to the wire document. `log_scale` lists the log-scaled
    /// parameters and is omitted when empty.
    pub fn to_wire(&self, initial_params: Option<&ParamAssignment>) -> Value {
        let mut doc = Map::new();
        doc.insert("param_ranges".into(), Value::Object(self.param_ranges()));
        if let Some(init) = initial_params {
            doc.insert("initial_params".into(), init.to_json());
        }
        let logs: Vec<Value> = self.specs().filter(|s| s.domain.log_scale()).map(|s| Value::from(s.name.clone())).collect();
        if !logs.is_empty() {
            doc.insert("log_scale".into(), Value::Array(logs));
        }
        doc.insert("version".into(), Value::from(self.version));
        Value::Object(doc)
    }

    /// Parses the wire document produced by [`SearchSpace::to_wire`]. A range
    /// of two JSON integers is an integer parameter, two numbers of which at
    /// least one is a float make a continuous parameter, anything else is a
    /// list of categorical options.
    pub fn from_wire(doc: &Value) -> Result<(Self, Option<Map<String, Value>>), SpaceError> {
        let obj = doc.as_object().ok_or_else(|| SpaceError::Wire("expected an object".into()))?;
        let ranges = obj
            .get("param_ranges")
            .and_then(Value::as_object)
            .ok_or_else(|| SpaceError::Wire("missing `param_ranges` object".into()))?;
        let logs: Vec<&str> = match obj.get("log_scale") {
            None => Vec::new(),
            Some(Value::Array(a)) => a.iter().filter_map(Value::as_str).collect(),
            Some(_) => return Err(SpaceError::Wire("`log_scale` must be a list of names".into())),
        };
        let mut specs = Vec::with_capacity(ranges.len());
        for (name, rv) in ranges {
            let proposal = ProposedRange::from_json(rv).map_err(|e| SpaceError::InvalidSpec { name: name.clone(), reason: e })?;
            let domain = proposal.infer_domain(logs.contains(&name.as_str()));
            specs.push(ParamSpec::new(name.clone(), domain)?);
        }
        let version = match obj.get("version") {
            None => 0,
            Some(v) => v.as_u64().ok_or_else(|| SpaceError::Wire("`version` must be a non-negative integer".into()))?,
        };
        let initial = obj.get("initial_params").and_then(Value::as_object).cloned();
        Ok((Self::new(specs)?.with_version(version), initial))
    }

    /// Per-parameter distribution description, e.g.
    /// `{"x": {"type": "float", "low": 0, "high": 1, "log": false}}`.
    pub fn describe(&self) -> Value {
        let mut out = Map::new();
        for s in self.specs() {
            let mut d = Map::new();
            match &s.domain {
                Domain::Float { low, high, log_scale } => {
                    d.insert("type".into(), "float".into());
                    d.insert("low".into(), Value::from(*low));
                    d.insert("high".into(), Value::from(*high));
                    d.insert("log".into(), Value::from(*log_scale));
                }
                Domain::Int { low, high, log_scale } => {
                    d.insert("type".into(), "int".into());
                    d.insert("low".into(), Value::from(*low));
                    d.insert("high".into(), Value::from(*high));
                    d.insert("log".into(), Value::from(*log_scale));
                }
                Domain::Categorical { choices } => {
                    d.insert("type".into(), "categorical".into());
                    d.insert("choices".into(), Value::from(choices.clone()));
                }
            }
            out.insert(s.name.clone(), Value::Object(d));
        }
        Value::Object(out)
    }

    /// Independent uniform draw (log-uniform for log-scaled parameters).
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamAssignment {
        let mut out = ParamAssignment::new();
        for s in self.specs() {
            let v = match &s.domain {
                Domain::Float { low, high, log_scale } => {
                    let x = if *log_scale {
                        rng.random_range(low.ln()..high.ln()).exp()
                    } else {
                        rng.random_range(*low..*high)
                    };
                    ParamValue::Float(x.clamp(*low, *high))
                }
                Domain::Int { low, high, log_scale } => {
                    if *log_scale {
                        let x = rng.random_range((*low as f64 - 0.5).max(0.5).ln()..(*high as f64 + 0.5).ln()).exp();
                        ParamValue::Int((x.round() as i64).clamp(*low, *high))
                    } else {
                        ParamValue::Int(rng.random_range(*low..=*high))
                    }
                }
                Domain::Categorical { choices } => ParamValue::Choice(choices[rng.random_range(0..choices.len())].clone()),
            };
            out.insert(s.name.clone(), v);
        }
        out
    }

    fn replace_domain(&mut self, name: &str, domain: Domain) {
        if let Some(spec) = self.params.get_mut(name) {
            spec.domain = domain;
        }
    }
}

impl Serialize for SearchSpace {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_wire(None).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SearchSpace {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(deserializer)?;
        SearchSpace::from_wire(&v).map(|(s, _)| s).map_err(serde::de::Error::custom)
    }
}

/// A range proposed for one parameter, before it is checked against the
/// parameter's existing kind.
#[derive(Debug, Clone, PartialEq)]
pub enum ProposedRange {
    /// `[low, high]`; `integral` when both bounds were JSON integers.
    Numeric { low: f64, high: f64, integral: bool },
    Choices(Vec<String>),
}

impl ProposedRange {
    pub fn from_json(v: &Value) -> Result<Self, String> {
        let items = v.as_array().ok_or_else(|| "range must be a list".to_string())?;
        if items.is_empty() {
            return Err("empty range".into());
        }
        if items.len() == 2 && items.iter().all(Value::is_number) {
            let low = items[0].as_f64().unwrap_or(f64::NAN);
            let high = items[1].as_f64().unwrap_or(f64::NAN);
            let integral = items.iter().all(|x| x.is_i64() || x.is_u64());
            return Ok(ProposedRange::Numeric { low, high, integral });
        }
        let choices = items
            .iter()
            .map(|x| match x {
                Value::String(s) => s.clone(),
                Value::Number(n) => n.as_f64().map(format_number).unwrap_or_else(|| n.to_string()),
                other => other.to_string(),
            })
            .collect();
        Ok(ProposedRange::Choices(choices))
    }

    /// Domain implied by the proposal alone, used when no prior kind exists.
    pub fn infer_domain(&self, log_scale: bool) -> Domain {
        match self {
            ProposedRange::Numeric { low, high, integral: true } => Domain::Int { low: *low as i64, high: *high as i64, log_scale },
            ProposedRange::Numeric { low, high, .. } => Domain::Float { low: *low, high: *high, log_scale },
            ProposedRange::Choices(c) => Domain::Categorical { choices: c.clone() },
        }
    }

    /// Domain of the same kind as `current`, or an error if the proposal
    /// does not fit that kind or violates spec invariants.
    pub fn conform_to(&self, current: &Domain) -> Result<Domain, String> {
        let domain = match (self, current) {
            (ProposedRange::Numeric { low, high, .. }, Domain::Float { log_scale, .. }) => {
                Domain::Float { low: *low, high: *high, log_scale: *log_scale }
            }
            (ProposedRange::Numeric { low, high, .. }, Domain::Int { log_scale, .. }) => {
                if !(low.is_finite() && high.is_finite()) {
                    return Err("bounds must be finite".into());
                }
                Domain::Int { low: low.ceil() as i64, high: high.floor() as i64, log_scale: *log_scale }
            }
            (ProposedRange::Choices(c), Domain::Categorical { .. }) => Domain::Categorical { choices: c.clone() },
            (ProposedRange::Choices(_), _) => return Err("numeric parameter needs a [min, max] range".into()),
            // two numeric options read as a range; keep them as options
            (ProposedRange::Numeric { low, high, .. }, Domain::Categorical { .. }) => {
                Domain::Categorical { choices: vec![format_number(*low), format_number(*high)] }
            }
        };
        domain.check()?;
        Ok(domain)
    }
}

/// One problem found by [`validate_assignment`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Missing(String),
    Extra(String),
    OutOfRange { name: String, value: ParamValue },
    WrongKind { name: String, value: ParamValue },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Missing(n) => write!(f, "missing parameter `{n}`"),
            Violation::Extra(n) => write!(f, "unknown parameter `{n}`"),
            Violation::OutOfRange { name, value } => write!(f, "`{name}` = {value} is outside its range"),
            Violation::WrongKind { name, value } => write!(f, "`{name}` = {value} has the wrong kind"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn value_fits(domain: &Domain, value: &ParamValue) -> Result<(), bool> {
    // Err(true) = wrong kind, Err(false) = out of range
    match (domain, value) {
        (Domain::Float { low, high, .. }, ParamValue::Float(x)) => {
            if x.is_finite() && *x >= *low && *x <= *high {
                Ok(())
            } else {
                Err(false)
            }
        }
        (Domain::Int { low, high, .. }, ParamValue::Int(i)) => {
            if i >= low && i <= high {
                Ok(())
            } else {
                Err(false)
            }
        }
        (Domain::Categorical { choices }, ParamValue::Choice(c)) => {
            if choices.contains(c) {
                Ok(())
            } else {
                Err(false)
            }
        }
        _ => Err(true),
    }
}

/// Reports every way `a` fails to be a point of `space`.
pub fn validate_assignment(space: &SearchSpace, a: &ParamAssignment) -> ValidationReport {
    let mut violations = Vec::new();
    for spec in space.specs() {
        match a.get(&spec.name) {
            None => violations.push(Violation::Missing(spec.name.clone())),
            Some(v) => match value_fits(&spec.domain, v) {
                Ok(()) => {}
                Err(true) => violations.push(Violation::WrongKind { name: spec.name.clone(), value: v.clone() }),
                Err(false) => violations.push(Violation::OutOfRange { name: spec.name.clone(), value: v.clone() }),
            },
        }
    }
    for name in a.0.keys() {
        if space.get(name).is_none() {
            violations.push(Violation::Extra(name.clone()));
        }
    }
    ValidationReport { violations }
}

fn key_mismatch(space: &SearchSpace, a: &ParamAssignment) -> Option<SpaceError> {
    let missing: Vec<String> = space.names().filter(|n| a.get(n).is_none()).map(String::from).collect();
    let extra: Vec<String> = a.0.keys().filter(|k| space.get(k).is_none()).cloned().collect();
    if missing.is_empty() && extra.is_empty() {
        None
    } else {
        Some(SpaceError::KeyMismatch { missing, extra })
    }
}

fn clamp_value(domain: &Domain, value: &ParamValue) -> ParamValue {
    match domain {
        Domain::Float { low, high, .. } => {
            let x = match value {
                ParamValue::Choice(s) => s.trim().parse::<f64>().unwrap_or(*low),
                v => v.as_f64().unwrap_or(*low),
            };
            let x = if x.is_nan() { *low } else { x };
            ParamValue::Float(x.clamp(*low, *high))
        }
        Domain::Int { low, high, .. } => {
            let x = match value {
                ParamValue::Int(i) => return ParamValue::Int((*i).clamp(*low, *high)),
                ParamValue::Float(f) => *f,
                ParamValue::Choice(s) => s.trim().parse::<f64>().unwrap_or(*low as f64),
            };
            let x = if x.is_nan() { *low as f64 } else { x.round() };
            ParamValue::Int(x.clamp(*low as f64, *high as f64) as i64)
        }
        Domain::Categorical { choices } => {
            let s = value.to_string();
            if choices.contains(&s) {
                ParamValue::Choice(s)
            } else {
                ParamValue::Choice(choices[0].clone())
            }
        }
    }
}

/// Forces every value into its domain: numbers are clamped, integers are
/// rounded half away from zero first, unknown choices become the first
/// choice. Fails only when the key sets differ.
pub fn clamp_assignment(space: &SearchSpace, a: &ParamAssignment) -> Result<ParamAssignment, SpaceError> {
    if let Some(err) = key_mismatch(space, a) {
        return Err(err);
    }
    let mut out = ParamAssignment::new();
    for spec in space.specs() {
        let v = &a.0[&spec.name];
        out.insert(spec.name.clone(), clamp_value(&spec.domain, v));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub name: String,
    pub reason: String,
}

/// Outcome of [`apply_space_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceUpdate {
    pub space: SearchSpace,
    pub applied: Vec<String>,
    pub rejections: Vec<Rejection>,
    /// Parameters whose proposed range was widened to keep the best value.
    pub widened: Vec<String>,
}

fn contain_best(domain: Domain, best: Option<&ParamValue>) -> (Domain, bool) {
    match (domain, best) {
        (Domain::Float { low, high, log_scale }, Some(v)) => match v.as_f64().filter(|x| x.is_finite()) {
            Some(b) if b < low || b > high => (Domain::Float { low: low.min(b), high: high.max(b), log_scale }, true),
            _ => (Domain::Float { low, high, log_scale }, false),
        },
        (Domain::Int { low, high, log_scale }, Some(v)) => match v {
            ParamValue::Int(b) if *b < low || *b > high => (Domain::Int { low: low.min(*b), high: high.max(*b), log_scale }, true),
            _ => (Domain::Int { low, high, log_scale }, false),
        },
        (Domain::Categorical { mut choices }, Some(ParamValue::Choice(b))) if !choices.contains(b) => {
            choices.push(b.clone());
            (Domain::Categorical { choices }, true)
        }
        (d, _) => (d, false),
    }
}

/// Applies LLM-proposed ranges (`name -> [low, high] | [options...]`).
///
/// Proposals for unknown parameters or with malformed ranges are rejected
/// individually. Accepted ranges that exclude the current best value are
/// widened just enough to include it. The version is bumped once if any
/// parameter was applied.
pub fn apply_space_update(space: &SearchSpace, proposals: &Map<String, Value>, best: Option<&ParamAssignment>) -> SpaceUpdate {
    let mut next = space.clone();
    let mut applied = Vec::new();
    let mut rejections = Vec::new();
    let mut widened = Vec::new();
    for (name, raw) in proposals {
        let Some(spec) = space.get(name) else {
            rejections.push(Rejection { name: name.clone(), reason: "parameter is not part of the study".into() });
            continue;
        };
        let domain = ProposedRange::from_json(raw).and_then(|p| p.conform_to(&spec.domain));
        match domain {
            Ok(domain) => {
                let (domain, grew) = contain_best(domain, best.and_then(|b| b.get(name)));
                if grew {
                    widened.push(name.clone());
                }
                next.replace_domain(name, domain);
                applied.push(name.clone());
            }
            Err(reason) => rejections.push(Rejection { name: name.clone(), reason }),
        }
    }
    if !applied.is_empty() {
        next.version = space.version + 1;
    }
    SpaceUpdate { space: next, applied, rejections, widened }
}
