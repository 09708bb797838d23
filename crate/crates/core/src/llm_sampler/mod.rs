//! LLM-driven suggestions: the initializer, the optimizer and the optional
//! reasoning mode.
//!
//! Prompts come from the text assets in `prompts/`. Replies are parsed into
//! decisions; anything unusable is answered with a corrective user message
//! and retried a bounded number of times.

pub mod parse;
pub mod templates;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::json_text::{format_number, to_prompt_string};
use crate::llm_client::{ChatMessage, LlmClient, LlmError};
use crate::search_space::{
    apply_space_update, clamp_assignment, validate_assignment, Domain, ParamAssignment, ParamSpec, ParamValue,
    ProposedRange, SearchSpace, SpaceUpdate,
};
use crate::tpe::Direction;

pub use parse::{parse_decision, ExpectedShape, InitDecision, LlmDecision, ParseError, Parsed};
pub use templates::TemplateError;

/// Corrective retries after a parse or schema failure.
pub const PARSE_RETRIES: usize = 3;

/// Which prompt family to speak.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Fully LLM-driven with intelligent summaries.
    #[default]
    Plain,
    /// As `Plain`, but every decision carries a reason.
    Reasoning,
    /// Fully LLM-driven with a rolling memory buffer instead of summaries.
    Buffered,
    /// Hybrid sampler, all parameters in one reply.
    TpeRelative,
    /// Hybrid sampler, one parameter per reply.
    TpeIndependent,
}

impl PromptMode {
    pub fn is_tpe(self) -> bool {
        matches!(self, PromptMode::TpeRelative | PromptMode::TpeIndependent)
    }

    pub fn requires_reason(self) -> bool {
        self == PromptMode::Reasoning
    }

    fn system_template(self) -> &'static str {
        match self {
            PromptMode::Plain => templates::SYSTEM_PLAIN,
            PromptMode::Reasoning => templates::SYSTEM_REASONING,
            PromptMode::Buffered => templates::SYSTEM_BUFFERED,
            PromptMode::TpeRelative | PromptMode::TpeIndependent => templates::SYSTEM_TPE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDescription {
    pub model_name: String,
    pub problem_description: String,
    pub metric: String,
    #[serde(default)]
    pub direction: Direction,
}

impl TaskDescription {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("model_name", &self.model_name),
            ("problem_description", &self.problem_description),
            ("metric", &self.metric),
        ] {
            if v.trim().is_empty() {
                return Err(format!("{name} must not be empty"));
            }
        }
        Ok(())
    }
}

/// What the optimizer prompt reports about the study so far.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<'a> {
    pub best_score: f64,
    pub best_params: &'a ParamAssignment,
    pub space: &'a SearchSpace,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("no usable reply after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: String },
}

fn integer_list(space: &SearchSpace) -> String {
    let ints = space.integer_params();
    if ints.is_empty() {
        "(none)".to_string()
    } else {
        ints.join(", ")
    }
}

fn param_range_text(space: &SearchSpace, param: &str) -> Option<String> {
    space.get(param).map(|s| to_prompt_string(&s.domain.range_value()))
}

fn task_values(task: &TaskDescription) -> Vec<(&'static str, String)> {
    vec![
        ("model_name", task.model_name.clone()),
        ("problem_description", task.problem_description.clone()),
        ("metric", task.metric.clone()),
        ("direction", task.direction.as_str().to_string()),
    ]
}

fn render_owned(template: &str, values: &[(&'static str, String)]) -> Result<String, TemplateError> {
    let view: Vec<(&str, &str)> = values.iter().map(|(k, v)| (*k, v.as_str())).collect();
    templates::render(template, &view)
}

fn space_values(values: &mut Vec<(&'static str, String)>, space: Option<&SearchSpace>, param: Option<&str>) {
    if let Some(space) = space {
        values.push(("search_space_dict", to_prompt_string(&space.describe())));
        values.push(("current_ranges", to_prompt_string(&Value::Object(space.param_ranges()))));
        values.push(("integer_params", integer_list(space)));
        if let Some(p) = param {
            values.push(("param_name", p.to_string()));
            if let Some(r) = param_range_text(space, p) {
                values.push(("param_range", r));
            }
        }
    } else if let Some(p) = param {
        values.push(("param_name", p.to_string()));
    }
}

pub fn system_message(task: &TaskDescription, mode: PromptMode) -> Result<ChatMessage, TemplateError> {
    Ok(ChatMessage::system(render_owned(mode.system_template(), &task_values(task))?))
}

/// System message plus the initialization prompt for `mode`. The TPE modes
/// need the space; the independent mode also needs the parameter name.
pub fn build_init_messages(
    task: &TaskDescription,
    mode: PromptMode,
    space: Option<&SearchSpace>,
    param: Option<&str>,
) -> Result<Vec<ChatMessage>, TemplateError> {
    let template = match mode {
        PromptMode::Plain | PromptMode::Reasoning | PromptMode::Buffered => templates::INIT_PLAIN,
        PromptMode::TpeRelative => templates::INIT_TPE_RELATIVE,
        PromptMode::TpeIndependent => templates::INIT_TPE_INDEPENDENT,
    };
    let mut values = task_values(task);
    space_values(&mut values, space, param);
    Ok(vec![system_message(task, mode)?, ChatMessage::user(render_owned(template, &values)?)])
}

fn opt_prompt(task: &TaskDescription, state: &OptState<'_>, mode: PromptMode, param: Option<&str>) -> Result<String, TemplateError> {
    let template = match mode {
        PromptMode::Plain => templates::OPT_PLAIN,
        PromptMode::Reasoning => templates::OPT_REASONING,
        PromptMode::Buffered => templates::OPT_BUFFERED,
        PromptMode::TpeRelative => templates::OPT_TPE_RELATIVE,
        PromptMode::TpeIndependent => templates::OPT_TPE_INDEPENDENT,
    };
    let mut values = task_values(task);
    values.push(("best_score", format_number(state.best_score)));
    values.push(("best_params", state.best_params.to_prompt_string()));
    space_values(&mut values, Some(state.space), param);
    render_owned(template, &values)
}

/// System message, the conversation so far (without its system message),
/// and the optimization prompt for `mode`.
pub fn build_opt_messages(
    task: &TaskDescription,
    state: &OptState<'_>,
    mode: PromptMode,
    history_tail: &[ChatMessage],
    param: Option<&str>,
) -> Result<Vec<ChatMessage>, TemplateError> {
    let mut msgs = Vec::with_capacity(history_tail.len() + 2);
    msgs.push(system_message(task, mode)?);
    msgs.extend_from_slice(history_tail);
    msgs.push(ChatMessage::user(opt_prompt(task, state, mode, param)?));
    Ok(msgs)
}

/// The user message recording one evaluated trial in the conversation.
pub fn trial_feedback(iteration: u32, source: &str, params: &ParamAssignment, score: f64) -> ChatMessage {
    ChatMessage::user(format!(
        "Trial {iteration} ({source}) parameters: {} score: {}",
        params.to_prompt_string(),
        format_number(score)
    ))
}

fn corrective(error: &str) -> ChatMessage {
    ChatMessage::user(format!(
        "Your previous reply could not be used ({error}). Reply again with only the requested JSON object."
    ))
}

/// Sends `messages`, retrying with corrective messages until `accept`
/// succeeds. Returns the accepted value and the final reply text.
fn converse<T>(
    client: &LlmClient,
    mut messages: Vec<ChatMessage>,
    mut accept: impl FnMut(&str) -> Result<T, String>,
) -> Result<(T, String), SamplerError> {
    let mut last = String::new();
    for attempt in 0..=PARSE_RETRIES {
        let reply = client.complete(&messages)?;
        match accept(&reply.text) {
            Ok(v) => return Ok((v, reply.text)),
            Err(e) => {
                log::warn!("unusable llm reply (attempt {}): {e}", attempt + 1);
                last = e.clone();
                messages.push(ChatMessage::assistant(reply.text));
                messages.push(corrective(&e));
            }
        }
    }
    Err(SamplerError::Exhausted { attempts: PARSE_RETRIES + 1, last })
}

/// Result of one LLM suggestion.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmSuggestion {
    pub assignment: ParamAssignment,
    pub space_update: Option<SpaceUpdate>,
    pub reason: Option<String>,
    /// Non-fatal repairs (clamps, dropped keys, rejected ranges).
    pub incidents: Vec<String>,
    /// Prompt/reply pairs to append to the conversation.
    pub exchange: Vec<ChatMessage>,
}

fn clamp_with_incident(space: &SearchSpace, a: ParamAssignment, incidents: &mut Vec<String>) -> ParamAssignment {
    let report = validate_assignment(space, &a);
    if report.is_ok() {
        return a;
    }
    let clamped = clamp_assignment(space, &a).expect("key sets checked by caller");
    for v in report.violations {
        incidents.push(format!("clamped: {v}"));
    }
    clamped
}

fn fragment_to_values(space: &SearchSpace, map: &Map<String, Value>) -> ParamAssignment {
    ParamAssignment::from_json_map(space, map)
}

/// Asks for one parameter at a time with the independent prompt.
fn suggest_independent(
    task: &TaskDescription,
    state: &OptState<'_>,
    client: &LlmClient,
    history_tail: &[ChatMessage],
    param: &str,
    initial: bool,
    exchange: &mut Vec<ChatMessage>,
) -> Result<ParamValue, SamplerError> {
    let msgs = if initial {
        build_init_messages(task, PromptMode::TpeIndependent, Some(state.space), Some(param))?
    } else {
        build_opt_messages(task, state, PromptMode::TpeIndependent, history_tail, Some(param))?
    };
    let prompt = msgs.last().expect("prompt").clone();
    let shape = ExpectedShape::TpeIndependent { param: param.to_string() };
    let spec = state.space.get(param).expect("param in space");
    let (value, reply) = converse(client, msgs, |text| {
        let Parsed::Fragment(map) = parse_decision(text, &shape).map_err(|e| e.to_string())? else { unreachable!() };
        ParamValue::from_json(&map[param], &spec.domain).ok_or_else(|| format!("`{param}` has an unusable value"))
    })?;
    exchange.push(prompt);
    exchange.push(ChatMessage::assistant(reply));
    Ok(value)
}

/// Fills parameters absent from `partial` one at a time.
#[allow(clippy::too_many_arguments)]
fn complete_fragment(
    task: &TaskDescription,
    state: &OptState<'_>,
    client: &LlmClient,
    history_tail: &[ChatMessage],
    mut partial: ParamAssignment,
    initial: bool,
    exchange: &mut Vec<ChatMessage>,
    incidents: &mut Vec<String>,
) -> Result<ParamAssignment, SamplerError> {
    let mut out = ParamAssignment::new();
    for name in state.space.names() {
        let v = match partial.0.shift_remove(name) {
            Some(v) => v,
            None => {
                incidents.push(format!("`{name}` missing from reply; asked individually"));
                suggest_independent(task, state, client, history_tail, name, initial, exchange)?
            }
        };
        out.insert(name, v);
    }
    Ok(out)
}

/// One optimizer step: build the prompt, call the model, parse, repair.
pub fn suggest_llm(
    task: &TaskDescription,
    state: &OptState<'_>,
    client: &LlmClient,
    mode: PromptMode,
    history_tail: &[ChatMessage],
) -> Result<LlmSuggestion, SamplerError> {
    let space = state.space;
    let mut incidents = Vec::new();
    let mut exchange = Vec::new();
    match mode {
        PromptMode::Plain | PromptMode::Reasoning | PromptMode::Buffered => {
            let msgs = build_opt_messages(task, state, mode, history_tail, None)?;
            let prompt = msgs.last().expect("prompt").clone();
            let shape = ExpectedShape::Opt { require_reason: mode.requires_reason() };
            let ((decision, update, raw), reply) = converse(client, msgs, |text| {
                let Parsed::Opt(d) = parse_decision(text, &shape).map_err(|e| e.to_string())? else { unreachable!() };
                let update = match (&d.update_param_ranges, &d.new_param_ranges) {
                    (true, Some(r)) => Some(apply_space_update(space, r, Some(state.best_params))),
                    _ => None,
                };
                let target = update.as_ref().map(|u| &u.space).unwrap_or(space);
                let raw = ParamAssignment::from_json_map(target, &d.next_params);
                let missing: Vec<&str> = target.names().filter(|n| raw.get(n).is_none()).collect();
                if !missing.is_empty() {
                    return Err(format!("next_params is missing {missing:?}"));
                }
                Ok((d, update, raw))
            })?;
            exchange.push(prompt);
            exchange.push(ChatMessage::assistant(reply));
            let target = decision_space(space, update.as_ref());
            let mut raw = raw;
            let extras: Vec<String> = raw.0.keys().filter(|k| target.get(k).is_none()).cloned().collect();
            for k in extras {
                incidents.push(format!("dropped unknown parameter `{k}`"));
                raw.0.shift_remove(&k);
            }
            if let Some(u) = &update {
                for r in &u.rejections {
                    incidents.push(format!("range update for `{}` rejected: {}", r.name, r.reason));
                }
                for w in &u.widened {
                    incidents.push(format!("range for `{w}` widened to keep the best value"));
                }
            }
            let assignment = clamp_with_incident(target, reorder(target, raw), &mut incidents);
            Ok(LlmSuggestion { assignment, space_update: update, reason: decision.reason, incidents, exchange })
        }
        PromptMode::TpeRelative => {
            let msgs = build_opt_messages(task, state, mode, history_tail, None)?;
            let prompt = msgs.last().expect("prompt").clone();
            let shape = ExpectedShape::TpeRelative { known: space.names().map(String::from).collect() };
            let (map, reply) = converse(client, msgs, |text| match parse_decision(text, &shape) {
                Ok(Parsed::Fragment(m)) => Ok(m),
                Ok(_) => unreachable!(),
                Err(e) => Err(e.to_string()),
            })?;
            exchange.push(prompt);
            exchange.push(ChatMessage::assistant(reply));
            let partial = fragment_to_values(space, &map);
            let full = complete_fragment(task, state, client, history_tail, partial, false, &mut exchange, &mut incidents)?;
            let assignment = clamp_with_incident(space, full, &mut incidents);
            Ok(LlmSuggestion { assignment, space_update: None, reason: None, incidents, exchange })
        }
        PromptMode::TpeIndependent => {
            let full = complete_fragment(task, state, client, history_tail, ParamAssignment::new(), false, &mut exchange, &mut Vec::new())?;
            let assignment = clamp_with_incident(space, full, &mut incidents);
            Ok(LlmSuggestion { assignment, space_update: None, reason: None, incidents, exchange })
        }
    }
}

fn decision_space<'a>(space: &'a SearchSpace, update: Option<&'a SpaceUpdate>) -> &'a SearchSpace {
    update.map(|u| &u.space).unwrap_or(space)
}

fn reorder(space: &SearchSpace, a: ParamAssignment) -> ParamAssignment {
    let mut out = ParamAssignment::new();
    for name in space.names() {
        if let Some(v) = a.get(name) {
            out.insert(name, v.clone());
        }
    }
    out
}

/// Outcome of the LLM initializer.
#[derive(Debug, Clone, PartialEq)]
pub struct InitOutcome {
    pub space: SearchSpace,
    pub assignment: ParamAssignment,
    pub reason: Option<String>,
    pub incidents: Vec<String>,
    /// Full opening conversation, system message first.
    pub conversation: Vec<ChatMessage>,
}

fn midpoint(domain: &Domain) -> ParamValue {
    match domain {
        Domain::Float { low, high, log_scale } => {
            ParamValue::Float(if *log_scale { (low.ln() * 0.5 + high.ln() * 0.5).exp() } else { 0.5 * (low + high) })
        }
        Domain::Int { low, high, .. } => ParamValue::Int(low + (high - low) / 2),
        Domain::Categorical { choices } => ParamValue::Choice(choices[0].clone()),
    }
}

/// Merges proposed initial ranges into the declared space. Declared
/// parameters keep their kind and fall back to the declared range when the
/// proposal does not fit; undeclared parameters are adopted only when
/// `adopt_new` is set.
pub fn merge_initial_ranges(
    declared: &SearchSpace,
    proposed: &Map<String, Value>,
    adopt_new: bool,
    incidents: &mut Vec<String>,
) -> SearchSpace {
    let mut specs = Vec::new();
    for spec in declared.specs() {
        let domain = match proposed.get(&spec.name) {
            None => {
                incidents.push(format!("no initial range for `{}`; kept the declared range", spec.name));
                spec.domain.clone()
            }
            Some(raw) => match ProposedRange::from_json(raw).and_then(|p| p.conform_to(&spec.domain)) {
                Ok(d) => d,
                Err(e) => {
                    incidents.push(format!("initial range for `{}` rejected ({e}); kept the declared range", spec.name));
                    spec.domain.clone()
                }
            },
        };
        specs.push(ParamSpec { name: spec.name.clone(), domain });
    }
    for (name, raw) in proposed {
        if declared.get(name).is_some() {
            continue;
        }
        if !adopt_new {
            incidents.push(format!("ignored undeclared parameter `{name}`"));
            continue;
        }
        match ProposedRange::from_json(raw).map(|p| p.infer_domain(false)).and_then(|d| ParamSpec::new(name.clone(), d).map_err(|e| e.to_string())) {
            Ok(spec) => specs.push(spec),
            Err(e) => incidents.push(format!("undeclared parameter `{name}` rejected: {e}")),
        }
    }
    SearchSpace::new(specs).expect("declared specs are valid").with_version(declared.version())
}

/// Zero-shot initialization. Fully-LLM modes let the model propose ranges
/// and starting values; TPE modes keep the declared space and ask only for
/// starting values.
pub fn initialize_llm(
    task: &TaskDescription,
    mode: PromptMode,
    declared: &SearchSpace,
    client: &LlmClient,
    adopt_new: bool,
) -> Result<InitOutcome, SamplerError> {
    let mut incidents = Vec::new();
    match mode {
        PromptMode::Plain | PromptMode::Reasoning | PromptMode::Buffered => {
            let msgs = build_init_messages(task, mode, None, None)?;
            let mut conversation = msgs.clone();
            let shape = ExpectedShape::Init { require_reason: mode.requires_reason() };
            let (decision, reply) = converse(client, msgs, |text| match parse_decision(text, &shape) {
                Ok(Parsed::Init(d)) => Ok(d),
                Ok(_) => unreachable!(),
                Err(e) => Err(e.to_string()),
            })?;
            conversation.push(ChatMessage::assistant(reply));
            let space = merge_initial_ranges(declared, &decision.param_ranges, adopt_new, &mut incidents);
            let given = ParamAssignment::from_json_map(&space, &decision.initial_params);
            let mut full = ParamAssignment::new();
            for spec in space.specs() {
                let v = given.get(&spec.name).cloned().unwrap_or_else(|| {
                    incidents.push(format!("no initial value for `{}`; used the range midpoint", spec.name));
                    midpoint(&spec.domain)
                });
                full.insert(spec.name.clone(), v);
            }
            let assignment = clamp_with_incident(&space, full, &mut incidents);
            Ok(InitOutcome { space, assignment, reason: decision.reason, incidents, conversation })
        }
        PromptMode::TpeRelative | PromptMode::TpeIndependent => {
            let best = ParamAssignment::new();
            let state = OptState { best_score: f64::NAN, best_params: &best, space: declared };
            let mut conversation = vec![system_message(task, mode)?];
            let mut exchange = Vec::new();
            let partial = if mode == PromptMode::TpeRelative {
                let msgs = build_init_messages(task, mode, Some(declared), None)?;
                let prompt = msgs.last().expect("prompt").clone();
                let shape = ExpectedShape::TpeRelative { known: declared.names().map(String::from).collect() };
                let (map, reply) = converse(client, msgs, |text| match parse_decision(text, &shape) {
                    Ok(Parsed::Fragment(m)) => Ok(m),
                    Ok(_) => unreachable!(),
                    Err(e) => Err(e.to_string()),
                })?;
                exchange.push(prompt);
                exchange.push(ChatMessage::assistant(reply));
                fragment_to_values(declared, &map)
            } else {
                ParamAssignment::new()
            };
            let full = complete_fragment(task, &state, client, &[], partial, true, &mut exchange, &mut incidents)?;
            conversation.extend(exchange);
            let assignment = clamp_with_incident(declared, full, &mut incidents);
            Ok(InitOutcome { space: declared.clone(), assignment, reason: None, incidents, conversation })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_client::{MockFailure, MockProvider, MockStep, ProviderConfig};
    use std::sync::Arc;

    fn task() -> TaskDescription {
        TaskDescription {
            model_name: "LightGBM".into(),
            problem_description: "predict churn".into(),
            metric: "f1".into(),
            direction: Direction::Maximize,
        }
    }

    fn space(specs: Vec<(&str, Domain)>) -> SearchSpace {
        SearchSpace::new(specs.into_iter().map(|(n, d)| ParamSpec::new(n, d).unwrap())).unwrap()
    }

    fn client(p: Arc<MockProvider>) -> LlmClient {
        LlmClient::new(ProviderConfig::mock(), p)
    }

    #[test]
    fn plain_init_prompt() {
        let m = build_init_messages(&task(), PromptMode::Plain, None, None).unwrap();
        assert_eq!(m[1].content, "Provide the initial hyperparameters to tune, their ranges, and starting values.");
        assert!(m[0].content.contains("optimize hyperparameters for a LightGBM model for the following problem:predict churn"));
    }

    #[test]
    fn independent_init_prompt() {
        let s = space(vec![("x", Domain::float(0.0, 1.0))]);
        let m = build_init_messages(&task(), PromptMode::TpeIndependent, Some(&s), Some("x")).unwrap();
        assert!(m[1].content.contains("Suggest a value for the parameter 'x' within its range: [0, 1]."));
        assert_eq!(
            build_init_messages(&task(), PromptMode::TpeIndependent, Some(&s), None),
            Err(TemplateError::Missing("param_name".into()))
        );
        assert_eq!(
            build_init_messages(&task(), PromptMode::TpeRelative, None, None),
            Err(TemplateError::Missing("search_space_dict".into()))
        );
    }

    #[test]
    fn reasoning_system_asks_for_reason() {
        let m = build_init_messages(&task(), PromptMode::Reasoning, None, None).unwrap();
        assert!(m[0].content.contains("'initial_params' and 'reason'"));
    }

    #[test]
    fn opt_prompts() {
        let s = space(vec![
            ("num_leaves", Domain::int(8, 256)),
            ("max_depth", Domain::int(2, 12)),
            ("learning_rate", Domain::float(0.01, 0.3)),
        ]);
        let best = ParamAssignment::new().with("num_leaves", ParamValue::Int(31));
        let st = OptState { best_score: 0.81, best_params: &best, space: &s };
        let m = build_opt_messages(&task(), &st, PromptMode::Plain, &[], None).unwrap();
        assert!(m[1].content.contains("Current best score: 0.81"));
        assert!(m[1].content.contains("Last used parameter ranges: {\"num_leaves\": [8, 256], \"max_depth\": [2, 12], \"learning_rate\": [0.01, 0.3]}"));
        let m = build_opt_messages(&task(), &st, PromptMode::Reasoning, &[], None).unwrap();
        assert!(m[1].content.contains("think step by step"));
        let m = build_opt_messages(&task(), &st, PromptMode::TpeRelative, &[ChatMessage::user("h")], None).unwrap();
        assert_eq!(m.len(), 3);
        assert!(m[2].content.contains("Suggest integer for num_leaves, max_depth, float otherwise."));
        assert!(m[2].content.contains("only JSON format of suggested parameters"));
        let m = build_opt_messages(&task(), &st, PromptMode::TpeIndependent, &[], Some("max_depth")).unwrap();
        assert!(m[1].content.contains("Make sure max_depth key exists in the JSON format."));
    }

    #[test]
    fn happy_path_unchanged() {
        let s = space(vec![("x", Domain::float(0.0, 1.0))]);
        let best = ParamAssignment::new().with("x", ParamValue::Float(0.5));
        let st = OptState { best_score: 1.0, best_params: &best, space: &s };
        let p = Arc::new(MockProvider::replies([r#"{"update_param_ranges": false, "next_params": {"x": 0.25}}"#]));
        let out = suggest_llm(&task(), &st, &client(p), PromptMode::Plain, &[]).unwrap();
        assert_eq!(out.assignment, ParamAssignment::new().with("x", ParamValue::Float(0.25)));
        assert!(out.incidents.is_empty());
        assert_eq!(out.exchange.len(), 2);
    }

    #[test]
    fn out_of_range_is_clamped() {
        let s = space(vec![("x", Domain::float(0.0, 1.0))]);
        let best = ParamAssignment::new().with("x", ParamValue::Float(0.5));
        let st = OptState { best_score: 1.0, best_params: &best, space: &s };
        let p = Arc::new(MockProvider::replies([r#"{"update_param_ranges": false, "next_params": {"x": 99}}"#]));
        let out = suggest_llm(&task(), &st, &client(p), PromptMode::Plain, &[]).unwrap();
        assert_eq!(out.assignment.get("x"), Some(&ParamValue::Float(1.0)));
        assert_eq!(out.incidents.len(), 1);
    }

    #[test]
    fn garbage_exhausts_retries() {
        let s = space(vec![("x", Domain::float(0.0, 1.0))]);
        let best = ParamAssignment::new().with("x", ParamValue::Float(0.5));
        let st = OptState { best_score: 1.0, best_params: &best, space: &s };
        let p = Arc::new(MockProvider::replies(["garbage"; 4]));
        let err = suggest_llm(&task(), &st, &client(p.clone()), PromptMode::Plain, &[]).unwrap_err();
        assert!(matches!(err, SamplerError::Exhausted { attempts: 4, .. }));
        let calls = p.calls();
        assert_eq!(calls.len(), 4);
        // each retry appends the bad reply and a corrective message
        assert_eq!(calls[3].len(), calls[0].len() + 6);
    }

    #[test]
    fn recovers_after_bad_reply() {
        let s = space(vec![("x", Domain::float(0.0, 1.0))]);
        let best = ParamAssignment::new().with("x", ParamValue::Float(0.5));
        let st = OptState { best_score: 1.0, best_params: &best, space: &s };
        let p = Arc::new(MockProvider::replies(["nope", r#"{"update_param_ranges": false, "next_params": {"y": 1}}"#,
            r#"{"update_param_ranges": false, "next_params": {"x": 0.1}}"#]));
        let out = suggest_llm(&task(), &st, &client(p), PromptMode::Plain, &[]).unwrap();
        assert_eq!(out.assignment.get("x"), Some(&ParamValue::Float(0.1)));
    }

    #[test]
    fn transport_failure_is_immediate() {
        let s = space(vec![("x", Domain::float(0.0, 1.0))]);
        let best = ParamAssignment::new().with("x", ParamValue::Float(0.5));
        let st = OptState { best_score: 1.0, best_params: &best, space: &s };
        let mut cfg = ProviderConfig::mock();
        cfg.max_retries = 0;
        let c = LlmClient::new(cfg, Arc::new(MockProvider::new([MockStep::Fail(MockFailure::Transport)])));
        assert!(matches!(suggest_llm(&task(), &st, &c, PromptMode::Plain, &[]), Err(SamplerError::Llm(_))));
    }

    #[test]
    fn range_update_applied_and_best_kept() {
        let s = space(vec![("x", Domain::float(0.0, 10.0))]);
        let best = ParamAssignment::new().with("x", ParamValue::Float(3.0));
        let st = OptState { best_score: 1.0, best_params: &best, space: &s };
        let reply = r#"{"update_param_ranges": true, "new_param_ranges": {"x": [5, 8]}, "next_params": {"x": 6}, "reason": "narrow"}"#;
        let p = Arc::new(MockProvider::replies([reply]));
        let out = suggest_llm(&task(), &st, &client(p), PromptMode::Reasoning, &[]).unwrap();
        let u = out.space_update.unwrap();
        assert_eq!(u.space.get("x").unwrap().domain, Domain::float(3.0, 8.0));
        assert_eq!(u.space.version(), 1);
        assert_eq!(out.reason.as_deref(), Some("narrow"));
        assert_eq!(out.assignment.get("x"), Some(&ParamValue::Float(6.0)));
    }

    #[test]
    fn relative_reply_repaired_per_parameter() {
        let s = space(vec![("x", Domain::float(0.0, 1.0)), ("n", Domain::int(1, 10))]);
        let best = ParamAssignment::new().with("x", ParamValue::Float(0.5)).with("n", ParamValue::Int(2));
        let st = OptState { best_score: 1.0, best_params: &best, space: &s };
        let p = Arc::new(MockProvider::replies([r#"{"x": 0.7}"#, r#"{"n": 12.4}"#]));
        let out = suggest_llm(&task(), &st, &client(p.clone()), PromptMode::TpeRelative, &[]).unwrap();
        assert_eq!(out.assignment, ParamAssignment::new().with("x", ParamValue::Float(0.7)).with("n", ParamValue::Int(10)));
        let calls = p.calls();
        assert!(calls[1].last().unwrap().content.contains("Suggest a value for the parameter 'n' within its range: [1, 10]."));
        assert_eq!(out.exchange.len(), 4);
    }

    #[test]
    fn plain_initializer_adopts_valid_ranges() {
        let declared = space(vec![("x", Domain::float(0.0, 10.0)), ("y", Domain::float(0.0, 1.0))]);
        let reply = r#"{"param_ranges": {"x": [0, 5], "y": [0.9, 0.1], "z": [1, 2]}, "initial_params": {"x": 2}}"#;
        let p = Arc::new(MockProvider::replies([reply]));
        let out = initialize_llm(&task(), PromptMode::Plain, &declared, &client(p), false).unwrap();
        assert_eq!(out.space.get("x").unwrap().domain, Domain::float(0.0, 5.0));
        assert_eq!(out.space.get("y").unwrap().domain, Domain::float(0.0, 1.0));
        assert!(out.space.get("z").is_none());
        assert_eq!(out.assignment.get("x"), Some(&ParamValue::Float(2.0)));
        assert_eq!(out.assignment.get("y"), Some(&ParamValue::Float(0.5)));
        assert_eq!(out.conversation.len(), 3);
    }

    #[test]
    fn tpe_initializer_uses_declared_space() {
        let declared = space(vec![("x", Domain::float(0.0, 1.0)), ("c", Domain::categorical(["a", "b"]))]);
        let p = Arc::new(MockProvider::replies([r#"{"x": 0.2, "c": "b"}"#]));
        let out = initialize_llm(&task(), PromptMode::TpeRelative, &declared, &client(p.clone()), false).unwrap();
        assert_eq!(out.space, declared);
        assert_eq!(out.assignment.get("c"), Some(&ParamValue::Choice("b".into())));
        assert!(p.calls()[0][1].content.starts_with("This is the first trial for hyperparameter tuning"));
    }
}
