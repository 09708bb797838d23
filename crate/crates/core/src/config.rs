//! The declarative run configuration (TOML) with `--set` style overrides.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::bench::{Builtin, ObjectiveSpec};
use crate::history::HistoryPolicy;
use crate::hybrid::HybridConfig;
use crate::llm_client::ProviderConfig;
use crate::llm_sampler::{PromptMode, TaskDescription};
use crate::search_space::{Domain, ParamSpec, SearchSpace};
use crate::study::{SamplerKind, StudyConfig};
use crate::tpe::{Direction, TpeConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read `{path}`: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config syntax error: {0}")]
    Syntax(String),
    #[error("config error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("bad override `{0}`: expected KEY=VALUE with a known key")]
    Override(String),
}

impl ConfigError {
    /// Field path the error refers to, when there is one.
    pub fn path(&self) -> Option<&str> {
        match self {
            ConfigError::Schema { path, .. } => Some(path),
            _ => None,
        }
    }

    fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Schema { path: path.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskBlock {
    pub model_name: String,
    pub problem_description: String,
    pub metric: String,
}

impl Default for TaskBlock {
    fn default() -> Self {
        Self {
            model_name: "objective".into(),
            problem_description: "minimize a black-box function".into(),
            metric: "score".into(),
        }
    }
}

/// One entry of the `[space]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ParamBlock {
    Float {
        low: f64,
        high: f64,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        log: bool,
    },
    Int {
        low: i64,
        high: i64,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        log: bool,
    },
    Categorical { choices: Vec<String> },
}

impl ParamBlock {
    pub fn domain(&self) -> Domain {
        match self {
            ParamBlock::Float { low, high, log } => Domain::Float { low: *low, high: *high, log_scale: *log },
            ParamBlock::Int { low, high, log } => Domain::Int { low: *low, high: *high, log_scale: *log },
            ParamBlock::Categorical { choices } => Domain::Categorical { choices: choices.clone() },
        }
    }

    pub fn from_domain(d: &Domain) -> Self {
        match d {
            Domain::Float { low, high, log_scale } => ParamBlock::Float { low: *low, high: *high, log: *log_scale },
            Domain::Int { low, high, log_scale } => ParamBlock::Int { low: *low, high: *high, log: *log_scale },
            Domain::Categorical { choices } => ParamBlock::Categorical { choices: choices.clone() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerBlock {
    pub kind: SamplerKind,
    /// Prompt family for `llm_only`.
    pub llm_mode: PromptMode,
    pub adopt_llm_params: bool,
    pub hybrid: HybridConfig,
    pub tpe: TpeConfig,
    pub provider: ProviderConfig,
}

impl Default for SamplerBlock {
    fn default() -> Self {
        Self {
            kind: SamplerKind::TpeOnly,
            llm_mode: PromptMode::Plain,
            adopt_llm_params: false,
            hybrid: HybridConfig::default(),
            tpe: TpeConfig::default(),
            provider: ProviderConfig::mock(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyBlock {
    pub max_iterations: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<u32>,
    pub min_delta: f64,
    pub seed: u64,
    pub direction: Direction,
    pub wall_clock_timestamps: bool,
}

impl Default for StudyBlock {
    fn default() -> Self {
        let d = StudyConfig::default();
        Self {
            max_iterations: d.max_iterations,
            patience: d.patience,
            min_delta: d.min_delta,
            seed: d.seed,
            direction: d.direction,
            wall_clock_timestamps: d.wall_clock_timestamps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: PathBuf,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/latest") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixBlock {
    pub samplers: Vec<SamplerKind>,
    /// Defaults to the run's own objective.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objectives: Vec<ObjectiveSpec>,
    #[serde(default = "one")]
    pub repeats: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub task: TaskBlock,
    /// Empty means the builtin objective's own space.
    #[serde(default)]
    pub space: IndexMap<String, ParamBlock>,
    #[serde(default)]
    pub sampler: SamplerBlock,
    #[serde(default)]
    pub study: StudyBlock,
    #[serde(default)]
    pub history: HistoryPolicy,
    #[serde(default = "default_objective")]
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<MatrixBlock>,
}

fn default_objective() -> ObjectiveSpec {
    ObjectiveSpec::builtin(Builtin::Sphere)
}

impl Default for RunConfig {
    fn default() -> Self {
        let space = Builtin::Sphere.space();
        Self {
            task: TaskBlock::default(),
            space: space.specs().map(|s| (s.name.clone(), ParamBlock::from_domain(&s.domain))).collect(),
            sampler: SamplerBlock::default(),
            study: StudyBlock::default(),
            history: HistoryPolicy::default(),
            objective: default_objective(),
            output: OutputBlock::default(),
            matrix: None,
        }
    }
}

fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn lookup<'a>(t: &'a Table, path: &[&str]) -> Option<&'a Value> {
    let (last, parents) = path.split_last()?;
    let mut cur = t;
    for p in parents {
        cur = cur.get(*p)?.as_table()?;
    }
    cur.get(*last)
}

/// Expands a bare key to its full path when exactly one block has it.
fn resolve_key(key: &str, reference: &Table) -> Option<Vec<String>> {
    if key.contains('.') {
        return Some(key.split('.').map(String::from).collect());
    }
    let hits: Vec<&String> = reference.iter().filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key))).map(|(k, _)| k).collect();
    match hits.as_slice() {
        [block] => Some(vec![block.to_string(), key.to_string()]),
        _ => None,
    }
}

/// Applies `KEY=VALUE` overrides. Values are read as TOML literals, falling
/// back to plain strings.
pub fn apply_overrides(doc: &mut Table, overrides: &[String]) -> Result<(), ConfigError> {
    let reference = Table::try_from(RunConfig::default()).expect("default config serializes");
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
        let path = resolve_key(key.trim(), &reference).ok_or_else(|| ConfigError::Override(o.clone()))?;
        let refs: Vec<&str> = path.iter().map(String::as_str).collect();
        let mut cur = &mut *doc;
        for p in &refs[..refs.len() - 1] {
            let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
            cur = entry.as_table_mut().ok_or_else(|| ConfigError::Override(o.clone()))?;
        }
        let mut value = parse_value(raw.trim());
        if matches!(lookup(&reference, &refs), Some(Value::String(_))) && !matches!(value, Value::String(_)) {
            value = Value::String(raw.trim().to_string());
        }
        cur.insert(refs[refs.len() - 1].to_string(), value);
    }
    Ok(())
}

fn study_path(p: &str) -> String {
    for (prefix, block) in [("tpe.", "sampler."), ("hybrid.", "sampler."), ("history.", "")] {
        if p.starts_with(prefix) {
            return format!("{block}{p}");
        }
    }
    if p == "llm_mode" {
        return "sampler.llm_mode".into();
    }
    format!("study.{p}")
}

impl RunConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        apply_overrides(&mut doc, overrides)?;
        let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::at(if path == "." { String::new() } else { path }, e.into_inner().message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.task_description().validate().map_err(|m| ConfigError::at("task", m))?;
        self.search_space()?;
        self.study_config().validate().map_err(|(p, m)| ConfigError::at(study_path(&p), m))?;
        if self.sampler.kind.uses_llm() {
            self.sampler.provider.validate().map_err(|m| ConfigError::at("sampler.provider", m))?;
        }
        self.objective.validate().map_err(|(f, m)| ConfigError::at(format!("objective.{f}"), m))?;
        if let Some(m) = &self.matrix {
            if m.samplers.is_empty() {
                return Err(ConfigError::at("matrix.samplers", "must list at least one sampler"));
            }
            if m.repeats < 1 {
                return Err(ConfigError::at("matrix.repeats", "must be at least 1"));
            }
            for (i, o) in m.objectives.iter().enumerate() {
                o.validate().map_err(|(f, msg)| ConfigError::at(format!("matrix.objectives[{i}].{f}"), msg))?;
                if self.space.is_empty() && o.declared_space().is_none() {
                    return Err(ConfigError::at(format!("matrix.objectives[{i}]"), "external objectives need a [space] block"));
                }
            }
        }
        Ok(())
    }

    pub fn task_description(&self) -> TaskDescription {
        TaskDescription {
            model_name: self.task.model_name.clone(),
            problem_description: self.task.problem_description.clone(),
            metric: self.task.metric.clone(),
            direction: self.study.direction,
        }
    }

    /// The declared `[space]`, or the builtin objective's space when empty.
    pub fn space_for(&self, objective: &ObjectiveSpec) -> Result<SearchSpace, ConfigError> {
        if self.space.is_empty() {
            return objective.declared_space().ok_or_else(|| ConfigError::at("space", "required for external objectives"));
        }
        let mut specs = Vec::new();
        for (name, block) in &self.space {
            specs.push(ParamSpec::new(name.clone(), block.domain()).map_err(|e| ConfigError::at(format!("space.{name}"), e.to_string()))?);
        }
        SearchSpace::new(specs).map_err(|e| ConfigError::at("space", e.to_string()))
    }

    pub fn search_space(&self) -> Result<SearchSpace, ConfigError> {
        self.space_for(&self.objective)
    }

    pub fn study_config(&self) -> StudyConfig {
        StudyConfig {
            max_iterations: self.study.max_iterations,
            patience: self.study.patience,
            min_delta: self.study.min_delta,
            direction: self.study.direction,
            seed: self.study.seed,
            sampler: self.sampler.kind,
            llm_mode: self.sampler.llm_mode,
            adopt_llm_params: self.sampler.adopt_llm_params,
            wall_clock_timestamps: self.study.wall_clock_timestamps,
            tpe: self.sampler.tpe,
            hybrid: self.sampler.hybrid.clone(),
            history: self.history.clone(),
        }
    }
}

/// A complete configuration with every default spelled out.
pub fn default_config_toml() -> String {
    RunConfig::default().to_toml()
}
