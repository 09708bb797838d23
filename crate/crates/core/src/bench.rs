//! Objectives and the comparison matrix.
//!
//! Builtins are analytic test functions plus a tiny categorical grid. The
//! external objective runs a child process: one JSON line of parameters on
//! stdin, a JSON object with `"score"` expected on stdout.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::json_text::extract_first_object;
use crate::llm_client::LlmClient;
use crate::llm_sampler::TaskDescription;
use crate::search_space::{Domain, ParamAssignment, ParamSpec, SearchSpace};
use crate::study::{run_study, NullSink, StopReason, Study, StudyConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("parameter `{0}` is missing or has the wrong type")]
    BadInput(String),
    #[error("objective timed out after {0:?}")]
    Timeout(Duration),
    #[error("objective exited with status {0}")]
    Exit(String),
    #[error("objective output has no usable score: {0}")]
    Unparseable(String),
    #[error("objective failed: {0}")]
    Failed(String),
}

pub trait Objective: Send + Sync {
    fn evaluate(&self, a: &ParamAssignment) -> Result<f64, EvalError>;
}

impl<F> Objective for F
where
    F: Fn(&ParamAssignment) -> Result<f64, EvalError> + Send + Sync,
{
    fn evaluate(&self, a: &ParamAssignment) -> Result<f64, EvalError> {
        self(a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Builtin {
    Branin,
    Rosenbrock,
    Sphere,
    DiscreteGrid,
}

/// Scores of the discrete grid, row = `a`, column = `b`. Lower is better.
pub const GRID_SCORES: [[f64; 4]; 3] = [[0.9, 0.7, 0.8, 0.6], [0.5, 0.3, 0.4, 0.2], [0.85, 0.1, 0.65, 0.75]];
pub const GRID_A: [&str; 3] = ["a0", "a1", "a2"];
pub const GRID_B: [&str; 4] = ["b0", "b1", "b2", "b3"];

pub const BRANIN_MIN: f64 = 0.397887;

pub fn branin(x: f64, y: f64) -> f64 {
    use std::f64::consts::PI;
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let t = 1.0 / (8.0 * PI);
    (y - b * x * x + c * x - 6.0).powi(2) + 10.0 * (1.0 - t) * x.cos() + 10.0
}

pub fn rosenbrock(x: f64, y: f64) -> f64 {
    (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2)
}

pub fn sphere(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum()
}

impl Builtin {
    pub fn as_str(self) -> &'static str {
        match self {
            Builtin::Branin => "branin",
            Builtin::Rosenbrock => "rosenbrock",
            Builtin::Sphere => "sphere",
            Builtin::DiscreteGrid => "discrete_grid",
        }
    }

    pub fn space(self) -> SearchSpace {
        let f = |n: &str, lo, hi| ParamSpec::new(n, Domain::float(lo, hi)).expect("valid builtin range");
        let specs = match self {
            Builtin::Branin => vec![f("x", -5.0, 10.0), f("y", 0.0, 15.0)],
            Builtin::Rosenbrock => vec![f("x", -2.0, 2.0), f("y", -1.0, 3.0)],
            Builtin::Sphere => vec![f("x1", -5.0, 5.0), f("x2", -5.0, 5.0), f("x3", -5.0, 5.0)],
            Builtin::DiscreteGrid => vec![
                ParamSpec::new("a", Domain::categorical(GRID_A)).expect("valid"),
                ParamSpec::new("b", Domain::categorical(GRID_B)).expect("valid"),
            ],
        };
        SearchSpace::new(specs).expect("valid builtin space")
    }

    pub fn evaluate(self, a: &ParamAssignment) -> Result<f64, EvalError> {
        let num = |n: &str| a.get(n).and_then(|v| v.as_f64()).ok_or_else(|| EvalError::BadInput(n.into()));
        let choice = |n: &str, options: &[&str]| {
            a.get(n)
                .and_then(|v| options.iter().position(|o| *o == v.to_string()))
                .ok_or_else(|| EvalError::BadInput(n.into()))
        };
        Ok(match self {
            Builtin::Branin => branin(num("x")?, num("y")?),
            Builtin::Rosenbrock => rosenbrock(num("x")?, num("y")?),
            Builtin::Sphere => sphere(&[num("x1")?, num("x2")?, num("x3")?]),
            Builtin::DiscreteGrid => GRID_SCORES[choice("a", &GRID_A)?][choice("b", &GRID_B)?],
        })
    }
}

fn default_timeout() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveSpec {
    Builtin { name: Builtin },
    External {
        command: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        working_dir: Option<PathBuf>,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
}

impl ObjectiveSpec {
    pub fn builtin(name: Builtin) -> Self {
        ObjectiveSpec::Builtin { name }
    }

    pub fn label(&self) -> String {
        match self {
            ObjectiveSpec::Builtin { name } => name.as_str().to_string(),
            ObjectiveSpec::External { command, .. } => command.first().cloned().unwrap_or_default(),
        }
    }

    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if let ObjectiveSpec::External { command, timeout_secs, .. } = self {
            if command.is_empty() || command[0].is_empty() {
                return Err(("command", "must not be empty".into()));
            }
            if !(*timeout_secs > 0.0 && timeout_secs.is_finite()) {
                return Err(("timeout_secs", "must be positive".into()));
            }
        }
        Ok(())
    }

    /// The space a builtin is defined on; externals have none.
    pub fn declared_space(&self) -> Option<SearchSpace> {
        match self {
            ObjectiveSpec::Builtin { name } => Some(name.space()),
            ObjectiveSpec::External { .. } => None,
        }
    }
}

impl Objective for ObjectiveSpec {
    fn evaluate(&self, a: &ParamAssignment) -> Result<f64, EvalError> {
        evaluate(self, a)
    }
}

pub fn evaluate(spec: &ObjectiveSpec, a: &ParamAssignment) -> Result<f64, EvalError> {
    match spec {
        ObjectiveSpec::Builtin { name } => name.evaluate(a),
        ObjectiveSpec::External { command, working_dir, timeout_secs } => {
            run_external(command, working_dir.as_ref(), Duration::from_secs_f64(*timeout_secs), a)
        }
    }
}

fn score_object(stdout: &str) -> Option<Map<String, Value>> {
    stdout
        .lines()
        .rev()
        .filter_map(|l| serde_json::from_str::<Map<String, Value>>(l.trim()).ok())
        .find(|m| m.contains_key("score"))
        .or_else(|| extract_first_object(stdout).filter(|m| m.contains_key("score")))
}

fn run_external(command: &[String], dir: Option<&PathBuf>, timeout: Duration, a: &ParamAssignment) -> Result<f64, EvalError> {
    let mut cmd = Command::new(&command[0]);
    cmd.args(&command[1..]).stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::inherit());
    if let Some(d) = dir {
        cmd.current_dir(d);
    }
    let mut child = cmd.spawn().map_err(|e| EvalError::Failed(format!("cannot start `{}`: {e}", command[0])))?;
    let mut line = serde_json::to_string(&a.to_json()).expect("assignment serializes");
    line.push('\n');
    if let Some(mut stdin) = child.stdin.take() {
        // a child that ignores its input may close the pipe early
        let _ = stdin.write_all(line.as_bytes());
    }
    let mut stdout = child.stdout.take().expect("piped stdout");
    let reader = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = stdout.read_to_string(&mut s);
        s
    });
    let status = match child.wait_timeout(timeout).map_err(|e| EvalError::Failed(e.to_string()))? {
        Some(s) => s,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(EvalError::Timeout(timeout));
        }
    };
    let out = reader.join().unwrap_or_default();
    if !status.success() {
        return Err(EvalError::Exit(status.code().map_or_else(|| "killed by signal".into(), |c| c.to_string())));
    }
    let obj = score_object(&out).ok_or_else(|| EvalError::Unparseable(out.trim().chars().take(200).collect()))?;
    if let Some(std) = obj.get("std").and_then(Value::as_f64) {
        log::info!("objective reported std {std}");
    }
    match obj.get("score") {
        Some(Value::Number(n)) => n.as_f64().filter(|s| s.is_finite()).ok_or_else(|| EvalError::Unparseable(n.to_string())),
        Some(Value::String(s)) => s.trim().parse::<f64>().ok().filter(|s| s.is_finite()).ok_or_else(|| EvalError::Unparseable(s.clone())),
        other => Err(EvalError::Unparseable(format!("{other:?}"))),
    }
}

/// One sampler configuration in a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSampler {
    pub label: String,
    pub config: StudyConfig,
    pub provider: Option<crate::llm_client::ProviderConfig>,
}

/// One objective in a matrix, with the space to search.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixObjective {
    pub label: String,
    pub spec: ObjectiveSpec,
    pub space: SearchSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRow {
    pub study_id: String,
    pub sampler: String,
    pub objective: String,
    pub repeat: u32,
    pub seed: u64,
    pub status: String,
    pub best_score: Option<f64>,
    pub iterations: u32,
    pub stop_reason: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub study_id: String,
    pub iteration: u32,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatrixReport {
    pub cells: Vec<CellRow>,
    pub curves: Vec<CurveRow>,
}

impl MatrixReport {
    pub fn write_cells<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for c in &self.cells {
            w.serialize(c)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_curves<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for c in &self.curves {
            w.serialize(c)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn run_cell(task: &TaskDescription, s: &MatrixSampler, o: &MatrixObjective, repeat: u32) -> (CellRow, Vec<CurveRow>) {
    let seed = s.config.seed.wrapping_add(repeat as u64);
    let study_id = format!("{}/{}/{}", s.label, o.label, repeat);
    let mut row = CellRow {
        study_id: study_id.clone(),
        sampler: s.label.clone(),
        objective: o.label.clone(),
        repeat,
        seed,
        status: "failed".into(),
        best_score: None,
        iterations: 0,
        stop_reason: String::new(),
        error: String::new(),
    };
    let cfg = StudyConfig { seed, ..s.config.clone() };
    let client = match s.provider.as_ref().filter(|_| cfg.sampler.uses_llm()).map(LlmClient::from_config).transpose() {
        Ok(c) => c,
        Err(e) => {
            row.error = e.to_string();
            return (row, Vec::new());
        }
    };
    let study = Study { config: &cfg, task, space: &o.space, objective: &o.spec, client: client.as_ref() };
    match run_study(&study, &mut NullSink) {
        Err(e) => {
            row.error = e.to_string();
            (row, Vec::new())
        }
        Ok(r) => {
            row.iterations = r.iterations;
            row.stop_reason = serde_json::to_value(r.stop_reason).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            if r.stop_reason == StopReason::Aborted {
                row.error = r.abort_message.unwrap_or_default();
            } else {
                row.status = "ok".into();
                row.best_score = Some(r.best_score);
            }
            let curves = r
                .best_curve
                .iter()
                .enumerate()
                .map(|(i, b)| CurveRow { study_id: study_id.clone(), iteration: i as u32, best_so_far: *b })
                .collect();
            (row, curves)
        }
    }
}

/// Runs every (sampler, objective, repeat) cell in parallel. Repeat `r`
/// uses the sampler's seed plus `r`. Rows come back in sampler, objective,
/// repeat order regardless of scheduling.
pub fn run_matrix(task: &TaskDescription, samplers: &[MatrixSampler], objectives: &[MatrixObjective], repeats: u32) -> MatrixReport {
    let jobs: Vec<(&MatrixSampler, &MatrixObjective, u32)> = samplers
        .iter()
        .flat_map(|s| objectives.iter().flat_map(move |o| (0..repeats).map(move |r| (s, o, r))))
        .collect();
    let results: Vec<(CellRow, Vec<CurveRow>)> = jobs.par_iter().map(|(s, o, r)| run_cell(task, s, o, *r)).collect();
    let mut report = MatrixReport::default();
    for (cell, curves) in results {
        report.cells.push(cell);
        report.curves.extend(curves);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::ParamValue;
    use crate::study::SamplerKind;
    use crate::tpe::Direction;
    use std::f64::consts::PI;

    fn point(pairs: &[(&str, f64)]) -> ParamAssignment {
        let mut a = ParamAssignment::new();
        for (k, v) in pairs {
            a.insert(*k, ParamValue::Float(*v));
        }
        a
    }

    #[test]
    fn analytic_optima() {
        let b = Builtin::Branin.evaluate(&point(&[("x", PI), ("y", 2.275)])).unwrap();
        assert!((b - BRANIN_MIN).abs() < 1e-4);
        // the other two global minima
        for (x, y) in [(-PI, 12.275), (9.42478, 2.475)] {
            assert!((branin(x, y) - BRANIN_MIN).abs() < 1e-4);
        }
        assert_eq!(Builtin::Sphere.evaluate(&point(&[("x1", 0.0), ("x2", 0.0), ("x3", 0.0)])).unwrap(), 0.0);
        assert_eq!(Builtin::Rosenbrock.evaluate(&point(&[("x", 1.0), ("y", 1.0)])).unwrap(), 0.0);
    }

    #[test]
    fn grid_lookup() {
        let a = ParamAssignment::new().with("a", ParamValue::Choice("a2".into())).with("b", ParamValue::Choice("b1".into()));
        assert_eq!(Builtin::DiscreteGrid.evaluate(&a).unwrap(), 0.1);
        assert!(Builtin::DiscreteGrid.evaluate(&ParamAssignment::new()).is_err());
        assert_eq!(crate::tpe::enumerate_discrete(&Builtin::DiscreteGrid.space(), 100).unwrap().len(), 12);
    }

    #[test]
    fn stdout_parsing() {
        assert_eq!(score_object("log {x}\n{\"score\": 2}\n").unwrap()["score"], 2);
        assert_eq!(score_object("result: {\"score\": 3, \"std\": 0.1} done").unwrap()["score"], 3);
        assert!(score_object("{\"loss\": 1}").is_none());
    }

    fn task() -> TaskDescription {
        TaskDescription { model_name: "m".into(), problem_description: "p".into(), metric: "loss".into(), direction: Direction::Minimize }
    }

    #[test]
    fn matrix_shape_and_seed_isolation() {
        let sampler = |label: &str, kind| MatrixSampler {
            label: label.into(),
            config: StudyConfig { sampler: kind, max_iterations: 10, ..Default::default() },
            provider: None,
        };
        let obj = MatrixObjective { label: "sphere".into(), spec: ObjectiveSpec::builtin(Builtin::Sphere), space: Builtin::Sphere.space() };
        let r = run_matrix(&task(), &[sampler("tpe", SamplerKind::TpeOnly), sampler("random", SamplerKind::RandomSearch)], std::slice::from_ref(&obj), 3);
        assert_eq!(r.cells.len(), 6);
        assert_eq!(r.curves.len(), 60);
        assert!(r.cells.iter().all(|c| c.status == "ok"));
        assert_eq!(r.cells.iter().map(|c| c.seed).collect::<Vec<_>>(), [42, 43, 44, 42, 43, 44]);

        let again = run_matrix(&task(), &[sampler("tpe", SamplerKind::TpeOnly), sampler("tpe", SamplerKind::TpeOnly)], std::slice::from_ref(&obj), 2);
        assert_eq!(again.cells[0].best_score, again.cells[2].best_score);
        assert_ne!(again.cells[0].best_score, again.cells[1].best_score);

        let broken = MatrixSampler { label: "llm".into(), config: StudyConfig { sampler: SamplerKind::Hybrid, ..Default::default() }, provider: None };
        let r = run_matrix(&task(), &[broken], &[obj], 1);
        assert_eq!(r.cells[0].status, "failed");
        assert!(!r.cells[0].error.is_empty());
    }
}
