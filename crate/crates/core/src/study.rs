//! The optimization loop: suggest, evaluate, record, maintain the chat and
//! check for early stopping.

use std::io;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::Objective;
use crate::history::{
    rolling_trim, should_summarize, summarize, ChatHistory, HistoryMode, HistoryPolicy, TrialRecord, TrialSource,
};
use crate::hybrid::{suggest_hybrid, warm_start, HybridConfig, HybridContext, InitMode, RngStreams, Suggestion};
use crate::llm_client::LlmClient;
use crate::llm_sampler::{suggest_llm, system_message, trial_feedback, OptState, PromptMode, TaskDescription};
use crate::search_space::{clamp_assignment, validate_assignment, ParamAssignment, SearchSpace};
use crate::tpe::{suggest_tpe, Direction, ObservationSet, TpeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    TpeOnly,
    LlmOnly,
    Hybrid,
    RandomSearch,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::TpeOnly => "tpe_only",
            SamplerKind::LlmOnly => "llm_only",
            SamplerKind::Hybrid => "hybrid",
            SamplerKind::RandomSearch => "random_search",
        }
    }

    pub fn uses_llm(self) -> bool {
        matches!(self, SamplerKind::LlmOnly | SamplerKind::Hybrid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub max_iterations: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<u32>,
    pub min_delta: f64,
    pub direction: Direction,
    pub seed: u64,
    pub sampler: SamplerKind,
    /// Prompt family for `llm_only`.
    pub llm_mode: PromptMode,
    /// Keep LLM-proposed parameters that the declared space lacks.
    pub adopt_llm_params: bool,
    /// Stamp ledger records with wall-clock seconds.
    pub wall_clock_timestamps: bool,
    pub tpe: TpeConfig,
    pub hybrid: HybridConfig,
    pub history: HistoryPolicy,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            patience: None,
            min_delta: 0.0,
            direction: Direction::Minimize,
            seed: 42,
            sampler: SamplerKind::TpeOnly,
            llm_mode: PromptMode::Plain,
            adopt_llm_params: false,
            wall_clock_timestamps: false,
            tpe: TpeConfig::default(),
            hybrid: HybridConfig::default(),
            history: HistoryPolicy::default(),
        }
    }
}

impl StudyConfig {
    /// Checks every invariant; errors name the offending field path
    /// relative to the study block.
    pub fn validate(&self) -> Result<(), (String, String)> {
        if self.max_iterations < 1 {
            return Err(("max_iterations".into(), "must be at least 1".into()));
        }
        if self.patience == Some(0) {
            return Err(("patience".into(), "must be at least 1 when present".into()));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return Err(("min_delta".into(), "must be a finite non-negative number".into()));
        }
        if !(self.tpe.gamma > 0.0 && self.tpe.gamma <= 1.0) {
            return Err(("tpe.gamma".into(), "must lie in (0, 1]".into()));
        }
        if self.tpe.n_candidates < 1 {
            return Err(("tpe.n_candidates".into(), "must be at least 1".into()));
        }
        self.hybrid.validate().map_err(|e| ("hybrid.llm_probability".into(), e))?;
        self.history.validate().map_err(|(k, e)| (format!("history.{k}"), e))?;
        if self.sampler == SamplerKind::LlmOnly && self.llm_mode.is_tpe() {
            return Err(("llm_mode".into(), "llm_only needs plain, reasoning or buffered".into()));
        }
        Ok(())
    }
}

pub fn early_stop_check(counter: u32, patience: Option<u32>) -> bool {
    patience.is_some_and(|p| counter >= p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopped,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidentKind {
    /// The LLM branch failed and another sampler stood in.
    LlmFallback,
    /// An LLM reply was usable only after repair (clamping, dropped keys).
    LlmRepair,
    EvaluatorError,
    SummaryFailed,
}

/// A non-fatal event worth surfacing next to the ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub iteration: u32,
    pub kind: IncidentKind,
    pub message: String,
}

/// Receives records as the study produces them.
pub trait StudySink {
    fn trial(&mut self, record: &TrialRecord) -> io::Result<()>;
    fn incident(&mut self, _incident: &Incident) -> io::Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl StudySink for NullSink {
    fn trial(&mut self, _: &TrialRecord) -> io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("invalid study config at `{path}`: {reason}")]
    Config { path: String, reason: String },
    #[error(transparent)]
    Task(#[from] TaskError),
}

#[derive(Debug, Error)]
#[error("{0}")]
pub struct TaskError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyResult {
    pub best_params: ParamAssignment,
    pub best_score: f64,
    pub stop_reason: StopReason,
    pub iterations: u32,
    #[serde(serialize_with = "secs")]
    pub wall_time: Duration,
    #[serde(skip)]
    pub trials: Vec<TrialRecord>,
    #[serde(skip)]
    pub incidents: Vec<Incident>,
    /// Best score after each trial.
    #[serde(skip)]
    pub best_curve: Vec<f64>,
    /// Iterations after which the chat was summarized.
    #[serde(skip)]
    pub summaries: Vec<u32>,
    /// Every space version trials were drawn from, oldest first.
    #[serde(skip)]
    pub spaces: Vec<SearchSpace>,
    #[serde(skip)]
    pub final_space: SearchSpace,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abort_message: Option<String>,
}

fn secs<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

/// Everything a study needs besides its config.
pub struct Study<'a> {
    pub config: &'a StudyConfig,
    pub task: &'a TaskDescription,
    pub space: &'a SearchSpace,
    pub objective: &'a dyn Objective,
    /// Required by the LLM-using samplers.
    pub client: Option<&'a LlmClient>,
}

fn compatible(obs: &ObservationSet, space: &SearchSpace) -> ObservationSet {
    let mut out = ObservationSet::new(obs.direction());
    for r in obs.rows() {
        if validate_assignment(space, &r.assignment).is_ok() {
            out.push(r.assignment.clone(), r.score, r.iteration).expect("scores already finite");
        }
    }
    out
}

fn now_secs() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

struct Loop<'b> {
    sink: &'b mut dyn StudySink,
    incidents: Vec<Incident>,
}

impl Loop<'_> {
    fn incident(&mut self, iteration: u32, kind: IncidentKind, message: String) -> io::Result<()> {
        let i = Incident { iteration, kind, message };
        self.sink.incident(&i)?;
        self.incidents.push(i);
        Ok(())
    }
}

/// Runs the study to completion, early stop or abort. Only configuration
/// problems are returned as errors; sink failures abort the loop and are
/// reported in the result.
pub fn run_study(study: &Study<'_>, sink: &mut dyn StudySink) -> Result<StudyResult, StudyError> {
    let cfg = study.config;
    cfg.validate().map_err(|(path, reason)| StudyError::Config { path, reason })?;
    study.task.validate().map_err(TaskError)?;
    if cfg.sampler.uses_llm() && study.client.is_none() {
        return Err(StudyError::Config { path: "sampler".into(), reason: format!("{} needs an llm provider", cfg.sampler.as_str()) });
    }
    let started = Instant::now();
    let dir = cfg.direction;
    let mut lp = Loop { sink, incidents: Vec::new() };
    let mut streams = RngStreams::new(cfg.seed);
    let mut obs = ObservationSet::new(dir);
    let mut space = study.space.clone();
    let mut chat: Option<ChatHistory> = None;
    let mut best: Option<(f64, ParamAssignment)> = None;
    let mut counter = 0u32;
    let mut trials = Vec::new();
    let mut curve = Vec::new();
    let mut summaries = Vec::new();
    let mut spaces: Vec<SearchSpace> = Vec::new();
    let mut stop = StopReason::Completed;
    let mut abort_message = None;

    for it in 0..cfg.max_iterations {
        let suggestion = if it == 0 {
            let (init_mode, prompt_mode) = match cfg.sampler {
                SamplerKind::Hybrid => (cfg.hybrid.init_mode, cfg.hybrid.llm_mode.prompt_mode()),
                SamplerKind::LlmOnly => (InitMode::LlmInit, cfg.llm_mode),
                _ => (InitMode::RandomInit, PromptMode::Plain),
            };
            let ws = warm_start(init_mode, study.task, prompt_mode, study.space, study.client, cfg.adopt_llm_params, &mut streams.init);
            space = ws.space;
            if cfg.sampler.uses_llm() {
                let system = system_message(study.task, prompt_mode).expect("system templates need only the task");
                chat = Some(ChatHistory::from_messages(ws.suggestion.exchange.clone(), system));
            }
            let mut s = ws.suggestion;
            if init_mode == InitMode::LlmInit && s.source == TrialSource::InitRandom {
                s.fallback = true;
            }
            s
        } else {
            let (best_score, best_params) = best.as_ref().map(|(s, p)| (*s, p)).expect("set at iteration 0");
            let state = OptState { best_score, best_params, space: &space };
            let tail = chat.as_ref().map(|c| c.tail()).unwrap_or(&[]);
            match cfg.sampler {
                SamplerKind::TpeOnly => Suggestion::plain(suggest_tpe(&compatible(&obs, &space), &space, &cfg.tpe, &mut streams.tpe), TrialSource::Tpe),
                SamplerKind::RandomSearch => Suggestion::plain(space.sample_uniform(&mut streams.init), TrialSource::Random),
                SamplerKind::Hybrid => {
                    let obs_now = compatible(&obs, &space);
                    let ctx = HybridContext {
                        cfg: &cfg.hybrid,
                        tpe: &cfg.tpe,
                        task: study.task,
                        state,
                        obs: &obs_now,
                        client: study.client.expect("checked above"),
                        history_tail: tail,
                    };
                    suggest_hybrid(&ctx, &mut streams)
                }
                SamplerKind::LlmOnly => match suggest_llm(study.task, &state, study.client.expect("checked above"), cfg.llm_mode, tail) {
                    Ok(out) => Suggestion {
                        assignment: out.assignment,
                        source: TrialSource::Llm,
                        space_update: out.space_update,
                        reason: out.reason,
                        incidents: out.incidents,
                        exchange: out.exchange,
                        fallback: false,
                    },
                    Err(e) => {
                        log::warn!("llm suggestion failed, falling back to tpe: {e}");
                        let a = suggest_tpe(&compatible(&obs, &space), &space, &cfg.tpe, &mut streams.tpe);
                        let mut s = Suggestion::plain(a, TrialSource::Tpe);
                        s.incidents.push(format!("llm suggestion failed ({e}); fell back to tpe"));
                        s.fallback = true;
                        s
                    }
                },
            }
        };

        let Suggestion { mut assignment, source, space_update, reason, incidents, exchange, fallback } = suggestion;
        if let Some(u) = space_update {
            space = u.space;
        }
        let kind = if fallback { IncidentKind::LlmFallback } else { IncidentKind::LlmRepair };
        let mut io_result = Ok(());
        for m in incidents {
            io_result = io_result.and(lp.incident(it, kind, m));
        }
        if !validate_assignment(&space, &assignment).is_ok() {
            match clamp_assignment(&space, &assignment) {
                Ok(a) => assignment = a,
                Err(_) => {
                    let mut filled = ParamAssignment::new();
                    for spec in space.specs() {
                        let v = assignment.get(&spec.name).cloned();
                        filled.insert(spec.name.clone(), v.unwrap_or_else(|| space.sample_uniform(&mut streams.init).get(&spec.name).cloned().expect("sampled")));
                    }
                    assignment = clamp_assignment(&space, &filled).expect("keys now match");
                }
            }
            io_result = io_result.and(lp.incident(it, IncidentKind::LlmRepair, "assignment repaired to fit the current space".into()));
        }

        let score = match study.objective.evaluate(&assignment) {
            Ok(s) if s.is_finite() => s,
            Ok(s) => {
                io_result = io_result.and(lp.incident(it, IncidentKind::EvaluatorError, format!("non-finite score {s}; recorded the sentinel")));
                dir.sentinel()
            }
            Err(e) => {
                log::warn!("evaluation failed at iteration {it}: {e}");
                io_result = io_result.and(lp.incident(it, IncidentKind::EvaluatorError, format!("{e}; recorded the sentinel")));
                dir.sentinel()
            }
        };
        if spaces.last().is_none_or(|s| s.version() != space.version()) {
            spaces.push(space.clone());
        }
        let record = TrialRecord {
            iteration: it,
            params: assignment.clone(),
            score,
            source,
            space_version: space.version(),
            reason,
            timestamp: cfg.wall_clock_timestamps.then(now_secs),
        };
        io_result = io_result.and(lp.sink.trial(&record));
        trials.push(record);
        obs.push(assignment.clone(), score, it).expect("score is finite");

        match &best {
            Some((b, _)) if !dir.improves(score, *b, cfg.min_delta) => counter += 1,
            _ => {
                best = Some((score, assignment.clone()));
                counter = 0;
            }
        }
        curve.push(best.as_ref().expect("set").0);

        if let (Some(c), Some(client)) = (chat.as_mut(), study.client) {
            if it > 0 {
                c.extend(exchange);
            }
            c.push(trial_feedback(it, source.as_str(), &assignment, score));
            match cfg.history.mode {
                HistoryMode::IntelligentSummary if should_summarize(&cfg.history, it, c) => {
                    let b = best.as_ref().map(|(s, p)| (*s, p));
                    match summarize(client, c, b) {
                        Ok(s) => {
                            *c = s;
                            summaries.push(it);
                        }
                        Err(e) => {
                            log::warn!("summarization failed at iteration {it}: {e}");
                            io_result = io_result.and(lp.incident(it, IncidentKind::SummaryFailed, e));
                        }
                    }
                }
                HistoryMode::RollingBuffer => *c = rolling_trim(&cfg.history, c),
                _ => {}
            }
        }

        if let Err(e) = io_result {
            stop = StopReason::Aborted;
            abort_message = Some(format!("could not write results: {e}"));
            break;
        }
        if early_stop_check(counter, cfg.patience) {
            stop = StopReason::EarlyStopped;
            break;
        }
    }

    let (best_score, best_params) = best.unwrap_or((dir.sentinel(), ParamAssignment::new()));
    Ok(StudyResult {
        best_params,
        best_score,
        stop_reason: stop,
        iterations: trials.len() as u32,
        wall_time: started.elapsed(),
        trials,
        incidents: lp.incidents,
        best_curve: curve,
        summaries,
        spaces,
        final_space: space,
        abort_message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::EvalError;
    use crate::search_space::{Domain, ParamSpec, ParamValue};
    use proptest::prelude::*;

    fn task() -> TaskDescription {
        TaskDescription { model_name: "m".into(), problem_description: "p".into(), metric: "loss".into(), direction: Direction::Minimize }
    }

    fn space() -> SearchSpace {
        SearchSpace::new([ParamSpec::new("x", Domain::float(-5.0, 5.0)).unwrap()]).unwrap()
    }

    fn run(cfg: &StudyConfig, f: &dyn Objective) -> StudyResult {
        let s = space();
        let t = task();
        run_study(&Study { config: cfg, task: &t, space: &s, objective: f, client: None }, &mut NullSink).unwrap()
    }

    #[test]
    fn early_stop_counter() {
        assert!(!early_stop_check(4, Some(5)));
        assert!(early_stop_check(5, Some(5)));
        assert!(!early_stop_check(999, None));
    }

    #[test]
    fn constant_objective_stops_after_patience() {
        let f = |_: &ParamAssignment| Ok::<f64, EvalError>(1.0);
        for p in [5, 15] {
            let cfg = StudyConfig { patience: Some(p), ..Default::default() };
            let r = run(&cfg, &f);
            assert_eq!(r.iterations, p + 1);
            assert_eq!(r.stop_reason, StopReason::EarlyStopped);
        }
        let r = run(&StudyConfig::default(), &f);
        assert_eq!((r.iterations, r.stop_reason), (50, StopReason::Completed));
    }

    #[test]
    fn strictly_improving_completes() {
        let n = std::sync::atomic::AtomicU32::new(0);
        let f = |_: &ParamAssignment| Ok::<f64, EvalError>(-(n.fetch_add(1, std::sync::atomic::Ordering::SeqCst) as f64));
        let cfg = StudyConfig { patience: Some(5), ..Default::default() };
        let r = run(&cfg, &f);
        assert_eq!((r.iterations, r.stop_reason), (50, StopReason::Completed));
    }

    #[test]
    fn evaluator_failure_scores_sentinel() {
        let calls = std::sync::atomic::AtomicU32::new(0);
        let f = |a: &ParamAssignment| match calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst) % 3 {
            1 => Err(EvalError::Failed("boom".into())),
            _ => Ok(a.get("x").and_then(ParamValue::as_f64).unwrap().abs()),
        };
        let r = run(&StudyConfig { max_iterations: 20, ..Default::default() }, &f);
        assert_eq!(r.iterations, 20);
        let failed: Vec<_> = r.trials.iter().filter(|t| t.score == f64::MAX).collect();
        assert!(!failed.is_empty());
        assert_eq!(r.incidents.iter().filter(|i| i.kind == IncidentKind::EvaluatorError).count(), failed.len());
        assert!(r.best_score < f64::MAX);
    }

    #[test]
    fn rejects_bad_config() {
        let s = space();
        let t = task();
        let f = |_: &ParamAssignment| Ok::<f64, EvalError>(1.0);
        let cfg = StudyConfig { patience: Some(0), ..Default::default() };
        let e = run_study(&Study { config: &cfg, task: &t, space: &s, objective: &f, client: None }, &mut NullSink).unwrap_err();
        assert!(matches!(e, StudyError::Config { ref path, .. } if path == "patience"));
        let cfg = StudyConfig { sampler: SamplerKind::Hybrid, ..Default::default() };
        assert!(run_study(&Study { config: &cfg, task: &t, space: &s, objective: &f, client: None }, &mut NullSink).is_err());
    }

    #[test]
    fn reproducible() {
        let f = |a: &ParamAssignment| Ok::<f64, EvalError>(a.get("x").unwrap().as_f64().unwrap().powi(2));
        let cfg = StudyConfig { max_iterations: 30, ..Default::default() };
        assert_eq!(run(&cfg, &f).trials, run(&cfg, &f).trials);
        let other = StudyConfig { seed: 7, ..cfg.clone() };
        assert_ne!(run(&cfg, &f).trials, run(&other, &f).trials);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn best_tracking(seed in 0u64..1000, patience in proptest::option::of(1u32..8), maximize in any::<bool>(), quant in 1.0..4.0f64) {
            let dir = if maximize { Direction::Maximize } else { Direction::Minimize };
            let f = move |a: &ParamAssignment| Ok::<f64, EvalError>((a.get("x").unwrap().as_f64().unwrap() * quant).round());
            let cfg = StudyConfig { max_iterations: 40, patience, seed, direction: dir, ..Default::default() };
            let r = run(&cfg, &f);
            prop_assert!(r.iterations <= 40);
            let scores: Vec<f64> = r.trials.iter().map(|t| t.score).collect();
            let extremum = if maximize { scores.iter().cloned().fold(f64::MIN, f64::max) } else { scores.iter().cloned().fold(f64::MAX, f64::min) };
            prop_assert_eq!(r.best_score, extremum);
            for w in r.best_curve.windows(2) {
                let monotone = if maximize { w[1] >= w[0] } else { w[1] <= w[0] };
                prop_assert!(monotone);
            }
            if r.stop_reason == StopReason::EarlyStopped {
                let p = patience.unwrap() as usize;
                let n = r.best_curve.len();
                // the last `p` trials never beat the best before them
                prop_assert!(n > p);
                for i in n - p..n {
                    prop_assert_eq!(r.best_curve[i], r.best_curve[n - p - 1]);
                }
            }
        }
    }
}
