//! Sequential hyperparameter optimization driven by a Tree-structured Parzen
//! Estimator, an LLM sampler with adaptive search spaces, and a hybrid
//! sampler that flips a coin between the two on every iteration.
//!
//! The crate is organised bottom-up:
//!
//! - [`search_space`]: parameter specs, assignments, validation, clamping and
//!   adaptive range updates.
//! - [`tpe`]: quantile split, Parzen density models and ratio maximisation.
//! - [`llm_client`]: provider-agnostic chat completion with retries and a
//!   scripted mock provider.
//! - [`llm_sampler`]: prompt templates, reply parsing and the LLM suggestion
//!   flow.
//! - [`history`]: trial ledger, chat history, summarisation and trimming.
//! - [`hybrid`]: the LLM/TPE coin-flip sampler and warm start.
//! - [`study`]: the optimisation loop with best tracking and early stopping.
//! - [`bench`]: objectives (analytic, discrete grid, external command) and
//!   the comparison matrix.
//! - [`config`]: the declarative run configuration document.

pub mod bench;
pub mod config;
pub mod history;
pub mod hybrid;
pub mod json_text;
pub mod llm_client;
pub mod llm_sampler;
pub mod search_space;
pub mod study;
pub mod tpe;

pub use bench::{evaluate, Builtin, EvalError, Objective, ObjectiveSpec};
pub use config::{ConfigError, RunConfig};
pub use history::{ChatHistory, HistoryMode, HistoryPolicy, LedgerWriter, TrialRecord, TrialSource};
pub use hybrid::{HybridConfig, InitMode};
pub use llm_client::{ChatMessage, ChatRole, CompletionResult, LlmClient, LlmError, MockProvider, ProviderConfig};
pub use llm_sampler::{PromptMode, TaskDescription};
pub use search_space::{Domain, ParamAssignment, ParamSpec, ParamValue, SearchSpace};
pub use study::{run_study, SamplerKind, StopReason, Study, StudyConfig, StudyResult};
pub use tpe::{Direction, TpeConfig};
