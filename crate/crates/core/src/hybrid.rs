//! The LLM/TPE coin-flip sampler and the iteration-0 warm start.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::history::TrialSource;
use crate::llm_client::{ChatMessage, LlmClient};
use crate::llm_sampler::{initialize_llm, suggest_llm, OptState, PromptMode, TaskDescription};
use crate::search_space::{ParamAssignment, SearchSpace, SpaceUpdate};
use crate::tpe::{suggest_tpe, ObservationSet, TpeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    LlmInit,
    RandomInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HybridLlmMode {
    #[default]
    TpeRelative,
    TpeIndependent,
}

impl HybridLlmMode {
    pub fn prompt_mode(self) -> PromptMode {
        match self {
            HybridLlmMode::TpeRelative => PromptMode::TpeRelative,
            HybridLlmMode::TpeIndependent => PromptMode::TpeIndependent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridConfig {
    pub llm_probability: f64,
    pub init_mode: InitMode,
    pub llm_mode: HybridLlmMode,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self { llm_probability: 0.5, init_mode: InitMode::LlmInit, llm_mode: HybridLlmMode::TpeRelative }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.llm_probability) {
            return Err("must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Independent random streams derived from one master seed.
#[derive(Debug, Clone)]
pub struct RngStreams {
    /// Branch coin; one draw per iteration from 1 on.
    pub coin: ChaCha8Rng,
    pub tpe: ChaCha8Rng,
    pub init: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self { coin: stream(1), tpe: stream(2), init: stream(3) }
    }
}

/// One proposed trial with everything the loop needs to record it.
#[derive(Debug, Clone, PartialEq)]
pub struct Suggestion {
    pub assignment: ParamAssignment,
    pub source: TrialSource,
    pub space_update: Option<SpaceUpdate>,
    pub reason: Option<String>,
    pub incidents: Vec<String>,
    /// Messages to append to the conversation.
    pub exchange: Vec<ChatMessage>,
    /// The LLM branch was chosen but failed; TPE stood in.
    pub fallback: bool,
}

impl Suggestion {
    pub fn plain(assignment: ParamAssignment, source: TrialSource) -> Self {
        Self { assignment, source, space_update: None, reason: None, incidents: Vec::new(), exchange: Vec::new(), fallback: false }
    }
}

/// Iteration-0 result: the working space and the first assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub space: SearchSpace,
    pub suggestion: Suggestion,
}

/// Chooses the working space and first assignment. An LLM initializer that
/// fails is downgraded to a uniform draw from the declared space.
pub fn warm_start(
    init_mode: InitMode,
    task: &TaskDescription,
    prompt_mode: PromptMode,
    declared: &SearchSpace,
    client: Option<&LlmClient>,
    adopt_new: bool,
    rng: &mut ChaCha8Rng,
) -> WarmStart {
    let mut incidents = Vec::new();
    if let (InitMode::LlmInit, Some(client)) = (init_mode, client) {
        match initialize_llm(task, prompt_mode, declared, client, adopt_new) {
            Ok(out) => {
                let mut s = Suggestion::plain(out.assignment, TrialSource::InitLlm);
                s.reason = out.reason;
                s.incidents = out.incidents;
                s.exchange = out.conversation;
                return WarmStart { space: out.space, suggestion: s };
            }
            Err(e) => {
                log::warn!("llm initialization failed, using random init: {e}");
                incidents.push(format!("llm initialization failed ({e}); downgraded to random init"));
            }
        }
    }
    let mut s = Suggestion::plain(declared.sample_uniform(rng), TrialSource::InitRandom);
    s.incidents = incidents;
    WarmStart { space: declared.clone(), suggestion: s }
}

/// Inputs shared by every hybrid step after iteration 0.
pub struct HybridContext<'a> {
    pub cfg: &'a HybridConfig,
    pub tpe: &'a TpeConfig,
    pub task: &'a TaskDescription,
    pub state: OptState<'a>,
    pub obs: &'a ObservationSet,
    pub client: &'a LlmClient,
    pub history_tail: &'a [ChatMessage],
}

/// Flips the coin and runs the chosen branch. LLM failures fall back to
/// TPE for this iteration only.
pub fn suggest_hybrid(ctx: &HybridContext<'_>, streams: &mut RngStreams) -> Suggestion {
    let p: f64 = streams.coin.random();
    let space = ctx.state.space;
    if p < ctx.cfg.llm_probability {
        match suggest_llm(ctx.task, &ctx.state, ctx.client, ctx.cfg.llm_mode.prompt_mode(), ctx.history_tail) {
            Ok(out) => {
                return Suggestion {
                    assignment: out.assignment,
                    source: TrialSource::Llm,
                    space_update: None,
                    reason: out.reason,
                    incidents: out.incidents,
                    exchange: out.exchange,
                    fallback: false,
                }
            }
            Err(e) => {
                log::warn!("llm branch failed, falling back to tpe: {e}");
                let mut s = Suggestion::plain(suggest_tpe(ctx.obs, space, ctx.tpe, &mut streams.tpe), TrialSource::Tpe);
                s.incidents.push(format!("llm branch failed ({e}); fell back to tpe"));
                s.fallback = true;
                return s;
            }
        }
    }
    Suggestion::plain(suggest_tpe(ctx.obs, space, ctx.tpe, &mut streams.tpe), TrialSource::Tpe)
}
