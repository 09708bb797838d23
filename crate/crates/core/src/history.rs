//! Trial ledger, chat history and the two memory policies.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::json_text::{extract_first_array, format_number, to_prompt_string};
use crate::llm_client::{estimate_tokens, ChatMessage, ChatRole, LlmClient};
use crate::llm_sampler::templates;
use crate::search_space::ParamAssignment;
use crate::tpe::Direction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialSource {
    Llm,
    Tpe,
    InitLlm,
    InitRandom,
    /// Uniform draw by the random-search baseline.
    Random,
}

impl TrialSource {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialSource::Llm => "llm",
            TrialSource::Tpe => "tpe",
            TrialSource::InitLlm => "init_llm",
            TrialSource::InitRandom => "init_random",
            TrialSource::Random => "random",
        }
    }

    pub fn is_llm(self) -> bool {
        matches!(self, TrialSource::Llm | TrialSource::InitLlm)
    }
}

/// One evaluated trial, as written to the ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub iteration: u32,
    pub params: ParamAssignment,
    pub score: f64,
    pub source: TrialSource,
    pub space_version: u64,
    pub reason: Option<String>,
    /// Seconds since the Unix epoch; `None` unless wall-clock stamping is on.
    pub timestamp: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    #[default]
    IntelligentSummary,
    RollingBuffer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistoryPolicy {
    pub mode: HistoryMode,
    pub summarize_every: u32,
    pub token_limit: usize,
    pub buffer_keep: usize,
}

impl Default for HistoryPolicy {
    fn default() -> Self {
        Self { mode: HistoryMode::IntelligentSummary, summarize_every: 10, token_limit: 8000, buffer_keep: 20 }
    }
}

impl HistoryPolicy {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.summarize_every < 1 {
            return Err(("summarize_every", "must be at least 1".into()));
        }
        if self.token_limit == 0 {
            return Err(("token_limit", "must be positive".into()));
        }
        if self.buffer_keep < 2 {
            return Err(("buffer_keep", "must be at least 2".into()));
        }
        Ok(())
    }
}

/// A conversation whose first message is always the system message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatHistory {
    messages: Vec<ChatMessage>,
}

impl ChatHistory {
    pub fn new(system: ChatMessage) -> Self {
        Self { messages: vec![system] }
    }

    /// Starts from an opening conversation; a system message is inserted if
    /// the first message is not one.
    pub fn from_messages(mut messages: Vec<ChatMessage>, fallback_system: ChatMessage) -> Self {
        if messages.first().map(|m| m.role) != Some(ChatRole::System) {
            messages.insert(0, fallback_system);
        }
        Self { messages }
    }

    pub fn system(&self) -> &ChatMessage {
        &self.messages[0]
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }

    /// Everything after the system message.
    pub fn tail(&self) -> &[ChatMessage] {
        &self.messages[1..]
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.len() <= 1
    }

    pub fn push(&mut self, m: ChatMessage) {
        self.messages.push(m);
    }

    pub fn extend(&mut self, ms: impl IntoIterator<Item = ChatMessage>) {
        self.messages.extend(ms);
    }

    pub fn estimated_tokens(&self) -> usize {
        estimate_tokens(&self.messages)
    }

    pub fn content_contains(&self, needle: &str) -> bool {
        self.messages.iter().any(|m| m.content.contains(needle))
    }
}

pub fn should_summarize(policy: &HistoryPolicy, iteration: u32, chat: &ChatHistory) -> bool {
    if policy.mode != HistoryMode::IntelligentSummary {
        return false;
    }
    (iteration > 0 && iteration.is_multiple_of(policy.summarize_every)) || chat.estimated_tokens() > policy.token_limit
}

/// The message appended after a summary that lost the best trial.
pub fn best_anchor(score: f64, params: &ParamAssignment) -> ChatMessage {
    ChatMessage::user(format!(
        "Best score so far: {}. Best parameters so far: {}",
        format_number(score),
        params.to_prompt_string()
    ))
}

fn serialize_tail(chat: &ChatHistory) -> String {
    let list: Vec<Value> = chat.tail().iter().map(|m| json!({"role": m.role.as_str(), "content": m.content})).collect();
    to_prompt_string(&Value::Array(list))
}

fn parse_summary(text: &str) -> Result<Vec<ChatMessage>, String> {
    let items = extract_first_array(text).ok_or("no JSON list in the summary reply")?;
    let mut out = Vec::new();
    for item in items {
        let role = item.get("role").and_then(Value::as_str).ok_or("summary message without a role")?;
        let content = item.get("content").and_then(Value::as_str).ok_or("summary message without content")?;
        let role = match role.to_ascii_lowercase().as_str() {
            "assistant" => ChatRole::Assistant,
            "user" | "system" => ChatRole::User,
            other => return Err(format!("unknown summary role `{other}`")),
        };
        out.push(ChatMessage { role, content: content.to_string() });
    }
    if out.is_empty() {
        return Err("empty summary".into());
    }
    Ok(out)
}

/// Condenses everything after the system message into the LLM's summary.
/// The current best is re-anchored when the summary drops it. On error the
/// caller keeps its original history.
pub fn summarize(
    client: &LlmClient,
    chat: &ChatHistory,
    best: Option<(f64, &ParamAssignment)>,
) -> Result<ChatHistory, String> {
    let prompt = templates::render(templates::SUMMARIZE, &[("conversation_history", &serialize_tail(chat))])
        .map_err(|e| e.to_string())?;
    let reply = client.complete(&[chat.system().clone(), ChatMessage::user(prompt)]).map_err(|e| e.to_string())?;
    let summary = parse_summary(&reply.text)?;
    let mut out = ChatHistory::new(chat.system().clone());
    out.extend(summary);
    if let Some((score, params)) = best {
        if !(out.content_contains(&format_number(score)) && out.content_contains(&params.to_prompt_string())) {
            out.push(best_anchor(score, params));
        }
    }
    Ok(out)
}

/// Keeps the system message and the last `buffer_keep` messages.
pub fn rolling_trim(policy: &HistoryPolicy, chat: &ChatHistory) -> ChatHistory {
    let tail = chat.tail();
    let start = tail.len().saturating_sub(policy.buffer_keep);
    let mut out = ChatHistory::new(chat.system().clone());
    out.extend(tail[start..].iter().cloned());
    out
}

/// Appends one JSON line per trial and flushes after each.
pub struct LedgerWriter<W: Write> {
    out: W,
}

impl LedgerWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(Self::new(BufWriter::new(File::create(path)?)))
    }
}

impl<W: Write> LedgerWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn append(&mut self, record: &TrialRecord) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LedgerContents {
    pub records: Vec<TrialRecord>,
    /// 1-based line number and error of each unreadable line.
    pub skipped: Vec<(usize, String)>,
}

pub fn read_ledger_from(reader: impl BufRead) -> io::Result<LedgerContents> {
    let mut out = LedgerContents::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TrialRecord>(&line) {
            Ok(r) => out.records.push(r),
            Err(e) => out.skipped.push((i + 1, e.to_string())),
        }
    }
    Ok(out)
}

pub fn read_ledger(path: &Path) -> io::Result<LedgerContents> {
    read_ledger_from(BufReader::new(File::open(path)?))
}

/// Best score after each trial.
pub fn best_so_far(records: &[TrialRecord], direction: Direction) -> Vec<f64> {
    let mut best: Option<f64> = None;
    records
        .iter()
        .map(|r| {
            let b = match best {
                Some(b) if !direction.improves(r.score, b, 0.0) => b,
                _ => r.score,
            };
            best = Some(b);
            b
        })
        .collect()
}

/// Flat CSV export: trial columns plus one `params.<name>` column per
/// parameter seen anywhere in the ledger.
pub fn write_csv<W: Write>(records: &[TrialRecord], out: W) -> Result<(), csv::Error> {
    let names: IndexSet<&str> = records.iter().flat_map(|r| r.params.0.keys().map(String::as_str)).collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iteration".to_string()];
    header.extend(names.iter().map(|n| format!("params.{n}")));
    header.extend(["score", "source", "space_version", "reason", "timestamp"].map(String::from));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.iteration.to_string()];
        row.extend(names.iter().map(|n| r.params.get(n).map(|v| v.to_string()).unwrap_or_default()));
        row.push(r.score.to_string());
        row.push(r.source.as_str().to_string());
        row.push(r.space_version.to_string());
        row.push(r.reason.clone().unwrap_or_default());
        row.push(r.timestamp.map(|t| t.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_client::{MockFailure, MockProvider, MockStep, ProviderConfig};
    use crate::search_space::ParamValue;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn chat_with(n: usize) -> ChatHistory {
        let mut c = ChatHistory::new(ChatMessage::system("sys"));
        for i in 0..n {
            c.push(if i % 2 == 0 { ChatMessage::user(format!("u{i}")) } else { ChatMessage::assistant(format!("a{i}")) });
        }
        c
    }

    #[test]
    fn summarize_trigger() {
        let p = HistoryPolicy::default();
        let small = chat_with(2);
        assert!(should_summarize(&p, 10, &small));
        assert!(!should_summarize(&p, 7, &small));
        assert!(!should_summarize(&p, 0, &small));
        let mut big = small.clone();
        big.push(ChatMessage::user("x".repeat(40_000)));
        assert!(should_summarize(&p, 7, &big));
        let rolling = HistoryPolicy { mode: HistoryMode::RollingBuffer, ..p };
        assert!(!should_summarize(&rolling, 10, &small));
    }

    fn best() -> ParamAssignment {
        ParamAssignment::new().with("x", ParamValue::Float(0.25)).with("n", ParamValue::Int(7))
    }

    #[test]
    fn summary_replaces_tail_and_anchors_best() {
        let p = Arc::new(MockProvider::replies([r#"[{"role": "user", "content": "we tried things"}, {"role": "assistant", "content": "ok"}]"#]));
        let c = LlmClient::new(ProviderConfig::mock(), p.clone());
        let chat = chat_with(30);
        let b = best();
        let out = summarize(&c, &chat, Some((0.82, &b))).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out.system().content, "sys");
        assert!(out.content_contains("0.82"));
        assert!(out.content_contains(&b.to_prompt_string()));
        let sent = &p.calls()[0];
        assert_eq!(sent.len(), 2);
        assert!(sent[1].content.contains(r#"{"role": "assistant", "content": "a29"}"#));
    }

    #[test]
    fn summary_keeping_best_gets_no_anchor() {
        let b = best();
        let text = format!(r#"[{{"role": "user", "content": "best 0.82 with {}"}}]"#, b.to_prompt_string().replace('"', "\\\""));
        let c = LlmClient::new(ProviderConfig::mock(), Arc::new(MockProvider::replies([text])));
        assert_eq!(summarize(&c, &chat_with(4), Some((0.82, &b))).unwrap().len(), 2);
    }

    #[test]
    fn summary_failure_reports_error() {
        let mut cfg = ProviderConfig::mock();
        cfg.max_retries = 0;
        let c = LlmClient::new(cfg, Arc::new(MockProvider::new([MockStep::Fail(MockFailure::Transport)])));
        assert!(summarize(&c, &chat_with(4), None).is_err());
        let c = LlmClient::new(ProviderConfig::mock(), Arc::new(MockProvider::replies(["I cannot."])));
        assert!(summarize(&c, &chat_with(4), None).is_err());
    }

    #[test]
    fn trimming() {
        let p = HistoryPolicy { mode: HistoryMode::RollingBuffer, buffer_keep: 6, ..Default::default() };
        let t = rolling_trim(&p, &chat_with(12));
        assert_eq!(t.len(), 7);
        assert_eq!(t.tail()[0].content, "u6");
        assert_eq!(rolling_trim(&p, &chat_with(3)), chat_with(3));
        assert_eq!(rolling_trim(&p, &t), t);
    }

    fn record(i: u32, score: f64) -> TrialRecord {
        TrialRecord {
            iteration: i,
            params: best(),
            score,
            source: TrialSource::Tpe,
            space_version: 0,
            reason: None,
            timestamp: None,
        }
    }

    #[test]
    fn ledger_skips_corrupt_lines() {
        let mut w = LedgerWriter::new(Vec::new());
        for i in 0..5 {
            w.append(&record(i, i as f64)).unwrap();
        }
        let mut text = String::from_utf8(w.into_inner()).unwrap();
        text = text.replacen("{\"iteration\":2", "{\"iteration\":", 1);
        let read = read_ledger_from(text.as_bytes()).unwrap();
        assert_eq!(read.records.len(), 4);
        assert_eq!(read.skipped.len(), 1);
        assert_eq!(read.skipped[0].0, 3);
    }

    #[test]
    fn field_names() {
        let v = serde_json::to_value(record(0, 1.0)).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["iteration", "params", "score", "source", "space_version", "reason", "timestamp"]);
    }

    #[test]
    fn csv_columns() {
        let mut buf = Vec::new();
        write_csv(&[record(0, 1.5)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "iteration,params.x,params.n,score,source,space_version,reason,timestamp\n0,0.25,7,1.5,tpe,0,,\n");
    }

    #[test]
    fn best_curve() {
        let rs: Vec<_> = [3.0, 1.0, 2.0, 1.0, 0.5].iter().enumerate().map(|(i, s)| record(i as u32, *s)).collect();
        assert_eq!(best_so_far(&rs, Direction::Minimize), [3.0, 1.0, 1.0, 1.0, 0.5]);
        assert_eq!(best_so_far(&rs, Direction::Maximize), [3.0; 5]);
    }

    proptest! {
        #[test]
        fn ledger_round_trip(scores in proptest::collection::vec(-1e300..1e300f64, 0..20), reason in proptest::option::of("[ -~]{0,30}")) {
            let records: Vec<_> = scores.iter().enumerate().map(|(i, s)| TrialRecord { reason: reason.clone(), timestamp: Some(i as f64 * 0.5), ..record(i as u32, *s) }).collect();
            let mut w = LedgerWriter::new(Vec::new());
            for r in &records { w.append(r).unwrap(); }
            let back = read_ledger_from(&w.into_inner()[..]).unwrap();
            prop_assert!(back.skipped.is_empty());
            prop_assert_eq!(back.records, records);
        }

        #[test]
        fn summary_always_keeps_best(score in -1e6..1e6f64, x in -1e3..1e3f64, drop_all in any::<bool>()) {
            let b = ParamAssignment::new().with("x", ParamValue::Float(x));
            let reply = if drop_all { r#"[{"role": "user", "content": "nothing"}]"#.to_string() } else { r#"[{"role": "assistant", "content": "best was great"}]"#.to_string() };
            let c = LlmClient::new(ProviderConfig::mock(), Arc::new(MockProvider::replies([reply])));
            let out = summarize(&c, &chat_with(6), Some((score, &b))).unwrap();
            prop_assert!(out.content_contains(&format_number(score)));
            prop_assert!(out.content_contains(&b.to_prompt_string()));
        }
    }
}
