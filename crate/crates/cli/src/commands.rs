use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use hpo_core::bench::{run_matrix, MatrixObjective, MatrixSampler};
use hpo_core::history::{best_so_far, read_ledger, write_csv};
use hpo_core::study::{Incident, StudySink};
use hpo_core::{run_study, Direction, LedgerWriter, LlmClient, RunConfig, StopReason, Study, TrialRecord};
use serde_json::json;

use crate::{EXIT_CONFIG, EXIT_RUNTIME};

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

trait OrExit<T> {
    fn or_exit(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

struct FileSink {
    ledger: LedgerWriter<BufWriter<File>>,
    incidents: BufWriter<File>,
}

impl StudySink for FileSink {
    fn trial(&mut self, record: &TrialRecord) -> io::Result<()> {
        self.ledger.append(record)
    }

    fn incident(&mut self, incident: &Incident) -> io::Result<()> {
        serde_json::to_writer(&mut self.incidents, incident)?;
        self.incidents.write_all(b"\n")?;
        self.incidents.flush()
    }
}

fn prepare_output(cfg: &mut RunConfig, output: Option<&Path>) -> Result<PathBuf, Failure> {
    if let Some(o) = output {
        cfg.output.dir = o.to_path_buf();
    }
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display())).or_exit(EXIT_RUNTIME)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()).context("cannot write config snapshot").or_exit(EXIT_RUNTIME)?;
    Ok(dir)
}

pub fn run(config: &Path, overrides: &[String], output: Option<&Path>) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config, overrides).or_exit(EXIT_CONFIG)?;
    let space = cfg.search_space().or_exit(EXIT_CONFIG)?;
    let study_cfg = cfg.study_config();
    let client = if study_cfg.sampler.uses_llm() {
        Some(LlmClient::from_config(&cfg.sampler.provider).or_exit(EXIT_CONFIG)?)
    } else {
        None
    };
    let dir = prepare_output(&mut cfg, output)?;
    let create = |name: &str| File::create(dir.join(name)).with_context(|| format!("cannot create {name}")).or_exit(EXIT_RUNTIME);
    let mut sink = FileSink {
        ledger: LedgerWriter::new(BufWriter::new(create("trials.jsonl")?)),
        incidents: BufWriter::new(create("incidents.jsonl")?),
    };
    let task = cfg.task_description();
    let study = Study { config: &study_cfg, task: &task, space: &space, objective: &cfg.objective, client: client.as_ref() };
    log::info!("running {} for up to {} iterations", study_cfg.sampler.as_str(), study_cfg.max_iterations);
    let result = run_study(&study, &mut sink).or_exit(EXIT_CONFIG)?;

    write_csv(&result.trials, BufWriter::new(create("trials.csv")?)).context("cannot write trials.csv").or_exit(EXIT_RUNTIME)?;
    let summary = json!({
        "best_params": result.best_params.to_json(),
        "best_score": result.best_score,
        "stop_reason": result.stop_reason,
        "iterations": result.iterations,
        "wall_time_secs": result.wall_time.as_secs_f64(),
        "seed": study_cfg.seed,
        "sampler": study_cfg.sampler.as_str(),
        "direction": study_cfg.direction,
        "incidents": result.incidents.len(),
        "abort_message": result.abort_message,
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(dir.join("summary.json"), format!("{text}\n")).context("cannot write summary.json").or_exit(EXIT_RUNTIME)?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    if result.stop_reason == StopReason::Aborted {
        return Err(anyhow!(result.abort_message.unwrap_or_else(|| "study aborted".into()))).or_exit(EXIT_RUNTIME);
    }
    Ok(())
}

pub fn matrix(config: &Path, overrides: &[String], output: Option<&Path>) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config, overrides).or_exit(EXIT_CONFIG)?;
    let m = cfg.matrix.clone().ok_or_else(|| anyhow!("config error at `matrix`: a [matrix] block is required")).or_exit(EXIT_CONFIG)?;
    if m.samplers.iter().any(|s| s.uses_llm()) {
        LlmClient::from_config(&cfg.sampler.provider).or_exit(EXIT_CONFIG)?;
    }
    let objectives_spec = if m.objectives.is_empty() { vec![cfg.objective.clone()] } else { m.objectives.clone() };
    let mut objectives = Vec::new();
    for spec in objectives_spec {
        let space = cfg.space_for(&spec).or_exit(EXIT_CONFIG)?;
        objectives.push(MatrixObjective { label: spec.label(), spec, space });
    }
    let base = cfg.study_config();
    let samplers: Vec<MatrixSampler> = m
        .samplers
        .iter()
        .map(|k| MatrixSampler {
            label: k.as_str().to_string(),
            config: hpo_core::StudyConfig { sampler: *k, ..base.clone() },
            provider: Some(cfg.sampler.provider.clone()),
        })
        .collect();
    let dir = prepare_output(&mut cfg, output)?;
    let report = run_matrix(&cfg.task_description(), &samplers, &objectives, m.repeats);
    let create = |name: &str| File::create(dir.join(name)).with_context(|| format!("cannot create {name}")).or_exit(EXIT_RUNTIME);
    report.write_cells(create("cells.csv")?).context("cannot write cells.csv").or_exit(EXIT_RUNTIME)?;
    report.write_curves(create("curves.csv")?).context("cannot write curves.csv").or_exit(EXIT_RUNTIME)?;
    let failed = report.cells.iter().filter(|c| c.status != "ok").count();
    for c in report.cells.iter().filter(|c| c.status != "ok") {
        log::warn!("cell {} failed: {}", c.study_id, c.error);
    }
    println!("{}", json!({"cells": report.cells.len(), "failed": failed, "output": dir}));
    Ok(())
}

fn sibling_direction(ledger: &Path) -> Option<Direction> {
    let text = fs::read_to_string(ledger.parent()?.join("summary.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    serde_json::from_value(v.get("direction")?.clone()).ok()
}

pub fn history(ledger: &Path, csv: bool, direction: Option<Direction>) -> Result<(), Failure> {
    let contents = read_ledger(ledger).with_context(|| format!("cannot read {}", ledger.display())).or_exit(EXIT_RUNTIME)?;
    for (line, err) in &contents.skipped {
        eprintln!("warning: skipped line {line} of {}: {err}", ledger.display());
    }
    let direction = direction.or_else(|| sibling_direction(ledger)).unwrap_or_default();
    let best = best_so_far(&contents.records, direction);
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let header = ["iteration", "score", "best_so_far", "source"];
    let result = (|| -> io::Result<()> {
        if csv {
            writeln!(out, "{}", header.join(","))?;
            for (r, b) in contents.records.iter().zip(&best) {
                writeln!(out, "{},{},{},{}", r.iteration, r.score, b, r.source.as_str())?;
            }
        } else {
            writeln!(out, "{:>9}  {:>24}  {:>24}  {}", header[0], header[1], header[2], header[3])?;
            for (r, b) in contents.records.iter().zip(&best) {
                writeln!(out, "{:>9}  {:>24}  {:>24}  {}", r.iteration, r.score, b, r.source.as_str())?;
            }
        }
        out.flush()
    })();
    result.context("cannot write output").or_exit(EXIT_RUNTIME)?;
    if contents.records.is_empty() {
        return Err(anyhow!("no readable trials in {}", ledger.display())).or_exit(EXIT_RUNTIME);
    }
    Ok(())
}
