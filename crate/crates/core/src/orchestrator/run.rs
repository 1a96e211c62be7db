//! In-process runner, evaluation helpers and parameter sweeps.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::{Policy, TabularMdp};
use crate::query::oracle_answer;
use crate::reward::{reward_correlation, LabeledDataset};
use crate::rng::derived;

use super::config::ExperimentConfig;
use super::session::{stream, MetricsRecord, RunOutcome, Session};

/// A finished run: outcome, per-round metrics and the query log.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub outcome: RunOutcome,
    pub metrics: Vec<MetricsRecord>,
    pub session: Session,
}

/// Drives a [`Session`] to completion, answering queries with the scripted teacher.
pub fn run_opride(cfg: &ExperimentConfig) -> Result<RunReport> {
    run_session(Session::new(cfg.clone())?)
}

/// Finishes an already constructed session with the scripted teacher.
pub fn run_session(mut session: Session) -> Result<RunReport> {
    let seed = session.config().run.seed;
    let teacher = session.config().query.teacher;
    while !session.ready_to_finish() {
        let pending = session.prepare_query()?.clone();
        let round = pending.round;
        let label = oracle_answer(session.mdp(), &pending.pair, teacher, &mut derived(seed, stream::TEACHER, round as u64));
        session.answer(label).map_err(|e| e.in_round(round))?;
    }
    let outcome = session.finish()?.clone();
    Ok(RunReport {
        outcome,
        metrics: session.metrics().to_vec(),
        session,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyEvaluation {
    pub suboptimality: f64,
    pub reward_correlation: Option<f64>,
}

/// Exact suboptimality, plus reward correlation when learned rewards are supplied.
pub fn eval_policy(mdp: &TabularMdp, policy: &Policy, labeled: Option<&LabeledDataset>) -> Result<PolicyEvaluation> {
    Ok(PolicyEvaluation {
        suboptimality: crate::mdp::suboptimality(mdp, policy)?,
        reward_correlation: labeled.map(|l| reward_correlation(l, mdp.reward_table())),
    })
}

/// One axis of a sweep: a dotted key and the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl SweepAxis {
    /// Parses `key=v1,v2,...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep axis `{spec}` is not key=v1,v2")))?;
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if key.trim().is_empty() || values.is_empty() {
            return Err(Error::Config(format!("sweep axis `{spec}` has no key or values")));
        }
        Ok(Self {
            key: key.trim().to_string(),
            values,
        })
    }
}

/// Result of one (cell, seed) run.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub cell: usize,
    pub overrides: Vec<String>,
    pub seed: u64,
    pub result: std::result::Result<(Vec<MetricsRecord>, RunOutcome), String>,
}

/// Cross product of the axes as override lists, first axis slowest.
pub fn sweep_cells(axes: &[SweepAxis]) -> Vec<Vec<String>> {
    let mut cells = vec![Vec::new()];
    for axis in axes {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                axis.values.iter().map(move |v| {
                    let mut next = cell.clone();
                    next.push(format!("{}={}", axis.key, v));
                    next
                })
            })
            .collect();
    }
    cells
}

/// Runs every cell for every seed on at most `workers` threads.
///
/// All cells share the seed list, so cells are paired seed by seed. Failures
/// are recorded per run and do not stop the sweep.
pub fn sweep(base: &ExperimentConfig, axes: &[SweepAxis], seeds: &[u64], workers: usize) -> Result<Vec<SweepRun>> {
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let cells = sweep_cells(axes);
    let jobs: Vec<(usize, Vec<String>, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| seeds.iter().map(move |&s| (i, c.clone(), s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(|| {
        jobs.into_par_iter()
            .map(|(cell, overrides, seed)| {
                let result = base
                    .with_overrides(&overrides)
                    .map(|mut cfg| {
                        cfg.run.seed = seed;
                        cfg
                    })
                    .and_then(|cfg| run_opride(&cfg))
                    .map(|r| (r.metrics, r.outcome))
                    .map_err(|e| e.to_string());
                SweepRun {
                    cell,
                    overrides,
                    seed,
                    result,
                }
            })
            .collect()
    }))
}

/// Tidy CSV: one row per round plus a `final` row per run; failed runs get one `error` row.
pub fn write_sweep_csv<W: Write>(runs: &[SweepRun], mut out: W) -> Result<()> {
    writeln!(out, "cell,overrides,seed,stage,round,suboptimality,reward_correlation,error")?;
    for run in runs {
        let overrides = csv_field(&run.overrides.join(";"));
        match &run.result {
            Ok((metrics, outcome)) => {
                for m in metrics {
                    writeln!(
                        out,
                        "{},{},{},round,{},{},{},",
                        run.cell, overrides, run.seed, m.round, m.suboptimality, m.reward_correlation
                    )?;
                }
                writeln!(
                    out,
                    "{},{},{},final,{},{},{},",
                    run.cell,
                    overrides,
                    run.seed,
                    metrics.len(),
                    outcome.suboptimality,
                    outcome.reward_correlation
                )?;
            }
            Err(e) => writeln!(out, "{},{},{},error,,,,{}", run.cell, overrides, run.seed, csv_field(e))?,
        }
    }
    Ok(())
}

fn csv_field(text: &str) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

/// Metrics as JSON lines.
pub fn write_metrics<W: Write>(metrics: &[MetricsRecord], mut out: W) -> Result<()> {
    for m in metrics {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
