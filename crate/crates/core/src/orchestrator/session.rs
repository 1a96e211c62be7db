//! The query loop as a resumable state machine, shared by the in-process
//! runner and the label service.

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{extract_segments, generate_dataset, OfflineDataset, Segment};
use crate::envs::Geometry;
use crate::error::{Error, Result};
use crate::mdp::{value_iteration, Policy, TabularMdp, DEFAULT_TOL};
use crate::query::{
    pair_key, select_disagreement, select_ide, select_random, PairKey, QueryLogEntry, QueryPair, QueryPool, Strategy,
};
use crate::reward::{
    annotate, reward_correlation, train_ensemble_from, FeatureMap, PreferenceDataset, PreferenceRecord, RewardEnsemble,
};
use crate::rng::{derive_seed, derived};
use crate::solver::{extract_policy, train_value_functions, DiscountSchedule, SolverConfig};

use super::config::ExperimentConfig;

/// Independent random streams per purpose, indexed by round.
pub(crate) mod stream {
    pub const DATASET: u64 = 1;
    pub const REWARD: u64 = 2;
    pub const VALUES: u64 = 3;
    pub const POOL: u64 = 4;
    pub const SELECT: u64 = 5;
    pub const TEACHER: u64 = 6;
    pub const FINAL: u64 = 7;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    /// Suboptimality of the policy extracted from this round's value ensemble.
    pub suboptimality: f64,
    /// Occurrence-weighted Pearson correlation of the mean learned reward with the truth.
    pub reward_correlation: f64,
    pub score: f64,
    pub label: f64,
    pub wall_ms: u64,
}

/// What the loop produced after the last query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub policy: Policy,
    pub suboptimality: f64,
    pub reward_correlation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    AwaitingLabel,
    Training,
    Done,
}

/// A selected query waiting for its label.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingQuery {
    pub round: usize,
    pub pair: QueryPair,
    suboptimality: f64,
    reward_correlation: f64,
    started: Instant,
}

/// The environment and the offline dataset a run with `cfg` uses.
pub fn build_environment(cfg: &ExperimentConfig) -> Result<(TabularMdp, OfflineDataset)> {
    cfg.validate()?;
    let mdp = cfg.environment.build()?;
    let dataset = generate_dataset(&mdp, &cfg.dataset, &mut derived(cfg.run.seed, stream::DATASET, 0))?;
    Ok((mdp, dataset))
}

#[derive(Debug, Clone)]
pub struct Session {
    cfg: ExperimentConfig,
    mdp: TabularMdp,
    dataset: OfflineDataset,
    segments: Vec<Segment>,
    optimal_value: f64,
    prefs: PreferenceDataset,
    queried: HashSet<PairKey>,
    pending: Option<PendingQuery>,
    metrics: Vec<MetricsRecord>,
    log: Vec<QueryLogEntry>,
    outcome: Option<RunOutcome>,
    /// Heads from the latest reward fit, kept for warm starts.
    last_heads: Option<Vec<Vec<f64>>>,
    final_ensemble: Option<RewardEnsemble>,
}

impl Session {
    /// Builds the environment and the offline dataset. No training happens yet.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let (mdp, dataset) = build_environment(&cfg)?;
        Self::with_dataset(cfg, mdp, dataset)
    }

    /// Uses a prepared dataset, e.g. one read from disk.
    pub fn with_dataset(cfg: ExperimentConfig, mdp: TabularMdp, dataset: OfflineDataset) -> Result<Self> {
        cfg.validate()?;
        if dataset.source_mdp_hash != mdp.digest() {
            return Err(Error::HashMismatch {
                expected: mdp.digest(),
                found: dataset.source_mdp_hash.clone(),
            });
        }
        let segments = extract_segments(&dataset, cfg.query.segment_length)?;
        if segments.len() < 2 {
            return Err(Error::Config("dataset yields fewer than two segments".into()));
        }
        let optimal_value = value_iteration(&mdp, DEFAULT_TOL)?.v[mdp.start_state()];
        Ok(Self {
            cfg,
            mdp,
            dataset,
            segments,
            optimal_value,
            prefs: PreferenceDataset::new(),
            queried: HashSet::new(),
            pending: None,
            metrics: Vec::new(),
            log: Vec::new(),
            outcome: None,
            last_heads: None,
            final_ensemble: None,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn dataset(&self) -> &OfflineDataset {
        &self.dataset
    }

    pub fn geometry(&self) -> Geometry {
        self.cfg.environment.geometry()
    }

    pub fn budget(&self) -> usize {
        self.cfg.query.query_number
    }

    /// Labels received so far.
    pub fn labels(&self) -> usize {
        self.prefs.len()
    }

    pub fn preferences(&self) -> &PreferenceDataset {
        &self.prefs
    }

    pub fn pending(&self) -> Option<&PendingQuery> {
        self.pending.as_ref()
    }

    pub fn metrics(&self) -> &[MetricsRecord] {
        &self.metrics
    }

    pub fn query_log(&self) -> &[QueryLogEntry] {
        &self.log
    }

    pub fn outcome(&self) -> Option<&RunOutcome> {
        self.outcome.as_ref()
    }

    /// The reward ensemble behind the final policy, once finished.
    pub fn final_ensemble(&self) -> Option<&RewardEnsemble> {
        self.final_ensemble.as_ref()
    }

    /// Status between calls. Work in progress is the caller's to report.
    pub fn status(&self) -> SessionStatus {
        if self.outcome.is_some() {
            SessionStatus::Done
        } else if self.pending.is_some() {
            SessionStatus::AwaitingLabel
        } else {
            SessionStatus::Training
        }
    }

    /// Whether the next step is [`Session::finish`] rather than [`Session::prepare_query`].
    pub fn ready_to_finish(&self) -> bool {
        self.outcome.is_none() && self.prefs.len() == self.budget()
    }

    /// Trains on the labels so far and selects the next query.
    pub fn prepare_query(&mut self) -> Result<&PendingQuery> {
        if self.pending.is_some() {
            return Err(Error::Invariant("a query is already pending".into()));
        }
        if self.prefs.len() >= self.budget() {
            return Err(Error::Invariant("query budget exhausted".into()));
        }
        let round = self.prefs.len() + 1;
        let (pending, heads) = self.select(round).map_err(|e| e.in_round(round))?;
        self.last_heads = Some(heads);
        Ok(self.pending.insert(pending))
    }

    fn warm_heads(&self) -> Option<&[Vec<f64>]> {
        self.last_heads.as_deref().filter(|_| self.cfg.reward.warm_start)
    }

    fn select(&self, round: usize) -> Result<(PendingQuery, Vec<Vec<f64>>)> {
        let started = Instant::now();
        let seed = self.cfg.run.seed;
        let r = round as u64;
        let fmap = FeatureMap::one_hot(self.mdp.n_states(), self.mdp.n_actions());
        let ensemble = train_ensemble_from(
            &self.prefs,
            &fmap,
            &self.cfg.reward,
            self.warm_heads(),
            &mut derived(seed, stream::REWARD, r),
        )?;
        let labeled = annotate(&self.dataset, &ensemble)?;
        let solver = SolverConfig {
            steps: self.cfg.run.pretrain_steps_per_round * round,
            ..self.cfg.solver.clone()
        };
        let values = train_value_functions(
            &labeled,
            &DiscountSchedule::off(self.mdp.discount()),
            &solver,
            &mut derived(seed, stream::VALUES, r),
        )?;
        let policy = extract_policy(&labeled, &values, &solver);
        let suboptimality = self.suboptimality(&policy)?;
        let reward_correlation = reward_correlation(&labeled, self.mdp.reward_table());

        let pool = QueryPool::sample(
            &self.segments,
            self.cfg.query.pool_size,
            round,
            derive_seed(seed, stream::POOL, r),
        )?;
        let empty = HashSet::new();
        let excluded = if self.cfg.query.allow_repeat { &empty } else { &self.queried };
        let pair = match self.cfg.query.strategy {
            Strategy::Ide => select_ide(&pool, &values, solver.segment_scoring, excluded)?,
            Strategy::Random => select_random(&pool, excluded, &mut derived(seed, stream::SELECT, r))?,
            Strategy::Disagreement => select_disagreement(&pool, &ensemble, excluded)?,
        };
        let pending = PendingQuery {
            round,
            pair,
            suboptimality,
            reward_correlation,
            started,
        };
        Ok((pending, ensemble.heads))
    }

    /// Records the label for the pending query. Labels are 1 (first
    /// preferred), 0 (second preferred) or 0.5 (tie).
    pub fn answer(&mut self, label: f64) -> Result<()> {
        let pending = self
            .pending
            .take()
            .ok_or_else(|| Error::Invariant("no query is pending".into()))?;
        let record = PreferenceRecord::new(pending.pair.seg1.clone(), pending.pair.seg2.clone(), label, pending.round);
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                self.pending = Some(pending);
                return Err(e);
            }
        };
        self.prefs.push(record)?;
        self.queried.insert(pair_key(&pending.pair.seg1, &pending.pair.seg2));
        self.log.push(QueryLogEntry::new(
            pending.round,
            &pending.pair,
            label,
            &self.cfg.query.teacher.to_string(),
        ));
        self.metrics.push(MetricsRecord {
            round: pending.round,
            suboptimality: pending.suboptimality,
            reward_correlation: pending.reward_correlation,
            score: pending.pair.score,
            label,
            wall_ms: pending.started.elapsed().as_millis() as u64,
        });
        Ok(())
    }

    /// Retrains on all `K` labels with discount scheduling and extracts the final policy.
    pub fn finish(&mut self) -> Result<&RunOutcome> {
        if !self.ready_to_finish() {
            return Err(Error::Invariant(format!(
                "finish needs exactly {} labels and no outcome, have {}",
                self.budget(),
                self.prefs.len()
            )));
        }
        let seed = self.cfg.run.seed;
        let fmap = FeatureMap::one_hot(self.mdp.n_states(), self.mdp.n_actions());
        let ensemble = train_ensemble_from(
            &self.prefs,
            &fmap,
            &self.cfg.reward,
            self.warm_heads(),
            &mut derived(seed, stream::FINAL, 0),
        )?;
        let labeled = annotate(&self.dataset, &ensemble)?;
        let values = train_value_functions(
            &labeled,
            &self.cfg.discount_schedule(),
            &self.cfg.solver,
            &mut derived(seed, stream::FINAL, 1),
        )?;
        let policy = extract_policy(&labeled, &values, &self.cfg.solver);
        let outcome = RunOutcome {
            suboptimality: self.suboptimality(&policy)?,
            reward_correlation: reward_correlation(&labeled, self.mdp.reward_table()),
            policy,
        };
        self.final_ensemble = Some(ensemble);
        Ok(self.outcome.insert(outcome))
    }

    fn suboptimality(&self, policy: &Policy) -> Result<f64> {
        let own = crate::mdp::policy_evaluation(&self.mdp, policy, DEFAULT_TOL)?;
        Ok(self.optimal_value - own.v[self.mdp.start_state()])
    }
}
