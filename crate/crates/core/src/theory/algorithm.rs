//! MLE confidence sets, candidate policies, explorative pair selection and the query loop.

use std::collections::BTreeSet;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{BehaviorSpec, OfflineDataset};
use crate::error::{Error, Result};
use crate::mdp::{discounted_return, policy_evaluation, rollout, value_iteration, TabularMdp, Trajectory, DEFAULT_TOL};
use crate::query::TeacherMode;
use crate::reward::bt_probability;

use super::families::FiniteFamilies;
use super::pessimism::{default_epsilon, PessimismCache, TransitionSet};

/// A labeled pair of whole trajectories. `label` is 1 when the first is preferred.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPreference {
    pub first: Trajectory,
    pub second: Trajectory,
    pub label: f64,
}

/// Return differences `R(τ¹) − R(τ²)` for every hypothesis and every preference.
pub fn return_differences(families: &FiniteFamilies, discount: f64, prefs: &[TrajectoryPreference]) -> Vec<Vec<f64>> {
    families
        .returns
        .iter()
        .map(|r| {
            prefs
                .iter()
                .map(|p| {
                    discounted_return(r, families.n_actions, discount, &p.first)
                        - discounted_return(r, families.n_actions, discount, &p.second)
                })
                .collect()
        })
        .collect()
}

/// `−[y ln σ(d) + (1−y) ln σ(−d)]`, evaluated without overflow.
fn bt_nll(diff: f64, label: f64) -> f64 {
    let softplus = |x: f64| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    label * softplus(-diff) + (1.0 - label) * softplus(diff)
}

/// Index of the hypothesis with the lowest cross-entropy, lowest index on ties.
pub fn mle_return(diffs: &[Vec<f64>], prefs: &[TrajectoryPreference]) -> usize {
    let mut best = 0;
    let mut best_loss = f64::INFINITY;
    for (i, d) in diffs.iter().enumerate() {
        let loss: f64 = d.iter().zip(prefs).map(|(x, p)| bt_nll(*x, p.label)).sum();
        if loss < best_loss {
            best_loss = loss;
            best = i;
        }
    }
    best
}

/// `c₁ · sqrt(log(K·|ΔR|) / K)`.
pub fn default_beta(budget: usize, n_returns: usize, c1: f64) -> f64 {
    let k = budget.max(1) as f64;
    c1 * ((k * n_returns as f64).ln().max(0.0) / k).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceSet {
    pub member_indices: Vec<usize>,
    pub mle: usize,
    pub beta: f64,
    pub round: usize,
}

/// Hypotheses whose return differences stay within `beta` (in summed squares) of the MLE's.
pub fn confidence_set(diffs: &[Vec<f64>], prefs: &[TrajectoryPreference], beta: f64, round: usize) -> Result<ConfidenceSet> {
    if !(beta >= 0.0) {
        return Err(Error::invalid("beta must be non-negative"));
    }
    let mle = mle_return(diffs, prefs);
    let member_indices = diffs
        .iter()
        .enumerate()
        .filter(|(_, d)| d.iter().zip(&diffs[mle]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() <= beta)
        .map(|(i, _)| i)
        .collect();
    Ok(ConfidenceSet {
        member_indices,
        mle,
        beta,
        round,
    })
}

/// The distinct BCP policies of the confidence-set members, ascending.
pub fn candidate_policy_set(cset: &ConfidenceSet, cache: &PessimismCache) -> Vec<usize> {
    let set: BTreeSet<usize> = cset.member_indices.iter().map(|&r| cache.best_policy(r)).collect();
    set.into_iter().collect()
}

/// The pair `(π₁, π₂)` and rewards `(R₁, R₂)` maximizing
/// `(v̂^{π₁}_{R₁} − v̂^{π₁}_{R₂}) − (v̂^{π₂}_{R₁} − v̂^{π₂}_{R₂})`.
///
/// Ties go to the lexicographically smallest `(π₁, π₂, R₁, R₂)`.
pub fn select_exploratory_policies(pi_set: &[usize], cset: &ConfidenceSet, cache: &PessimismCache) -> Result<(usize, usize, f64)> {
    let first = *pi_set.first().ok_or_else(|| Error::invalid("policy set is empty"))?;
    let mut best = (first, first, 0.0);
    let mut best_key = (first, first, usize::MAX, usize::MAX);
    let mut best_score = f64::NEG_INFINITY;
    for &p1 in pi_set {
        for &p2 in pi_set {
            for &r1 in &cset.member_indices {
                for &r2 in &cset.member_indices {
                    let score = (cache.value(r1, p1) - cache.value(r2, p1)) - (cache.value(r1, p2) - cache.value(r2, p2));
                    let key = (p1, p2, r1, r2);
                    if score > best_score || (score == best_score && key < best_key) {
                        best_score = score;
                        best_key = key;
                        best = (p1, p2, score);
                    }
                }
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TheoryQueryMode {
    /// Roll each selected policy out in the environment.
    #[default]
    Online,
    /// Use the dataset trajectory whose state visits best overlap the policy's greedy rollout.
    Offline,
}

/// The dataset trajectory with the largest multiset overlap of visited states,
/// lowest index on ties.
pub fn nearest_dataset_trajectory<'a>(reference: &Trajectory, candidates: &'a [Trajectory], n_states: usize) -> Option<&'a Trajectory> {
    let mut want = vec![0usize; n_states];
    for s in reference.states() {
        want[s] += 1;
    }
    let mut best: Option<(usize, &Trajectory)> = None;
    for traj in candidates {
        let mut have = vec![0usize; n_states];
        for s in traj.states() {
            have[s] += 1;
        }
        let overlap: usize = want.iter().zip(&have).map(|(a, b)| *a.min(b)).sum();
        if best.is_none_or(|(o, _)| overlap > o) {
            best = Some((overlap, traj));
        }
    }
    best.map(|b| b.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub budget: usize,
    pub horizon: usize,
    pub c1: f64,
    pub c2: f64,
    /// Overrides the default β when set.
    pub beta: Option<f64>,
    /// Overrides the default ε when set.
    pub epsilon: Option<f64>,
    pub teacher: TeacherMode,
    pub query_mode: TheoryQueryMode,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            budget: 16,
            horizon: 20,
            c1: 2.0,
            c2: 2.0,
            beta: None,
            epsilon: None,
            teacher: TeacherMode::Stochastic,
            query_mode: TheoryQueryMode::Online,
        }
    }
}

/// Offline data for the loop: transitions for pessimism, trajectories for offline queries.
#[derive(Debug, Clone)]
pub struct TheoryData {
    pub transitions: TransitionSet,
    pub trajectories: Vec<Trajectory>,
}

impl TheoryData {
    pub fn from_dataset(dataset: &OfflineDataset) -> Result<Self> {
        Ok(Self {
            transitions: TransitionSet::from_dataset(dataset)?,
            trajectories: dataset.trajectories.clone(),
        })
    }

    /// Generates a behaviour dataset for `mdp` and wraps it.
    pub fn generate<R: Rng + ?Sized>(mdp: &TabularMdp, spec: &BehaviorSpec, rng: &mut R) -> Result<Self> {
        Self::from_dataset(&crate::dataset::generate_dataset(mdp, spec, rng)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryRoundRecord {
    pub round: usize,
    pub beta: f64,
    pub cset_size: usize,
    pub pi_set_size: usize,
    pub pair: [usize; 2],
    pub score: f64,
    pub label: f64,
    pub subopt_running: f64,
}

/// Uniform mixture over selected policies, executed by drawing one
/// component per episode.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePolicy {
    pub components: Vec<usize>,
}

impl MixturePolicy {
    /// Mean start-state value of the components under the true reward.
    pub fn value(&self, policy_values: &[f64]) -> f64 {
        self.components.iter().map(|&p| policy_values[p]).sum::<f64>() / self.components.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryOutcome {
    pub mixture: MixturePolicy,
    pub records: Vec<TheoryRoundRecord>,
    pub preferences: Vec<TrajectoryPreference>,
    pub subopt: f64,
    pub epsilon: f64,
    pub truncation_error: f64,
}

impl TheoryOutcome {
    pub fn write_records<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// `k,subopt` rows: the running mixture's suboptimality after each round.
    pub fn write_subopt_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "k,subopt")?;
        for r in &self.records {
            writeln!(out, "{},{}", r.round, r.subopt_running)?;
        }
        Ok(())
    }
}

/// Runs the query loop for `config.budget` rounds and returns the averaged mixture.
pub fn run_theory_loop<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    families: &FiniteFamilies,
    data: &TheoryData,
    config: &TheoryConfig,
    rng: &mut R,
) -> Result<TheoryOutcome> {
    if config.budget == 0 || config.horizon == 0 {
        return Err(Error::invalid("budget and horizon must be at least 1"));
    }
    if families.n_states != mdp.n_states() || families.n_actions != mdp.n_actions() {
        return Err(Error::invalid("families do not match the MDP"));
    }
    if config.query_mode == TheoryQueryMode::Offline && data.trajectories.is_empty() {
        return Err(Error::invalid("offline query mode needs dataset trajectories"));
    }
    let gamma = mdp.discount();
    let epsilon = config.epsilon.unwrap_or_else(|| {
        default_epsilon(data.transitions.n_samples, families.policies.len(), families.qfuncs.len(), config.c2)
    });
    let beta = config.beta.unwrap_or_else(|| default_beta(config.budget, families.returns.len(), config.c1));
    let cache = PessimismCache::build(families, mdp, &data.transitions, epsilon)?;

    let optimal = value_iteration(mdp, DEFAULT_TOL)?.v[mdp.start_state()];
    let policy_values = (0..families.policies.len())
        .map(|p| Ok(policy_evaluation(mdp, &families.policy(p), DEFAULT_TOL)?.v[mdp.start_state()]))
        .collect::<Result<Vec<f64>>>()?;

    let mut prefs: Vec<TrajectoryPreference> = Vec::with_capacity(config.budget);
    let mut records = Vec::with_capacity(config.budget);
    let mut mixture = MixturePolicy { components: Vec::with_capacity(2 * config.budget) };
    for round in 1..=config.budget {
        let mut step = || -> Result<()> {
            let diffs = return_differences(families, gamma, &prefs);
            let cset = confidence_set(&diffs, &prefs, beta, round)?;
            let pi_set = candidate_policy_set(&cset, &cache);
            let (p1, p2, score) = select_exploratory_policies(&pi_set, &cset, &cache)?;
            let first = query_trajectory(mdp, families, data, config, p1, rng)?;
            let second = query_trajectory(mdp, families, data, config, p2, rng)?;
            let label = teacher_label(mdp, &first, &second, config.teacher, rng);
            prefs.push(TrajectoryPreference { first, second, label });
            mixture.components.extend([p1, p2]);
            records.push(TheoryRoundRecord {
                round,
                beta,
                cset_size: cset.member_indices.len(),
                pi_set_size: pi_set.len(),
                pair: [p1, p2],
                score,
                label,
                subopt_running: optimal - mixture.value(&policy_values),
            });
            Ok(())
        };
        step().map_err(|e| e.in_round(round))?;
    }
    let subopt = optimal - mixture.value(&policy_values);
    Ok(TheoryOutcome {
        mixture,
        records,
        preferences: prefs,
        subopt,
        epsilon,
        truncation_error: crate::mdp::truncation_error(gamma, config.horizon),
    })
}

fn query_trajectory<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    families: &FiniteFamilies,
    data: &TheoryData,
    config: &TheoryConfig,
    policy: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    let traj = rollout(mdp, &families.policy(policy), config.horizon, rng)?;
    match config.query_mode {
        TheoryQueryMode::Online => Ok(traj),
        TheoryQueryMode::Offline => Ok(nearest_dataset_trajectory(&traj, &data.trajectories, mdp.n_states())
            .expect("checked non-empty")
            .clone()),
    }
}

fn teacher_label<R: Rng + ?Sized>(mdp: &TabularMdp, first: &Trajectory, second: &Trajectory, mode: TeacherMode, rng: &mut R) -> f64 {
    let r1 = crate::mdp::true_return(mdp, first);
    let r2 = crate::mdp::true_return(mdp, second);
    match mode {
        TeacherMode::Deterministic => {
            if r1 > r2 {
                1.0
            } else if r1 < r2 {
                0.0
            } else {
                0.5
            }
        }
        TeacherMode::Stochastic => {
            if rng.random::<f64>() < bt_probability(r1, r2) {
                1.0
            } else {
                0.0
            }
        }
    }
}
