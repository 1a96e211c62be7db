//! Reward-free offline datasets and fixed-length query segments.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{rollout, value_iteration, Policy, TabularMdp, Trajectory, DEFAULT_TOL};
use crate::rng::{derived, sample_categorical};

const TRAJECTORY_STREAM: u64 = 0x7472_616a;

/// Behaviour mixture: a share of noisy scripted-optimal rollouts, the rest an
/// ε-greedy variant of that noisy policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorSpec {
    pub n_trajectories: usize,
    pub expert_fraction: f64,
    /// Probability that the scripted action is replaced by a uniform random one.
    pub expert_noise: f64,
    /// Random-action probability layered on top of the noisy expert.
    pub explore_epsilon: f64,
    pub horizon: usize,
}

impl Default for BehaviorSpec {
    fn default() -> Self {
        Self {
            n_trajectories: 1000,
            expert_fraction: 0.05,
            expert_noise: 0.1,
            explore_epsilon: 0.8,
            horizon: 40,
        }
    }
}

impl BehaviorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_trajectories == 0 || self.horizon == 0 {
            return Err(Error::invalid("n_trajectories and horizon must be positive"));
        }
        for (name, p) in [
            ("expert_fraction", self.expert_fraction),
            ("expert_noise", self.expert_noise),
            ("explore_epsilon", self.explore_epsilon),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }

    /// `(expert, explore)` trajectory counts.
    pub fn counts(&self) -> (usize, usize) {
        let expert = (self.expert_fraction * self.n_trajectories as f64).round() as usize;
        let expert = expert.min(self.n_trajectories);
        (expert, self.n_trajectories - expert)
    }
}

/// Trajectories without any reward information.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub source_mdp_hash: String,
    pub trajectories: Vec<Trajectory>,
}

/// A `(state, action, next_state)` sample taken from consecutive trajectory steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
}

impl OfflineDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Every step that has a successor. Final steps are dropped.
    pub fn transitions(&self) -> Vec<Transition> {
        self.trajectories
            .iter()
            .flat_map(|traj| {
                traj.steps.windows(2).map(|w| Transition {
                    state: w[0].0,
                    action: w[0].1,
                    next_state: w[1].0,
                })
            })
            .collect()
    }

    /// Behaviour counts over transition steps, row-major `(s, a)`.
    pub fn pair_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_states * self.n_actions];
        for t in self.transitions() {
            counts[t.state * self.n_actions + t.action] += 1;
        }
        counts
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = DatasetHeader {
            mdp_hash: self.source_mdp_hash.clone(),
            horizon: self.horizon,
            n: self.trajectories.len(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for traj in &self.trajectories {
            let line = TrajectoryLine {
                states: traj.steps.iter().map(|(s, _)| *s).collect(),
                actions: traj.steps.iter().map(|(_, a)| *a).collect(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads a dataset written by [`OfflineDataset::write_jsonl`], checking it
    /// was generated from `mdp`.
    pub fn read_jsonl<R: BufRead>(input: R, mdp: &TabularMdp) -> Result<Self> {
        let mut lines = input.lines();
        let header: DatasetHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::invalid("dataset file is empty")),
        };
        let expected = mdp.digest();
        if header.mdp_hash != expected {
            return Err(Error::HashMismatch {
                expected,
                found: header.mdp_hash,
            });
        }
        let mut trajectories = Vec::with_capacity(header.n);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TrajectoryLine = serde_json::from_str(&line)?;
            if parsed.states.len() != parsed.actions.len() || parsed.states.len() != header.horizon {
                return Err(Error::invalid("trajectory length does not match the header horizon"));
            }
            let traj = Trajectory::new(parsed.states.into_iter().zip(parsed.actions).collect())?;
            traj.validate(mdp)?;
            trajectories.push(traj);
        }
        if trajectories.len() != header.n {
            return Err(Error::invalid(format!(
                "header declares {} trajectories, found {}",
                header.n,
                trajectories.len()
            )));
        }
        Ok(Self {
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
            horizon: header.horizon,
            source_mdp_hash: expected,
            trajectories,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    mdp_hash: String,
    horizon: usize,
    n: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryLine {
    states: Vec<usize>,
    actions: Vec<usize>,
}

/// Mixes `policy` with the uniform policy: `(1 − eps)·policy + eps·uniform`.
pub fn epsilon_mix(policy: &Policy, eps: f64) -> Policy {
    let na = policy.n_actions();
    let table = policy
        .table()
        .iter()
        .map(|p| (1.0 - eps) * p + eps / na as f64)
        .collect();
    Policy::from_flat(na, table).expect("a mixture of stochastic rows is stochastic")
}

/// The noisy scripted policy and its ε-greedy variant.
pub fn behavior_policies(mdp: &TabularMdp, spec: &BehaviorSpec) -> Result<(Policy, Policy)> {
    let optimal = value_iteration(mdp, DEFAULT_TOL)?.greedy_policy();
    let expert = epsilon_mix(&optimal, spec.expert_noise);
    let explore = epsilon_mix(&expert, spec.explore_epsilon);
    Ok((expert, explore))
}

/// Generates the behaviour mixture. Each trajectory draws from its own child
/// seed, so the result does not depend on generation order.
pub fn generate_dataset<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    spec: &BehaviorSpec,
    rng: &mut R,
) -> Result<OfflineDataset> {
    spec.validate()?;
    let (expert, explore) = behavior_policies(mdp, spec)?;
    let (n_expert, _) = spec.counts();
    let master: u64 = rng.random();
    let trajectories = (0..spec.n_trajectories)
        .map(|n| {
            let pi = if n < n_expert { &expert } else { &explore };
            rollout(mdp, pi, spec.horizon, &mut derived(master, TRAJECTORY_STREAM, n as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OfflineDataset {
        n_states: mdp.n_states(),
        n_actions: mdp.n_actions(),
        horizon: spec.horizon,
        source_mdp_hash: mdp.digest(),
        trajectories,
    })
}

/// Two-step trajectories `(s, a) → (s', 0)` for every listed pair, `reps`
/// times each. Gives exact control over which pairs the data covers.
pub fn coverage_dataset<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    pairs: &[(usize, usize)],
    reps: usize,
    rng: &mut R,
) -> Result<OfflineDataset> {
    if pairs.is_empty() || reps == 0 {
        return Err(Error::invalid("coverage dataset needs pairs and reps"));
    }
    let mut trajectories = Vec::with_capacity(pairs.len() * reps);
    for &(s, a) in pairs {
        if s >= mdp.n_states() || a >= mdp.n_actions() {
            return Err(Error::invalid(format!("pair ({s},{a}) out of range")));
        }
        for _ in 0..reps {
            let next = sample_categorical(mdp.transition_row(s, a), rng);
            trajectories.push(Trajectory {
                steps: vec![(s, a), (next, 0)],
            });
        }
    }
    Ok(OfflineDataset {
        n_states: mdp.n_states(),
        n_actions: mdp.n_actions(),
        horizon: 2,
        source_mdp_hash: mdp.digest(),
        trajectories,
    })
}

/// A fixed-length window of one trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub trajectory_index: usize,
    pub start: usize,
    pub steps: Vec<(usize, usize)>,
}

impl Segment {
    pub fn key(&self) -> SegmentKey {
        SegmentKey {
            trajectory_index: self.trajectory_index,
            start: self.start,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Resolves a segment from its coordinates.
    pub fn resolve(dataset: &OfflineDataset, key: SegmentKey, length: usize) -> Result<Self> {
        let traj = dataset
            .trajectories
            .get(key.trajectory_index)
            .ok_or_else(|| Error::invalid(format!("no trajectory {}", key.trajectory_index)))?;
        let end = key.start + length;
        if length == 0 || end > traj.len() {
            return Err(Error::invalid(format!(
                "window [{}, {end}) outside trajectory of length {}",
                key.start,
                traj.len()
            )));
        }
        Ok(Self {
            trajectory_index: key.trajectory_index,
            start: key.start,
            steps: traj.steps[key.start..end].to_vec(),
        })
    }
}

/// `(trajectory_index, start)`: identifies a segment within a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentKey {
    pub trajectory_index: usize,
    pub start: usize,
}

/// Non-overlapping windows of length `length`; trailing remainders are dropped.
pub fn extract_segments(dataset: &OfflineDataset, length: usize) -> Result<Vec<Segment>> {
    if length == 0 || length > dataset.horizon {
        return Err(Error::invalid(format!(
            "segment length {length} must lie in 1..={}",
            dataset.horizon
        )));
    }
    let mut segments = Vec::with_capacity(dataset.len() * (dataset.horizon / length));
    for (index, traj) in dataset.trajectories.iter().enumerate() {
        for (k, window) in traj.steps.chunks_exact(length).enumerate() {
            segments.push(Segment {
                trajectory_index: index,
                start: k * length,
                steps: window.to_vec(),
            });
        }
    }
    Ok(segments)
}
