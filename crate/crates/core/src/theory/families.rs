//! Enumerable hypothesis families: reward tables, q tables and deterministic policies.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{policy_evaluation_with_reward, Policy, TabularMdp, DEFAULT_TOL};

/// Largest policy family [`all_deterministic_policies`] will enumerate.
pub const MAX_POLICIES: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteFamilies {
    pub n_states: usize,
    pub n_actions: usize,
    /// Reward tables; each induces the return `R(τ) = Σ γ^t r(s_t, a_t)`.
    pub returns: Vec<Vec<f64>>,
    /// Row-major q tables.
    pub qfuncs: Vec<Vec<f64>>,
    /// Deterministic policies as one action per state.
    pub policies: Vec<Vec<usize>>,
    /// Position of the true reward in `returns`, when present.
    pub true_return: Option<usize>,
}

impl FiniteFamilies {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        returns: Vec<Vec<f64>>,
        qfuncs: Vec<Vec<f64>>,
        policies: Vec<Vec<usize>>,
        true_return: Option<usize>,
    ) -> Result<Self> {
        if returns.is_empty() || qfuncs.is_empty() || policies.is_empty() {
            return Err(Error::invalid("hypothesis families must be non-empty"));
        }
        let pairs = n_states * n_actions;
        if returns.iter().chain(&qfuncs).any(|t| t.len() != pairs || t.iter().any(|x| !x.is_finite())) {
            return Err(Error::invalid("reward and q tables must be finite (s,a) tables"));
        }
        if policies.iter().any(|p| p.len() != n_states || p.iter().any(|a| *a >= n_actions)) {
            return Err(Error::invalid("policies must pick a valid action in every state"));
        }
        if matches!(true_return, Some(i) if i >= returns.len()) {
            return Err(Error::invalid("true_return index out of range"));
        }
        Ok(Self {
            n_states,
            n_actions,
            returns,
            qfuncs,
            policies,
            true_return,
        })
    }

    pub fn policy(&self, index: usize) -> Policy {
        Policy::deterministic(&self.policies[index], self.n_actions)
    }

    /// `q(s, π(s))` for a deterministic policy.
    pub fn q_at(&self, q: usize, pi: usize, s: usize) -> f64 {
        self.qfuncs[q][s * self.n_actions + self.policies[pi][s]]
    }
}

/// Every deterministic policy, in lexicographic order of action vectors.
pub fn all_deterministic_policies(n_states: usize, n_actions: usize) -> Result<Vec<Vec<usize>>> {
    let count = (n_actions as u128).checked_pow(n_states as u32).unwrap_or(u128::MAX);
    if count > MAX_POLICIES as u128 {
        return Err(Error::invalid(format!(
            "{n_actions}^{n_states} deterministic policies exceeds the cap of {MAX_POLICIES}"
        )));
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut current = vec![0usize; n_states];
    loop {
        out.push(current.clone());
        let mut pos = n_states;
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            current[pos] += 1;
            if current[pos] < n_actions {
                break;
            }
            current[pos] = 0;
        }
    }
}

/// Recipe for [`generate_families`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilySpec {
    pub n_returns: usize,
    pub n_qfuncs: usize,
    /// Share of reward entries changed in each perturbed hypothesis.
    pub perturb_fraction: f64,
    /// Changed entries move by `±perturb_shift`, sign drawn per entry.
    pub perturb_shift: f64,
    /// Extra q tables are `Q^π_R` with `R` the true table plus `U(-x, x)` noise.
    pub q_reward_noise: f64,
    /// Include the true reward and `Q^π_true` for every policy.
    pub realizable: bool,
}

impl Default for FamilySpec {
    fn default() -> Self {
        Self {
            n_returns: 8,
            n_qfuncs: 64,
            perturb_fraction: 0.5,
            perturb_shift: 4.0,
            q_reward_noise: 0.5,
            realizable: true,
        }
    }
}

/// Builds reward, q and policy families for `mdp`.
///
/// Rewards are the true table (in realizable mode, at a random position)
/// plus copies with a random subset of entries shifted up or down. The q
/// family is `Q^π_true` for every policy in realizable mode, topped up with
/// exact `Q^π_R` for random policies and rewards jittered around the truth.
///
/// Shifts well above the reward scale keep wrong hypotheses identifiable
/// from a few labels. Jittered q tables give the Bellman-error comparison
/// near neighbours to the true ones; without them nearly every q table is
/// its own best fit and pessimism degenerates.
pub fn generate_families<R: Rng + ?Sized>(mdp: &TabularMdp, spec: &FamilySpec, rng: &mut R) -> Result<FiniteFamilies> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    if spec.n_returns == 0 || spec.n_qfuncs == 0 {
        return Err(Error::invalid("family sizes must be positive"));
    }
    if !(0.0..=1.0).contains(&spec.perturb_fraction)
        || !(spec.perturb_shift.is_finite() && spec.perturb_shift >= 0.0)
        || !(spec.q_reward_noise.is_finite() && spec.q_reward_noise >= 0.0)
    {
        return Err(Error::invalid("perturbation settings must be finite, non-negative, fraction at most 1"));
    }
    let policies = all_deterministic_policies(ns, na)?;
    let truth = mdp.reward_table().to_vec();
    let n_perturbed = if spec.realizable { spec.n_returns - 1 } else { spec.n_returns };
    let mut returns: Vec<Vec<f64>> = (0..n_perturbed)
        .map(|_| {
            let mut table = truth.clone();
            let k = ((spec.perturb_fraction * table.len() as f64).round() as usize).clamp(1, table.len());
            let mut idx: Vec<usize> = (0..table.len()).collect();
            idx.shuffle(rng);
            for &i in &idx[..k] {
                table[i] += if rng.random::<bool>() { spec.perturb_shift } else { -spec.perturb_shift };
            }
            table
        })
        .collect();
    let true_return = if spec.realizable {
        let pos = rng.random_range(0..=returns.len());
        returns.insert(pos, truth.clone());
        Some(pos)
    } else {
        None
    };

    let evaluate = |reward: &[f64], pi: &[usize]| -> Result<Vec<f64>> {
        Ok(policy_evaluation_with_reward(mdp, reward, &Policy::deterministic(pi, na), DEFAULT_TOL)?.q)
    };
    let mut qfuncs = Vec::with_capacity(spec.n_qfuncs);
    if spec.realizable {
        for pi in &policies {
            if qfuncs.len() == spec.n_qfuncs {
                break;
            }
            qfuncs.push(evaluate(&truth, pi)?);
        }
    }
    while qfuncs.len() < spec.n_qfuncs {
        let r: Vec<f64> = truth
            .iter()
            .map(|x| x + spec.q_reward_noise * rng.random_range(-1.0..=1.0))
            .collect();
        let pi = &policies[rng.random_range(0..policies.len())];
        qfuncs.push(evaluate(&r, pi)?);
    }
    FiniteFamilies::new(ns, na, returns, qfuncs, policies, true_return)
}
