//! Finite tabular MDPs, policies and exact dynamic-programming oracles.
//!
//! Every learned quantity elsewhere in the crate is checked against the
//! solvers in this module: [`value_iteration`] for the optimal values and
//! [`policy_evaluation`] for the value of an arbitrary stationary policy.
//! Values are infinite-horizon discounted; trajectory returns are truncated
//! at the trajectory length.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::sample_categorical;

/// Default tolerance for all DP solves.
pub const DEFAULT_TOL: f64 = 1e-8;

const STOCHASTIC_TOL: f64 = 1e-9;
const EXTRA_ITERATIONS: usize = 16;

/// An exact finite MDP with a known reward table in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Flat `(s, a, s')` row-major.
    transition: Vec<f64>,
    /// Flat `(s, a)` row-major.
    reward: Vec<f64>,
    discount: f64,
    start_state: usize,
}

/// Wire form: nested arrays, as written to disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MdpDocument {
    n_states: usize,
    n_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    discount: f64,
    start_state: usize,
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        TabularMdp::new(
            doc.n_states,
            doc.n_actions,
            doc.transition,
            doc.reward,
            doc.discount,
            doc.start_state,
        )
    }
}

impl From<TabularMdp> for MdpDocument {
    fn from(mdp: TabularMdp) -> Self {
        let (ns, na) = (mdp.n_states, mdp.n_actions);
        let transition = (0..ns)
            .map(|s| (0..na).map(|a| mdp.transition_row(s, a).to_vec()).collect())
            .collect();
        let reward = (0..ns)
            .map(|s| mdp.reward[s * na..(s + 1) * na].to_vec())
            .collect();
        MdpDocument {
            n_states: ns,
            n_actions: na,
            transition,
            reward,
            discount: mdp.discount,
            start_state: mdp.start_state,
        }
    }
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        discount: f64,
        start_state: usize,
    ) -> Result<Self> {
        if transition.len() != n_states || reward.len() != n_states {
            return Err(Error::invalid("transition/reward must have n_states rows"));
        }
        let mut flat_t = Vec::with_capacity(n_states * n_actions * n_states);
        for (s, per_action) in transition.into_iter().enumerate() {
            if per_action.len() != n_actions {
                return Err(Error::invalid(format!("state {s}: expected {n_actions} actions")));
            }
            for (a, row) in per_action.into_iter().enumerate() {
                if row.len() != n_states {
                    return Err(Error::invalid(format!(
                        "transition({s},{a}) has {} successors, expected {n_states}",
                        row.len()
                    )));
                }
                flat_t.extend(row);
            }
        }
        let mut flat_r = Vec::with_capacity(n_states * n_actions);
        for (s, row) in reward.into_iter().enumerate() {
            if row.len() != n_actions {
                return Err(Error::invalid(format!("reward row {s} has wrong length")));
            }
            flat_r.extend(row);
        }
        Self::from_flat(n_states, n_actions, flat_t, flat_r, discount, start_state)
    }

    /// Builds an MDP from row-major flat tables, validating every invariant.
    pub fn from_flat(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
        start_state: usize,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("n_states and n_actions must be positive"));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::invalid("transition tensor has wrong size"));
        }
        if reward.len() != n_states * n_actions {
            return Err(Error::invalid("reward table has wrong size"));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::invalid(format!("discount {discount} not in (0,1)")));
        }
        if start_state >= n_states {
            return Err(Error::invalid("start_state out of range"));
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::invalid(format!(
                    "transition({},{}) has a negative or non-finite entry",
                    i / n_actions,
                    i % n_actions
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::invalid(format!(
                    "transition({},{}) sums to {total}",
                    i / n_actions,
                    i % n_actions
                )));
            }
        }
        if let Some(r) = reward.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::invalid(format!("reward {r} outside [0,1]")));
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            discount,
            start_state,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn start_state(&self) -> usize {
        self.start_state
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// Row-major `(s, a)` reward table.
    pub fn reward_table(&self) -> &[f64] {
        &self.reward
    }

    pub fn is_deterministic(&self) -> bool {
        self.transition.iter().all(|p| *p == 0.0 || *p == 1.0)
    }

    /// Content digest over the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("MDP serialization is infallible");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("MDP serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    fn check_reward_len(&self, reward: &[f64]) -> Result<()> {
        if reward.len() != self.n_pairs() {
            return Err(Error::invalid(format!(
                "reward table has {} entries, expected {}",
                reward.len(),
                self.n_pairs()
            )));
        }
        Ok(())
    }

    fn iteration_cap(&self, reward: &[f64], tol: f64) -> usize {
        let r_max = reward.iter().fold(1.0_f64, |m, r| m.max(r.abs()));
        let gamma = self.discount;
        let n = ((tol * (1.0 - gamma) / r_max).ln() / gamma.ln()).ceil();
        n.max(1.0) as usize + EXTRA_ITERATIONS
    }

    /// `Σ_{s'} P(s'|s,a) · values(s')`.
    pub fn expected_next(&self, s: usize, a: usize, values: &[f64]) -> f64 {
        self.transition_row(s, a)
            .iter()
            .zip(values)
            .map(|(p, v)| p * v)
            .sum()
    }
}

/// A stationary stochastic policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyDocument", into = "PolicyDocument")]
pub struct Policy {
    n_actions: usize,
    action_prob: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyDocument {
    action_prob: Vec<Vec<f64>>,
}

impl TryFrom<PolicyDocument> for Policy {
    type Error = Error;

    fn try_from(doc: PolicyDocument) -> Result<Self> {
        Policy::from_rows(doc.action_prob)
    }
}

impl From<Policy> for PolicyDocument {
    fn from(p: Policy) -> Self {
        PolicyDocument {
            action_prob: p.action_prob.chunks(p.n_actions).map(<[f64]>::to_vec).collect(),
        }
    }
}

impl Policy {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_actions = rows.first().map(Vec::len).unwrap_or(0);
        if n_actions == 0 {
            return Err(Error::invalid("policy needs at least one state and action"));
        }
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(Error::invalid("ragged policy rows"));
        }
        Self::from_flat(n_actions, rows.into_iter().flatten().collect())
    }

    pub fn from_flat(n_actions: usize, action_prob: Vec<f64>) -> Result<Self> {
        if n_actions == 0 || action_prob.is_empty() || !action_prob.len().is_multiple_of(n_actions) {
            return Err(Error::invalid("policy table has wrong shape"));
        }
        for (s, row) in action_prob.chunks(n_actions).enumerate() {
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::invalid(format!("policy row {s} has a negative entry")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::invalid(format!("policy row {s} sums to {total}")));
            }
        }
        Ok(Self {
            n_actions,
            action_prob,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            action_prob: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut action_prob = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            assert!(a < n_actions, "action {a} out of range");
            action_prob[s * n_actions + a] = 1.0;
        }
        Self {
            n_actions,
            action_prob,
        }
    }

    /// Greedy policy over a row-major q table; ties go to the lowest action.
    pub fn greedy(q: &[f64], n_actions: usize) -> Self {
        let actions: Vec<usize> = q.chunks(n_actions).map(argmax).collect();
        Self::deterministic(&actions, n_actions)
    }

    pub fn n_states(&self) -> usize {
        self.action_prob.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.action_prob[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.action_prob[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn table(&self) -> &[f64] {
        &self.action_prob
    }

    /// The action if this policy is deterministic at `s`.
    pub fn deterministic_action(&self, s: usize) -> Option<usize> {
        let row = self.row(s);
        row.iter().position(|p| *p == 1.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_categorical(self.row(s), rng)
    }

    /// `Σ_a π(a|s) q(s,a)`.
    pub fn expectation(&self, s: usize, q_row: &[f64]) -> f64 {
        self.row(s).iter().zip(q_row).map(|(p, q)| p * q).sum()
    }

    fn check_shape(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states() != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(Error::invalid("policy shape does not match MDP"));
        }
        Ok(())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// State and action values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub n_actions: usize,
    pub v: Vec<f64>,
    /// Row-major `(s, a)`.
    pub q: Vec<f64>,
}

impl ValueTable {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn q_row(&self, s: usize) -> &[f64] {
        &self.q[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn greedy_policy(&self) -> Policy {
        Policy::greedy(&self.q, self.n_actions)
    }
}

/// An ordered list of `(state, action)` steps.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize)>,
}

impl Trajectory {
    pub fn new(steps: Vec<(usize, usize)>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::invalid("trajectory must have at least one step"));
        }
        Ok(Self { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().map(|(s, _)| *s)
    }

    pub fn validate(&self, mdp: &TabularMdp) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::invalid("empty trajectory"));
        }
        match self
            .steps
            .iter()
            .find(|(s, a)| *s >= mdp.n_states() || *a >= mdp.n_actions())
        {
            Some((s, a)) => Err(Error::invalid(format!("step ({s},{a}) out of range"))),
            None => Ok(()),
        }
    }
}

/// Optimal values by value iteration on the MDP's own reward.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<ValueTable> {
    value_iteration_with_reward(mdp, mdp.reward_table(), tol)
}

/// Value iteration under an arbitrary (possibly out-of-range) reward table.
pub fn value_iteration_with_reward(mdp: &TabularMdp, reward: &[f64], tol: f64) -> Result<ValueTable> {
    mdp.check_reward_len(reward)?;
    if !(tol > 0.0) {
        return Err(Error::invalid("tol must be positive"));
    }
    let (ns, na, gamma) = (mdp.n_states(), mdp.n_actions(), mdp.discount());
    let cap = mdp.iteration_cap(reward, tol);
    let stop = tol * (1.0 - gamma);
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    let mut residual = f64::INFINITY;
    for _ in 0..cap {
        for s in 0..ns {
            for a in 0..na {
                q[s * na + a] = reward[s * na + a] + gamma * mdp.expected_next(s, a, &v);
            }
        }
        residual = 0.0;
        for s in 0..ns {
            let best = q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            residual = f64::max(residual, (best - v[s]).abs());
            v[s] = best;
        }
        if residual <= stop {
            // One more backup so q is consistent with the returned v.
            for s in 0..ns {
                for a in 0..na {
                    q[s * na + a] = reward[s * na + a] + gamma * mdp.expected_next(s, a, &v);
                }
                v[s] = q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            }
            return Ok(ValueTable { n_actions: na, v, q });
        }
    }
    Err(Error::NonConvergence {
        solver: "value_iteration",
        iterations: cap,
        residual,
        tol,
    })
}

/// Fixed point of the Bellman evaluation operator for `pi`.
pub fn policy_evaluation(mdp: &TabularMdp, pi: &Policy, tol: f64) -> Result<ValueTable> {
    policy_evaluation_with_reward(mdp, mdp.reward_table(), pi, tol)
}

pub fn policy_evaluation_with_reward(
    mdp: &TabularMdp,
    reward: &[f64],
    pi: &Policy,
    tol: f64,
) -> Result<ValueTable> {
    mdp.check_reward_len(reward)?;
    pi.check_shape(mdp)?;
    if !(tol > 0.0) {
        return Err(Error::invalid("tol must be positive"));
    }
    let (ns, na, gamma) = (mdp.n_states(), mdp.n_actions(), mdp.discount());
    let cap = mdp.iteration_cap(reward, tol);
    let stop = tol * (1.0 - gamma);
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    let mut residual = f64::INFINITY;
    let backup = |v: &[f64], q: &mut [f64]| {
        for s in 0..ns {
            for a in 0..na {
                q[s * na + a] = reward[s * na + a] + gamma * mdp.expected_next(s, a, v);
            }
        }
    };
    for _ in 0..cap {
        backup(&v, &mut q);
        residual = 0.0;
        for s in 0..ns {
            let next = pi.expectation(s, &q[s * na..(s + 1) * na]);
            residual = f64::max(residual, (next - v[s]).abs());
            v[s] = next;
        }
        if residual <= stop {
            backup(&v, &mut q);
            for (s, vs) in v.iter_mut().enumerate() {
                *vs = pi.expectation(s, &q[s * na..(s + 1) * na]);
            }
            return Ok(ValueTable { n_actions: na, v, q });
        }
    }
    Err(Error::NonConvergence {
        solver: "policy_evaluation",
        iterations: cap,
        residual,
        tol,
    })
}

/// Samples exactly `horizon` steps from the start state.
pub fn rollout<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    pi: &Policy,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    pi.check_shape(mdp)?;
    let mut s = mdp.start_state();
    let mut steps = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let a = pi.sample(s, rng);
        steps.push((s, a));
        if t + 1 < horizon {
            s = sample_categorical(mdp.transition_row(s, a), rng);
        }
    }
    Ok(Trajectory { steps })
}

/// `Σ_t γ^t r(s_t, a_t)` under the true reward.
pub fn true_return(mdp: &TabularMdp, traj: &Trajectory) -> f64 {
    discounted_return(mdp.reward_table(), mdp.n_actions(), mdp.discount(), traj)
}

pub fn discounted_return(reward: &[f64], n_actions: usize, gamma: f64, traj: &Trajectory) -> f64 {
    let mut total = 0.0;
    let mut weight = 1.0;
    for &(s, a) in &traj.steps {
        total += weight * reward[s * n_actions + a];
        weight *= gamma;
    }
    total
}

/// Upper bound on the mass a horizon-`h` truncation drops, for rewards in `[0,1]`.
pub fn truncation_error(gamma: f64, horizon: usize) -> f64 {
    gamma.powi(horizon as i32) / (1.0 - gamma)
}

/// `V*(s₀) − V^π(s₀)` at [`DEFAULT_TOL`].
pub fn suboptimality(mdp: &TabularMdp, pi: &Policy) -> Result<f64> {
    let optimal = value_iteration(mdp, DEFAULT_TOL)?;
    let own = policy_evaluation(mdp, pi, DEFAULT_TOL)?;
    let s0 = mdp.start_state();
    Ok(optimal.v[s0] - own.v[s0])
}
