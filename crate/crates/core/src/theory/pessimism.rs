//! Bellman-consistent pessimism over finite q and policy families.

use std::collections::BTreeMap;

use crate::dataset::OfflineDataset;
use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

use super::families::FiniteFamilies;

/// Membership slack absorbing rounding in the Bellman-consistency gap.
const MEMBERSHIP_SLACK: f64 = 1e-12;

/// Weighted `(s, a, s')` samples. Duplicates are merged on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSet {
    pub n_states: usize,
    pub n_actions: usize,
    /// `(s, a, s', weight)` sorted by `(s, a, s')`.
    pub items: Vec<(usize, usize, usize, f64)>,
    /// Sample count used for the default ε; the raw transition count for datasets.
    pub n_samples: usize,
}

impl TransitionSet {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        samples: impl IntoIterator<Item = (usize, usize, usize, f64)>,
        n_samples: usize,
    ) -> Result<Self> {
        let mut merged: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
        for (s, a, s2, w) in samples {
            if s >= n_states || s2 >= n_states || a >= n_actions {
                return Err(Error::invalid(format!("transition ({s},{a},{s2}) out of range")));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::invalid("transition weights must be finite and non-negative"));
            }
            *merged.entry((s, a, s2)).or_default() += w;
        }
        let items: Vec<_> = merged.into_iter().filter(|(_, w)| *w > 0.0).map(|((s, a, s2), w)| (s, a, s2, w)).collect();
        if items.is_empty() {
            return Err(Error::invalid("transition set is empty"));
        }
        Ok(Self {
            n_states,
            n_actions,
            items,
            n_samples: n_samples.max(1),
        })
    }

    /// Every consecutive step of every trajectory, weight 1 each.
    pub fn from_dataset(dataset: &OfflineDataset) -> Result<Self> {
        let transitions = dataset.transitions();
        let n = transitions.len();
        Self::new(
            dataset.n_states,
            dataset.n_actions,
            transitions.into_iter().map(|t| (t.state, t.action, t.next_state, 1.0)),
            n,
        )
    }

    /// Every `(s, a, s')` weighted by `P(s'|s,a)`, so empirical and true dynamics coincide.
    pub fn exhaustive(mdp: &TabularMdp, n_samples: usize) -> Result<Self> {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let mut samples = Vec::new();
        for s in 0..ns {
            for a in 0..na {
                for (s2, &p) in mdp.transition_row(s, a).iter().enumerate() {
                    if p > 0.0 {
                        samples.push((s, a, s2, p));
                    }
                }
            }
        }
        Self::new(ns, na, samples, n_samples)
    }

    pub fn total_weight(&self) -> f64 {
        self.items.iter().map(|t| t.3).sum()
    }
}

/// `c₂ · sqrt(log(N·|Π|·|Q|) / N)`.
pub fn default_epsilon(n_samples: usize, n_policies: usize, n_qfuncs: usize, c2: f64) -> f64 {
    let n = n_samples.max(1) as f64;
    c2 * ((n * n_policies as f64 * n_qfuncs as f64).ln().max(0.0) / n).sqrt()
}

/// Sufficient statistics for the mean squared Bellman loss.
///
/// For a fixed target the loss of a candidate `q'` is
/// `Σ_{s,a} W_sa (q'(s,a) − ȳ_sa)² / W` plus a term that does not depend on
/// `q'`, where `ȳ_sa` is the weighted mean of `r(s,a) + γ q(s', π(s'))`. The
/// consistency gap `L(q,q,π) − min_{q'} L(q',q,π)` only needs the first part.
struct LossStats {
    pairs: Vec<(usize, f64)>,
    /// Per visited pair: `(s', weight / W_sa)`.
    next: Vec<Vec<(usize, f64)>>,
    total: f64,
}

impl LossStats {
    fn new(data: &TransitionSet) -> Self {
        let na = data.n_actions;
        let mut grouped: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for &(s, a, s2, w) in &data.items {
            grouped.entry(s * na + a).or_default().push((s2, w));
        }
        let mut pairs = Vec::with_capacity(grouped.len());
        let mut next = Vec::with_capacity(grouped.len());
        for (sa, succ) in grouped {
            let w: f64 = succ.iter().map(|x| x.1).sum();
            pairs.push((sa, w));
            next.push(succ.into_iter().map(|(s2, x)| (s2, x / w)).collect());
        }
        let total = pairs.iter().map(|p| p.1).sum();
        Self { pairs, next, total }
    }
}

/// Pessimistic estimates of every policy under one reward hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct PessimisticTable {
    /// `v̂^π = min_{q ∈ V(π,ε)} q(s₀, π(s₀))`, per policy.
    pub values: Vec<f64>,
    /// The minimizing q index, per policy (lowest index on ties).
    pub argmin_q: Vec<usize>,
    /// Threshold actually used per policy: `max(ε, smallest gap in the family)`.
    pub effective_epsilon: Vec<f64>,
}

impl PessimisticTable {
    /// The policy with the largest pessimistic value, lowest index on ties.
    pub fn best_policy(&self) -> usize {
        crate::mdp::argmax(&self.values)
    }
}

/// Bellman-consistent pessimistic values for every policy under `reward`.
///
/// A q belongs to `V(π, ε)` when its consistency gap is at most ε. When no
/// q in the family meets ε the set falls back to the q with the smallest
/// gap, so it is never empty.
pub fn pessimistic_values(
    families: &FiniteFamilies,
    reward: &[f64],
    discount: f64,
    start_state: usize,
    data: &TransitionSet,
    epsilon: f64,
) -> Result<PessimisticTable> {
    if !(epsilon >= 0.0) {
        return Err(Error::invalid("epsilon must be non-negative"));
    }
    if data.n_states != families.n_states || data.n_actions != families.n_actions {
        return Err(Error::invalid("transition set shape does not match the families"));
    }
    if reward.len() != families.n_states * families.n_actions {
        return Err(Error::invalid("reward table has the wrong shape"));
    }
    let stats = LossStats::new(data);
    let nq = families.qfuncs.len();
    let mut targets = vec![0.0; stats.pairs.len()];
    let mut gaps = vec![0.0; nq];
    let mut table = PessimisticTable {
        values: Vec::with_capacity(families.policies.len()),
        argmin_q: Vec::with_capacity(families.policies.len()),
        effective_epsilon: Vec::with_capacity(families.policies.len()),
    };
    for pi in 0..families.policies.len() {
        for (t, q) in gaps.iter_mut().enumerate() {
            for (k, ((sa, _), succ)) in stats.pairs.iter().zip(&stats.next).enumerate() {
                let boot: f64 = succ.iter().map(|&(s2, p)| p * families.q_at(t, pi, s2)).sum();
                targets[k] = reward[*sa] + discount * boot;
            }
            let excess = |cand: &[f64]| -> f64 {
                stats
                    .pairs
                    .iter()
                    .zip(&targets)
                    .map(|(&(sa, w), y)| w * (cand[sa] - y).powi(2))
                    .sum::<f64>()
                    / stats.total
            };
            let own = excess(&families.qfuncs[t]);
            let best = families.qfuncs.iter().map(|c| excess(c)).fold(f64::INFINITY, f64::min);
            *q = (own - best).max(0.0);
        }
        let smallest = gaps.iter().copied().fold(f64::INFINITY, f64::min);
        let threshold = epsilon.max(smallest) + MEMBERSHIP_SLACK;
        let mut value = f64::INFINITY;
        let mut arg = usize::MAX;
        for (t, &gap) in gaps.iter().enumerate() {
            if gap <= threshold {
                let v = families.q_at(t, pi, start_state);
                if v < value {
                    value = v;
                    arg = t;
                }
            }
        }
        if arg == usize::MAX {
            return Err(Error::Invariant(format!("version space of policy {pi} is empty")));
        }
        table.values.push(value);
        table.argmin_q.push(arg);
        table.effective_epsilon.push(epsilon.max(smallest));
    }
    Ok(table)
}

/// Output of [`bcp`].
#[derive(Debug, Clone, PartialEq)]
pub struct BcpSolution {
    pub policy: usize,
    pub q: usize,
    pub value: f64,
}

/// The policy maximizing its pessimistic value, with the q attaining it.
pub fn bcp(
    families: &FiniteFamilies,
    reward: &[f64],
    mdp: &TabularMdp,
    data: &TransitionSet,
    epsilon: f64,
) -> Result<BcpSolution> {
    let table = pessimistic_values(families, reward, mdp.discount(), mdp.start_state(), data, epsilon)?;
    let policy = table.best_policy();
    Ok(BcpSolution {
        policy,
        q: table.argmin_q[policy],
        value: table.values[policy],
    })
}

/// The pessimistic value of one policy.
pub fn bcpe(
    families: &FiniteFamilies,
    policy: usize,
    reward: &[f64],
    mdp: &TabularMdp,
    data: &TransitionSet,
    epsilon: f64,
) -> Result<f64> {
    if policy >= families.policies.len() {
        return Err(Error::invalid("policy index out of range"));
    }
    let table = pessimistic_values(families, reward, mdp.discount(), mdp.start_state(), data, epsilon)?;
    Ok(table.values[policy])
}

/// Pessimistic tables for every reward hypothesis. The data and families
/// are fixed for a whole run, so each table is computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct PessimismCache {
    pub epsilon: f64,
    pub tables: Vec<PessimisticTable>,
}

impl PessimismCache {
    pub fn build(families: &FiniteFamilies, mdp: &TabularMdp, data: &TransitionSet, epsilon: f64) -> Result<Self> {
        let tables = families
            .returns
            .iter()
            .map(|r| pessimistic_values(families, r, mdp.discount(), mdp.start_state(), data, epsilon))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { epsilon, tables })
    }

    pub fn value(&self, reward: usize, policy: usize) -> f64 {
        self.tables[reward].values[policy]
    }

    pub fn best_policy(&self, reward: usize) -> usize {
        self.tables[reward].best_policy()
    }
}
