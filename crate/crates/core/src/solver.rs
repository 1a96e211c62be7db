//! Tabular implicit Q-learning over annotated datasets.
//!
//! Each head keeps a `Q` and `V` table trained by minibatch updates: `V`
//! regresses to an upper expectile of `Q` over dataset actions, and `Q` backs
//! up the head's reward plus a discounted Polyak-averaged `V` target. The
//! discount of every sample in a minibatch comes from [`scheduled_discount`],
//! which reads a snapshot of all heads' `Q` before the minibatch is applied.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Segment, Transition};
use crate::error::{Error, Result};
use crate::mdp::{argmax, Policy};
use crate::reward::LabeledDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// `γ_small` for samples above the batch's top-`m%` variance threshold.
    Hard,
    /// `γ / max(1, α·Var)` per sample.
    Soft,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscountSchedule {
    pub mode: ScheduleMode,
    #[serde(rename = "discount")]
    pub gamma: f64,
    pub gamma_small: f64,
    #[serde(rename = "top_m_percent")]
    pub m_percent: f64,
    pub alpha_soft: f64,
}

impl Default for DiscountSchedule {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::Hard,
            gamma: 0.99,
            gamma_small: 0.7,
            m_percent: 30.0,
            alpha_soft: 1.0,
        }
    }
}

impl DiscountSchedule {
    pub fn off(gamma: f64) -> Self {
        Self {
            mode: ScheduleMode::Off,
            gamma,
            ..Self::default()
        }
    }

    pub fn hard(gamma: f64, gamma_small: f64, m_percent: f64) -> Self {
        Self {
            mode: ScheduleMode::Hard,
            gamma,
            gamma_small,
            m_percent,
            ..Self::default()
        }
    }

    pub fn soft(gamma: f64, alpha_soft: f64) -> Self {
        Self {
            mode: ScheduleMode::Soft,
            gamma,
            alpha_soft,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) || !(self.gamma_small > 0.0 && self.gamma_small < 1.0) {
            return Err(Error::invalid("discounts must lie in (0,1)"));
        }
        if self.gamma_small > self.gamma {
            return Err(Error::invalid("gamma_small must not exceed gamma"));
        }
        if !(self.m_percent > 0.0 && self.m_percent <= 100.0) {
            return Err(Error::invalid("top_m_percent must lie in (0,100]"));
        }
        if !(self.alpha_soft > 0.0) {
            return Err(Error::invalid("alpha_soft must be positive"));
        }
        Ok(())
    }
}

/// How a segment is scored by one value head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SegmentScoring {
    /// Mean of `V` over the segment's states.
    #[default]
    MeanV,
    FirstV,
    DiscountedSum(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(rename = "iql_tau")]
    pub expectile_tau: f64,
    #[serde(rename = "iql_alpha")]
    pub awr_alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub target_update_rate: f64,
    /// Clip `Q` targets to `±R_max/(1−γ)`.
    pub clip_targets: bool,
    pub segment_scoring: SegmentScoring,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            expectile_tau: 0.7,
            awr_alpha: 3.0,
            learning_rate: 0.1,
            batch_size: 256,
            steps: 10_000,
            target_update_rate: 5e-3,
            clip_targets: true,
            segment_scoring: SegmentScoring::MeanV,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.expectile_tau > 0.5 && self.expectile_tau < 1.0) {
            return Err(Error::invalid("iql_tau must lie in (0.5, 1)"));
        }
        if !(self.awr_alpha > 0.0) || !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::invalid("iql_alpha must be positive and learning_rate in (0,1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.target_update_rate > 0.0 && self.target_update_rate <= 1.0) {
            return Err(Error::invalid("target_update_rate must lie in (0,1]"));
        }
        Ok(())
    }
}

/// Per-head `Q` and `V` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEnsemble {
    pub n_states: usize,
    pub n_actions: usize,
    /// `[head][s * n_actions + a]`.
    pub q: Vec<Vec<f64>>,
    /// `[head][s]`.
    pub v: Vec<Vec<f64>>,
}

impl ValueEnsemble {
    pub fn zeros(n_heads: usize, n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            q: vec![vec![0.0; n_states * n_actions]; n_heads],
            v: vec![vec![0.0; n_states]; n_heads],
        }
    }

    pub fn n_heads(&self) -> usize {
        self.q.len()
    }

    pub fn q(&self, head: usize, s: usize, a: usize) -> f64 {
        self.q[head][s * self.n_actions + a]
    }

    pub fn v(&self, head: usize, s: usize) -> f64 {
        self.v[head][s]
    }

    /// Population variance over heads of `Q(s, a)`.
    pub fn q_variance(&self, s: usize, a: usize) -> f64 {
        let idx = s * self.n_actions + a;
        let m = self.n_heads() as f64;
        let mean = self.q.iter().map(|q| q[idx]).sum::<f64>() / m;
        self.q.iter().map(|q| (q[idx] - mean).powi(2)).sum::<f64>() / m
    }

    pub fn mean_q(&self) -> Vec<f64> {
        crate::reward::mean_rows(&self.q)
    }

    pub fn mean_v(&self) -> Vec<f64> {
        crate::reward::mean_rows(&self.v)
    }

    /// Head-mean advantage `Q − V`.
    pub fn mean_advantage(&self, s: usize, a: usize) -> f64 {
        let idx = s * self.n_actions + a;
        let m = self.n_heads() as f64;
        self.q.iter().zip(&self.v).map(|(q, v)| q[idx] - v[s]).sum::<f64>() / m
    }

    /// Greedy on the head-mean `Q`; ties go to the lowest action.
    pub fn greedy_policy(&self) -> Policy {
        Policy::greedy(&self.mean_q(), self.n_actions)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("value ensemble serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Per-sample discounts for a minibatch of `(s, a)` pairs.
pub fn scheduled_discount(
    batch: &[(usize, usize)],
    ensemble: &ValueEnsemble,
    sched: &DiscountSchedule,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if ensemble.n_heads() < 2 {
        return Err(Error::invalid("variance over heads needs at least two heads"));
    }
    if sched.mode == ScheduleMode::Off {
        return Ok(vec![sched.gamma; batch.len()]);
    }
    let variances: Vec<f64> = batch.iter().map(|&(s, a)| ensemble.q_variance(s, a)).collect();
    Ok(discounts_from_variances(&variances, sched))
}

/// The schedule applied to precomputed batch variances.
///
/// Hard mode: with `k = ⌈m%·n⌉`, the threshold is the `(k+1)`-th largest
/// variance and only samples strictly above it get `γ_small`, so ties at the
/// threshold keep `γ`.
pub fn discounts_from_variances(variances: &[f64], sched: &DiscountSchedule) -> Vec<f64> {
    match sched.mode {
        ScheduleMode::Off => vec![sched.gamma; variances.len()],
        ScheduleMode::Soft => variances
            .iter()
            .map(|var| sched.gamma / f64::max(1.0, sched.alpha_soft * var))
            .collect(),
        ScheduleMode::Hard => {
            let n = variances.len();
            let k = (sched.m_percent * n as f64 / 100.0).ceil() as usize;
            let threshold = if k >= n {
                f64::NEG_INFINITY
            } else {
                let mut sorted = variances.to_vec();
                sorted.sort_by(|a, b| b.total_cmp(a));
                sorted[k]
            };
            variances
                .iter()
                .map(|var| if *var > threshold { sched.gamma_small } else { sched.gamma })
                .collect()
        }
    }
}

/// Trains one `(Q, V)` pair per reward head for `cfg.steps` minibatches.
pub fn train_value_functions<R: Rng + ?Sized>(
    labeled: &LabeledDataset,
    sched: &DiscountSchedule,
    cfg: &SolverConfig,
    rng: &mut R,
) -> Result<ValueEnsemble> {
    sched.validate()?;
    cfg.validate()?;
    let n_heads = labeled.n_heads();
    if n_heads < 2 && sched.mode != ScheduleMode::Off {
        return Err(Error::invalid("discount scheduling needs at least two heads"));
    }
    let (ns, na) = (labeled.dataset.n_states, labeled.dataset.n_actions);
    let transitions: Vec<Transition> = labeled.dataset.transitions();
    let mut ens = ValueEnsemble::zeros(n_heads, ns, na);
    if transitions.is_empty() || cfg.steps == 0 {
        return Ok(ens);
    }
    let r_max = transitions
        .iter()
        .flat_map(|t| labeled.head_tables.iter().map(move |h| h[t.state * na + t.action].abs()))
        .fold(0.0_f64, f64::max);
    let bound = if cfg.clip_targets {
        r_max / (1.0 - sched.gamma)
    } else {
        f64::INFINITY
    };
    let mut v_target = ens.v.clone();
    let mut batch_idx = vec![0usize; cfg.batch_size];
    let mut batch_pairs = vec![(0usize, 0usize); cfg.batch_size];
    let mut variances = vec![0.0; cfg.batch_size];
    let tau = cfg.expectile_tau;
    let lr = cfg.learning_rate;
    let rho = cfg.target_update_rate;

    for step in 0..cfg.steps {
        for (slot, pair) in batch_idx.iter_mut().zip(batch_pairs.iter_mut()) {
            *slot = rng.random_range(0..transitions.len());
            let t = transitions[*slot];
            *pair = (t.state, t.action);
        }
        let discounts = if sched.mode == ScheduleMode::Off {
            vec![sched.gamma; cfg.batch_size]
        } else {
            for (var, &(s, a)) in variances.iter_mut().zip(&batch_pairs) {
                *var = ens.q_variance(s, a);
            }
            discounts_from_variances(&variances, sched)
        };
        for head in 0..n_heads {
            let rewards = &labeled.head_tables[head];
            let q_snapshot = ens.q[head].clone();
            let (q, v) = (&mut ens.q[head], &mut ens.v[head]);
            let vbar = &v_target[head];
            for (j, &idx) in batch_idx.iter().enumerate() {
                let t = transitions[idx];
                let sa = t.state * na + t.action;
                let u = q_snapshot[sa] - v[t.state];
                let weight = if u > 0.0 { tau } else { 1.0 - tau };
                v[t.state] += lr * weight * u;

                let target = (rewards[sa] + discounts[j] * vbar[t.next_state]).clamp(-bound, bound);
                if !target.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        detail: format!("head {head}: non-finite target at ({}, {})", t.state, t.action),
                    });
                }
                q[sa] += lr * (target - q[sa]);
            }
        }
        for (bar, v) in v_target.iter_mut().zip(&ens.v) {
            bar.iter_mut().zip(v).for_each(|(b, x)| *b += rho * (x - *b));
        }
    }
    if ens.q.iter().chain(&ens.v).flatten().any(|x| !x.is_finite()) {
        return Err(Error::Divergence {
            step: cfg.steps,
            detail: "non-finite value table".into(),
        });
    }
    Ok(ens)
}

/// `π(a|s) ∝ count(s,a) · exp(α · Ā(s,a))` over in-dataset actions; states
/// the dataset never visits get the uniform policy.
pub fn extract_policy(labeled: &LabeledDataset, ensemble: &ValueEnsemble, cfg: &SolverConfig) -> Policy {
    extract_policy_from_counts(&labeled.dataset.pair_counts(), ensemble, cfg.awr_alpha)
}

pub fn extract_policy_from_counts(counts: &[usize], ensemble: &ValueEnsemble, alpha: f64) -> Policy {
    let (ns, na) = (ensemble.n_states, ensemble.n_actions);
    let mut table = vec![0.0; ns * na];
    for s in 0..ns {
        let row_counts = &counts[s * na..(s + 1) * na];
        let row = &mut table[s * na..(s + 1) * na];
        if row_counts.iter().all(|c| *c == 0) {
            row.fill(1.0 / na as f64);
            continue;
        }
        let best = (0..na)
            .filter(|a| row_counts[*a] > 0)
            .map(|a| ensemble.mean_advantage(s, a))
            .fold(f64::NEG_INFINITY, f64::max);
        for a in 0..na {
            if row_counts[a] > 0 {
                row[a] = row_counts[a] as f64 * (alpha * (ensemble.mean_advantage(s, a) - best)).exp();
            }
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
        // Absorb rounding on the largest entry.
        let drift = 1.0 - row.iter().sum::<f64>();
        let top = argmax(row);
        row[top] += drift;
    }
    Policy::from_flat(na, table).expect("advantage weights form stochastic rows")
}

/// Scores a segment with one value head.
pub fn segment_value(ensemble: &ValueEnsemble, head: usize, seg: &Segment, scoring: SegmentScoring) -> f64 {
    let v = &ensemble.v[head];
    match scoring {
        SegmentScoring::MeanV => seg.steps.iter().map(|(s, _)| v[*s]).sum::<f64>() / seg.len() as f64,
        SegmentScoring::FirstV => v[seg.steps[0].0],
        SegmentScoring::DiscountedSum(gamma) => {
            let mut weight = 1.0;
            let mut total = 0.0;
            for (s, _) in &seg.steps {
                total += weight * v[*s];
                weight *= gamma;
            }
            total
        }
    }
}
