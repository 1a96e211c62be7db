//! Bradley-Terry reward ensembles.
//!
//! Each head is a linear reward `r̂_i(s,a) = θ_i · φ(s,a)` over a shared
//! feature map. Heads are fit by full-batch gradient descent on the
//! cross-entropy of the pairwise preference model, each on its own bootstrap
//! resample of the preference records.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{OfflineDataset, Segment, SegmentKey};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

/// Probabilities inside the loss are clipped to `[P_CLIP, 1 − P_CLIP]`.
pub const P_CLIP: f64 = 1e-12;

const HEAD_STREAM: u64 = 0x6865_6164;

/// Shared feature map `φ(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    /// Indicator of the `(s, a)` pair; dimension `n_states · n_actions`.
    OneHot { n_states: usize, n_actions: usize },
    /// Arbitrary dense features, row-major `(s, a, feature)`.
    Table {
        n_states: usize,
        n_actions: usize,
        dimension: usize,
        features: Vec<f64>,
    },
}

impl FeatureMap {
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        FeatureMap::OneHot { n_states, n_actions }
    }

    pub fn table(n_states: usize, n_actions: usize, dimension: usize, features: Vec<f64>) -> Result<Self> {
        if dimension == 0 || features.len() != n_states * n_actions * dimension {
            return Err(Error::invalid("feature table has wrong shape"));
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::invalid("feature table has non-finite entries"));
        }
        Ok(FeatureMap::Table {
            n_states,
            n_actions,
            dimension,
            features,
        })
    }

    pub fn dimension(&self) -> usize {
        match self {
            FeatureMap::OneHot { n_states, n_actions } => n_states * n_actions,
            FeatureMap::Table { dimension, .. } => *dimension,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            FeatureMap::OneHot { n_states, n_actions } | FeatureMap::Table { n_states, n_actions, .. } => {
                (*n_states, *n_actions)
            }
        }
    }

    /// Adds `scale · φ(s, a)` into `acc`.
    pub fn accumulate(&self, acc: &mut [f64], s: usize, a: usize, scale: f64) {
        match self {
            FeatureMap::OneHot { n_actions, .. } => acc[s * n_actions + a] += scale,
            FeatureMap::Table {
                n_actions,
                dimension,
                features,
                ..
            } => {
                let row = &features[(s * n_actions + a) * dimension..(s * n_actions + a + 1) * dimension];
                for (x, f) in acc.iter_mut().zip(row) {
                    *x += scale * f;
                }
            }
        }
    }

    pub fn reward(&self, theta: &[f64], s: usize, a: usize) -> f64 {
        match self {
            FeatureMap::OneHot { n_actions, .. } => theta[s * n_actions + a],
            FeatureMap::Table {
                n_actions,
                dimension,
                features,
                ..
            } => {
                let row = &features[(s * n_actions + a) * dimension..(s * n_actions + a + 1) * dimension];
                row.iter().zip(theta).map(|(f, t)| f * t).sum()
            }
        }
    }

    /// `θ · φ(s, a)` for every pair, row-major.
    pub fn reward_table(&self, theta: &[f64]) -> Vec<f64> {
        let (ns, na) = self.shape();
        (0..ns)
            .flat_map(|s| (0..na).map(move |a| (s, a)))
            .map(|(s, a)| self.reward(theta, s, a))
            .collect()
    }

    /// Summed (optionally discounted) segment features.
    pub fn segment_features(&self, seg: &Segment, within: SegmentReturn) -> Vec<f64> {
        let mut acc = vec![0.0; self.dimension()];
        let mut weight = 1.0;
        for &(s, a) in &seg.steps {
            self.accumulate(&mut acc, s, a, weight);
            if let SegmentReturn::Discounted(gamma) = within {
                weight *= gamma;
            }
        }
        acc
    }
}

/// How rewards are summed inside a query segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SegmentReturn {
    #[default]
    Undiscounted,
    Discounted(f64),
}

/// `Σ_t θ · φ(s_t, a_t)` over the segment.
pub fn segment_return(head: &[f64], fmap: &FeatureMap, seg: &Segment) -> f64 {
    seg.steps.iter().map(|&(s, a)| fmap.reward(head, s, a)).sum()
}

/// `P(seg1 ≻ seg2) = 1 / (exp(R₂ − R₁) + 1)` without overflow.
pub fn bt_probability(return1: f64, return2: f64) -> f64 {
    let d = return1 - return2;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// One preference label: 1 prefers `seg1`, 0 prefers `seg2`, 0.5 is a tie.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceRecord {
    pub seg1: Segment,
    pub seg2: Segment,
    pub label: f64,
    pub round: usize,
}

impl PreferenceRecord {
    pub fn new(seg1: Segment, seg2: Segment, label: f64, round: usize) -> Result<Self> {
        if seg1.len() != seg2.len() || seg1.is_empty() {
            return Err(Error::invalid("preference segments must share a positive length"));
        }
        if ![0.0, 0.5, 1.0].contains(&label) {
            return Err(Error::invalid(format!("label {label} not in {{0, 0.5, 1}}")));
        }
        Ok(Self {
            seg1,
            seg2,
            label,
            round,
        })
    }
}

/// Append-only list of preference records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreferenceDataset {
    records: Vec<PreferenceRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PreferenceLine {
    seg1: [usize; 2],
    seg2: [usize; 2],
    length: usize,
    label: f64,
    round: usize,
}

impl PreferenceDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: PreferenceRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.round < last.round {
                return Err(Error::invalid("preference rounds must be non-decreasing"));
            }
            if record.seg1.len() != last.seg1.len() {
                return Err(Error::invalid("all records must share the segment length"));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[PreferenceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One line per record, segments as `[trajectory_index, start]`.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            let line = PreferenceLine {
                seg1: [r.seg1.trajectory_index, r.seg1.start],
                seg2: [r.seg2.trajectory_index, r.seg2.start],
                length: r.seg1.len(),
                label: r.label,
                round: r.round,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, dataset: &OfflineDataset) -> Result<Self> {
        let mut prefs = Self::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: PreferenceLine = serde_json::from_str(&line)?;
            let key = |c: [usize; 2]| SegmentKey {
                trajectory_index: c[0],
                start: c[1],
            };
            let seg1 = Segment::resolve(dataset, key(parsed.seg1), parsed.length)?;
            let seg2 = Segment::resolve(dataset, key(parsed.seg2), parsed.length)?;
            prefs.push(PreferenceRecord::new(seg1, seg2, parsed.label, parsed.round)?)?;
        }
        Ok(prefs)
    }
}

/// Records reduced to feature differences `φ(seg1) − φ(seg2)`.
#[derive(Debug, Clone)]
pub struct PreparedPreferences {
    diffs: Vec<Vec<f64>>,
    labels: Vec<f64>,
}

impl PreparedPreferences {
    pub fn new(prefs: &PreferenceDataset, fmap: &FeatureMap, within: SegmentReturn) -> Self {
        let diffs = prefs
            .records()
            .iter()
            .map(|r| {
                let mut d = fmap.segment_features(&r.seg1, within);
                let f2 = fmap.segment_features(&r.seg2, within);
                d.iter_mut().zip(f2).for_each(|(x, y)| *x -= y);
                d
            })
            .collect();
        let labels = prefs.records().iter().map(|r| r.label).collect();
        Self { diffs, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Masked mean cross-entropy and its gradient with respect to `head`.
    pub fn loss_and_grad(&self, head: &[f64], mask: &[f64]) -> Result<(f64, Vec<f64>)> {
        if mask.len() != self.len() {
            return Err(Error::invalid("mask length does not match the preference count"));
        }
        let total_weight: f64 = mask.iter().sum();
        if !(total_weight > 0.0) {
            return Err(Error::invalid("no preference records remain after masking"));
        }
        let mut loss = 0.0;
        let mut grad = vec![0.0; head.len()];
        for ((diff, label), w) in self.diffs.iter().zip(&self.labels).zip(mask) {
            if *w == 0.0 {
                continue;
            }
            let margin: f64 = diff.iter().zip(head).map(|(x, t)| x * t).sum();
            let p = bt_probability(margin, 0.0);
            let clipped = p.clamp(P_CLIP, 1.0 - P_CLIP);
            loss -= w * (label * clipped.ln() + (1.0 - label) * (1.0 - clipped).ln());
            // Clipping flattens the loss, so its derivative vanishes there.
            if clipped == p {
                let slope = w * (p - label);
                grad.iter_mut().zip(diff).for_each(|(g, x)| *g += slope * x);
            }
        }
        grad.iter_mut().for_each(|g| *g /= total_weight);
        Ok((loss / total_weight, grad))
    }
}

/// Masked mean of `−[o·log p + (1−o)·log(1−p)]`.
pub fn ce_loss(head: &[f64], fmap: &FeatureMap, prefs: &PreferenceDataset, mask: &[f64]) -> Result<f64> {
    Ok(PreparedPreferences::new(prefs, fmap, SegmentReturn::Undiscounted)
        .loss_and_grad(head, mask)?
        .0)
}

/// Analytic gradient of [`ce_loss`].
pub fn ce_loss_grad(head: &[f64], fmap: &FeatureMap, prefs: &PreferenceDataset, mask: &[f64]) -> Result<Vec<f64>> {
    Ok(PreparedPreferences::new(prefs, fmap, SegmentReturn::Undiscounted)
        .loss_and_grad(head, mask)?
        .1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardTrainConfig {
    #[serde(rename = "ensemble_number")]
    pub n_heads: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub grad_tol: f64,
    /// Heads start from `U(−init_scale, init_scale)`.
    pub init_scale: f64,
    /// Resample records with replacement per head; off trains every head on all records.
    pub bootstrap: bool,
    pub segment_return: SegmentReturn,
    /// Start each retrain from the previous round's heads instead of a fresh draw.
    pub warm_start: bool,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            n_heads: 2,
            learning_rate: 3e-4,
            max_steps: 5000,
            grad_tol: 1e-6,
            init_scale: 0.01,
            bootstrap: true,
            segment_return: SegmentReturn::Undiscounted,
            warm_start: false,
        }
    }
}

/// `M` linear reward heads over a shared feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardEnsemble {
    pub feature_map: FeatureMap,
    pub heads: Vec<Vec<f64>>,
    pub bootstrap_seed: u64,
    #[serde(default)]
    pub bootstrap_masks: Vec<Vec<f64>>,
}

impl RewardEnsemble {
    /// Wraps fixed heads, e.g. the true reward for oracle experiments.
    pub fn from_heads(feature_map: FeatureMap, heads: Vec<Vec<f64>>) -> Result<Self> {
        if heads.len() < 2 {
            return Err(Error::invalid("an ensemble needs at least two heads"));
        }
        let dim = feature_map.dimension();
        if heads.iter().any(|h| h.len() != dim || h.iter().any(|x| !x.is_finite())) {
            return Err(Error::invalid("head weights must be finite and match the feature dimension"));
        }
        Ok(Self {
            feature_map,
            heads,
            bootstrap_seed: 0,
            bootstrap_masks: Vec::new(),
        })
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_reward_tables(&self) -> Vec<Vec<f64>> {
        self.heads.iter().map(|h| self.feature_map.reward_table(h)).collect()
    }

    pub fn mean_reward_table(&self) -> Vec<f64> {
        mean_rows(&self.head_reward_tables())
    }

    pub fn segment_returns(&self, seg: &Segment) -> Vec<f64> {
        self.heads.iter().map(|h| segment_return(h, &self.feature_map, seg)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ensemble serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub(crate) fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let m = rows.len() as f64;
    let mut mean = vec![0.0; rows.first().map_or(0, Vec::len)];
    for row in rows {
        mean.iter_mut().zip(row).for_each(|(acc, x)| *acc += x);
    }
    mean.iter_mut().for_each(|x| *x /= m);
    mean
}

/// Bootstrap weights: multiplicities of `n` draws with replacement.
fn bootstrap_mask<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut mask = vec![0.0; n];
    for _ in 0..n {
        mask[rng.random_range(0..n)] += 1.0;
    }
    mask
}

/// Fits `cfg.n_heads` heads by gradient descent on bootstrap resamples.
///
/// With no preferences the heads keep their random initialisation.
pub fn train_ensemble<R: Rng + ?Sized>(
    prefs: &PreferenceDataset,
    fmap: &FeatureMap,
    cfg: &RewardTrainConfig,
    rng: &mut R,
) -> Result<RewardEnsemble> {
    train_ensemble_from(prefs, fmap, cfg, None, rng)
}

/// As [`train_ensemble`], but heads start from `init` when given.
/// Bootstrap masks are drawn the same way either way.
pub fn train_ensemble_from<R: Rng + ?Sized>(
    prefs: &PreferenceDataset,
    fmap: &FeatureMap,
    cfg: &RewardTrainConfig,
    init: Option<&[Vec<f64>]>,
    rng: &mut R,
) -> Result<RewardEnsemble> {
    if let Some(init) = init {
        if init.len() != cfg.n_heads || init.iter().any(|h| h.len() != fmap.dimension()) {
            return Err(Error::invalid("warm-start heads do not match the ensemble shape"));
        }
    }
    if cfg.n_heads < 2 {
        return Err(Error::invalid("ensemble size must be at least 2"));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let bootstrap_seed: u64 = rng.random();
    let prepared = PreparedPreferences::new(prefs, fmap, cfg.segment_return);
    let dim = fmap.dimension();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut masks = Vec::with_capacity(cfg.n_heads);
    for i in 0..cfg.n_heads {
        let mut head_rng = seeded(derive_seed(bootstrap_seed, HEAD_STREAM, i as u64));
        let fresh: Vec<f64> = (0..dim)
            .map(|_| head_rng.random_range(-cfg.init_scale..=cfg.init_scale))
            .collect();
        let mut theta = init.map_or(fresh, |heads| heads[i].clone());
        let mask = if prepared.is_empty() {
            Vec::new()
        } else if cfg.bootstrap {
            bootstrap_mask(prepared.len(), &mut head_rng)
        } else {
            vec![1.0; prepared.len()]
        };
        if !prepared.is_empty() {
            descend(&prepared, &mut theta, &mask, cfg).map_err(|e| match e {
                Error::Divergence { step, detail } => Error::Divergence {
                    step,
                    detail: format!("head {i}: {detail}"),
                },
                other => other,
            })?;
        }
        heads.push(theta);
        masks.push(mask);
    }
    Ok(RewardEnsemble {
        feature_map: fmap.clone(),
        heads,
        bootstrap_seed,
        bootstrap_masks: masks,
    })
}

fn descend(prepared: &PreparedPreferences, theta: &mut [f64], mask: &[f64], cfg: &RewardTrainConfig) -> Result<()> {
    for step in 0..cfg.max_steps {
        let (loss, grad) = prepared.loss_and_grad(theta, mask)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: format!("loss {loss}"),
            });
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm <= cfg.grad_tol {
            break;
        }
        theta.iter_mut().zip(&grad).for_each(|(t, g)| *t -= cfg.learning_rate * g);
    }
    Ok(())
}

/// Per-head reward tables applied to an offline dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub dataset: OfflineDataset,
    /// `[head][s * n_actions + a]`.
    pub head_tables: Vec<Vec<f64>>,
}

impl LabeledDataset {
    pub fn from_tables(dataset: &OfflineDataset, head_tables: Vec<Vec<f64>>) -> Result<Self> {
        let pairs = dataset.n_states * dataset.n_actions;
        if head_tables.is_empty() || head_tables.iter().any(|t| t.len() != pairs) {
            return Err(Error::invalid("every head needs a full (s,a) reward table"));
        }
        Ok(Self {
            dataset: dataset.clone(),
            head_tables,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.head_tables.len()
    }

    pub fn mean_table(&self) -> Vec<f64> {
        mean_rows(&self.head_tables)
    }

    /// Ensemble-mean reward of step `t` of trajectory `n`.
    pub fn mean_reward(&self, n: usize, t: usize) -> f64 {
        let (s, a) = self.dataset.trajectories[n].steps[t];
        let idx = s * self.dataset.n_actions + a;
        self.head_tables.iter().map(|h| h[idx]).sum::<f64>() / self.n_heads() as f64
    }

    pub fn head_reward(&self, head: usize, n: usize, t: usize) -> f64 {
        let (s, a) = self.dataset.trajectories[n].steps[t];
        self.head_tables[head][s * self.dataset.n_actions + a]
    }

    /// Adds independent `U(0, scale)` noise per head to the reward of each
    /// listed pair: an optimistic, head-disagreeing corruption.
    pub fn inject_overestimation<R: Rng + ?Sized>(&mut self, pairs: &[usize], scale: f64, rng: &mut R) {
        for &idx in pairs {
            for table in &mut self.head_tables {
                table[idx] += scale * rng.random::<f64>();
            }
        }
    }
}

/// Annotates every step with each head's reward.
pub fn annotate(dataset: &OfflineDataset, ensemble: &RewardEnsemble) -> Result<LabeledDataset> {
    if ensemble.feature_map.shape() != (dataset.n_states, dataset.n_actions) {
        return Err(Error::invalid("feature map does not match the dataset's MDP"));
    }
    LabeledDataset::from_tables(dataset, ensemble.head_reward_tables())
}

/// Pearson correlation between the ensemble-mean reward and the true reward
/// over every step of the dataset. Zero when either side is constant.
pub fn reward_correlation(labeled: &LabeledDataset, true_reward: &[f64]) -> f64 {
    let mean = labeled.mean_table();
    let na = labeled.dataset.n_actions;
    let pairs: Vec<(f64, f64)> = labeled
        .dataset
        .trajectories
        .iter()
        .flat_map(|t| t.steps.iter())
        .map(|&(s, a)| (mean[s * na + a], true_reward[s * na + a]))
        .collect();
    pearson(&pairs)
}

pub(crate) fn pearson(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    if pairs.is_empty() {
        return 0.0;
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx <= f64::EPSILON * n || syy <= f64::EPSILON * n {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}
