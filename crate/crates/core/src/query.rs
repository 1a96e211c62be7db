//! Query selection over in-dataset segments and scripted teachers.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Segment, SegmentKey};
use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::reward::{bt_probability, RewardEnsemble};
use crate::solver::{segment_value, SegmentScoring, ValueEnsemble};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Largest difference of value differences across value heads.
    Ide,
    Random,
    /// Largest spread of the heads' preference probabilities.
    Disagreement,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Ide => "ide",
            Strategy::Random => "random",
            Strategy::Disagreement => "disagreement",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Larger true segment sum wins; equal sums tie.
    Deterministic,
    /// Bernoulli draw from the preference model on true sums.
    Stochastic,
}

impl std::fmt::Display for TeacherMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TeacherMode::Deterministic => "deterministic",
            TeacherMode::Stochastic => "stochastic",
        })
    }
}

/// Segments eligible for one round of selection.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPool {
    pub segments: Vec<Segment>,
    pub round: usize,
    pub pool_seed: u64,
}

impl QueryPool {
    /// Subsamples up to `size` segments (kept in their original order) with
    /// `pool_seed`; smaller candidate lists are used whole.
    pub fn sample(candidates: &[Segment], size: usize, round: usize, pool_seed: u64) -> Result<Self> {
        if candidates.len() < 2 || size < 2 {
            return Err(Error::invalid("a query pool needs at least two segments"));
        }
        let segments = if candidates.len() <= size {
            candidates.to_vec()
        } else {
            let mut rng = crate::rng::seeded(pool_seed);
            let mut idx = sample(&mut rng, candidates.len(), size).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| candidates[i].clone()).collect()
        };
        Self::new(segments, round, pool_seed)
    }

    pub fn new(segments: Vec<Segment>, round: usize, pool_seed: u64) -> Result<Self> {
        if segments.len() < 2 {
            return Err(Error::invalid("a query pool needs at least two segments"));
        }
        let len = segments[0].len();
        if segments.iter().any(|s| s.len() != len) {
            return Err(Error::invalid("pool segments must share one length"));
        }
        Ok(Self {
            segments,
            round,
            pool_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Two distinct segments proposed for labelling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPair {
    pub seg1: Segment,
    pub seg2: Segment,
    pub score: f64,
    pub strategy: Strategy,
    /// Pool positions of the two segments.
    pub pool_index: (usize, usize),
    /// Value heads that realised the score (IDE only).
    pub heads: Option<(usize, usize)>,
}

/// Unordered pair of segment coordinates, for excluding repeated queries.
pub type PairKey = (SegmentKey, SegmentKey);

pub fn pair_key(a: &Segment, b: &Segment) -> PairKey {
    let (x, y) = (a.key(), b.key());
    if x <= y {
        (x, y)
    } else {
        (y, x)
    }
}

fn allowed(pool: &QueryPool, excluded: &HashSet<PairKey>, a: usize, b: usize) -> bool {
    excluded.is_empty() || !excluded.contains(&pair_key(&pool.segments[a], &pool.segments[b]))
}

/// Candidate with a lexicographic tie-break key; larger score wins, then the smaller key.
#[derive(Debug, Clone, Copy)]
struct Best {
    score: f64,
    key: (usize, usize, usize, usize),
}

impl Best {
    fn better(self, other: Option<Best>) -> bool {
        match other {
            None => true,
            Some(o) => self.score > o.score || (self.score == o.score && self.key < o.key),
        }
    }
}

fn keep(best: &mut Option<Best>, cand: Best) {
    if cand.better(*best) {
        *best = Some(cand);
    }
}

/// Per-head segment values `[head][pool index]`.
pub fn pool_values(pool: &QueryPool, ensemble: &ValueEnsemble, scoring: SegmentScoring) -> Vec<Vec<f64>> {
    (0..ensemble.n_heads())
        .map(|h| pool.segments.iter().map(|s| segment_value(ensemble, h, s, scoring)).collect())
        .collect()
}

/// In-dataset exploration: the pair and head pair maximising
/// `|(V_i(τ₁) − V_j(τ₁)) − (V_i(τ₂) − V_j(τ₂))|`.
///
/// For each head pair the optimum is `(argmax d, argmin d)` with
/// `d = V_i − V_j`, giving `O(S·M²)` work. Ties go to the smallest
/// `(i, j, first, second)` with `i < j` and `first < second`. Pairs in
/// `excluded` are skipped, falling back to a full scan for that head pair.
pub fn select_ide(
    pool: &QueryPool,
    ensemble: &ValueEnsemble,
    scoring: SegmentScoring,
    excluded: &HashSet<PairKey>,
) -> Result<QueryPair> {
    let m = ensemble.n_heads();
    if m < 2 {
        return Err(Error::invalid("IDE selection needs at least two value heads"));
    }
    if pool.len() < 2 {
        return Err(Error::invalid("pool too small"));
    }
    let values = pool_values(pool, ensemble, scoring);
    let best = ide_from_values(pool, &values, excluded)?;
    let (i, j, a, b) = best.key;
    Ok(QueryPair {
        seg1: pool.segments[a].clone(),
        seg2: pool.segments[b].clone(),
        score: best.score,
        strategy: Strategy::Ide,
        pool_index: (a, b),
        heads: Some((i, j)),
    })
}

fn ide_from_values(pool: &QueryPool, values: &[Vec<f64>], excluded: &HashSet<PairKey>) -> Result<Best> {
    let m = values.len();
    let s = pool.len();
    let mut best: Option<Best> = None;
    let mut d = vec![0.0; s];
    for i in 0..m {
        for j in i + 1..m {
            for (k, dk) in d.iter_mut().enumerate() {
                *dk = values[i][k] - values[j][k];
            }
            let mut hi = 0;
            let mut lo = 0;
            for k in 1..s {
                if d[k] > d[hi] {
                    hi = k;
                }
                if d[k] < d[lo] {
                    lo = k;
                }
            }
            let top = if hi == lo {
                // All differences equal: every pair scores 0.
                allowed(pool, excluded, 0, 1).then_some(Best {
                    score: 0.0,
                    key: (i, j, 0, 1),
                })
            } else {
                best_at_max(pool, &d, hi, lo, i, j, excluded)
            };
            if let Some(found) = top.or_else(|| scan_head_pair(pool, &d, i, j, excluded)) {
                keep(&mut best, found);
            }
        }
    }
    best.ok_or_else(|| Error::invalid("every pair in the pool has already been queried"))
}

/// The smallest allowed pair whose score equals the maximum `|d[hi] − d[lo]|`.
///
/// Rounding can make pairs other than `(hi, lo)` reach exactly the same
/// score, so every index whose difference to the opposite extreme rounds
/// near the maximum is a candidate.
fn best_at_max(
    pool: &QueryPool,
    d: &[f64],
    hi: usize,
    lo: usize,
    i: usize,
    j: usize,
    excluded: &HashSet<PairKey>,
) -> Option<Best> {
    let max = d[hi] - d[lo];
    let near = max * (1.0 - 1e-9);
    let highs: Vec<usize> = (0..d.len()).filter(|&k| d[k] - d[lo] >= near).collect();
    let lows: Vec<usize> = (0..d.len()).filter(|&k| d[hi] - d[k] >= near).collect();
    let mut best = None;
    for &x in &highs {
        for &y in &lows {
            let (a, b) = (x.min(y), x.max(y));
            let score = (d[a] - d[b]).abs();
            if a != b && score == max && allowed(pool, excluded, a, b) {
                keep(&mut best, Best { score, key: (i, j, a, b) });
            }
        }
    }
    best
}

fn scan_head_pair(pool: &QueryPool, d: &[f64], i: usize, j: usize, excluded: &HashSet<PairKey>) -> Option<Best> {
    let mut best = None;
    for a in 0..d.len() {
        for b in a + 1..d.len() {
            if allowed(pool, excluded, a, b) {
                keep(
                    &mut best,
                    Best {
                        score: (d[a] - d[b]).abs(),
                        key: (i, j, a, b),
                    },
                );
            }
        }
    }
    best
}

/// Uniformly random distinct pair not in `excluded`.
pub fn select_random<R: Rng + ?Sized>(pool: &QueryPool, excluded: &HashSet<PairKey>, rng: &mut R) -> Result<QueryPair> {
    let s = pool.len();
    if s < 2 {
        return Err(Error::invalid("pool too small"));
    }
    let total = s * (s - 1) / 2;
    let open: Vec<(usize, usize)>;
    let (a, b) = if excluded.is_empty() {
        unrank_pair(rng.random_range(0..total), s)
    } else {
        open = (0..s)
            .flat_map(|a| (a + 1..s).map(move |b| (a, b)))
            .filter(|&(a, b)| allowed(pool, excluded, a, b))
            .collect();
        if open.is_empty() {
            return Err(Error::invalid("every pair in the pool has already been queried"));
        }
        open[rng.random_range(0..open.len())]
    };
    Ok(QueryPair {
        seg1: pool.segments[a].clone(),
        seg2: pool.segments[b].clone(),
        score: 0.0,
        strategy: Strategy::Random,
        pool_index: (a, b),
        heads: None,
    })
}

/// Maps `0..s(s−1)/2` onto pairs `a < b` in lexicographic order.
fn unrank_pair(mut rank: usize, s: usize) -> (usize, usize) {
    for a in 0..s {
        let row = s - a - 1;
        if rank < row {
            return (a, a + 1 + rank);
        }
        rank -= row;
    }
    unreachable!("rank out of range")
}

/// Population standard deviation over heads of the preference probability.
pub fn disagreement_score(returns1: &[f64], returns2: &[f64]) -> f64 {
    let probs: Vec<f64> = returns1.iter().zip(returns2).map(|(r1, r2)| bt_probability(*r1, *r2)).collect();
    let m = probs.len() as f64;
    let mean = probs.iter().sum::<f64>() / m;
    (probs.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / m).sqrt()
}

/// Exhaustive maximum of [`disagreement_score`] with lexicographic tie-break.
pub fn select_disagreement(
    pool: &QueryPool,
    rewards: &RewardEnsemble,
    excluded: &HashSet<PairKey>,
) -> Result<QueryPair> {
    if rewards.n_heads() < 2 {
        return Err(Error::invalid("disagreement needs at least two reward heads"));
    }
    let returns: Vec<Vec<f64>> = pool.segments.iter().map(|s| rewards.segment_returns(s)).collect();
    let mut best: Option<Best> = None;
    for a in 0..pool.len() {
        for b in a + 1..pool.len() {
            if allowed(pool, excluded, a, b) {
                keep(
                    &mut best,
                    Best {
                        score: disagreement_score(&returns[a], &returns[b]),
                        key: (0, 0, a, b),
                    },
                );
            }
        }
    }
    let best = best.ok_or_else(|| Error::invalid("every pair in the pool has already been queried"))?;
    let (_, _, a, b) = best.key;
    Ok(QueryPair {
        seg1: pool.segments[a].clone(),
        seg2: pool.segments[b].clone(),
        score: best.score,
        strategy: Strategy::Disagreement,
        pool_index: (a, b),
        heads: None,
    })
}

/// Undiscounted true reward summed over a segment.
pub fn true_segment_sum(mdp: &TabularMdp, seg: &Segment) -> f64 {
    seg.steps.iter().map(|&(s, a)| mdp.reward(s, a)).sum()
}

/// Scripted teacher answer for `pair`.
pub fn oracle_answer<R: Rng + ?Sized>(mdp: &TabularMdp, pair: &QueryPair, mode: TeacherMode, rng: &mut R) -> f64 {
    let r1 = true_segment_sum(mdp, &pair.seg1);
    let r2 = true_segment_sum(mdp, &pair.seg2);
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

/// One line of the persisted query log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLogEntry {
    pub round: usize,
    pub strategy: Strategy,
    pub seg1: [usize; 2],
    pub seg2: [usize; 2],
    pub score: f64,
    pub label: f64,
    pub teacher_mode: String,
}

impl QueryLogEntry {
    pub fn new(round: usize, pair: &QueryPair, label: f64, teacher_mode: &str) -> Self {
        Self {
            round,
            strategy: pair.strategy,
            seg1: [pair.seg1.trajectory_index, pair.seg1.start],
            seg2: [pair.seg2.trajectory_index, pair.seg2.start],
            score: pair.score,
            label,
            teacher_mode: teacher_mode.to_string(),
        }
    }
}

pub fn write_query_log<W: std::io::Write>(entries: &[QueryLogEntry], mut out: W) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn seg(i: usize, steps: Vec<(usize, usize)>) -> Segment {
        Segment {
            trajectory_index: i,
            start: 0,
            steps,
        }
    }

    fn pool_of(n: usize) -> QueryPool {
        QueryPool::new((0..n).map(|i| seg(i, vec![(i, 0)])).collect(), 1, 0).unwrap()
    }

    #[test]
    fn ide_hand_example() {
        // One state per segment; V₁ = (5, 3), V₂ = (4, 4).
        let pool = pool_of(2);
        let ens = ValueEnsemble {
            n_states: 2,
            n_actions: 1,
            q: vec![vec![0.0; 2]; 2],
            v: vec![vec![5.0, 3.0], vec![4.0, 4.0]],
        };
        let pair = select_ide(&pool, &ens, SegmentScoring::MeanV, &HashSet::new()).unwrap();
        assert_eq!(pair.score, 2.0);
        assert_eq!(pair.pool_index, (0, 1));
        assert_eq!(pair.heads, Some((0, 1)));
    }

    #[test]
    fn ide_identical_heads_is_degenerate() {
        let pool = pool_of(5);
        let ens = ValueEnsemble {
            n_states: 5,
            n_actions: 1,
            q: vec![vec![0.0; 5]; 3],
            v: vec![vec![1.0, 2.0, 3.0, 4.0, 5.0]; 3],
        };
        let pair = select_ide(&pool, &ens, SegmentScoring::MeanV, &HashSet::new()).unwrap();
        assert_eq!(pair.score, 0.0);
        assert_eq!(pair.pool_index, (0, 1));
        assert_eq!(pair.heads, Some((0, 1)));
    }

    #[test]
    fn ide_skips_excluded_pairs() {
        let pool = pool_of(4);
        let ens = ValueEnsemble {
            n_states: 4,
            n_actions: 1,
            q: vec![vec![0.0; 4]; 2],
            v: vec![vec![0.0, 5.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 0.0]],
        };
        let first = select_ide(&pool, &ens, SegmentScoring::MeanV, &HashSet::new()).unwrap();
        assert_eq!(first.pool_index, (0, 1));
        let mut excluded = HashSet::new();
        excluded.insert(pair_key(&first.seg1, &first.seg2));
        let second = select_ide(&pool, &ens, SegmentScoring::MeanV, &excluded).unwrap();
        assert_eq!(second.pool_index, (1, 3));
        assert_eq!(second.score, 5.0);
    }

    #[test]
    fn random_selection_cases() {
        let two = pool_of(2);
        let pair = select_random(&two, &HashSet::new(), &mut seeded(1)).unwrap();
        assert_eq!(pair.pool_index, (0, 1));

        let pool = pool_of(10);
        let a = select_random(&pool, &HashSet::new(), &mut seeded(9)).unwrap();
        let b = select_random(&pool, &HashSet::new(), &mut seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_selection_is_uniform_over_pairs() {
        let pool = pool_of(10);
        let mut rng = seeded(123);
        let draws = 10_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..draws {
            let p = select_random(&pool, &HashSet::new(), &mut rng).unwrap();
            assert!(p.pool_index.0 < p.pool_index.1);
            *counts.entry(p.pool_index).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 45);
        let expected = draws as f64 / 45.0;
        let sigma = (draws as f64 * (1.0 / 45.0) * (44.0 / 45.0)).sqrt();
        let mut chi2 = 0.0;
        for c in counts.values() {
            assert!((*c as f64 - expected).abs() < 3.5 * sigma, "count {c}");
            chi2 += (*c as f64 - expected).powi(2) / expected;
        }
        // 44 degrees of freedom; 78.75 is the 0.999 quantile.
        assert!(chi2 < 78.75, "chi-square {chi2}");
    }

    #[test]
    fn unrank_enumerates_pairs_in_order() {
        let pairs: Vec<_> = (0..6).map(|r| unrank_pair(r, 4)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn disagreement_cases() {
        let fmap = crate::reward::FeatureMap::one_hot(3, 1);
        let same = RewardEnsemble::from_heads(fmap.clone(), vec![vec![0.1, 0.5, 0.9]; 2]).unwrap();
        let pool = pool_of(3);
        let pair = select_disagreement(&pool, &same, &HashSet::new()).unwrap();
        assert_eq!(pair.score, 0.0);
        assert_eq!(pair.pool_index, (0, 1));

        // Heads agree on segments 0 and 1 and flip on segment 2.
        let split = RewardEnsemble::from_heads(fmap, vec![vec![0.0, 0.0, 2.0], vec![0.0, 0.0, -2.0]]).unwrap();
        let pair = select_disagreement(&pool, &split, &HashSet::new()).unwrap();
        assert_eq!(pair.pool_index, (0, 2));
        let p = bt_probability(0.0, 2.0);
        assert!((pair.score - (p - 0.5).abs()).abs() < 1e-15);
    }

    #[test]
    fn oracle_answers() {
        let mdp = crate::envs::chain(4, 0.9).unwrap();
        let good = seg(0, vec![(3, 0), (3, 0), (3, 1)]);
        let meh = seg(1, vec![(0, 1), (1, 1), (3, 0)]);
        let pair = QueryPair {
            seg1: good.clone(),
            seg2: meh.clone(),
            score: 0.0,
            strategy: Strategy::Random,
            pool_index: (0, 1),
            heads: None,
        };
        let mut rng = seeded(1);
        assert_eq!(oracle_answer(&mdp, &pair, TeacherMode::Deterministic, &mut rng), 1.0);
        let swapped = QueryPair {
            seg1: meh,
            seg2: good.clone(),
            ..pair.clone()
        };
        assert_eq!(oracle_answer(&mdp, &swapped, TeacherMode::Deterministic, &mut rng), 0.0);
        let tie = QueryPair {
            seg1: good.clone(),
            seg2: seg(2, vec![(3, 1), (3, 1), (3, 1)]),
            ..pair
        };
        assert_eq!(oracle_answer(&mdp, &tie, TeacherMode::Deterministic, &mut rng), 0.5);

        let n = 10_000;
        let mean = (0..n)
            .map(|_| oracle_answer(&mdp, &tie, TeacherMode::Stochastic, &mut rng))
            .sum::<f64>()
            / n as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn pool_sampling_is_seeded_and_ordered() {
        let candidates: Vec<Segment> = (0..50).map(|i| seg(i, vec![(0, 0)])).collect();
        let a = QueryPool::sample(&candidates, 10, 3, 77).unwrap();
        let b = QueryPool::sample(&candidates, 10, 3, 77).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(a.segments.windows(2).all(|w| w[0].trajectory_index < w[1].trajectory_index));
        let all = QueryPool::sample(&candidates, 1000, 3, 77).unwrap();
        assert_eq!(all.len(), 50);
    }
}
