use std::collections::HashSet;

use opride::dataset::Segment;
use opride::envs::random_mdp;
use opride::mdp::{policy_evaluation, value_iteration, TabularMdp, Trajectory};
use opride::query::{oracle_answer, select_ide, QueryPair, QueryPool, Strategy as QueryStrategy, TeacherMode};
use opride::reward::{bt_probability, ce_loss, ce_loss_grad, FeatureMap, PreferenceDataset, PreferenceRecord};
use opride::rng::seeded;
use opride::solver::{SegmentScoring, ValueEnsemble};
use opride::theory::{confidence_set, TrajectoryPreference};
use proptest::prelude::*;

/// `V^π` for a deterministic policy by plain fixed-point iteration.
fn evaluate(mdp: &TabularMdp, actions: &[usize]) -> Vec<f64> {
    let ns = mdp.n_states();
    let mut v = vec![0.0; ns];
    for _ in 0..3000 {
        v = (0..ns)
            .map(|s| {
                let a = actions[s];
                mdp.reward(s, a) + mdp.discount() * mdp.transition_row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum::<f64>()
            })
            .collect();
    }
    v
}

fn all_policies(ns: usize, na: usize) -> Vec<Vec<usize>> {
    (0..na.pow(ns as u32))
        .map(|mut code| {
            (0..ns)
                .map(|_| {
                    let a = code % na;
                    code /= na;
                    a
                })
                .collect()
        })
        .collect()
}

fn segment(steps: Vec<(usize, usize)>, index: usize) -> Segment {
    Segment {
        trajectory_index: index,
        start: 0,
        steps,
    }
}

fn steps(ns: usize, na: usize, len: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0..ns, 0..na), len)
}

/// Pool values and the exhaustive IDE choice `(score, heads, pair)`.
fn brute_force_ide(values: &[Vec<f64>]) -> (f64, (usize, usize), (usize, usize)) {
    let mut best: Option<(f64, (usize, usize, usize, usize))> = None;
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            for a in 0..values[0].len() {
                for b in a + 1..values[0].len() {
                    let score = ((values[i][a] - values[j][a]) - (values[i][b] - values[j][b])).abs();
                    if best.is_none_or(|(top, _)| score > top) {
                        best = Some((score, (i, j, a, b)));
                    }
                }
            }
        }
    }
    let (score, (i, j, a, b)) = best.unwrap();
    (score, (i, j), (a, b))
}

/// One-state-per-segment pool whose `MeanV` values are exactly the head tables.
fn pool_and_ensemble(values: &[Vec<f64>]) -> (QueryPool, ValueEnsemble) {
    let s = values[0].len();
    let pool = QueryPool::new((0..s).map(|k| segment(vec![(k, 0)], k)).collect(), 1, 0).unwrap();
    let mut ens = ValueEnsemble::zeros(values.len(), s, 1);
    ens.v = values.to_vec();
    (pool, ens)
}

/// Quarter-unit values: exact arithmetic with frequent score ties.
fn head_values() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..=4, 2usize..=30).prop_flat_map(|(m, s)| {
        prop::collection::vec(prop::collection::vec((-8i32..8).prop_map(|x| x as f64 * 0.25), s), m)
    })
}

/// Thirds and sixths, whose differences tie only up to rounding.
fn rounded_head_values() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..=4, 2usize..=30).prop_flat_map(|(m, s)| {
        prop::collection::vec(prop::collection::vec((-12i32..12).prop_map(|x| x as f64 / 6.0), s), m)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn value_iteration_matches_policy_enumeration(ns in 1usize..5, na in 1usize..4, gamma in 0.5f64..0.9, seed in any::<u64>()) {
        let mdp = random_mdp(ns, na, gamma, seed).unwrap();
        let vi = value_iteration(&mdp, 1e-12).unwrap();
        let values: Vec<Vec<f64>> = all_policies(ns, na).iter().map(|p| evaluate(&mdp, p)).collect();
        for s in 0..ns {
            let best = values.iter().map(|v| v[s]).fold(f64::MIN, f64::max);
            prop_assert!((vi.v[s] - best).abs() < 1e-8);
        }
        let greedy = policy_evaluation(&mdp, &vi.greedy_policy(), 1e-12).unwrap();
        for s in 0..ns {
            prop_assert!((greedy.v[s] - vi.v[s]).abs() < 1e-8);
        }
    }

    #[test]
    fn bt_probability_is_antisymmetric_and_shift_invariant(a in -50.0f64..50.0, b in -50.0f64..50.0, c in -20.0f64..20.0) {
        prop_assert!((bt_probability(a, b) + bt_probability(b, a) - 1.0).abs() < 1e-12);
        prop_assert!((bt_probability(a + c, b + c) - bt_probability(a, b)).abs() < 1e-9);
        prop_assert!(bt_probability(a, b) >= 0.0 && bt_probability(a, b) <= 1.0);
    }

    #[test]
    fn ce_gradient_matches_finite_differences(
        (ns, na, len) in (2usize..6, 1usize..4, 1usize..5),
        seed in any::<u64>(),
        n in 1usize..8,
    ) {
        use rand::Rng;
        let mut rng = seeded(seed);
        let fmap = FeatureMap::one_hot(ns, na);
        let mut prefs = PreferenceDataset::new();
        let draw = |rng: &mut opride::rng::SeededRng, k| {
            segment((0..len).map(|_| (rng.random_range(0..ns), rng.random_range(0..na))).collect(), k)
        };
        for k in 0..n {
            let (s1, s2) = (draw(&mut rng, 2 * k), draw(&mut rng, 2 * k + 1));
            let label = [0.0, 0.5, 1.0][rng.random_range(0..3)];
            prefs.push(PreferenceRecord::new(s1, s2, label, 1).unwrap()).unwrap();
        }
        let mask = vec![1.0; n];
        let head: Vec<f64> = (0..fmap.dimension()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad = ce_loss_grad(&head, &fmap, &prefs, &mask).unwrap();
        let h = 1e-5;
        for k in 0..head.len() {
            let (mut up, mut down) = (head.clone(), head.clone());
            up[k] += h;
            down[k] -= h;
            let fd = (ce_loss(&up, &fmap, &prefs, &mask).unwrap() - ce_loss(&down, &fmap, &prefs, &mask).unwrap()) / (2.0 * h);
            prop_assert!((fd - grad[k]).abs() <= 1e-6 * (1.0 + grad[k].abs()));
        }
    }

    #[test]
    fn ide_selection_matches_brute_force(values in prop_oneof![head_values(), rounded_head_values()]) {
        let (pool, ens) = pool_and_ensemble(&values);
        let got = select_ide(&pool, &ens, SegmentScoring::MeanV, &HashSet::new()).unwrap();
        let (score, heads, pair) = brute_force_ide(&values);
        prop_assert_eq!(got.score, score);
        prop_assert_eq!(got.heads, Some(heads));
        prop_assert_eq!(got.pool_index, pair);
        prop_assert_eq!(got.strategy, QueryStrategy::Ide);
    }

    #[test]
    fn ide_selection_ignores_positive_scale_and_head_shifts(values in head_values(), shifts in prop::collection::vec(-4i32..4, 4)) {
        let (pool, ens) = pool_and_ensemble(&values);
        let base = select_ide(&pool, &ens, SegmentScoring::MeanV, &HashSet::new()).unwrap();
        // Powers of two and quarter-unit shifts keep the arithmetic exact.
        let moved: Vec<Vec<f64>> = values
            .iter()
            .zip(&shifts)
            .map(|(head, &c)| head.iter().map(|v| 4.0 * v + c as f64 * 0.25).collect())
            .collect();
        let (pool2, ens2) = pool_and_ensemble(&moved);
        let other = select_ide(&pool2, &ens2, SegmentScoring::MeanV, &HashSet::new()).unwrap();
        prop_assert_eq!(base.pool_index, other.pool_index);
        prop_assert_eq!(base.heads, other.heads);
        prop_assert_eq!(4.0 * base.score, other.score);
    }

    #[test]
    fn oracle_labels_flip_with_the_pair(seed in any::<u64>(), (a, b) in (1usize..6).prop_flat_map(|l| (steps(5, 2, l), steps(5, 2, l)))) {
        let mdp = random_mdp(5, 2, 0.9, seed).unwrap();
        let pair = |x: &Vec<(usize, usize)>, y: &Vec<(usize, usize)>| QueryPair {
            seg1: segment(x.clone(), 0),
            seg2: segment(y.clone(), 1),
            score: 0.0,
            strategy: QueryStrategy::Random,
            pool_index: (0, 1),
            heads: None,
        };
        let forward = oracle_answer(&mdp, &pair(&a, &b), TeacherMode::Deterministic, &mut seeded(0));
        let backward = oracle_answer(&mdp, &pair(&b, &a), TeacherMode::Deterministic, &mut seeded(0));
        prop_assert_eq!(forward + backward, 1.0);
        prop_assert_eq!(oracle_answer(&mdp, &pair(&a, &a), TeacherMode::Deterministic, &mut seeded(0)), 0.5);
    }

    #[test]
    fn confidence_sets_grow_with_beta_and_hold_the_mle(
        diffs in (1usize..6).prop_flat_map(|k| prop::collection::vec(prop::collection::vec(-3.0f64..3.0, k), 1..8)),
        labels in prop::collection::vec(prop::sample::select(vec![0.0, 0.5, 1.0]), 6),
        b1 in 0.0f64..4.0,
        extra in 0.0f64..4.0,
    ) {
        let k = diffs[0].len();
        let traj = Trajectory::new(vec![(0, 0)]).unwrap();
        let prefs: Vec<TrajectoryPreference> = labels[..k]
            .iter()
            .map(|&label| TrajectoryPreference { first: traj.clone(), second: traj.clone(), label })
            .collect();
        let small = confidence_set(&diffs, &prefs, b1, k).unwrap();
        let large = confidence_set(&diffs, &prefs, b1 + extra, k).unwrap();
        prop_assert!(small.member_indices.contains(&small.mle));
        prop_assert!(small.member_indices.iter().all(|i| large.member_indices.contains(i)));
        prop_assert_eq!(small.mle, large.mle);
    }
}
