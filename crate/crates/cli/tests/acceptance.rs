//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs every criterion by default; pass criterion numbers to run a subset,
//! e.g. `cargo test -p opride-cli --test acceptance -- 1 3`.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use opride::dataset::{coverage_dataset, generate_dataset, BehaviorSpec, Segment};
use opride::envs::{random_mdp, EnvSpec};
use opride::mdp::{policy_evaluation, suboptimality, value_iteration, TabularMdp};
use opride::orchestrator::{run_opride, ExperimentConfig, Session};
use opride::query::{oracle_answer, pair_key, select_ide, write_query_log, QueryPair, QueryPool};
use opride::reward::{ce_loss, ce_loss_grad, FeatureMap, LabeledDataset, PreferenceDataset, PreferenceRecord};
use opride::rng::{derive_seed, derived, seeded};
use opride::solver::{
    extract_policy, segment_value, train_value_functions, DiscountSchedule, SegmentScoring, SolverConfig,
    ValueEnsemble,
};
use opride::theory::{
    default_epsilon, generate_families, pessimistic_values, FamilySpec, TheoryExperiment, TransitionSet,
};
use opride_service::{router, AppState, QueryDocument, ServiceStatus, SessionState};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use tower::ServiceExt;

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Check {
    Check { pass, detail }
}

type Criterion = (u32, &'static str, Duration, fn() -> Check);

fn main() {
    let picked: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 10] = [
        (1, "solver matches value iteration", secs(60), oracle_equivalence),
        (2, "cross-entropy gradient", secs(10), gradient_check),
        (3, "IDE selection is exact", secs(10), selection_exactness),
        (4, "IDE beats random", secs(600), ide_beats_random),
        (5, "discount scheduling under overestimation", secs(600), schedule_pessimism),
        (6, "query-budget monotonicity", secs(1200), budget_monotonicity),
        (7, "confidence-set coverage", secs(300), theory_coverage),
        (8, "pessimistic values are lower bounds", secs(300), bcpe_pessimism),
        (9, "theory loop improves with budget", secs(600), theory_trend),
        (10, "label-service parity", secs(120), service_parity),
    ];
    let mut failed = Vec::new();
    for (id, name, limit, run) in criteria {
        if !picked.is_empty() && !picked.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let mut result = run();
        let took = t.elapsed();
        if took > limit {
            result.pass = false;
            result.detail.push_str(&format!("; over the {}s limit", limit.as_secs()));
        }
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict} {name}: {} [{:.1}s]", result.detail, took.as_secs_f64());
        if !result.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard error of the mean.
fn std_err(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0);
    (var / xs.len() as f64).sqrt()
}

/// Paired comparison: `(mean a, mean b, seeds where a <= b)`.
fn paired(results: &[(f64, f64)]) -> (f64, f64, usize) {
    let a: Vec<f64> = results.iter().map(|r| r.0).collect();
    let b: Vec<f64> = results.iter().map(|r| r.1).collect();
    let wins = results.iter().filter(|r| r.0 <= r.1 + 1e-9).count();
    (mean(&a), mean(&b), wins)
}

/// The dynamics the dataset actually shows: `P̂(s'|s,a)` from transition counts.
fn empirical_mdp(mdp: &TabularMdp, data: &opride::dataset::OfflineDataset) -> TabularMdp {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut counts = vec![0.0; ns * na * ns];
    let mut totals = vec![0.0; ns * na];
    for t in data.transitions() {
        counts[(t.state * na + t.action) * ns + t.next_state] += 1.0;
        totals[t.state * na + t.action] += 1.0;
    }
    let p = counts.iter().enumerate().map(|(k, c)| c / totals[k / ns]).collect();
    TabularMdp::from_flat(ns, na, p, mdp.reward_table().to_vec(), mdp.discount(), mdp.start_state()).unwrap()
}

fn oracle_equivalence() -> Check {
    let cfg = SolverConfig {
        expectile_tau: 0.99,
        learning_rate: 0.002,
        batch_size: 64,
        steps: 400_000,
        target_update_rate: 0.05,
        ..SolverConfig::default()
    };
    let gaps: Vec<(f64, f64)> = (0..20u64)
        .into_par_iter()
        .map(|i| {
            let ns = 3 + (i as usize % 10);
            let mdp = random_mdp(ns, 2 + (i as usize % 3), 0.9, i).unwrap();
            let pairs: Vec<_> = (0..ns).flat_map(|s| (0..mdp.n_actions()).map(move |a| (s, a))).collect();
            let data = coverage_dataset(&mdp, &pairs, 1000, &mut derived(i, 1, 0)).unwrap();
            let truth = mdp.reward_table().to_vec();
            let labeled = LabeledDataset::from_tables(&data, vec![truth.clone(), truth]).unwrap();
            let ens = train_value_functions(&labeled, &DiscountSchedule::off(0.9), &cfg, &mut derived(i, 2, 0)).unwrap();
            let s0 = mdp.start_state();
            let emp = empirical_mdp(&mdp, &data);
            let optimal = value_iteration(&emp, 1e-12).unwrap().v[s0];
            let recovered = policy_evaluation(&emp, &ens.greedy_policy(), 1e-12).unwrap().v[s0];
            (optimal - recovered, (ens.mean_v()[s0] - optimal).abs())
        })
        .collect();
    let worst = gaps.iter().map(|g| g.0).fold(0.0, f64::max);
    let worst_estimate = gaps.iter().map(|g| g.1).fold(0.0, f64::max);
    check(
        worst <= 1e-2,
        format!("20 MDPs, max V*(s0) - V^pi(s0) = {worst:.2e} (max |V_hat(s0) - V*(s0)| = {worst_estimate:.3})"),
    )
}

fn random_segment<R: Rng>(rng: &mut R, ns: usize, na: usize, len: usize, index: usize) -> Segment {
    Segment {
        trajectory_index: index,
        start: 0,
        steps: (0..len).map(|_| (rng.random_range(0..ns), rng.random_range(0..na))).collect(),
    }
}

/// Bradley-Terry cross-entropy written out directly, for the finite differences.
fn reference_loss(head: &[f64], fmap: &FeatureMap, prefs: &PreferenceDataset, mask: &[f64]) -> f64 {
    let ret = |seg: &Segment| seg.steps.iter().map(|&(s, a)| fmap.reward(head, s, a)).sum::<f64>();
    let mut total = 0.0;
    for (r, w) in prefs.records().iter().zip(mask) {
        let p = 1.0 / (1.0 + (ret(&r.seg2) - ret(&r.seg1)).exp());
        total -= w * (r.label * p.ln() + (1.0 - r.label) * (1.0 - p).ln());
    }
    total / mask.iter().sum::<f64>()
}

fn gradient_check() -> Check {
    let mut worst: f64 = 0.0;
    let mut loss_mismatch: f64 = 0.0;
    for i in 0..100u64 {
        let mut rng = seeded(i);
        let (ns, na) = (rng.random_range(2..8), rng.random_range(1..4));
        let fmap = if i % 2 == 0 {
            FeatureMap::one_hot(ns, na)
        } else {
            let d = rng.random_range(1..6);
            FeatureMap::table(ns, na, d, (0..ns * na * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let len = rng.random_range(1..6);
        let mut prefs = PreferenceDataset::new();
        for k in 0..rng.random_range(1..12) {
            let seg1 = random_segment(&mut rng, ns, na, len, 2 * k);
            let seg2 = random_segment(&mut rng, ns, na, len, 2 * k + 1);
            let label = [0.0, 0.5, 1.0][rng.random_range(0..3)];
            prefs.push(PreferenceRecord::new(seg1, seg2, label, 1).unwrap()).unwrap();
        }
        let mask: Vec<f64> = (0..prefs.len()).map(|_| rng.random_range(0..3) as f64).collect();
        let mask = if mask.iter().sum::<f64>() == 0.0 { vec![1.0; prefs.len()] } else { mask };
        let head: Vec<f64> = (0..fmap.dimension()).map(|_| rng.random_range(-1.0..1.0)).collect();

        let analytic = ce_loss_grad(&head, &fmap, &prefs, &mask).unwrap();
        let h = 1e-5;
        let numeric: Vec<f64> = (0..head.len())
            .map(|k| {
                let (mut up, mut down) = (head.clone(), head.clone());
                up[k] += h;
                down[k] -= h;
                (reference_loss(&up, &fmap, &prefs, &mask) - reference_loss(&down, &fmap, &prefs, &mask)) / (2.0 * h)
            })
            .collect();
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().chain(&numeric).map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
        worst = worst.max(diff / scale);
        let loss = ce_loss(&head, &fmap, &prefs, &mask).unwrap();
        loss_mismatch = loss_mismatch.max((loss - reference_loss(&head, &fmap, &prefs, &mask)).abs());
    }
    check(
        worst <= 1e-5 && loss_mismatch <= 1e-10,
        format!("100 instances, max relative error {worst:.2e}, max loss mismatch {loss_mismatch:.1e}"),
    )
}

/// Every allowed `(i, j, a, b)` with `i < j`, `a < b`; larger score wins, ties to the smallest tuple.
fn brute_force_ide(values: &[Vec<f64>], banned: &HashSet<(usize, usize)>) -> (f64, (usize, usize), (usize, usize)) {
    let (m, s) = (values.len(), values[0].len());
    let mut best: Option<(f64, (usize, usize, usize, usize))> = None;
    for i in 0..m {
        for j in i + 1..m {
            for a in 0..s {
                for b in (a + 1..s).filter(|b| !banned.contains(&(a, *b))) {
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

fn selection_exactness() -> Check {
    let mut mismatches = 0;
    for n in 0..100u64 {
        let mut rng = seeded(1000 + n);
        let (ns, m, s) = (rng.random_range(2..10), rng.random_range(2..=4), rng.random_range(2..=30));
        let len = rng.random_range(1..4);
        let segments: Vec<Segment> = (0..s).map(|k| random_segment(&mut rng, ns, 1, len, k)).collect();
        let pool = QueryPool::new(segments, 1, n).unwrap();
        let mut ens = ValueEnsemble::zeros(m, ns, 1);
        for head in &mut ens.v {
            // Coarse values make exact score ties common.
            head.iter_mut().for_each(|v| *v = rng.random_range(0..5) as f64 * 0.5);
        }
        let values: Vec<Vec<f64>> = (0..m)
            .map(|h| pool.segments.iter().map(|seg| segment_value(&ens, h, seg, SegmentScoring::MeanV)).collect())
            .collect();
        // Every other instance bans a few pairs, as repeated queries are.
        let banned: HashSet<(usize, usize)> = if n % 2 == 0 || s < 3 {
            HashSet::new()
        } else {
            (0..rng.random_range(1..s))
                .map(|_| {
                    let ab = sample(&mut rng, s, 2).into_vec();
                    (ab[0].min(ab[1]), ab[0].max(ab[1]))
                })
                .collect()
        };
        let excluded = banned.iter().map(|&(a, b)| pair_key(&pool.segments[a], &pool.segments[b])).collect();
        let got = select_ide(&pool, &ens, SegmentScoring::MeanV, &excluded).unwrap();
        let (score, heads, pair) = brute_force_ide(&values, &banned);
        if got.score != score || got.heads != Some(heads) || got.pool_index != pair {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("100 instances, {mismatches} mismatches"))
}

fn base_config(env: &str) -> ExperimentConfig {
    ExperimentConfig::default()
        .with_overrides(&[env, "environment.discount=0.9", "query.query_number=10", "reward.ensemble_number=2"])
        .unwrap()
}

fn final_subopt(cfg: &ExperimentConfig, overrides: &[String], seed: u64) -> f64 {
    let mut cfg = cfg.with_overrides(overrides).unwrap();
    cfg.run.seed = seed;
    run_opride(&cfg).unwrap().outcome.suboptimality
}

fn ide_beats_random() -> Check {
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, env) in [("chain-6", "environment.kind=chain"), ("grid-5x5", "environment.kind=gridworld")] {
        let cfg = base_config(env);
        let results: Vec<(f64, f64)> = (0..20u64)
            .into_par_iter()
            .map(|seed| {
                (
                    final_subopt(&cfg, &["query.strategy=ide".into()], seed),
                    final_subopt(&cfg, &["query.strategy=random".into()], seed),
                )
            })
            .collect();
        let (ide, random, wins) = paired(&results);
        pass &= ide <= random && wins >= 14;
        detail.push(format!("{name} IDE {ide:.3} vs random {random:.3}, IDE wins {wins}/20"));
    }
    check(pass, detail.join("; "))
}

fn schedule_pessimism() -> Check {
    let gamma = 0.9;
    let cfg = SolverConfig::default();
    let results: Vec<(f64, f64)> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let mdp = EnvSpec::chain(6, gamma).build().unwrap();
            let data = generate_dataset(&mdp, &BehaviorSpec::default(), &mut derived(seed, 1, 0)).unwrap();
            let mut labeled = LabeledDataset::from_tables(&data, vec![mdp.reward_table().to_vec(); 2]).unwrap();
            let mut rng = derived(seed, 9, 0);
            let np = mdp.n_pairs();
            let corrupted = sample(&mut rng, np, (0.3 * np as f64).round() as usize).into_vec();
            labeled.inject_overestimation(&corrupted, 3.0, &mut rng);
            let run = |sched: DiscountSchedule| {
                let v = train_value_functions(&labeled, &sched, &cfg, &mut derived(seed, 3, 0)).unwrap();
                suboptimality(&mdp, &extract_policy(&labeled, &v, &cfg)).unwrap()
            };
            (run(DiscountSchedule::hard(gamma, 0.7, 30.0)), run(DiscountSchedule::off(gamma)))
        })
        .collect();
    let (hard, off, wins) = paired(&results);
    check(
        hard <= off && wins >= 14,
        format!("chain-6, U(0,3) noise on 30% of pairs: hard {hard:.3} vs off {off:.3}, hard wins {wins}/20"),
    )
}

fn budget_monotonicity() -> Check {
    let cfg = base_config("environment.kind=chain");
    let budgets = [2usize, 5, 10, 20];
    let runs: Vec<Vec<f64>> = budgets
        .iter()
        .map(|k| {
            (0..20u64)
                .into_par_iter()
                .map(|seed| final_subopt(&cfg, &[format!("query.query_number={k}")], seed))
                .collect()
        })
        .collect();
    let means: Vec<f64> = runs.iter().map(|r| mean(r)).collect();
    let mut violations = 0;
    let mut beyond_se = 0;
    for w in 0..budgets.len() - 1 {
        if means[w + 1] > means[w] {
            violations += 1;
            let pooled = (std_err(&runs[w]).powi(2) + std_err(&runs[w + 1]).powi(2)).sqrt();
            if means[w + 1] - means[w] > pooled {
                beyond_se += 1;
            }
        }
    }
    let listed: Vec<String> = budgets.iter().zip(&means).map(|(k, m)| format!("K={k}: {m:.3}")).collect();
    check(
        violations <= 1 && beyond_se == 0,
        format!("{}; {violations} increase(s), {beyond_se} beyond one pooled SE", listed.join(", ")),
    )
}

fn theory_coverage() -> Check {
    let exp = TheoryExperiment::default().with_overrides(&["trials=100", "theory.budget=16"]).unwrap();
    let trials = exp.run_trials().unwrap();
    let covered = trials.iter().filter(|t| t.covered == Some(true)).count();
    check(covered >= 85, format!("true hypothesis in the K=16 confidence set in {covered}/100 trials"))
}

fn bcpe_pessimism() -> Check {
    let results: Vec<(usize, usize, f64)> = (0..50u64)
        .into_par_iter()
        .map(|t| {
            let mdp = random_mdp(4, 2, 0.9, derive_seed(t, 1, 0)).unwrap();
            let families = generate_families(&mdp, &FamilySpec::default(), &mut derived(t, 2, 0)).unwrap();
            let data = TransitionSet::exhaustive(&mdp, 1000).unwrap();
            let truth = &families.returns[families.true_return.unwrap()];
            let true_values: Vec<f64> = (0..families.policies.len())
                .map(|p| policy_evaluation(&mdp, &families.policy(p), 1e-12).unwrap().v[mdp.start_state()])
                .collect();
            let eps = default_epsilon(data.n_samples, families.policies.len(), families.qfuncs.len(), 2.0);
            let mut checked = 0;
            let mut violations = 0;
            let mut slack = f64::INFINITY;
            for epsilon in [0.0, eps] {
                let table =
                    pessimistic_values(&families, truth, mdp.discount(), mdp.start_state(), &data, epsilon).unwrap();
                for (v_hat, v) in table.values.iter().zip(&true_values) {
                    checked += 1;
                    if *v_hat > v + 1e-6 {
                        violations += 1;
                    }
                    slack = slack.min(v - v_hat);
                }
            }
            (checked, violations, slack)
        })
        .collect();
    let checked: usize = results.iter().map(|r| r.0).sum();
    let violations: usize = results.iter().map(|r| r.1).sum();
    let slack = results.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    check(
        violations == 0,
        format!("50 trials, {checked} (policy, epsilon) checks, {violations} violations, min V - v_hat = {slack:.2e}"),
    )
}

fn theory_trend() -> Check {
    let subopt = |budget: usize| -> f64 {
        let exp = TheoryExperiment::default()
            .with_overrides(&["trials=50".to_string(), format!("theory.budget={budget}")])
            .unwrap();
        let trials = exp.run_trials().unwrap();
        mean(&trials.iter().map(|t| t.subopt).collect::<Vec<_>>())
    };
    let (k4, k32) = (subopt(4), subopt(32));
    check(k32 < k4, format!("mean SubOpt over 50 seeds: K=4 {k4:.3}, K=32 {k32:.3}"))
}

async fn send(app: &Router, method: &str, uri: &str, body: String) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn settled(app: &Router) -> SessionState {
    loop {
        let (_, body) = send(app, "GET", "/api/session", String::new()).await;
        let s: SessionState = serde_json::from_slice(&body).unwrap();
        if s.status != ServiceStatus::Training {
            return s;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

/// Answers every query over HTTP with the scripted oracle; returns the log bytes and the served state.
async fn drive_service(cfg: &ExperimentConfig, log: std::path::PathBuf) -> Result<(Vec<u8>, SessionState), String> {
    let mdp = cfg.environment.build().unwrap();
    let app = router(AppState::start(Session::new(cfg.clone()).unwrap(), Some(log.clone())), None);
    loop {
        let s = settled(&app).await;
        match s.status {
            ServiceStatus::Done => return Ok((std::fs::read(&log).unwrap(), s)),
            ServiceStatus::Failed => return Err(s.error.unwrap_or_default()),
            _ => {}
        }
        let (_, body) = send(&app, "GET", "/api/query/next", String::new()).await;
        let doc: QueryDocument = serde_json::from_slice(&body).unwrap();
        let [seg1, seg2] = doc.segments.clone().map(|v| Segment {
            trajectory_index: v.trajectory_index,
            start: v.start,
            steps: v.steps.iter().map(|st| (st.state, st.action)).collect(),
        });
        let pair = QueryPair {
            seg1,
            seg2,
            score: doc.score,
            strategy: doc.strategy,
            pool_index: (0, 0),
            heads: None,
        };
        let label = match oracle_answer(&mdp, &pair, cfg.query.teacher, &mut seeded(0)) {
            l if l == 1.0 => "1",
            l if l == 0.0 => "0",
            _ => "tie",
        };
        let uri = format!("/api/query/{}/answer", doc.query_id);
        let (status, _) = send(&app, "POST", &uri, format!(r#"{{"label":"{label}"}}"#)).await;
        if status != StatusCode::ACCEPTED {
            return Err(format!("answer rejected with {status}"));
        }
    }
}

fn service_parity() -> Check {
    let cfg = base_config("environment.kind=chain").with_overrides(&["run.seed=7"]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let served = runtime.block_on(drive_service(&cfg, dir.path().join("queries.jsonl")));
    let (log, state) = match served {
        Ok(x) => x,
        Err(e) => return check(false, format!("service failed: {e}")),
    };
    let report = run_opride(&cfg).unwrap();
    let mut expected = Vec::new();
    write_query_log(report.session.query_log(), &mut expected).unwrap();
    let outcome = state.outcome.unwrap();
    let same_policy = serde_json::to_vec(&outcome.policy).unwrap() == serde_json::to_vec(&report.outcome.policy).unwrap();
    check(
        log == expected && same_policy,
        format!(
            "{} queries; log identical: {}, final policy identical: {}",
            report.session.query_log().len(),
            log == expected,
            same_policy
        ),
    )
}
