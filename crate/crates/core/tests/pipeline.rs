use opride::dataset::OfflineDataset;
use opride::orchestrator::{build_environment, run_opride, ExperimentConfig, Session, SessionStatus};
use opride::query::{oracle_answer, write_query_log};
use opride::rng::seeded;

fn small(seed: u64) -> ExperimentConfig {
    ExperimentConfig::default()
        .with_overrides(&[
            "environment.kind=gridworld",
            "environment.width=3",
            "environment.height=3",
            "environment.discount=0.9",
            "dataset.n_trajectories=30",
            "dataset.horizon=10",
            "query.segment_length=5",
            "query.pool_size=40",
            "query.query_number=3",
            "solver.steps=400",
            "solver.batch_size=32",
            "run.pretrain_steps_per_round=100",
            &format!("run.seed={seed}"),
        ])
        .unwrap()
}

fn log_bytes(cfg: &ExperimentConfig) -> Vec<u8> {
    let report = run_opride(cfg).unwrap();
    let mut out = Vec::new();
    write_query_log(report.session.query_log(), &mut out).unwrap();
    out
}

#[test]
fn runs_are_reproducible_per_seed() {
    assert_eq!(log_bytes(&small(4)), log_bytes(&small(4)));
    assert_ne!(log_bytes(&small(4)), log_bytes(&small(5)));
}

#[test]
fn stepping_a_session_by_hand_matches_the_driver() {
    let cfg = small(9);
    let mut session = Session::new(cfg.clone()).unwrap();
    let mdp = cfg.environment.build().unwrap();
    while !session.ready_to_finish() {
        let pair = session.prepare_query().unwrap().pair.clone();
        let label = oracle_answer(&mdp, &pair, cfg.query.teacher, &mut seeded(0));
        session.answer(label).unwrap();
    }
    let outcome = session.finish().unwrap().clone();
    assert_eq!(session.status(), SessionStatus::Done);
    let report = run_opride(&cfg).unwrap();
    assert_eq!(outcome.policy, report.outcome.policy);
    assert_eq!(session.query_log(), report.session.query_log());
    assert!(outcome.suboptimality >= 0.0);
}

#[test]
fn config_and_dataset_survive_serialization() {
    let cfg = small(2);
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let (mdp, data) = build_environment(&cfg).unwrap();
    let mut text = Vec::new();
    data.write_jsonl(&mut text).unwrap();
    let back = OfflineDataset::read_jsonl(text.as_slice(), &mdp).unwrap();
    assert_eq!(back, data);

    let session = Session::with_dataset(cfg.clone(), mdp, back).unwrap();
    let report = opride::orchestrator::run_session(session).unwrap();
    assert_eq!(report.outcome, run_opride(&cfg).unwrap().outcome);
}
