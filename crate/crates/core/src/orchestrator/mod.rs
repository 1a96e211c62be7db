//! Experiment configuration and the end-to-end query loop.

mod config;
mod run;
mod session;

pub use config::{apply_overrides, ExperimentConfig, QueryConfig, RunConfig, ScheduleConfig};
pub use run::{
    eval_policy, run_opride, run_session, sweep, sweep_cells, write_metrics, write_sweep_csv, PolicyEvaluation,
    RunReport, SweepAxis, SweepRun,
};
pub use session::{build_environment, MetricsRecord, PendingQuery, RunOutcome, Session, SessionStatus};
