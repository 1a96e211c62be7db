//! JSON documents served to the labeling UI.

use opride::envs::{EnvKind, Geometry};
use opride::orchestrator::{MetricsRecord, PendingQuery, RunOutcome, Session, SessionStatus};
use opride::query::Strategy;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceStatus {
    AwaitingLabel,
    Training,
    Done,
    /// Training or selection failed; `error` says why. Terminal.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    pub state: usize,
    pub action: usize,
    /// `[x, y]` cell of the state in the rendering grid.
    pub position: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentView {
    pub trajectory_index: usize,
    pub start: usize,
    pub steps: Vec<StepView>,
}

/// Everything the UI needs to render one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDocument {
    pub query_id: String,
    pub round: usize,
    pub budget: usize,
    pub segment_length: usize,
    pub strategy: Strategy,
    pub score: f64,
    pub environment: EnvKind,
    pub geometry: Geometry,
    pub segments: [SegmentView; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub config_digest: String,
    /// Round of the latest selected query; 0 before the first one.
    pub round: usize,
    pub budget: usize,
    pub labels: usize,
    pub status: ServiceStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<QueryDocument>,
    pub metrics: Vec<MetricsRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<RunOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn query_id(session_id: &str, round: usize) -> String {
    format!("{session_id}-r{round}")
}

fn segment_view(geometry: &Geometry, seg: &opride::dataset::Segment) -> SegmentView {
    SegmentView {
        trajectory_index: seg.trajectory_index,
        start: seg.start,
        steps: seg
            .steps
            .iter()
            .map(|&(state, action)| StepView {
                state,
                action,
                position: geometry.position(state),
            })
            .collect(),
    }
}

pub fn query_document(session: &Session, session_id: &str, pending: &PendingQuery) -> QueryDocument {
    let geometry = session.geometry();
    let cfg = session.config();
    QueryDocument {
        query_id: query_id(session_id, pending.round),
        round: pending.round,
        budget: session.budget(),
        segment_length: cfg.query.segment_length,
        strategy: pending.pair.strategy,
        score: pending.pair.score,
        environment: cfg.environment.kind,
        segments: [
            segment_view(&geometry, &pending.pair.seg1),
            segment_view(&geometry, &pending.pair.seg2),
        ],
        geometry,
    }
}

/// The document `GET /api/session` serves for `session`.
pub fn snapshot(session: &Session, session_id: &str, error: Option<String>) -> SessionState {
    let pending = session.pending().map(|p| query_document(session, session_id, p));
    let status = match (&error, session.status()) {
        (Some(_), _) => ServiceStatus::Failed,
        (None, SessionStatus::AwaitingLabel) => ServiceStatus::AwaitingLabel,
        (None, SessionStatus::Training) => ServiceStatus::Training,
        (None, SessionStatus::Done) => ServiceStatus::Done,
    };
    let round = match (&pending, session.status()) {
        (Some(p), _) => p.round,
        (None, SessionStatus::Done) => session.budget(),
        (None, _) => session.labels(),
    };
    SessionState {
        session_id: session_id.to_string(),
        config_digest: session.config().digest(),
        round,
        budget: session.budget(),
        labels: session.labels(),
        status,
        pending,
        metrics: session.metrics().to_vec(),
        outcome: session.outcome().cloned(),
        error,
    }
}
