//! Offline preference-based reinforcement learning on tabular MDPs.
//!
//! The pipeline: generate an unlabeled trajectory dataset, learn a reward
//! ensemble from pairwise preferences, train pessimistic value ensembles
//! offline, and pick the next preference query where the value ensemble
//! disagrees most. [`theory`] holds the confidence-set variant over finite
//! hypothesis families.

pub mod dataset;
pub mod envs;
pub mod error;
pub mod mdp;
pub mod orchestrator;
pub mod query;
pub mod reward;
pub mod rng;
pub mod solver;
pub mod theory;

pub use error::{Error, Result};
pub use mdp::{Policy, TabularMdp, Trajectory, ValueTable};
