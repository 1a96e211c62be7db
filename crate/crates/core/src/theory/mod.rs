//! Confidence-set exploration over finite hypothesis families.

mod algorithm;
mod experiment;
mod families;
mod pessimism;

pub use algorithm::{
    candidate_policy_set, confidence_set, default_beta, mle_return, nearest_dataset_trajectory, return_differences,
    run_theory_loop, select_exploratory_policies, ConfidenceSet, MixturePolicy, TheoryConfig, TheoryData,
    TheoryOutcome, TheoryQueryMode, TheoryRoundRecord, TrajectoryPreference,
};
pub use experiment::{TheoryExperiment, TheoryTrial};
pub use families::{all_deterministic_policies, generate_families, FamilySpec, FiniteFamilies, MAX_POLICIES};
pub use pessimism::{
    bcp, bcpe, default_epsilon, pessimistic_values, BcpSolution, PessimisticTable, PessimismCache, TransitionSet,
};
