//! Repeated theory-loop trials on freshly drawn MDPs and families.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::BehaviorSpec;
use crate::envs::{EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::orchestrator::apply_overrides;
use crate::rng::{derive_seed, derived};

use super::algorithm::{confidence_set, default_beta, return_differences, run_theory_loop, TheoryConfig, TheoryData, TheoryOutcome};
use super::families::{generate_families, FamilySpec};

const ENV: u64 = 1;
const FAMILIES: u64 = 2;
const DATA: u64 = 3;
const LOOP: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryExperiment {
    /// For `random` environments each trial draws its own MDP; `environment.seed` is ignored.
    pub environment: EnvSpec,
    pub dataset: BehaviorSpec,
    pub families: FamilySpec,
    pub theory: TheoryConfig,
    pub seed: u64,
    pub trials: usize,
}

impl Default for TheoryExperiment {
    fn default() -> Self {
        Self {
            environment: EnvSpec::random(4, 2, 0.9, 0),
            dataset: BehaviorSpec {
                n_trajectories: 100,
                horizon: 20,
                ..BehaviorSpec::default()
            },
            families: FamilySpec::default(),
            theory: TheoryConfig::default(),
            seed: 0,
            trials: 50,
        }
    }
}

/// One finished trial.
#[derive(Debug, Clone)]
pub struct TheoryTrial {
    pub trial: u64,
    pub subopt: f64,
    /// Whether the final confidence set holds the true reward; `None` when
    /// the family is not realizable.
    pub covered: Option<bool>,
    pub cset_size: usize,
    pub outcome: TheoryOutcome,
}

impl TheoryExperiment {
    pub fn from_toml(text: &str) -> Result<Self> {
        let exp: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        exp.validate()?;
        Ok(exp)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialization is infallible")
    }

    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let exp = apply_overrides(self, overrides)?;
        exp.validate()?;
        Ok(exp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.theory.budget == 0 || self.theory.horizon == 0 {
            return Err(Error::Config("trials, theory.budget and theory.horizon must be at least 1".into()));
        }
        self.dataset.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Runs trial `trial`. Trials are independent and seeded from `(seed, trial)`.
    pub fn run_trial(&self, trial: u64) -> Result<TheoryTrial> {
        let mut env = self.environment.clone();
        if env.kind == EnvKind::Random {
            env.seed = derive_seed(self.seed, ENV, trial);
        }
        let mdp = env.build()?;
        let families = generate_families(&mdp, &self.families, &mut derived(self.seed, FAMILIES, trial))?;
        let data = TheoryData::generate(&mdp, &self.dataset, &mut derived(self.seed, DATA, trial))?;
        let outcome = run_theory_loop(&mdp, &families, &data, &self.theory, &mut derived(self.seed, LOOP, trial))?;

        let beta = self.theory.beta.unwrap_or_else(|| {
            default_beta(self.theory.budget, families.returns.len(), self.theory.c1)
        });
        let diffs = return_differences(&families, mdp.discount(), &outcome.preferences);
        let cset = confidence_set(&diffs, &outcome.preferences, beta, self.theory.budget)?;
        Ok(TheoryTrial {
            trial,
            subopt: outcome.subopt,
            covered: families.true_return.map(|t| cset.member_indices.contains(&t)),
            cset_size: cset.member_indices.len(),
            outcome,
        })
    }

    /// Runs trials `0..self.trials` in parallel, in trial order.
    pub fn run_trials(&self) -> Result<Vec<TheoryTrial>> {
        (0..self.trials as u64).into_par_iter().map(|t| self.run_trial(t)).collect()
    }
}
