//! Experiment configuration: TOML sections plus dotted `key=value` overrides.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::BehaviorSpec;
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::query::{Strategy, TeacherMode};
use crate::reward::RewardTrainConfig;
use crate::solver::{DiscountSchedule, ScheduleMode, SolverConfig};

/// Query-loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryConfig {
    /// Budget `K`.
    pub query_number: usize,
    pub segment_length: usize,
    /// Segments subsampled per round, `S`.
    pub pool_size: usize,
    pub strategy: Strategy,
    pub teacher: TeacherMode,
    /// Let a pair be asked again in later rounds.
    pub allow_repeat: bool,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            query_number: 10,
            segment_length: 10,
            pool_size: 1000,
            strategy: Strategy::Ide,
            teacher: TeacherMode::Deterministic,
            allow_repeat: false,
        }
    }
}

/// Discount scheduling for the final training pass. The base discount is
/// the environment's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub mode: ScheduleMode,
    pub gamma_small: f64,
    pub top_m_percent: f64,
    pub alpha_soft: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let d = DiscountSchedule::default();
        Self {
            mode: d.mode,
            gamma_small: d.gamma_small,
            top_m_percent: d.m_percent,
            alpha_soft: d.alpha_soft,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Value training before query `c` runs `c` times this many steps.
    pub pretrain_steps_per_round: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain_steps_per_round: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvSpec,
    pub dataset: BehaviorSpec,
    pub query: QueryConfig,
    pub reward: RewardTrainConfig,
    /// `solver.steps` is the final training length.
    pub solver: SolverConfig,
    pub schedule: ScheduleConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialization is infallible")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn discount_schedule(&self) -> DiscountSchedule {
        DiscountSchedule {
            mode: self.schedule.mode,
            gamma: self.environment.discount,
            gamma_small: self.schedule.gamma_small,
            m_percent: self.schedule.top_m_percent,
            alpha_soft: self.schedule.alpha_soft,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let q = &self.query;
        if q.query_number == 0 {
            return Err(Error::Config("query.query_number must be at least 1".into()));
        }
        if q.pool_size < 2 {
            return Err(Error::Config("query.pool_size must be at least 2".into()));
        }
        if q.segment_length == 0 || q.segment_length > self.dataset.horizon {
            return Err(Error::Config("query.segment_length must lie in 1..=dataset.horizon".into()));
        }
        if self.reward.n_heads < 2 {
            return Err(Error::Config("reward.ensemble_number must be at least 2".into()));
        }
        self.dataset.validate().map_err(config_error)?;
        self.solver.validate().map_err(config_error)?;
        // The per-round passes train without scheduling, so only the final one needs a valid schedule.
        self.discount_schedule().validate().map_err(config_error)?;
        Ok(())
    }

    /// Applies `section.key=value` overrides, then validates.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let cfg = apply_overrides(self, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Applies dotted `section.key=value` overrides to any TOML-shaped value.
/// Values are parsed as TOML literals, falling back to plain strings.
pub fn apply_overrides<T, S>(value: &T, overrides: &[S]) -> Result<T>
where
    T: Serialize + DeserializeOwned,
    S: AsRef<str>,
{
    let mut doc = toml::Table::try_from(value).map_err(|e| Error::Config(e.to_string()))?;
    for raw in overrides {
        let raw = raw.as_ref();
        let (key, value) = raw
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{raw}` is not key=value")))?;
        set_dotted(&mut doc, key.trim(), parse_literal(value.trim()))?;
    }
    doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn config_error(e: Error) -> Error {
    match e {
        Error::InvalidArgument(msg) => Error::Config(msg),
        other => other,
    }
}

fn parse_literal(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn set_dotted(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for part in path {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    // Integers given for float fields would otherwise fail to deserialize.
    let value = match (table.get(*last), value) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    table.insert(last.to_string(), value);
    Ok(())
}
