//! Run configuration: one JSON document fully determines an experiment.
//!
//! Sections: `env` (which simulator and its parameters), `experiment`
//! (sample sizes, discount, feature degree, solver controls, seed),
//! `eval` (Monte-Carlo protocol and oracle grid), optional `sweep`
//! (axis, values, learners, replications), optional `select_degree`
//! (cross-validation), and `behavior` (data-collection policy).

use std::path::Path;

use serde::{Deserialize, Serialize};

use gfqi::data::{Dataset, ExperimentConfig};
use gfqi::envs::{
    simulate_semi_synthetic, simulate_synthetic, BehaviorSpec, ScalarEnv, SemiSyntheticEnvParams,
    SyntheticEnvParams,
};
use gfqi::error::{Error, Result};
use gfqi::eval::{suggested_horizon, EvalProtocol, GridSpec};
use gfqi::features::FeatureMap;
use gfqi::learners::{EpsilonGreedyPolicy, LearnerKind, QEstimate};
use gfqi::policy::{Policy, UniformRandom};
use gfqi::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvConfig {
    Synthetic(SyntheticEnvParams),
    SemiSynthetic(SemiSyntheticEnvParams),
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            EnvConfig::Synthetic(p) => p.validate(),
            EnvConfig::SemiSynthetic(p) => p.validate(),
        }
    }

    pub fn action_count(&self) -> usize {
        self.scalar().action_count()
    }

    pub fn scalar(&self) -> &dyn ScalarEnv {
        match self {
            EnvConfig::Synthetic(p) => p,
            EnvConfig::SemiSynthetic(p) => p,
        }
    }

    /// Generate a clustered dataset. For the semi-synthetic family the
    /// experiment section's `psi` is authoritative and replaces the value
    /// in the env parameters.
    pub fn simulate(
        &self,
        cfg: &ExperimentConfig,
        behavior: &dyn Policy,
        rng: RngStream,
    ) -> Result<Dataset> {
        match self {
            EnvConfig::Synthetic(p) => simulate_synthetic(p, cfg, behavior, rng),
            EnvConfig::SemiSynthetic(p) => {
                let p = p.clone().with_psi(cfg.psi);
                simulate_semi_synthetic(&p, cfg, behavior, rng)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Trajectories per Monte-Carlo evaluation.
    pub n_traj: usize,
    /// Fixed rollout length; when absent the horizon is truncated where
    /// the discounted tail falls below 1e-6.
    pub horizon: Option<usize>,
    /// Trajectories for the oracle's own value estimate.
    pub oracle_n_traj: usize,
    pub grid: GridSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_traj: 100,
            horizon: None,
            oracle_n_traj: 10_000,
            grid: GridSpec::default(),
        }
    }
}

impl EvalConfig {
    pub fn protocol(&self, env: &dyn ScalarEnv, gamma: f64) -> EvalProtocol {
        let horizon = self
            .horizon
            .unwrap_or_else(|| suggested_horizon(gamma, env.reward_bound_hint()));
        EvalProtocol {
            n_traj: self.n_traj,
            horizon,
        }
    }

    pub fn oracle_protocol(&self, env: &dyn ScalarEnv, gamma: f64) -> EvalProtocol {
        EvalProtocol {
            n_traj: self.oracle_n_traj,
            ..self.protocol(env, gamma)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    NClusters,
    ClusterSize,
    Horizon,
    Psi,
}

impl SweepAxis {
    pub fn label(&self) -> &'static str {
        match self {
            SweepAxis::NClusters => "n_clusters",
            SweepAxis::ClusterSize => "cluster_size",
            SweepAxis::Horizon => "horizon",
            SweepAxis::Psi => "psi",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub learners: Vec<LearnerKind>,
    pub replications: usize,
}

impl SweepConfig {
    pub fn validate(&self, env: &EnvConfig) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep has no axis values".into()));
        }
        if self.learners.is_empty() {
            return Err(Error::Config("sweep has no learners".into()));
        }
        let mut sorted = self.values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.dedup();
        if sorted.len() != self.values.len() {
            return Err(Error::Config("sweep values must be distinct".into()));
        }
        if self.replications < 1 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        for &v in &self.values {
            match self.axis {
                SweepAxis::Psi => {
                    if v < 0.0 {
                        return Err(Error::Config(format!("psi value {v} must be >= 0")));
                    }
                    if !matches!(env, EnvConfig::SemiSynthetic(_)) {
                        return Err(Error::Config(
                            "the psi axis requires the semi-synthetic environment".into(),
                        ));
                    }
                }
                _ => {
                    if v.fract() != 0.0 || v < 1.0 {
                        return Err(Error::Config(format!(
                            "{} value {v} must be a positive integer",
                            self.axis.label()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Apply one axis value to the base experiment config.
    pub fn apply(&self, base: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self.axis {
            SweepAxis::NClusters => cfg.n_clusters = value as usize,
            SweepAxis::ClusterSize => cfg.cluster_size = value as usize,
            SweepAxis::Horizon => cfg.horizon = value as usize,
            SweepAxis::Psi => cfg.psi = value,
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub degrees: Vec<usize>,
    pub folds: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            degrees: vec![1, 2, 3, 4],
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_behavior")]
    pub behavior: BehaviorSpec,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub select_degree: Option<CvConfig>,
}

fn default_behavior() -> BehaviorSpec {
    BehaviorSpec::UniformRandom
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.experiment.validate()?;
        self.behavior.validate()?;
        if let Some(sweep) = &self.sweep {
            sweep.validate(&self.env)?;
        }
        if let Some(cv) = &self.select_degree {
            if cv.degrees.is_empty() || cv.folds < 2 {
                return Err(Error::Config(
                    "select_degree needs candidate degrees and >= 2 folds".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn feature_map(&self) -> Result<FeatureMap> {
        FeatureMap::new(self.env.action_count(), 1, self.experiment.degree)
    }

    /// Materialize the behavior policy against this run's feature map.
    pub fn behavior_policy(&self) -> Result<Box<dyn Policy>> {
        build_behavior(
            &self.behavior,
            self.env.action_count(),
            self.experiment.degree,
            self.experiment.gamma,
        )
    }
}

/// Build a behavior policy from its specification. An epsilon-greedy
/// behavior interprets its coefficient vector under a feature map with
/// the given degree (scalar states).
pub fn build_behavior(
    spec: &BehaviorSpec,
    action_count: usize,
    degree: usize,
    gamma: f64,
) -> Result<Box<dyn Policy>> {
    spec.validate()?;
    match spec {
        BehaviorSpec::UniformRandom => Ok(Box::new(UniformRandom { action_count })),
        BehaviorSpec::EpsilonGreedy { beta, epsilon } => {
            let map = FeatureMap::new(action_count, 1, degree)?;
            let q = QEstimate::new(nalgebra::DVector::from_vec(beta.clone()), map, gamma)?;
            Ok(Box::new(EpsilonGreedyPolicy {
                q,
                epsilon: *epsilon,
            }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip() {
        let cfg = RunConfig {
            env: EnvConfig::Synthetic(SyntheticEnvParams::default()),
            experiment: ExperimentConfig::default(),
            eval: EvalConfig::default(),
            behavior: BehaviorSpec::UniformRandom,
            sweep: Some(SweepConfig {
                axis: SweepAxis::NClusters,
                values: vec![5.0, 10.0],
                learners: vec![LearnerKind::Fqi, LearnerKind::GfqiExchangeable],
                replications: 3,
            }),
            select_degree: None,
        };
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn psi_axis_requires_semi_synthetic() {
        let sweep = SweepConfig {
            axis: SweepAxis::Psi,
            values: vec![1.0, 3.0],
            learners: vec![LearnerKind::Fqi],
            replications: 2,
        };
        let synth = EnvConfig::Synthetic(SyntheticEnvParams::default());
        assert!(sweep.validate(&synth).is_err());
        let semi = EnvConfig::SemiSynthetic(SemiSyntheticEnvParams::smoke_defaults());
        assert!(sweep.validate(&semi).is_ok());
    }

    #[test]
    fn fractional_count_rejected() {
        let sweep = SweepConfig {
            axis: SweepAxis::NClusters,
            values: vec![5.5],
            learners: vec![LearnerKind::Fqi],
            replications: 2,
        };
        let env = EnvConfig::Synthetic(SyntheticEnvParams::default());
        assert!(sweep.validate(&env).is_err());
    }

    #[test]
    fn minimal_json_uses_defaults() {
        let text = r#"{ "env": { "kind": "synthetic",
            "state_coef": 0.5, "reward_quad_coef": 0.25,
            "sigma1_sq": 0.25, "sigma2_sq": 0.25, "sigma3_sq": 4.0,
            "init_state_mean": 0.0, "init_state_std": 1.0 } }"#;
        let cfg: RunConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.experiment.n_clusters, 5);
        assert_eq!(cfg.eval.n_traj, 100);
        assert_eq!(cfg.behavior, BehaviorSpec::UniformRandom);
    }
}
