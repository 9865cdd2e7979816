//! Policy evaluation and diagnostics: Monte-Carlo values, the
//! value-iteration oracle, regret, the plug-in sandwich covariance, and
//! cross-validated degree selection.

pub mod model_selection;
pub mod oracle;
pub mod quadrature;
pub mod sandwich;

pub use model_selection::{select_degree, DegreeScore, DegreeSelection};
pub use oracle::{
    cached_oracle, oracle_cache_key, value_iteration, value_iteration_oracle, GridSpec,
    OracleGridPolicy, OracleSolution,
};
pub use sandwich::{sandwich_variance, SandwichEstimate};

use serde::{Deserialize, Serialize};

use crate::envs::{rollout_policy, ScalarEnv};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::rng::RngStream;

/// Trajectory count and horizon of a Monte-Carlo evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub n_traj: usize,
    pub horizon: usize,
}

/// Monte-Carlo estimate of a policy's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub gamma: f64,
    pub mean_discounted: f64,
    pub mean_average_reward: f64,
    /// Standard error of the mean discounted return.
    pub std_error: f64,
    pub n_traj: usize,
    pub horizon: usize,
}

/// Horizon at which `gamma^h * r_max` falls below `1e-6`, so discounted
/// tails are negligible. The fixed-length protocol is still available by
/// passing an explicit horizon to [`mc_evaluate`].
pub fn suggested_horizon(gamma: f64, r_max: f64) -> usize {
    if gamma <= 0.0 {
        return 1;
    }
    let r = r_max.max(1.0);
    let h = ((r / 1e-6).ln() / (1.0 / gamma).ln()).ceil() as usize;
    h.clamp(1, 100_000)
}

/// Monte-Carlo policy evaluation under the omit-reward-residuals protocol
/// (reward noise zeroed, state noise retained).
pub fn mc_evaluate(
    env: &dyn ScalarEnv,
    policy: &dyn Policy,
    gamma: f64,
    n_traj: usize,
    horizon: usize,
    rng: RngStream,
) -> Result<ValueEstimate> {
    mc_evaluate_with(env, policy, gamma, n_traj, horizon, rng, true)
}

/// As [`mc_evaluate`], with the reward residuals kept when
/// `omit_reward_residuals` is false.
pub fn mc_evaluate_with(
    env: &dyn ScalarEnv,
    policy: &dyn Policy,
    gamma: f64,
    n_traj: usize,
    horizon: usize,
    rng: RngStream,
    omit_reward_residuals: bool,
) -> Result<ValueEstimate> {
    if horizon < 1 || n_traj < 1 {
        return Err(Error::Config("horizon and n_traj must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config("gamma must lie in [0, 1)".into()));
    }
    let rollouts = rollout_policy(env, policy, n_traj, horizon, rng, omit_reward_residuals);
    let mut discounted = Vec::with_capacity(n_traj);
    let mut average = Vec::with_capacity(n_traj);
    for rewards in &rollouts {
        let mut disc = 0.0;
        let mut factor = 1.0;
        let mut total = 0.0;
        for &r in rewards {
            disc += factor * r;
            factor *= gamma;
            total += r;
        }
        discounted.push(disc);
        average.push(total / rewards.len() as f64);
    }
    let n = n_traj as f64;
    let mean_discounted = discounted.iter().sum::<f64>() / n;
    let mean_average_reward = average.iter().sum::<f64>() / n;
    let std_error = if n_traj > 1 {
        let var = discounted
            .iter()
            .map(|&x| (x - mean_discounted).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(ValueEstimate {
        gamma,
        mean_discounted,
        mean_average_reward,
        std_error,
        n_traj,
        horizon,
    })
}

/// Which value the regret compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegretMetric {
    Discounted,
    AverageReward,
}

/// Oracle value minus policy value; may be slightly negative from
/// Monte-Carlo noise (preserved, not clipped). Both sides must have been
/// evaluated under the same gamma and horizon.
pub fn regret(
    oracle: &OracleSolution,
    policy_value: &ValueEstimate,
    metric: RegretMetric,
) -> Result<f64> {
    if oracle.mc.gamma != policy_value.gamma {
        return Err(Error::ProtocolMismatch(format!(
            "gamma {} vs {}",
            oracle.mc.gamma, policy_value.gamma
        )));
    }
    if oracle.mc.horizon != policy_value.horizon {
        return Err(Error::ProtocolMismatch(format!(
            "horizon {} vs {}",
            oracle.mc.horizon, policy_value.horizon
        )));
    }
    Ok(match metric {
        RegretMetric::Discounted => oracle.value - policy_value.mean_discounted,
        RegretMetric::AverageReward => {
            oracle.mc.mean_average_reward - policy_value.mean_average_reward
        }
    })
}
