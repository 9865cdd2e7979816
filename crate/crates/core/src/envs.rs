//! Clustered-MDP simulators and policy rollouts.
//!
//! Two scalar-state environment families ship with the crate:
//!
//! * [`SyntheticEnvParams`]: sign-flip dynamics with a quadratic reward,
//!   a cluster-level state shock, and a large cluster-level reward shock.
//! * [`SemiSyntheticEnvParams`]: user-supplied per-action polynomial mean
//!   models whose noise is split between cluster and individual levels by
//!   a correlation scale `psi`, keeping marginal variances invariant.
//!
//! Both generate [`Dataset`]s in which all members of a cluster share the
//! time-local shocks, so trajectories are marginally Markovian but
//! intra-cluster dependent. Shocks are independent over time.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClusterBlock, Dataset, ExperimentConfig, Transition};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::rng::RngStream;

/// Scalar-state environment interface: marginal mean dynamics plus
/// marginal noise scales. Enough for rollouts, Monte-Carlo evaluation and
/// the value-iteration oracle; the clustered structure only matters when
/// generating training datasets.
pub trait ScalarEnv: Sync {
    fn action_count(&self) -> usize;
    fn mean_reward(&self, state: f64, action: usize) -> f64;
    fn mean_next_state(&self, state: f64, action: usize) -> f64;
    /// Marginal standard deviation of the next-state noise.
    fn state_noise_std(&self) -> f64;
    /// Marginal standard deviation of the reward noise.
    fn reward_noise_std(&self) -> f64;
    fn initial_state_mean(&self) -> f64;
    fn initial_state_std(&self) -> f64;

    /// Rough upper bound on |reward| over the visited state range, used to
    /// pick discounted-evaluation horizons. Scans the mean reward over a
    /// wide state band; precision is unimportant (the horizon depends on
    /// it logarithmically).
    fn reward_bound_hint(&self) -> f64 {
        let span = 8.0 * self.initial_state_std().max(self.state_noise_std()).max(0.5);
        let center = self.initial_state_mean();
        let mut bound: f64 = 1.0;
        for k in 0..=32 {
            let s = center - span + 2.0 * span * (k as f64) / 32.0;
            for a in 0..self.action_count() {
                bound = bound.max(self.mean_reward(s, a).abs());
            }
        }
        2.0 * bound
    }
}

/// Synthetic clustered environment.
///
/// State update: `S' = state_coef * S * (2A - 1) + b` with a cluster-level
/// shock `b ~ N(0, sigma1_sq)` shared by all members at a given time.
/// Reward: `R = reward_quad_coef * S^2 * (2A - 1) + S + a + e` with a
/// cluster-level shock `a ~ N(0, sigma3_sq)` and individual noise
/// `e ~ N(0, sigma2_sq)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEnvParams {
    pub state_coef: f64,
    pub reward_quad_coef: f64,
    /// Cluster-level state-shock variance.
    pub sigma1_sq: f64,
    /// Individual reward-noise variance.
    pub sigma2_sq: f64,
    /// Cluster-level reward-shock variance.
    pub sigma3_sq: f64,
    pub init_state_mean: f64,
    pub init_state_std: f64,
}

impl Default for SyntheticEnvParams {
    fn default() -> Self {
        SyntheticEnvParams {
            state_coef: 0.5,
            reward_quad_coef: 0.25,
            sigma1_sq: 0.25,
            sigma2_sq: 0.25,
            sigma3_sq: 4.0,
            init_state_mean: 0.0,
            init_state_std: 1.0,
        }
    }
}

impl SyntheticEnvParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma1_sq < 0.0 || self.sigma2_sq < 0.0 || self.sigma3_sq < 0.0 {
            return Err(Error::Config("variances must be >= 0".into()));
        }
        if self.init_state_std < 0.0 {
            return Err(Error::Config("init_state_std must be >= 0".into()));
        }
        Ok(())
    }
}

impl ScalarEnv for SyntheticEnvParams {
    fn action_count(&self) -> usize {
        2
    }

    fn mean_reward(&self, s: f64, a: usize) -> f64 {
        let sign = 2.0 * a as f64 - 1.0;
        self.reward_quad_coef * s * s * sign + s
    }

    fn mean_next_state(&self, s: f64, a: usize) -> f64 {
        let sign = 2.0 * a as f64 - 1.0;
        self.state_coef * s * sign
    }

    fn state_noise_std(&self) -> f64 {
        self.sigma1_sq.sqrt()
    }

    fn reward_noise_std(&self) -> f64 {
        (self.sigma2_sq + self.sigma3_sq).sqrt()
    }

    fn initial_state_mean(&self) -> f64 {
        self.init_state_mean
    }

    fn initial_state_std(&self) -> f64 {
        self.init_state_std
    }
}

/// Semi-synthetic clustered environment with injected mean models.
///
/// `transition_coefs[a]` and `reward_coefs[a]` are polynomial coefficients
/// in the state (constant term first), one row per action:
/// `f(s, a) = sum_k transition_coefs[a][k] * s^k`.
///
/// Noise variances follow the correlation-scale split
/// `[individual, cluster] = sigma^2 * [1 - psi*rho^2, psi*rho^2]`
/// for states (`sigma_s_sq`, `rho_s_sq`) and rewards (`sigma_r_sq`,
/// `rho_r_sq`), so the marginal variances do not depend on `psi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiSyntheticEnvParams {
    pub transition_coefs: Vec<Vec<f64>>,
    pub reward_coefs: Vec<Vec<f64>>,
    /// Marginal state-noise variance.
    pub sigma_s_sq: f64,
    /// Intra-cluster share parameter for states, in [0, 1].
    pub rho_s_sq: f64,
    /// Marginal reward-noise variance.
    pub sigma_r_sq: f64,
    /// Intra-cluster share parameter for rewards, in [0, 1].
    pub rho_r_sq: f64,
    /// Correlation scale; cluster-level variance share is `psi * rho^2`.
    pub psi: f64,
    pub init_state_mean: f64,
    pub init_state_std: f64,
}

impl SemiSyntheticEnvParams {
    /// Default coefficient set for smoke tests, loosely shaped like a
    /// daily-steps / mood-score study: states near 20, rewards near 5,
    /// stable AR-style transitions, marginal variances 11.5 and 2.2 with
    /// intra-cluster shares 0.07 and 0.09.
    pub fn smoke_defaults() -> Self {
        SemiSyntheticEnvParams {
            transition_coefs: vec![vec![2.0, 0.9, 0.0], vec![2.6, 0.9, 0.0]],
            reward_coefs: vec![vec![4.0, 0.05, 0.0], vec![4.2, 0.07, -0.001]],
            sigma_s_sq: 11.5,
            rho_s_sq: 0.07,
            sigma_r_sq: 2.2,
            rho_r_sq: 0.09,
            psi: 1.0,
            init_state_mean: 20.0,
            init_state_std: 3.4,
        }
    }

    pub fn with_psi(mut self, psi: f64) -> Self {
        self.psi = psi;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.transition_coefs.is_empty()
            || self.transition_coefs.len() != self.reward_coefs.len()
        {
            return Err(Error::Config(
                "transition and reward coefficient sets must cover the same actions".into(),
            ));
        }
        if self.transition_coefs.iter().any(|c| c.is_empty())
            || self.reward_coefs.iter().any(|c| c.is_empty())
        {
            return Err(Error::Config("coefficient rows must be nonempty".into()));
        }
        if self.sigma_s_sq < 0.0 || self.sigma_r_sq < 0.0 {
            return Err(Error::Config("marginal variances must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.rho_s_sq) || !(0.0..=1.0).contains(&self.rho_r_sq) {
            return Err(Error::Config("rho^2 shares must lie in [0, 1]".into()));
        }
        if self.psi < 0.0 {
            return Err(Error::Config("psi must be >= 0".into()));
        }
        if self.psi * self.rho_s_sq > 1.0 || self.psi * self.rho_r_sq > 1.0 {
            return Err(Error::Config(format!(
                "variance split negative: psi * rho^2 must be <= 1 (state {}, reward {})",
                self.psi * self.rho_s_sq,
                self.psi * self.rho_r_sq
            )));
        }
        if self.init_state_std < 0.0 {
            return Err(Error::Config("init_state_std must be >= 0".into()));
        }
        Ok(())
    }

    /// (individual, cluster) state-noise variances at the current `psi`.
    pub fn state_variance_split(&self) -> (f64, f64) {
        let share = self.psi * self.rho_s_sq;
        (self.sigma_s_sq * (1.0 - share), self.sigma_s_sq * share)
    }

    /// (individual, cluster) reward-noise variances at the current `psi`.
    pub fn reward_variance_split(&self) -> (f64, f64) {
        let share = self.psi * self.rho_r_sq;
        (self.sigma_r_sq * (1.0 - share), self.sigma_r_sq * share)
    }

    fn poly(coefs: &[f64], s: f64) -> f64 {
        let mut acc = 0.0;
        for &c in coefs.iter().rev() {
            acc = acc * s + c;
        }
        acc
    }
}

impl ScalarEnv for SemiSyntheticEnvParams {
    fn action_count(&self) -> usize {
        self.transition_coefs.len()
    }

    fn mean_reward(&self, s: f64, a: usize) -> f64 {
        Self::poly(&self.reward_coefs[a], s)
    }

    fn mean_next_state(&self, s: f64, a: usize) -> f64 {
        Self::poly(&self.transition_coefs[a], s)
    }

    fn state_noise_std(&self) -> f64 {
        self.sigma_s_sq.sqrt()
    }

    fn reward_noise_std(&self) -> f64 {
        self.sigma_r_sq.sqrt()
    }

    fn initial_state_mean(&self) -> f64 {
        self.init_state_mean
    }

    fn initial_state_std(&self) -> f64 {
        self.init_state_std
    }
}

fn normal(std: f64) -> Normal<f64> {
    // std = 0 is a valid degenerate distribution here
    Normal::new(0.0, std).expect("std must be finite and >= 0")
}

/// Simulate the synthetic clustered environment under a behavior policy.
///
/// Per cluster and time, one shared state shock is added to every member's
/// next state and one shared reward shock plus independent individual
/// noise to every member's reward. Cluster `i` draws from the child stream
/// `rng.child(i)` so cluster order never matters.
pub fn simulate_synthetic(
    params: &SyntheticEnvParams,
    config: &ExperimentConfig,
    behavior: &dyn Policy,
    rng: RngStream,
) -> Result<Dataset> {
    params.validate()?;
    config.validate()?;
    let shocks = ClusterShocks {
        state_cluster: params.sigma1_sq.sqrt(),
        state_individual: 0.0,
        reward_cluster: params.sigma3_sq.sqrt(),
        reward_individual: params.sigma2_sq.sqrt(),
    };
    simulate_clustered(params, &shocks, config, behavior, rng)
}

/// Simulate the semi-synthetic clustered environment.
///
/// Implements the psi-scaled variance split; the marginal state-noise
/// variance equals `sigma_s_sq` for every psi. The `psi` in `params` is
/// authoritative; the experiment harness keeps `config.psi` in sync with
/// it when sweeping.
pub fn simulate_semi_synthetic(
    params: &SemiSyntheticEnvParams,
    config: &ExperimentConfig,
    behavior: &dyn Policy,
    rng: RngStream,
) -> Result<Dataset> {
    params.validate()?;
    config.validate()?;
    let (s_ind, s_clu) = params.state_variance_split();
    let (r_ind, r_clu) = params.reward_variance_split();
    let shocks = ClusterShocks {
        state_cluster: s_clu.sqrt(),
        state_individual: s_ind.sqrt(),
        reward_cluster: r_clu.sqrt(),
        reward_individual: r_ind.sqrt(),
    };
    simulate_clustered(params, &shocks, config, behavior, rng)
}

struct ClusterShocks {
    state_cluster: f64,
    state_individual: f64,
    reward_cluster: f64,
    reward_individual: f64,
}

fn simulate_clustered(
    env: &dyn ScalarEnv,
    shocks: &ClusterShocks,
    config: &ExperimentConfig,
    behavior: &dyn Policy,
    rng: RngStream,
) -> Result<Dataset> {
    let n = config.n_clusters;
    let m = config.cluster_size;
    let t_max = config.horizon;
    let init = normal(env.initial_state_std());
    let d_sc = normal(shocks.state_cluster);
    let d_si = normal(shocks.state_individual);
    let d_rc = normal(shocks.reward_cluster);
    let d_ri = normal(shocks.reward_individual);

    let mut blocks = Vec::with_capacity(n * t_max);
    for cluster_id in 0..n {
        let mut crng = rng.child(cluster_id as u64).rng();
        let mut states: Vec<f64> = (0..m)
            .map(|_| env.initial_state_mean() + init.sample(&mut crng))
            .collect();
        for time in 0..t_max {
            let reward_shock = d_rc.sample(&mut crng);
            let state_shock = d_sc.sample(&mut crng);
            let mut members = Vec::with_capacity(m);
            for s in states.iter_mut() {
                let state = *s;
                let action = behavior.act(&[state], &mut crng);
                let reward = env.mean_reward(state, action)
                    + reward_shock
                    + d_ri.sample(&mut crng);
                let next_state = env.mean_next_state(state, action)
                    + state_shock
                    + d_si.sample(&mut crng);
                members.push(Transition {
                    state: vec![state],
                    action,
                    reward,
                    next_state: vec![next_state],
                });
                *s = next_state;
            }
            blocks.push(ClusterBlock {
                cluster_id,
                time,
                members,
            });
        }
    }
    Dataset::new(blocks, env.action_count())
}

/// Roll out independent trajectories under a policy, returning per-step
/// reward sequences.
///
/// When `omit_reward_residuals` is set the reward noises are zeroed while
/// state noises are retained, which is the evaluation protocol used by
/// [`crate::eval::mc_evaluate`]. Reward-noise draws still advance the
/// generator either way, so the state paths of omitted and non-omitted
/// rollouts coincide at matched seeds.
pub fn rollout_policy(
    env: &dyn ScalarEnv,
    policy: &dyn Policy,
    n_traj: usize,
    horizon: usize,
    rng: RngStream,
    omit_reward_residuals: bool,
) -> Vec<Vec<f64>> {
    let init = normal(env.initial_state_std());
    let d_state = normal(env.state_noise_std());
    let d_reward = normal(env.reward_noise_std());
    (0..n_traj)
        .into_par_iter()
        .map(|traj| {
            let mut trng = rng.child(traj as u64).rng();
            let mut s = env.initial_state_mean() + init.sample(&mut trng);
            let mut rewards = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let a = policy.act(&[s], &mut trng);
                let noise = d_reward.sample(&mut trng);
                let r = env.mean_reward(s, a) + if omit_reward_residuals { 0.0 } else { noise };
                rewards.push(r);
                s = env.mean_next_state(s, a) + d_state.sample(&mut trng);
            }
            rewards
        })
        .collect()
}

/// Behavior-policy specification, buildable from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BehaviorSpec {
    UniformRandom,
    EpsilonGreedy { beta: Vec<f64>, epsilon: f64 },
}

impl BehaviorSpec {
    pub fn validate(&self) -> Result<()> {
        if let BehaviorSpec::EpsilonGreedy { epsilon, .. } = self {
            if !(0.0..=1.0).contains(epsilon) {
                return Err(Error::Config("epsilon must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Pooled within-cluster same-time correlation of reward residuals: the
/// average pairwise product of residuals within blocks divided by their
/// pooled variance. Used in tests and diagnostics.
pub fn reward_residual_correlation(data: &Dataset, env: &dyn ScalarEnv) -> f64 {
    let mut sum_sq = 0.0;
    let mut n_sq = 0usize;
    let mut sum_pair = 0.0;
    let mut n_pair = 0usize;
    for block in data.blocks() {
        let residuals: Vec<f64> = block
            .members
            .iter()
            .map(|tr| tr.reward - env.mean_reward(tr.state[0], tr.action))
            .collect();
        for (j, &rj) in residuals.iter().enumerate() {
            sum_sq += rj * rj;
            n_sq += 1;
            for &rk in &residuals[j + 1..] {
                sum_pair += rj * rk;
                n_pair += 1;
            }
        }
    }
    if n_pair == 0 || sum_sq == 0.0 {
        return 0.0;
    }
    (sum_pair / n_pair as f64) / (sum_sq / n_sq as f64)
}
