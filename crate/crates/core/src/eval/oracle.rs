//! Grid value-iteration oracle for scalar-state environments.
//!
//! Stands in for an online deep RL agent as the reference optimal policy:
//! value iteration on a uniform state grid, with the Gaussian transition
//! noise integrated by Gauss-Hermite quadrature and off-grid successor
//! values linearly interpolated (clamped at the grid ends).

use serde::{Deserialize, Serialize};

use crate::envs::ScalarEnv;
use crate::error::{Error, Result};
use crate::eval::quadrature::gauss_hermite;
use crate::eval::{mc_evaluate, EvalProtocol, ValueEstimate};
use crate::policy::Policy;
use crate::rng::RngStream;

const MAX_SWEEPS: usize = 100_000;
const RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    pub quad_nodes: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lo: -6.0,
            hi: 6.0,
            points: 601,
            quad_nodes: 21,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || self.points < 2 || self.quad_nodes < 1 {
            return Err(Error::Config("invalid grid spec".into()));
        }
        Ok(())
    }

    /// Same span at doubled resolution, for refinement studies.
    pub fn doubled(&self) -> GridSpec {
        GridSpec {
            points: self.points * 2 - 1,
            ..*self
        }
    }
}

/// Reference solution: Q-table on the grid plus the Monte-Carlo value of
/// its greedy policy under the standard evaluation protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleSolution {
    pub gamma: f64,
    pub grid_spec: GridSpec,
    pub grid: Vec<f64>,
    /// Row per grid point, one entry per action.
    pub q: Vec<Vec<f64>>,
    pub bellman_residual: f64,
    pub sweeps: usize,
    /// Monte-Carlo discounted value of the greedy oracle policy.
    pub value: f64,
    pub mc: ValueEstimate,
}

impl OracleSolution {
    pub fn policy(&self) -> OracleGridPolicy {
        OracleGridPolicy {
            grid: self.grid.clone(),
            q: self.q.clone(),
        }
    }
}

/// Greedy policy over an interpolated grid Q-table.
#[derive(Debug, Clone)]
pub struct OracleGridPolicy {
    grid: Vec<f64>,
    q: Vec<Vec<f64>>,
}

impl OracleGridPolicy {
    fn q_at(&self, action: usize, s: f64) -> f64 {
        interp_column(&self.grid, &self.q, action, s)
    }
}

impl Policy for OracleGridPolicy {
    fn act(&self, state: &[f64], _rng: &mut rand_chacha::ChaCha12Rng) -> usize {
        let actions = self.q[0].len();
        let mut best = (0, self.q_at(0, state[0]));
        for a in 1..actions {
            let v = self.q_at(a, state[0]);
            if v > best.1 {
                best = (a, v);
            }
        }
        best.0
    }
}

fn interp_column(grid: &[f64], table: &[Vec<f64>], col: usize, s: f64) -> f64 {
    let n = grid.len();
    if s <= grid[0] {
        return table[0][col];
    }
    if s >= grid[n - 1] {
        return table[n - 1][col];
    }
    let step = (grid[n - 1] - grid[0]) / (n as f64 - 1.0);
    let idx = (((s - grid[0]) / step).floor() as usize).min(n - 2);
    let frac = (s - grid[idx]) / step;
    table[idx][col] * (1.0 - frac) + table[idx + 1][col] * frac
}

fn interp_values(grid: &[f64], values: &[f64], s: f64) -> f64 {
    let n = grid.len();
    if s <= grid[0] {
        return values[0];
    }
    if s >= grid[n - 1] {
        return values[n - 1];
    }
    let step = (grid[n - 1] - grid[0]) / (n as f64 - 1.0);
    let idx = (((s - grid[0]) / step).floor() as usize).min(n - 2);
    let frac = (s - grid[idx]) / step;
    values[idx] * (1.0 - frac) + values[idx + 1] * frac
}

/// Run discretized value iteration; returns (grid, Q-table, residual,
/// sweeps). Fails if the sup-norm change has not reached the residual
/// tolerance within the sweep budget.
pub fn value_iteration(
    env: &dyn ScalarEnv,
    gamma: f64,
    spec: &GridSpec,
) -> Result<(Vec<f64>, Vec<Vec<f64>>, f64, usize)> {
    spec.validate()?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config("gamma must lie in [0, 1)".into()));
    }
    let n = spec.points;
    let actions = env.action_count();
    let grid: Vec<f64> = (0..n)
        .map(|i| spec.lo + (spec.hi - spec.lo) * i as f64 / (n as f64 - 1.0))
        .collect();
    let (nodes, weights) = gauss_hermite(spec.quad_nodes)?;
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    let sigma = env.state_noise_std();
    let scale = std::f64::consts::SQRT_2 * sigma;

    // successor states and rewards are iteration-invariant
    let mut rewards = vec![vec![0.0; actions]; n];
    let mut successors = vec![vec![[0.0; 0].to_vec(); actions]; n];
    for (i, &s) in grid.iter().enumerate() {
        for a in 0..actions {
            rewards[i][a] = env.mean_reward(s, a);
            let mu = env.mean_next_state(s, a);
            successors[i][a] = nodes.iter().map(|&x| mu + scale * x).collect();
        }
    }

    let backup = |values: &[f64], i: usize, a: usize| -> f64 {
        let mut acc = 0.0;
        for (k, &sp) in successors[i][a].iter().enumerate() {
            acc += weights[k] * interp_values(&grid, values, sp);
        }
        rewards[i][a] + gamma * acc * inv_sqrt_pi
    };

    let mut values = vec![0.0f64; n];
    let mut sweeps = 0;
    let stop = RESIDUAL_TOL * 0.1;
    loop {
        sweeps += 1;
        let mut delta = 0.0f64;
        let new_values: Vec<f64> = (0..n)
            .map(|i| {
                let v = (0..actions)
                    .map(|a| backup(&values, i, a))
                    .fold(f64::NEG_INFINITY, f64::max);
                delta = delta.max((v - values[i]).abs());
                v
            })
            .collect();
        values = new_values;
        if delta <= stop {
            break;
        }
        if sweeps >= MAX_SWEEPS {
            return Err(Error::Oracle(format!(
                "value iteration did not converge within {MAX_SWEEPS} sweeps (delta {delta:.3e})"
            )));
        }
    }

    let q: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..actions).map(|a| backup(&values, i, a)).collect())
        .collect();
    // one extra backup from V(s) = max_a Q(s, a) measures the residual
    let v_q: Vec<f64> = q
        .iter()
        .map(|row| row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x)))
        .collect();
    let mut residual = 0.0f64;
    for i in 0..n {
        for a in 0..actions {
            residual = residual.max((backup(&v_q, i, a) - q[i][a]).abs());
        }
    }
    if residual > RESIDUAL_TOL {
        return Err(Error::Oracle(format!(
            "Bellman residual {residual:.3e} above tolerance {RESIDUAL_TOL:.0e}"
        )));
    }
    Ok((grid, q, residual, sweeps))
}

/// Solve the oracle and evaluate its greedy policy by Monte-Carlo under
/// the omit-reward-residuals protocol.
pub fn value_iteration_oracle(
    env: &dyn ScalarEnv,
    gamma: f64,
    spec: &GridSpec,
    protocol: &EvalProtocol,
    rng: RngStream,
) -> Result<OracleSolution> {
    let (grid, q, bellman_residual, sweeps) = value_iteration(env, gamma, spec)?;
    let policy = OracleGridPolicy {
        grid: grid.clone(),
        q: q.clone(),
    };
    let mc = mc_evaluate(env, &policy, gamma, protocol.n_traj, protocol.horizon, rng)?;
    Ok(OracleSolution {
        gamma,
        grid_spec: *spec,
        grid,
        q,
        bellman_residual,
        sweeps,
        value: mc.mean_discounted,
        mc,
    })
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Cache key for an oracle: hash of the env parameters, gamma, grid spec
/// and evaluation protocol.
pub fn oracle_cache_key<E: Serialize>(
    env: &E,
    gamma: f64,
    spec: &GridSpec,
    protocol: &EvalProtocol,
) -> Result<String> {
    let payload = serde_json::to_string(&(env, gamma.to_bits(), spec, protocol))?;
    Ok(format!("{:016x}", fnv1a64(payload.as_bytes())))
}

/// Load a cached oracle from `dir` or compute and cache it.
pub fn cached_oracle<E: ScalarEnv + Serialize>(
    dir: &std::path::Path,
    env: &E,
    gamma: f64,
    spec: &GridSpec,
    protocol: &EvalProtocol,
    rng: RngStream,
) -> Result<OracleSolution> {
    let key = oracle_cache_key(env, gamma, spec, protocol)?;
    let path = dir.join(format!("oracle-{key}.json"));
    if path.exists() {
        let text = std::fs::read_to_string(&path)?;
        return Ok(serde_json::from_str(&text)?);
    }
    let oracle = value_iteration_oracle(env, gamma, spec, protocol, rng)?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(&path, serde_json::to_string(&oracle)?)?;
    Ok(oracle)
}
