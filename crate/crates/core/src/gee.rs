//! Working-correlation machinery for the cluster-wise estimating equation.
//!
//! The generalized Q-update models the covariance of the cluster-wise TD
//! error as `V = B * C * B`, where `B` is the diagonal of per-member TD
//! standard deviations and `C` a working correlation matrix (identity or
//! exchangeable). This module estimates that model from TD residuals,
//! inverts it in closed form, and solves the linear estimating equation of
//! one generalized FQI iteration.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::reduce::pairwise_map_sum;

/// Condition-number limit for linear solves and covariance inversion.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Working intra-cluster correlation structure for TD errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WorkingCorrelation {
    Identity,
    Exchangeable { rho: f64 },
}

impl WorkingCorrelation {
    /// Exchangeable with rho clamped into the open interval that keeps an
    /// M x M exchangeable matrix positive definite.
    pub fn exchangeable_clamped(rho: f64, cluster_size: usize) -> Self {
        if cluster_size < 2 {
            return WorkingCorrelation::Identity;
        }
        let lo = -1.0 / (cluster_size as f64 - 1.0) + 1e-6;
        let hi = 1.0 - 1e-6;
        WorkingCorrelation::Exchangeable {
            rho: rho.clamp(lo, hi),
        }
    }

    pub fn rho(&self) -> f64 {
        match self {
            WorkingCorrelation::Identity => 0.0,
            WorkingCorrelation::Exchangeable { rho } => *rho,
        }
    }
}

/// The model `V = B * C * B`: marginal TD standard deviations plus a
/// working correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingCovariance {
    /// Per-member TD standard deviations (length M, units of reward).
    pub sigma: Vec<f64>,
    pub correlation: WorkingCorrelation,
}

impl WorkingCovariance {
    pub fn new(sigma: Vec<f64>, correlation: WorkingCorrelation) -> Result<Self> {
        if sigma.is_empty() || sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Input("sigma entries must be positive and finite".into()));
        }
        Ok(WorkingCovariance { sigma, correlation })
    }

    pub fn cluster_size(&self) -> usize {
        self.sigma.len()
    }

    /// Assemble the dense M x M matrix `B * C * B`.
    pub fn assemble(&self) -> DMatrix<f64> {
        let m = self.sigma.len();
        let rho = self.correlation.rho();
        DMatrix::from_fn(m, m, |j, k| {
            let c = if j == k { 1.0 } else { rho };
            self.sigma[j] * self.sigma[k] * c
        })
    }
}

/// Result of inverting a working covariance.
pub struct CovarianceInverse {
    pub matrix: DMatrix<f64>,
    /// Set when diagonal jitter was required to invert.
    pub jittered: bool,
}

/// Invert `V = B * C * B`.
///
/// For the exchangeable structure the closed form
/// `C^-1 = (1 - rho)^-1 [I - rho / (1 + (M-1) rho) * J]` is composed with
/// `B^-1` on both sides. If the assembled V is conditioned worse than
/// [`CONDITION_LIMIT`], diagonal jitter `1e-8 * tr(V) / M` is added and
/// the inverse is computed numerically, with `jittered` signalling the
/// degraded path.
pub fn invert_covariance(cov: &WorkingCovariance) -> Result<CovarianceInverse> {
    let m = cov.cluster_size();
    let v = cov.assemble();
    let svals = v.clone().singular_values();
    let smax = svals.max();
    let smin = svals.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > CONDITION_LIMIT {
        let jitter = 1e-8 * v.trace() / m as f64;
        let jittered = &v + DMatrix::identity(m, m) * jitter;
        let inv = jittered
            .lu()
            .try_inverse()
            .ok_or(Error::SingularSystem { cond })?;
        return Ok(CovarianceInverse {
            matrix: inv,
            jittered: true,
        });
    }
    let rho = cov.correlation.rho();
    let matrix = if rho == 0.0 {
        DMatrix::from_fn(m, m, |j, k| {
            if j == k {
                1.0 / (cov.sigma[j] * cov.sigma[j])
            } else {
                0.0
            }
        })
    } else {
        let denom = 1.0 + (m as f64 - 1.0) * rho;
        let off = -rho / ((1.0 - rho) * denom);
        let diag = (1.0 + (m as f64 - 2.0) * rho) / ((1.0 - rho) * denom);
        DMatrix::from_fn(m, m, |j, k| {
            let c_inv = if j == k { diag } else { off };
            c_inv / (cov.sigma[j] * cov.sigma[k])
        })
    };
    Ok(CovarianceInverse {
        matrix,
        jittered: false,
    })
}

/// Cluster-wise TD residual vectors, aligned with the dataset's blocks.
#[derive(Debug, Clone)]
pub struct TdBatch {
    pub residuals: Vec<DVector<f64>>,
    pub cluster_size: usize,
}

/// TD error of every tuple: entry j of block b is
/// `R_j + gamma * max_a phi(a, S'_j)' beta_target - phi(A_j, S_j)' beta_eval`.
pub fn td_residuals(
    data: &Dataset,
    map: &FeatureMap,
    beta_eval: &DVector<f64>,
    beta_target: &DVector<f64>,
    gamma: f64,
) -> Result<TdBatch> {
    let d = map.dim();
    if beta_eval.len() != d || beta_target.len() != d {
        return Err(Error::Input(format!(
            "coefficient length must be {d}, got {} and {}",
            beta_eval.len(),
            beta_target.len()
        )));
    }
    let residuals = data
        .blocks()
        .iter()
        .map(|block| {
            DVector::from_iterator(
                block.members.len(),
                block.members.iter().map(|tr| {
                    tr.reward + gamma * map.greedy_value(beta_target, &tr.next_state)
                        - map.q_value(beta_eval, tr.action, &tr.state)
                }),
            )
        })
        .collect();
    Ok(TdBatch {
        residuals,
        cluster_size: data.cluster_size(),
    })
}

/// Moment estimate of an exchangeable working covariance.
#[derive(Debug, Clone)]
pub struct ExchangeableEstimate {
    pub covariance: WorkingCovariance,
    /// Pooled TD variance (bias-uncorrected mean of squared residuals).
    pub sigma_hat_sq: f64,
    /// Clamped correlation estimate.
    pub rho_hat: f64,
    /// Raw moment estimate before clamping.
    pub rho_raw: f64,
    /// Set when the exchangeable request degraded to identity (M < 2 or
    /// degenerate residuals).
    pub fell_back_to_identity: bool,
}

/// Estimate the exchangeable working covariance from TD residuals.
///
/// Pooled variance is the mean squared residual; the correlation is the
/// mean over blocks of pairwise residual products divided by the pooled
/// variance, clamped to keep `C` positive definite. The sigma vector is
/// constant across members. With M < 2 (or all-zero residuals) the
/// estimate falls back to the identity structure and flags it.
pub fn estimate_exchangeable(td: &TdBatch) -> Result<ExchangeableEstimate> {
    if td.residuals.is_empty() {
        return Err(Error::Input("no residual blocks".into()));
    }
    let m = td.cluster_size;
    let n_blocks = td.residuals.len() as f64;
    let mut sum_sq = 0.0;
    let mut count = 0.0;
    for r in &td.residuals {
        sum_sq += r.iter().map(|&x| x * x).sum::<f64>();
        count += r.len() as f64;
    }
    let sigma_hat_sq = sum_sq / count;
    if !(sigma_hat_sq > f64::MIN_POSITIVE) {
        // degenerate (e.g. exact fixed point on noiseless data): unweighted
        // identity keeps the downstream solve well-posed
        return Ok(ExchangeableEstimate {
            covariance: WorkingCovariance::new(vec![1.0; m], WorkingCorrelation::Identity)?,
            sigma_hat_sq,
            rho_hat: 0.0,
            rho_raw: 0.0,
            fell_back_to_identity: true,
        });
    }
    if m < 2 {
        return Ok(ExchangeableEstimate {
            covariance: WorkingCovariance::new(
                vec![sigma_hat_sq.sqrt(); m],
                WorkingCorrelation::Identity,
            )?,
            sigma_hat_sq,
            rho_hat: 0.0,
            rho_raw: 0.0,
            fell_back_to_identity: true,
        });
    }
    let pairs_per_block = (m * (m - 1) / 2) as f64;
    let mut sum_pair = 0.0;
    for r in &td.residuals {
        for j in 0..m {
            for k in (j + 1)..m {
                sum_pair += r[j] * r[k];
            }
        }
    }
    let rho_raw = sum_pair / (n_blocks * pairs_per_block) / sigma_hat_sq;
    let correlation = WorkingCorrelation::exchangeable_clamped(rho_raw, m);
    let rho_hat = correlation.rho();
    Ok(ExchangeableEstimate {
        covariance: WorkingCovariance::new(vec![sigma_hat_sq.sqrt(); m], correlation)?,
        sigma_hat_sq,
        rho_hat,
        rho_raw,
        fell_back_to_identity: false,
    })
}

/// How the marginal TD standard deviations sigma(A, S) are estimated.
///
/// Pooled is the default: a single constant, exactly right for
/// homoskedastic noise and stable at small N. The feature mode regresses
/// squared residuals on the state-action features and floors the
/// predictions at 1e-6 to keep B positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMode {
    Pooled,
    FeatureRegression,
}

/// Variance floor for the feature-regression mode.
pub const SIGMA_SQ_FLOOR: f64 = 1e-6;

/// Per-tuple TD standard deviations from a least-squares regression of
/// squared residuals on the features, aligned with the dataset's blocks.
pub fn sigma_from_features(
    data: &Dataset,
    map: &FeatureMap,
    td: &TdBatch,
) -> Result<Vec<Vec<f64>>> {
    let d = map.dim();
    if td.residuals.len() != data.n_blocks() {
        return Err(Error::Input("residuals do not align with blocks".into()));
    }
    let blocks = data.blocks();
    let items: Vec<usize> = (0..blocks.len()).collect();
    let per_block = |&b: &usize| -> (DMatrix<f64>, DVector<f64>) {
        let mut gram = DMatrix::zeros(d, d);
        let mut rhs = DVector::zeros(d);
        for (j, tr) in blocks[b].members.iter().enumerate() {
            let x = map.featurize(tr.action, &tr.state).expect("validated");
            let y = td.residuals[b][j] * td.residuals[b][j];
            gram.ger(1.0, &x, &x, 1.0);
            rhs.axpy(y, &x, 1.0);
        }
        (gram, rhs)
    };
    let (gram, rhs) = pairwise_map_sum(&items, &per_block, &|(g1, r1), (g2, r2)| {
        (g1 + g2, r1 + r2)
    })
    .ok_or_else(|| Error::Input("empty dataset".into()))?;
    let eig = gram.symmetric_eigen();
    let lam_max = eig.eigenvalues.max();
    if !(lam_max > 0.0) {
        return Err(Error::SingularSystem { cond: f64::INFINITY });
    }
    let cutoff = lam_max * 1e-12;
    let inv_diag = DVector::from_fn(d, |i, _| {
        if eig.eigenvalues[i] > cutoff {
            1.0 / eig.eigenvalues[i]
        } else {
            0.0
        }
    });
    let coefs =
        &eig.eigenvectors * DMatrix::from_diagonal(&inv_diag) * eig.eigenvectors.tr_mul(&rhs);
    Ok(blocks
        .iter()
        .map(|block| {
            block
                .members
                .iter()
                .map(|tr| {
                    let pred = map.q_value(&coefs, tr.action, &tr.state);
                    pred.max(SIGMA_SQ_FLOOR).sqrt()
                })
                .collect()
        })
        .collect())
}

/// Solution of a linear estimating equation, with its condition estimate.
pub struct EquationSolution {
    pub beta: DVector<f64>,
    /// Condition estimate of the d x d system matrix.
    pub condition: f64,
}

/// Solve `sum_b Phi_b [y_b - phi_b' beta] = 0` for `beta`, where
/// `y_b[j] = R_j + gamma * max_a phi(a, S'_j)' beta_target`.
///
/// The block sums use the deterministic pairwise reduction, the condition
/// number of the d x d system matrix is estimated by SVD (singular or
/// worse-than-[`CONDITION_LIMIT`] systems error out carrying the
/// estimate), and one step of iterative refinement tightens the residual.
pub fn solve_estimating_equation(
    data: &Dataset,
    map: &FeatureMap,
    instruments: &[DMatrix<f64>],
    beta_target: &DVector<f64>,
    gamma: f64,
) -> Result<EquationSolution> {
    let d = map.dim();
    if beta_target.len() != d {
        return Err(Error::Input(format!(
            "beta_target length must be {d}, got {}",
            beta_target.len()
        )));
    }
    if instruments.len() != data.n_blocks() {
        return Err(Error::Input(format!(
            "need one instrument per block: {} instruments, {} blocks",
            instruments.len(),
            data.n_blocks()
        )));
    }
    let items: Vec<(usize, &DMatrix<f64>)> = instruments.iter().enumerate().collect();
    let blocks = data.blocks();
    let per_block = |&(b, inst): &(usize, &DMatrix<f64>)| -> (DMatrix<f64>, DVector<f64>) {
        let block = &blocks[b];
        let phi = map
            .featurize_block(block)
            .expect("dataset validated at construction");
        let y = DVector::from_iterator(
            block.members.len(),
            block
                .members
                .iter()
                .map(|tr| tr.reward + gamma * map.greedy_value(beta_target, &tr.next_state)),
        );
        (inst * phi.transpose(), inst * y)
    };
    let (a, rhs) = pairwise_map_sum(&items, &per_block, &|(a1, b1), (a2, b2)| {
        (a1 + a2, b1 + b2)
    })
    .ok_or_else(|| Error::Input("empty dataset".into()))?;
    solve_linear(a, rhs)
}

/// Solve a dense square system with an SVD condition check and one step of
/// iterative refinement. Condition estimates beyond [`CONDITION_LIMIT`]
/// (or exactly singular systems) error out carrying the estimate.
pub fn solve_linear(a: DMatrix<f64>, rhs: DVector<f64>) -> Result<EquationSolution> {
    let svals = a.clone().singular_values();
    let smax = svals.max();
    let smin = svals.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > CONDITION_LIMIT {
        return Err(Error::SingularSystem { cond });
    }
    let lu = a.clone().lu();
    let mut beta = lu.solve(&rhs).ok_or(Error::SingularSystem { cond })?;
    // one refinement pass keeps the equation residual near machine level
    let r = &rhs - &a * &beta;
    if let Some(dbeta) = lu.solve(&r) {
        beta += dbeta;
    }
    Ok(EquationSolution { beta, condition: cond })
}
