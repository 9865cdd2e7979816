//! Plug-in sandwich covariance of the fitted Q-coefficients.
//!
//! For the estimating equation `sum_b Phi_b delta_b(beta) = 0`, the
//! asymptotic MSE of `beta_hat` is driven by the bread
//! `W = (1-gamma)^-1 M^-1 E[Phi (phi - gamma phi')']` and the meat
//! `Sigma = M^-1 E[Phi V Phi']`. Both are estimated by empirical block
//! averages, with the realized TD residuals standing in for `V`. The
//! reported covariance rescales the sandwich so it estimates
//! `Var(beta_hat)` directly: the equation Jacobian is
//! `N (1-gamma) M W_hat` and the score variance `N M Sigma_hat`, giving
//! `Var(beta_hat) ~= [N (1-gamma)^2 M]^-1 W_hat^-1 Sigma_hat W_hat^-T`.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::gee::CONDITION_LIMIT;
use crate::reduce::pairwise_map_sum;

/// The plug-in bread and meat together with the derived covariance of the
/// coefficient estimate.
#[derive(Debug, Clone)]
pub struct SandwichEstimate {
    /// Bread: `(1-gamma)^-1 M^-1 * average_b Phi_b (phi_b - gamma phi'_b)'`.
    pub w_hat: DMatrix<f64>,
    /// Meat: `M^-1 * average_b Phi_b delta_b delta_b' Phi_b'`.
    pub sigma_hat: DMatrix<f64>,
    /// `[N (1-gamma)^2 M]^-1 W^-1 Sigma W^-T`, symmetrized.
    pub covariance: DMatrix<f64>,
}

/// Assemble the plug-in sandwich at `beta_hat`, using the greedy policy of
/// `beta_hat` in place of the optimal one and the caller's per-block
/// instruments.
pub fn sandwich_variance(
    data: &Dataset,
    map: &FeatureMap,
    beta_hat: &DVector<f64>,
    instruments: &[DMatrix<f64>],
    gamma: f64,
) -> Result<SandwichEstimate> {
    let d = map.dim();
    if beta_hat.len() != d {
        return Err(Error::Input(format!(
            "beta length {} does not match feature dimension {d}",
            beta_hat.len()
        )));
    }
    if instruments.len() != data.n_blocks() {
        return Err(Error::Input(
            "need one instrument matrix per block".into(),
        ));
    }
    let n = data.n_blocks() as f64;
    let m = data.cluster_size() as f64;
    let blocks = data.blocks();
    let items: Vec<(usize, &DMatrix<f64>)> = instruments.iter().enumerate().collect();
    let per_block = |&(b, inst): &(usize, &DMatrix<f64>)| -> (DMatrix<f64>, DMatrix<f64>) {
        let block = &blocks[b];
        let phi = map.featurize_block(block).expect("validated");
        let mut phi_next = DMatrix::zeros(d, block.members.len());
        let mut delta = DVector::zeros(block.members.len());
        for (j, tr) in block.members.iter().enumerate() {
            let (a_next, v_next) = map.greedy(beta_hat, &tr.next_state);
            phi_next.set_column(j, &map.featurize(a_next, &tr.next_state).expect("validated"));
            delta[j] =
                tr.reward + gamma * v_next - map.q_value(beta_hat, tr.action, &tr.state);
        }
        let bread = inst * (phi - phi_next * gamma).transpose();
        let score = inst * &delta;
        let meat = &score * score.transpose();
        (bread, meat)
    };
    let (bread_sum, meat_sum) = pairwise_map_sum(&items, &per_block, &|(a1, b1), (a2, b2)| {
        (a1 + a2, b1 + b2)
    })
    .ok_or_else(|| Error::Input("empty dataset".into()))?;

    let w_hat = bread_sum / (n * (1.0 - gamma) * m);
    let sigma_hat = meat_sum / (n * m);

    let svals = w_hat.clone().singular_values();
    let smax = svals.max();
    let smin = svals.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > CONDITION_LIMIT {
        return Err(Error::StabilityViolation(format!(
            "W_hat is singular or ill-conditioned (cond ~ {cond:.3e})"
        )));
    }
    let w_inv = w_hat
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::StabilityViolation("W_hat not invertible".into()))?;
    let scale = 1.0 / (n * (1.0 - gamma).powi(2) * m);
    let raw = &w_inv * &sigma_hat * w_inv.transpose() * scale;
    let covariance = (&raw + raw.transpose()) * 0.5;
    Ok(SandwichEstimate {
        w_hat,
        sigma_hat,
        covariance,
    })
}
