//! State-action feature construction for the linear Q-learners.
//!
//! The feature vector has one block per action; only the block of the
//! selected action is nonzero. Each block holds an intercept followed by
//! per-coordinate monomials of the state up to `degree` (no cross terms).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ClusterBlock;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub action_count: usize,
    pub state_dim: usize,
    pub degree: usize,
}

impl FeatureMap {
    pub fn new(action_count: usize, state_dim: usize, degree: usize) -> Result<Self> {
        if action_count == 0 || state_dim == 0 || degree == 0 {
            return Err(Error::Config(
                "feature map needs action_count, state_dim, degree >= 1".into(),
            ));
        }
        Ok(FeatureMap {
            action_count,
            state_dim,
            degree,
        })
    }

    /// Features per action block: intercept plus `state_dim * degree`
    /// monomials.
    pub fn block_size(&self) -> usize {
        1 + self.state_dim * self.degree
    }

    /// Total feature dimension d.
    pub fn dim(&self) -> usize {
        self.action_count * self.block_size()
    }

    fn check(&self, action: usize, state: &[f64]) -> Result<()> {
        if action >= self.action_count {
            return Err(Error::Input(format!(
                "action {action} out of range ({} actions)",
                self.action_count
            )));
        }
        if state.len() != self.state_dim {
            return Err(Error::Input(format!(
                "state dimension {} does not match feature map ({})",
                state.len(),
                self.state_dim
            )));
        }
        Ok(())
    }

    /// Write the state block (intercept + monomials) into `out`.
    fn state_block(&self, state: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        let mut k = 1;
        for &s in state {
            let mut p = 1.0;
            for _ in 0..self.degree {
                p *= s;
                out[k] = p;
                k += 1;
            }
        }
    }

    /// phi(a, s): length-d vector with only action `a`'s block populated.
    pub fn featurize(&self, action: usize, state: &[f64]) -> Result<DVector<f64>> {
        self.check(action, state)?;
        let mut v = DVector::zeros(self.dim());
        let b = self.block_size();
        self.state_block(state, &mut v.as_mut_slice()[action * b..(action + 1) * b]);
        Ok(v)
    }

    /// Column m holds phi of member m; d x M.
    pub fn featurize_block(&self, block: &ClusterBlock) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.dim(), block.members.len());
        for (m, tr) in block.members.iter().enumerate() {
            let col = self.featurize(tr.action, &tr.state)?;
            out.set_column(m, &col);
        }
        Ok(out)
    }

    /// phi(a, s)' beta without allocating the sparse feature vector.
    pub fn q_value(&self, beta: &DVector<f64>, action: usize, state: &[f64]) -> f64 {
        debug_assert_eq!(beta.len(), self.dim());
        let b = self.block_size();
        let coefs = &beta.as_slice()[action * b..(action + 1) * b];
        let mut acc = coefs[0];
        let mut k = 1;
        for &s in state {
            let mut p = 1.0;
            for _ in 0..self.degree {
                p *= s;
                acc += coefs[k] * p;
                k += 1;
            }
        }
        acc
    }

    /// Greedy action and value under `beta`, ties broken by lowest index.
    pub fn greedy(&self, beta: &DVector<f64>, state: &[f64]) -> (usize, f64) {
        let mut best = (0, self.q_value(beta, 0, state));
        for a in 1..self.action_count {
            let q = self.q_value(beta, a, state);
            if q > best.1 {
                best = (a, q);
            }
        }
        best
    }

    /// max_a phi(a, s)' beta.
    pub fn greedy_value(&self, beta: &DVector<f64>, state: &[f64]) -> f64 {
        self.greedy(beta, state).1
    }
}
