//! Cross-validated selection of the polynomial feature degree.
//!
//! Folds partition clusters (a cluster is never split across folds). Each
//! candidate degree is fitted on the training folds and scored by the mean
//! squared TD residual on the held-out fold, with the fitted coefficients
//! as both evaluation and target. Degrees whose fit fails on any fold
//! (rank-deficient designs) are disqualified.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::gee::td_residuals;
use crate::learners::{FitControls, LearnerKind};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeScore {
    pub degree: usize,
    /// Mean held-out squared TD residual across folds; None if disqualified.
    pub cv_score: Option<f64>,
    pub disqualified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeSelection {
    pub degree: usize,
    pub scores: Vec<DegreeScore>,
}

/// Pick the degree minimizing the cross-validated TD loss (ties go to the
/// smallest degree). Errors if every candidate is disqualified.
pub fn select_degree(
    data: &Dataset,
    learner: LearnerKind,
    degrees: &[usize],
    folds: usize,
    gamma: f64,
    controls: FitControls,
    rng: RngStream,
) -> Result<DegreeSelection> {
    if degrees.is_empty() {
        return Err(Error::Config("no candidate degrees".into()));
    }
    if folds < 2 {
        return Err(Error::Config("cross-validation needs at least 2 folds".into()));
    }
    if folds > data.n_clusters() {
        return Err(Error::Config(format!(
            "{folds} folds exceed {} clusters",
            data.n_clusters()
        )));
    }
    let mut cluster_ids: Vec<usize> = {
        let mut ids: Vec<usize> = data.blocks().iter().map(|b| b.cluster_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    cluster_ids.shuffle(&mut rng.rng());
    let fold_of = |idx: usize| idx % folds;

    let mut scores = Vec::with_capacity(degrees.len());
    for &degree in degrees {
        let map = FeatureMap::new(data.action_count(), data.state_dim(), degree)?;
        let mut fold_losses = Vec::with_capacity(folds);
        let mut disqualified = false;
        for fold in 0..folds {
            let train_ids: Vec<usize> = cluster_ids
                .iter()
                .enumerate()
                .filter(|(i, _)| fold_of(*i) != fold)
                .map(|(_, &c)| c)
                .collect();
            let test_ids: Vec<usize> = cluster_ids
                .iter()
                .enumerate()
                .filter(|(i, _)| fold_of(*i) == fold)
                .map(|(_, &c)| c)
                .collect();
            let train = data.filter_clusters(&train_ids)?;
            let test = data.filter_clusters(&test_ids)?;
            match learner.fit(&train, &map, gamma, controls) {
                Ok(report) => {
                    let beta = nalgebra::DVector::from_vec(report.beta);
                    let td = td_residuals(&test, &map, &beta, &beta, gamma)?;
                    let mut sum = 0.0;
                    let mut count = 0.0;
                    for r in &td.residuals {
                        sum += r.iter().map(|&x| x * x).sum::<f64>();
                        count += r.len() as f64;
                    }
                    fold_losses.push(sum / count);
                }
                Err(Error::SingularSystem { .. }) => {
                    disqualified = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let cv_score = if disqualified {
            None
        } else {
            Some(fold_losses.iter().sum::<f64>() / fold_losses.len() as f64)
        };
        scores.push(DegreeScore {
            degree,
            cv_score,
            disqualified,
        });
    }
    let mut best: Option<(usize, f64)> = None;
    for s in &scores {
        if let Some(score) = s.cv_score {
            let better = match best {
                None => true,
                Some((_, b)) => score < b,
            };
            if better {
                best = Some((s.degree, score));
            }
        }
    }
    match best {
        Some((degree, _)) => Ok(DegreeSelection { degree, scores }),
        None => Err(Error::Input(
            "every candidate degree was disqualified".into(),
        )),
    }
}
