//! One experiment cell: simulate, fit, evaluate, regret.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use gfqi::data::ExperimentConfig;
use gfqi::error::{Error, Result};
use gfqi::eval::{
    mc_evaluate, regret, select_degree, OracleSolution, RegretMetric, ValueEstimate,
};
use gfqi::features::FeatureMap;
use gfqi::learners::{FitControls, FitReport, LearnerKind};
use gfqi::rng::derive_stream;

use crate::config::{CvConfig, EnvConfig, EvalConfig};

/// Stream-label constants: every random stage of a replication draws from
/// `derive_stream(seed, [cell, replication, STAGE_*])`. The simulation and
/// evaluation stages deliberately omit the learner, so all learners see
/// the same dataset and the same evaluation noise within a replication.
pub const STAGE_SIMULATE: u64 = 0;
pub const STAGE_CV: u64 = 1;
pub const STAGE_EVALUATE: u64 = 2;
/// Top-level label for the sweep-wide oracle stream.
pub const ORACLE_LABEL: u64 = 1_000_003;

/// Self-contained fit artifact written by the `fit` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub report: FitReport,
    pub feature_map: FeatureMap,
    pub gamma: f64,
}

/// One row of a sweep's results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub learner: String,
    pub axis: String,
    pub axis_value: f64,
    pub replication: usize,
    pub seed: u64,
    pub regret_discounted: Option<f64>,
    pub regret_average: Option<f64>,
    pub beta: Vec<f64>,
    pub rho_hat: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
    pub wall_time_ms: u64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str, line: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|e| Error::Parse {
        line,
        msg: format!("bad float {s:?}: {e}"),
    })
}

impl ResultRow {
    pub const HEADER: &'static str = "learner,axis,axis_value,replication,seed,\
regret_discounted,regret_average,beta,rho_hat,iterations,converged,error,wall_time_ms";

    pub fn to_csv_line(&self) -> String {
        let beta = self
            .beta
            .iter()
            .map(|b| format!("{b:.16e}"))
            .collect::<Vec<_>>()
            .join(";");
        let error = self
            .error
            .as_deref()
            .unwrap_or("")
            .replace([',', '\n'], ";");
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.learner,
            self.axis,
            self.axis_value,
            self.replication,
            self.seed,
            fmt_opt(self.regret_discounted),
            fmt_opt(self.regret_average),
            beta,
            fmt_opt(self.rho_hat),
            self.iterations,
            self.converged,
            error,
            self.wall_time_ms
        )
    }

    pub fn from_csv_line(line: &str, lineno: usize) -> Result<ResultRow> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 13 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 13 fields, got {}", fields.len()),
            });
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("bad integer {s:?}: {e}"),
            })
        };
        let beta = if fields[7].is_empty() {
            Vec::new()
        } else {
            fields[7]
                .split(';')
                .map(|s| {
                    s.parse::<f64>().map_err(|e| Error::Parse {
                        line: lineno,
                        msg: format!("bad beta entry {s:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?
        };
        Ok(ResultRow {
            learner: fields[0].to_string(),
            axis: fields[1].to_string(),
            axis_value: fields[2].parse().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("bad axis value: {e}"),
            })?,
            replication: parse_usize(fields[3])?,
            seed: fields[4].parse().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("bad seed: {e}"),
            })?,
            regret_discounted: parse_opt(fields[5], lineno)?,
            regret_average: parse_opt(fields[6], lineno)?,
            beta,
            rho_hat: parse_opt(fields[8], lineno)?,
            iterations: parse_usize(fields[9])?,
            converged: fields[10] == "true",
            error: if fields[11].is_empty() {
                None
            } else {
                Some(fields[11].to_string())
            },
            wall_time_ms: fields[12].parse().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("bad wall time: {e}"),
            })?,
        })
    }

    /// Identity of a row inside a sweep, used for resume.
    pub fn key(&self) -> (String, u64, usize) {
        (self.learner.clone(), self.axis_value.to_bits(), self.replication)
    }
}

/// Everything shared across the replications of one sweep cell.
pub struct CellContext<'a> {
    pub env: &'a EnvConfig,
    pub config: ExperimentConfig,
    pub eval: &'a EvalConfig,
    pub behavior: &'a gfqi::envs::BehaviorSpec,
    pub oracle: &'a OracleSolution,
    pub select_degree: Option<&'a CvConfig>,
    pub cell_index: usize,
    pub axis: &'a str,
    pub axis_value: f64,
    pub timings: bool,
}

/// Run one (cell, learner, replication) experiment. Learner failures are
/// recorded in the row's error tag rather than propagated, so a sweep
/// continues past bad cells.
pub fn run_experiment(ctx: &CellContext<'_>, learner: LearnerKind, replication: usize) -> ResultRow {
    let start = Instant::now();
    let mut row = ResultRow {
        learner: learner.label().to_string(),
        axis: ctx.axis.to_string(),
        axis_value: ctx.axis_value,
        replication,
        seed: ctx.config.seed,
        regret_discounted: None,
        regret_average: None,
        beta: Vec::new(),
        rho_hat: None,
        iterations: 0,
        converged: false,
        error: None,
        wall_time_ms: 0,
    };
    match run_experiment_inner(ctx, learner, replication) {
        Ok((report, value)) => {
            row.regret_discounted = regret(ctx.oracle, &value, RegretMetric::Discounted).ok();
            row.regret_average = regret(ctx.oracle, &value, RegretMetric::AverageReward).ok();
            row.beta = report.beta;
            row.rho_hat = report.rho_hat;
            row.iterations = report.iterations;
            row.converged = report.converged;
        }
        Err(e) => {
            row.error = Some(e.to_string());
        }
    }
    if ctx.timings {
        row.wall_time_ms = start.elapsed().as_millis() as u64;
    }
    row
}

fn run_experiment_inner(
    ctx: &CellContext<'_>,
    learner: LearnerKind,
    replication: usize,
) -> Result<(FitReport, ValueEstimate)> {
    let cfg = &ctx.config;
    let cell = ctx.cell_index as u64;
    let rep = replication as u64;
    let behavior = crate::config::build_behavior(
        ctx.behavior,
        ctx.env.action_count(),
        cfg.degree,
        cfg.gamma,
    )?;

    let sim_stream = derive_stream(cfg.seed, &[cell, rep, STAGE_SIMULATE]);
    let data = ctx.env.simulate(cfg, behavior.as_ref(), sim_stream)?;

    let controls = FitControls::from_config(cfg);
    let degree = match ctx.select_degree {
        Some(cv) => {
            let cv_stream = derive_stream(cfg.seed, &[cell, rep, STAGE_CV]);
            select_degree(
                &data,
                learner,
                &cv.degrees,
                cv.folds,
                cfg.gamma,
                controls,
                cv_stream,
            )?
            .degree
        }
        None => cfg.degree,
    };
    let map = FeatureMap::new(ctx.env.action_count(), 1, degree)?;
    let report = learner.fit(&data, &map, cfg.gamma, controls)?;

    let q = report.q_estimate(map, cfg.gamma)?;
    let policy = q.greedy_policy();
    let protocol = ctx.eval.protocol(ctx.env.scalar(), cfg.gamma);
    let eval_stream = derive_stream(cfg.seed, &[cell, rep, STAGE_EVALUATE]);
    let value = mc_evaluate(
        ctx.env.scalar(),
        &policy,
        cfg.gamma,
        protocol.n_traj,
        protocol.horizon,
        eval_stream,
    )?;
    Ok((report, value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn result_row_csv_roundtrip() {
        let row = ResultRow {
            learner: "gfqi-exchangeable".into(),
            axis: "n_clusters".into(),
            axis_value: 10.0,
            replication: 3,
            seed: 42,
            regret_discounted: Some(0.12345678901234567),
            regret_average: Some(-0.002),
            beta: vec![1.5, -2.25e-8, 0.0],
            rho_hat: Some(0.94),
            iterations: 17,
            converged: true,
            error: None,
            wall_time_ms: 0,
        };
        let back = ResultRow::from_csv_line(&row.to_csv_line(), 3).unwrap();
        assert_eq!(row, back);
    }

    #[test]
    fn error_row_roundtrip() {
        let row = ResultRow {
            learner: "fqi".into(),
            axis: "psi".into(),
            axis_value: 3.5,
            replication: 0,
            seed: 7,
            regret_discounted: None,
            regret_average: None,
            beta: Vec::new(),
            rho_hat: None,
            iterations: 0,
            converged: false,
            error: Some("singular system: condition estimate 1.0e15 exceeds limit".into()),
            wall_time_ms: 0,
        };
        let back = ResultRow::from_csv_line(&row.to_csv_line(), 1).unwrap();
        assert_eq!(back.error.as_deref().map(|s| s.contains("singular")), Some(true));
        assert!(back.regret_discounted.is_none());
    }
}
