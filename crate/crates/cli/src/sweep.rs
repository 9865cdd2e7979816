//! Seeded replication sweeps over one experiment axis.
//!
//! Every (cell, learner, replication) task draws from its own derived
//! random stream, so execution order and thread count never affect the
//! results. Rows are keyed by (learner, axis value, replication); the
//! output is rewritten in canonical order on every run, which makes
//! re-runs byte-identical and lets `--resume` skip completed rows.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use gfqi::error::{Error, Result};
use gfqi::eval::value_iteration_oracle;
use gfqi::learners::LearnerKind;
use gfqi::rng::derive_stream;

use crate::config::RunConfig;
use crate::experiment::{run_experiment, CellContext, ResultRow, ORACLE_LABEL};

pub const SCHEMA_LINE: &str = "schema=1";

#[derive(Debug)]
pub struct SweepOutcome {
    pub path: PathBuf,
    pub rows_written: usize,
    pub rows_reused: usize,
}

/// Read a results CSV (schema line, header, rows).
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path)?;
    parse_results(&text)
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, line)) if line == SCHEMA_LINE => {}
        Some((_, other)) => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected {SCHEMA_LINE:?}, found {other:?}"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty results file".into(),
            })
        }
    }
    match lines.next() {
        Some((_, header)) if header == ResultRow::HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 2,
                msg: "unexpected results header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        rows.push(ResultRow::from_csv_line(line, idx + 1)?);
    }
    Ok(rows)
}

fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut out = String::new();
    out.push_str(SCHEMA_LINE);
    out.push('\n');
    out.push_str(ResultRow::HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv_line());
        out.push('\n');
    }
    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Run the configured sweep, writing one row per
/// (cell, learner, replication).
///
/// With `resume`, rows already present in the output file are reused by
/// key and only the missing tasks are computed. `timings` populates the
/// wall-time column from real measurements (off by default so re-runs are
/// byte-identical).
pub fn run_sweep(config: &RunConfig, out: &Path, resume: bool, timings: bool) -> Result<SweepOutcome> {
    config.validate()?;
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("config has no sweep section".into()))?;

    // fail on unwritable output before any computation
    let existing: Vec<ResultRow> = if out.exists() {
        std::fs::OpenOptions::new().append(true).open(out)?;
        if resume {
            read_results(out)?
        } else {
            Vec::new()
        }
    } else {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(out, "")?;
        Vec::new()
    };
    let mut reused: HashMap<(String, u64, usize), ResultRow> =
        existing.into_iter().map(|r| (r.key(), r)).collect();

    // the oracle depends only on the marginal dynamics and gamma, which
    // every axis leaves invariant (psi moves variance between cluster and
    // individual levels without changing marginals), so one oracle serves
    // the whole sweep
    let gamma = config.experiment.gamma;
    let env = config.env.scalar();
    let oracle_protocol = config.eval.oracle_protocol(env, gamma);
    let oracle = value_iteration_oracle(
        env,
        gamma,
        &config.eval.grid,
        &oracle_protocol,
        derive_stream(config.experiment.seed, &[ORACLE_LABEL]),
    )?;

    struct Task {
        cell_index: usize,
        axis_value: f64,
        learner_index: usize,
        learner: LearnerKind,
        replication: usize,
    }
    let mut tasks = Vec::new();
    for (cell_index, &axis_value) in sweep.values.iter().enumerate() {
        for (learner_index, &learner) in sweep.learners.iter().enumerate() {
            for replication in 0..sweep.replications {
                tasks.push(Task {
                    cell_index,
                    axis_value,
                    learner_index,
                    learner,
                    replication,
                });
            }
        }
    }

    let mut ordered: Vec<((usize, usize, usize), ResultRow)> = Vec::with_capacity(tasks.len());
    let mut pending = Vec::new();
    for task in tasks {
        let key = (
            task.learner.label().to_string(),
            task.axis_value.to_bits(),
            task.replication,
        );
        let order = (task.cell_index, task.learner_index, task.replication);
        match reused.remove(&key) {
            Some(row) => ordered.push((order, row)),
            None => pending.push((order, task)),
        }
    }
    let rows_reused = ordered.len();

    let computed: Vec<((usize, usize, usize), ResultRow)> = pending
        .into_par_iter()
        .map(|(order, task)| {
            let cfg = sweep.apply(&config.experiment, task.axis_value);
            let ctx = CellContext {
                env: &config.env,
                config: cfg,
                eval: &config.eval,
                behavior: &config.behavior,
                oracle: &oracle,
                select_degree: config.select_degree.as_ref(),
                cell_index: task.cell_index,
                axis: sweep.axis.label(),
                axis_value: task.axis_value,
                timings,
            };
            let row = run_experiment(&ctx, task.learner, task.replication);
            (order, row)
        })
        .collect();
    ordered.extend(computed);
    ordered.sort_by_key(|(order, _)| *order);
    let rows: Vec<ResultRow> = ordered.into_iter().map(|(_, row)| row).collect();
    write_results(out, &rows)?;
    Ok(SweepOutcome {
        path: out.to_path_buf(),
        rows_written: rows.len(),
        rows_reused,
    })
}
