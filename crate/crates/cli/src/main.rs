use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use gfqi::data::Dataset;
use gfqi::eval::{cached_oracle, mc_evaluate, value_iteration_oracle, RegretMetric};
use gfqi::learners::{FitControls, LearnerKind};
use gfqi::rng::derive_stream;

use gfqi_cli::config::RunConfig;
use gfqi_cli::experiment::{FitOutput, ORACLE_LABEL, STAGE_EVALUATE, STAGE_SIMULATE};
use gfqi_cli::plot::plot_results;
use gfqi_cli::sweep::run_sweep;

#[derive(Parser)]
#[command(
    name = "gfqi",
    about = "Policy learning for clustered MDPs: simulators, learners, oracles, and regret sweeps"
)]
struct Cli {
    /// Number of worker threads (defaults to the rayon heuristic).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a clustered dataset and write it as CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a learner on a dataset CSV and write the fit report as JSON.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        learner: String,
        #[arg(long)]
        out: PathBuf,
        /// Cross-validate the feature degree before fitting.
        #[arg(long)]
        select_degree: bool,
    },
    /// Monte-Carlo evaluate a fitted policy and write the value as JSON.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Fit artifact produced by `fit`.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve the value-iteration oracle and write it as JSON.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reuse cached solutions keyed by (env, gamma, grid, protocol).
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Run the configured replication sweep and write a results CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip rows already present in the output.
        #[arg(long)]
        resume: bool,
        /// Record real wall-clock times (breaks byte-for-byte determinism).
        #[arg(long)]
        timings: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a results CSV as a static SVG regret plot.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metric: "average" (default) or "discounted".
        #[arg(long, default_value = "average")]
        metric: String,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("failed to initialize thread pool")?;
    }
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.experiment.seed = s;
            }
            let behavior = cfg.behavior_policy()?;
            let stream = derive_stream(cfg.experiment.seed, &[0, 0, STAGE_SIMULATE]);
            let data = cfg
                .env
                .simulate(&cfg.experiment, behavior.as_ref(), stream)?;
            data.to_csv(&out)?;
            eprintln!(
                "wrote {} blocks ({} tuples) to {}",
                data.n_blocks(),
                data.n_tuples(),
                out.display()
            );
        }
        Command::Fit {
            config,
            data,
            learner,
            out,
            select_degree,
        } => {
            let cfg = RunConfig::load(&config)?;
            let kind: LearnerKind = learner.parse()?;
            let dataset = Dataset::from_csv(&data, Some(cfg.env.action_count()))?;
            let controls = FitControls::from_config(&cfg.experiment);
            let degree = if select_degree {
                let cv = cfg.select_degree.clone().unwrap_or_default();
                let stream = derive_stream(cfg.experiment.seed, &[0, 0, 1]);
                let sel = gfqi::eval::select_degree(
                    &dataset,
                    kind,
                    &cv.degrees,
                    cv.folds,
                    cfg.experiment.gamma,
                    controls,
                    stream,
                )?;
                eprintln!("selected degree {}", sel.degree);
                sel.degree
            } else {
                cfg.experiment.degree
            };
            let map = gfqi::features::FeatureMap::new(cfg.env.action_count(), 1, degree)?;
            let report = kind.fit(&dataset, &map, cfg.experiment.gamma, controls)?;
            eprintln!(
                "{}: {} iterations, converged = {}, final delta = {:.3e}",
                report.learner, report.iterations, report.converged, report.final_delta
            );
            let output = FitOutput {
                report,
                feature_map: map,
                gamma: cfg.experiment.gamma,
            };
            std::fs::write(&out, serde_json::to_string_pretty(&output)?)?;
        }
        Command::Evaluate {
            config,
            fit,
            out,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.experiment.seed = s;
            }
            let text = std::fs::read_to_string(&fit)?;
            let artifact: FitOutput = serde_json::from_str(&text)?;
            let q = artifact
                .report
                .q_estimate(artifact.feature_map, artifact.gamma)?;
            let policy = q.greedy_policy();
            let protocol = cfg.eval.protocol(cfg.env.scalar(), artifact.gamma);
            let stream = derive_stream(cfg.experiment.seed, &[0, 0, STAGE_EVALUATE]);
            let value = mc_evaluate(
                cfg.env.scalar(),
                &policy,
                artifact.gamma,
                protocol.n_traj,
                protocol.horizon,
                stream,
            )?;
            eprintln!(
                "discounted {:.4} +- {:.4}, average reward {:.4}",
                value.mean_discounted, value.std_error, value.mean_average_reward
            );
            std::fs::write(&out, serde_json::to_string_pretty(&value)?)?;
        }
        Command::Oracle {
            config,
            out,
            cache_dir,
        } => {
            let cfg = RunConfig::load(&config)?;
            let gamma = cfg.experiment.gamma;
            let protocol = cfg.eval.oracle_protocol(cfg.env.scalar(), gamma);
            let stream = derive_stream(cfg.experiment.seed, &[ORACLE_LABEL]);
            let oracle = match (&cache_dir, &cfg.env) {
                (Some(dir), gfqi_cli::config::EnvConfig::Synthetic(p)) => {
                    cached_oracle(dir, p, gamma, &cfg.eval.grid, &protocol, stream)?
                }
                (Some(dir), gfqi_cli::config::EnvConfig::SemiSynthetic(p)) => {
                    cached_oracle(dir, p, gamma, &cfg.eval.grid, &protocol, stream)?
                }
                (None, _) => {
                    value_iteration_oracle(cfg.env.scalar(), gamma, &cfg.eval.grid, &protocol, stream)?
                }
            };
            eprintln!(
                "oracle value {:.4} (+- {:.4}), Bellman residual {:.2e}, {} sweeps",
                oracle.value, oracle.mc.std_error, oracle.bellman_residual, oracle.sweeps
            );
            std::fs::write(&out, serde_json::to_string(&oracle)?)?;
        }
        Command::Sweep {
            config,
            out,
            resume,
            timings,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.experiment.seed = s;
            }
            let outcome = run_sweep(&cfg, &out, resume, timings)?;
            eprintln!(
                "wrote {} rows ({} reused) to {}",
                outcome.rows_written,
                outcome.rows_reused,
                outcome.path.display()
            );
        }
        Command::Plot { csv, out, metric } => {
            let metric = match metric.as_str() {
                "average" => RegretMetric::AverageReward,
                "discounted" => RegretMetric::Discounted,
                other => bail!("unknown metric {other:?} (use average|discounted)"),
            };
            plot_results(&csv, &out, metric)?;
            eprintln!("wrote {}", out.display());
        }
    }
    Ok(())
}
