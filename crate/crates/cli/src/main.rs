use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use behavior_retrieval::checkpoint::{load_embedder, load_policy, save_embedder, save_policy};
use behavior_retrieval::config::{ExperimentConfig, Method};
use behavior_retrieval::data::{DatasetStore, Role};
use behavior_retrieval::harness::{self, artifacts, Datasets, MetricsRow};
use behavior_retrieval::retrieval::{evaluate_retrieval, write_scores_csv, write_separation_csv};
use behavior_retrieval::{Error, StageExt};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "behret", version, about = "Retrieval-augmented few-shot imitation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides paths.out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted config override, e.g. `--set policy.steps=2000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) the prior and task datasets into the output directory.
    GenData,
    /// Train the state-action embedder on the prior.
    TrainEmbedder,
    /// Score the prior against the task data and write the retrieved set.
    Retrieve {
        /// Embedder checkpoint; defaults to `<out>/embedder.json`.
        #[arg(long)]
        embedder: Option<PathBuf>,
    },
    /// Train the policy for `method`.
    TrainPolicy {
        /// Retrieved dataset for method `ours`; defaults to `<out>/retrieved.jsonl`.
        #[arg(long)]
        retrieved: Option<PathBuf>,
    },
    /// Roll out a policy checkpoint in the configured environment.
    Evaluate {
        /// Policy checkpoint; defaults to `<out>/policy.json`.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// All stages for the configured method.
    Pipeline,
    /// Method `ours` at several thresholds with one shared embedder.
    SweepDelta {
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.75,0.95")]
        deltas: Vec<f64>,
    },
    /// Mean normalized score per timestep and label.
    Separation,
    /// Online intervention rounds (methods ours_interventions or task_only).
    Interventions {
        /// Number of rounds; defaults to env.intervention_rounds.
        #[arg(long)]
        rounds: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(p) => ExperimentConfig::load(p).stage("config")?,
        None => ExperimentConfig::default(),
    };
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut config = base.with_overrides(&overrides).stage("config")?;
    if let Some(out) = &common.out {
        config.paths.out = out.clone();
    }
    Ok(config)
}

/// Datasets for the stage commands: explicit paths first, then files left in
/// the output directory by `gen-data`, then fresh generation.
fn datasets(config: &ExperimentConfig) -> Result<Datasets> {
    let mut cfg = config.clone();
    let out = &config.paths.out;
    for (slot, name) in [(&mut cfg.paths.prior, artifacts::PRIOR), (&mut cfg.paths.task, artifacts::TASK)] {
        if slot.is_none() && out.join(name).exists() {
            *slot = Some(out.join(name));
        }
    }
    Ok(harness::prepare_datasets(&cfg).stage("data")?)
}

fn out_dir(config: &ExperimentConfig) -> Result<PathBuf> {
    let out = harness::ensure_out_dir(config).stage("output")?;
    harness::write_config(config, &out).stage("output")?;
    Ok(out)
}

fn or_default(path: Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    path.unwrap_or_else(|| out.join(name))
}

fn print_rows(rows: &[MetricsRow]) {
    println!("{}", harness::METRICS_HEADER.join(","));
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        println!(
            "{},{},{},{},{:.4},{},{},{:.4},{:.2}",
            r.seed,
            r.method,
            r.delta,
            r.n_retrieved,
            r.fraction_retrieved,
            opt(r.precision),
            opt(r.recall),
            r.success_rate,
            r.wall_seconds
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli.common)?;
    match cli.command {
        Command::GenData => {
            let out = out_dir(&config)?;
            let data = harness::prepare_datasets(&config).stage("data")?;
            data.save(&out).stage("data")?;
            println!(
                "prior: {} episodes, {} transitions; task: {} episodes, {} transitions -> {}",
                data.prior.episodes().len(),
                data.prior.len(),
                data.task.episodes().len(),
                data.task.len(),
                out.display()
            );
        }
        Command::TrainEmbedder => {
            let out = out_dir(&config)?;
            let data = datasets(&config)?;
            let model = harness::fit_embedder(&config, &data.prior).stage("embedder")?;
            let path = out.join(artifacts::EMBEDDER);
            save_embedder(&model, &path).stage("embedder")?;
            println!("embedder -> {}", path.display());
        }
        Command::Retrieve { embedder } => {
            let out = out_dir(&config)?;
            let data = datasets(&config)?;
            let model = load_embedder(or_default(embedder, &out, artifacts::EMBEDDER)).stage("embedder")?;
            let table = harness::score_table(&model, &data.prior, &data.task).stage("retrieval")?;
            let (mask, retrieved) =
                harness::retrieve(&table, &data.prior, config.delta, config.retrieval.context_horizon)
                    .stage("retrieval")?;
            write_scores_csv(out.join(artifacts::SCORES), &data.prior, &table, &mask).stage("retrieval")?;
            retrieved.save(out.join(artifacts::RETRIEVED)).stage("retrieval")?;
            println!(
                "delta {}: retrieved {} of {} transitions",
                config.delta,
                mask.count(),
                data.prior.len()
            );
            if data.is_labeled() {
                let labels = harness::relevant_labels(&config).stage("retrieval")?;
                let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
                let report = evaluate_retrieval(&table, &mask, &data.prior, &refs).stage("retrieval")?;
                write_separation_csv(out.join(artifacts::SEPARATION), &report.separation).stage("retrieval")?;
                println!("precision {:.4}, recall {:.4}", report.precision, report.recall);
            }
        }
        Command::TrainPolicy { retrieved } => {
            let out = out_dir(&config)?;
            let data = datasets(&config)?;
            let store = match config.method {
                Method::Ours => {
                    let path = or_default(retrieved, &out, artifacts::RETRIEVED);
                    Some(DatasetStore::load(&path, Role::Retrieved).stage("retrieval")?)
                }
                Method::OursInterventions => {
                    return Err(Error::Stage {
                        stage: "policy",
                        source: Box::new(Error::InvalidArgument(
                            "ours_interventions is trained by the `interventions` command".into(),
                        )),
                    }
                    .into());
                }
                _ => None,
            };
            let policy = harness::train_method_policy(&config, config.method, &data, store.as_ref()).stage("policy")?;
            let path = out.join(artifacts::POLICY);
            save_policy(&policy, &path).stage("policy")?;
            println!("{} policy -> {}", config.method, path.display());
        }
        Command::Evaluate { policy } => {
            let out = out_dir(&config)?;
            let data = datasets(&config)?;
            let policy = load_policy(or_default(policy, &out, artifacts::POLICY)).stage("policy")?;
            let report = harness::evaluate_policy(&config, &policy, &data.task).stage("evaluate")?;
            harness::write_eval_csv(out.join(artifacts::EVAL), &report).stage("evaluate")?;
            println!(
                "success rate {:.4} over {} episodes",
                report.success_rate,
                report.episodes.len()
            );
        }
        Command::Pipeline => {
            let outcome = harness::run_pipeline(&config)?;
            print_rows(std::slice::from_ref(&outcome.row));
        }
        Command::SweepDelta { deltas } => {
            let outcome = harness::run_delta_sweep(&config, &deltas)?;
            print_rows(&outcome.rows);
        }
        Command::Separation => {
            let points = harness::export_separation(&config)?;
            println!("timestep,label,mean_normalized_score,count");
            for p in points {
                println!("{},{},{:.6},{}", p.timestep, p.label, p.mean_normalized_score, p.count);
            }
        }
        Command::Interventions { rounds } => {
            let rounds = rounds.unwrap_or(config.env.intervention_rounds);
            let outcome = harness::run_intervention_experiment(&config, rounds)?;
            println!("round,cumulative_interventions,n_retrieved,success_rate");
            for r in outcome.rows {
                println!(
                    "{},{},{},{:.4}",
                    r.round, r.cumulative_interventions, r.n_retrieved, r.success_rate
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already carry their sources in the message.
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
