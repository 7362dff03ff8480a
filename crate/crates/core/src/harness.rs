//! Experiment orchestration: datasets, embedder, retrieval, policy training,
//! evaluation, and CSV metrics for every method.
//!
//! Randomness comes from `SeededRng::new(config.seed)` through named
//! substreams: `prior_data`, `task_data`, `embedder`, `policy` (init),
//! `sampler` (batches), `eval`, and `interventions`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_embedder, save_policy};
use crate::config::{ExperimentConfig, Method};
use crate::data::{DatasetStore, NormStats, Role, DEFAULT_STD_FLOOR};
use crate::env::{
    evaluate, generate_dataset, run_intervention_round, EvalReport, ExpertController, PickPlaceEnv,
    PolicyController, Task,
};
use crate::error::StageExt;
use crate::policy::{train_bc, GmmPolicy};
use crate::retrieval::{
    build_retrieved, expand_context, normalize_scores, score_prior, select, selection_quality,
    separation_curves, write_scores_csv, write_separation_csv, RetrievalMask, ScoreTable, SeparationPoint,
};
use crate::rng::SeededRng;
use crate::vae::{train_embedder, EmbedderModel};
use crate::{Error, Result};

pub const METRICS_HEADER: [&str; 9] = [
    "seed",
    "method",
    "delta",
    "n_retrieved",
    "fraction_retrieved",
    "precision",
    "recall",
    "success_rate",
    "wall_seconds",
];

/// One completed run. `precision` and `recall` are empty when the prior
/// store carries no labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub method: String,
    pub delta: f64,
    pub n_retrieved: usize,
    pub fraction_retrieved: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub success_rate: f64,
    pub wall_seconds: f64,
}

/// A metrics row from the intervention protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionRow {
    pub round: usize,
    pub cumulative_interventions: usize,
    pub seed: u64,
    pub method: String,
    pub delta: f64,
    pub n_retrieved: usize,
    pub fraction_retrieved: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub success_rate: f64,
    pub wall_seconds: f64,
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    write_rows(path.as_ref(), &METRICS_HEADER, rows)
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_intervention_csv(path: impl AsRef<Path>, rows: &[InterventionRow]) -> Result<()> {
    let header: Vec<&str> = ["round", "cumulative_interventions"]
        .into_iter()
        .chain(METRICS_HEADER)
        .collect();
    write_rows(path.as_ref(), &header, rows)
}

#[derive(Serialize)]
struct EvalLogRow {
    episode: u64,
    success: bool,
    steps_taken: usize,
}

pub fn write_eval_csv(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    let rows: Vec<EvalLogRow> = report
        .episodes
        .iter()
        .map(|e| EvalLogRow {
            episode: e.trajectory.id,
            success: e.success,
            steps_taken: e.steps_taken,
        })
        .collect();
    write_rows(path.as_ref(), &["episode", "success", "steps_taken"], &rows)
}

/// File names inside the output directory.
pub mod artifacts {
    pub const CONFIG: &str = "config.json";
    pub const PRIOR: &str = "prior.jsonl";
    pub const TASK: &str = "task.jsonl";
    pub const EMBEDDER: &str = "embedder.json";
    pub const SCORES: &str = "scores.csv";
    pub const SEPARATION: &str = "separation.csv";
    pub const RETRIEVED: &str = "retrieved.jsonl";
    pub const POLICY: &str = "policy.json";
    pub const PRETRAINED: &str = "pretrained.json";
    pub const EVAL: &str = "eval.csv";
    pub const METRICS: &str = "metrics.csv";
    pub const SWEEP: &str = "sweep.csv";
    pub const INTERVENTIONS: &str = "interventions.csv";
}

pub fn ensure_out_dir(config: &ExperimentConfig) -> Result<PathBuf> {
    let out = config.paths.out.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

pub fn write_config(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let path = out.join(artifacts::CONFIG);
    let mut text = config.to_json()?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn root_rng(config: &ExperimentConfig) -> SeededRng {
    SeededRng::new(config.seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub prior: DatasetStore,
    pub task: DatasetStore,
}

impl Datasets {
    pub fn save(&self, out: &Path) -> Result<()> {
        self.prior.save(out.join(artifacts::PRIOR))?;
        self.task.save(out.join(artifacts::TASK))
    }

    pub fn is_labeled(&self) -> bool {
        !self.prior.is_empty() && self.prior.iter().all(|t| t.task_label.is_some())
    }
}

/// Loads the configured datasets, generating any that have no path.
pub fn prepare_datasets(config: &ExperimentConfig) -> Result<Datasets> {
    let env = config.env.build()?;
    let target = config.env.target();
    let root = root_rng(config);
    let prior = match &config.paths.prior {
        Some(p) => DatasetStore::load(p, Role::Prior)?,
        None => generate_dataset(
            &env,
            target,
            config.env.n_relevant,
            config.env.n_adversarial,
            config.env.noise_std,
            &mut root.substream("prior_data"),
        )?,
    };
    let task = match &config.paths.task {
        Some(p) => DatasetStore::load(p, Role::Task)?,
        None => generate_dataset(
            &env,
            target,
            config.env.n_task_demos,
            0,
            config.env.noise_std,
            &mut root.substream("task_data"),
        )?
        .with_role(Role::Task),
    };
    for store in [&prior, &task] {
        if store.state_dim() != env.state_dim() || store.action_dim() != env.action_dim() {
            return Err(Error::dims("dataset state_dim", env.state_dim(), store.state_dim()));
        }
    }
    if prior.is_empty() {
        return Err(Error::Empty("prior dataset"));
    }
    if task.is_empty() {
        return Err(Error::Empty("task dataset"));
    }
    Ok(Datasets { prior, task })
}

pub fn fit_embedder(config: &ExperimentConfig, prior: &DatasetStore) -> Result<EmbedderModel> {
    let trained = train_embedder(prior, &config.embedder_config(), &mut root_rng(config).substream("embedder"))?;
    Ok(trained.model)
}

/// Raw and normalized scores of every prior transition.
pub fn score_table(model: &EmbedderModel, prior: &DatasetStore, task: &DatasetStore) -> Result<ScoreTable> {
    Ok(normalize_scores(score_prior(model, prior, task)?))
}

/// Threshold, context expansion, and the retrieved store.
pub fn retrieve(
    table: &ScoreTable,
    prior: &DatasetStore,
    delta: f64,
    context_horizon: usize,
) -> Result<(RetrievalMask, DatasetStore)> {
    let mask = expand_context(&select(table, delta)?, prior, context_horizon)?;
    let retrieved = build_retrieved(prior, &mask)?;
    Ok((mask, retrieved))
}

pub fn relevant_labels(config: &ExperimentConfig) -> Result<Vec<String>> {
    let env = config.env.build()?;
    Ok(vec![env.label(config.env.target())])
}

/// Selection of every prior transition whose label is relevant.
pub fn ground_truth_mask(config: &ExperimentConfig, prior: &DatasetStore) -> Result<RetrievalMask> {
    let relevant = relevant_labels(config)?;
    let selected = prior
        .iter()
        .map(|t| {
            let label = t.task_label.as_deref().ok_or(Error::MissingLabel(t.episode_id))?;
            Ok(relevant.iter().any(|r| r == label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalMask::from_selection(selected, config.delta))
}

/// Fresh policy with statistics over `task ∪ retrieved`, trained by
/// balanced-batch behavior cloning.
pub fn fit_policy(
    config: &ExperimentConfig,
    task: &DatasetStore,
    retrieved: &DatasetStore,
    goal_conditioned: bool,
    sampler: &mut SeededRng,
) -> Result<GmmPolicy> {
    let union = DatasetStore::concat(&[task, retrieved], Role::Retrieved)?;
    let stats = NormStats::compute(&union, DEFAULT_STD_FLOOR)?;
    let policy = GmmPolicy::new(
        task.state_dim(),
        task.action_dim(),
        &config.policy,
        goal_conditioned,
        stats,
        &mut root_rng(config).substream("policy"),
    )?;
    Ok(train_bc(policy, task, retrieved, &config.policy, sampler)?.policy)
}

/// Trains the policy for a non-interactive method. `retrieved` is the
/// learned selection and is required for [`Method::Ours`].
pub fn train_method_policy(
    config: &ExperimentConfig,
    method: Method,
    data: &Datasets,
    retrieved: Option<&DatasetStore>,
) -> Result<GmmPolicy> {
    let mut sampler = root_rng(config).substream("sampler");
    let empty = DatasetStore::empty(data.task.state_dim(), data.task.action_dim(), Role::Retrieved);
    let prior_as_retrieved = data.prior.clone().with_role(Role::Retrieved);
    match method {
        Method::Ours | Method::OursInterventions => {
            let retrieved = retrieved.ok_or_else(|| {
                Error::InvalidArgument("method ours needs a retrieved dataset".into())
            })?;
            fit_policy(config, &data.task, retrieved, false, &mut sampler)
        }
        Method::TaskOnly => fit_policy(config, &data.task, &empty, false, &mut sampler),
        Method::Mixture => fit_policy(config, &data.task, &prior_as_retrieved, false, &mut sampler),
        Method::GroundTruth => {
            let gt = build_retrieved(&data.prior, &ground_truth_mask(config, &data.prior)?)?;
            fit_policy(config, &data.task, &gt, false, &mut sampler)
        }
        Method::Gcbc => fit_policy(config, &data.prior, &empty, true, &mut sampler),
        Method::GcbcFt => {
            let base = fit_policy(config, &data.prior, &empty, true, &mut sampler)?;
            let mut ft = sampler.substream("finetune");
            Ok(train_bc(base, &data.task, &prior_as_retrieved, &config.policy, &mut ft)?.policy)
        }
    }
}

pub fn evaluate_policy(config: &ExperimentConfig, policy: &GmmPolicy, task: &DatasetStore) -> Result<EvalReport> {
    let env = config.env.build()?;
    let controller = PolicyController {
        policy,
        var_scale: config.policy.var_scale,
        goal_source: policy.goal_conditioned.then_some((task, &policy.norm_stats)),
    };
    evaluate(
        &controller,
        &env,
        config.env.target(),
        config.env.n_eval_episodes,
        &root_rng(config).substream("eval"),
    )
}

fn quality(config: &ExperimentConfig, selected: &[bool], prior: &DatasetStore) -> Result<(Option<f64>, Option<f64>)> {
    if !prior.iter().all(|t| t.task_label.is_some()) {
        return Ok((None, None));
    }
    let labels = relevant_labels(config)?;
    let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    let q = selection_quality(selected, prior, &refs)?;
    Ok((Some(q.precision), Some(q.recall)))
}

fn metrics_row(
    config: &ExperimentConfig,
    method: Method,
    delta: f64,
    selected: &[bool],
    prior: &DatasetStore,
    success_rate: f64,
    started: Instant,
) -> Result<MetricsRow> {
    let (precision, recall) = quality(config, selected, prior)?;
    let n = selected.iter().filter(|&&s| s).count();
    Ok(MetricsRow {
        seed: config.seed,
        method: method.to_string(),
        delta,
        n_retrieved: n,
        fraction_retrieved: n as f64 / prior.len() as f64,
        precision,
        recall,
        success_rate,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Everything a pipeline run produced, for callers that inspect more than
/// the metrics row.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub row: MetricsRow,
    pub data: Datasets,
    pub table: Option<ScoreTable>,
    pub mask: Option<RetrievalMask>,
    pub policy: GmmPolicy,
    pub eval: EvalReport,
}

/// Embedder, scores, separation curves and their CSV exports.
fn retrieval_artifacts(
    config: &ExperimentConfig,
    data: &Datasets,
    out: &Path,
) -> Result<(EmbedderModel, ScoreTable)> {
    let model = fit_embedder(config, &data.prior).stage("embedder")?;
    save_embedder(&model, out.join(artifacts::EMBEDDER)).stage("embedder")?;
    let table = score_table(&model, &data.prior, &data.task).stage("retrieval")?;
    if data.is_labeled() {
        let curves = separation_curves(&table, &data.prior).stage("retrieval")?;
        write_separation_csv(out.join(artifacts::SEPARATION), &curves).stage("retrieval")?;
    }
    Ok((model, table))
}

/// One full run of `config.method`. Intermediate artifacts are written to
/// `config.paths.out` as they are produced.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineOutcome> {
    if config.method == Method::OursInterventions {
        return Err(Error::InvalidArgument(
            "ours_interventions runs through run_intervention_experiment".into(),
        ));
    }
    let started = Instant::now();
    let out = ensure_out_dir(config).stage("output")?;
    write_config(config, &out).stage("output")?;
    let data = prepare_datasets(config).stage("data")?;
    data.save(&out).stage("data")?;

    let (table, mask, retrieved) = match config.method {
        Method::Ours => {
            let (_, table) = retrieval_artifacts(config, &data, &out)?;
            let (mask, retrieved) =
                retrieve(&table, &data.prior, config.delta, config.retrieval.context_horizon).stage("retrieval")?;
            write_scores_csv(out.join(artifacts::SCORES), &data.prior, &table, &mask).stage("retrieval")?;
            retrieved.save(out.join(artifacts::RETRIEVED)).stage("retrieval")?;
            (Some(table), Some(mask), Some(retrieved))
        }
        Method::GroundTruth => {
            let mask = ground_truth_mask(config, &data.prior).stage("retrieval")?;
            let retrieved = build_retrieved(&data.prior, &mask).stage("retrieval")?;
            retrieved.save(out.join(artifacts::RETRIEVED)).stage("retrieval")?;
            (None, Some(mask), None)
        }
        _ => (None, None, None),
    };

    let policy = train_method_policy(config, config.method, &data, retrieved.as_ref()).stage("policy")?;
    save_policy(&policy, out.join(artifacts::POLICY)).stage("policy")?;
    let eval = evaluate_policy(config, &policy, &data.task).stage("evaluate")?;
    write_eval_csv(out.join(artifacts::EVAL), &eval).stage("evaluate")?;

    let selected: Vec<bool> = match (&mask, config.method) {
        (Some(m), _) => m.selected.clone(),
        (None, Method::TaskOnly) => vec![false; data.prior.len()],
        (None, _) => vec![true; data.prior.len()],
    };
    let row = metrics_row(config, config.method, config.delta, &selected, &data.prior, eval.success_rate, started)
        .stage("output")?;
    write_metrics_csv(out.join(artifacts::METRICS), std::slice::from_ref(&row)).stage("output")?;
    Ok(PipelineOutcome {
        row,
        data,
        table,
        mask,
        policy,
        eval,
    })
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<MetricsRow>,
    pub data: Datasets,
    pub table: ScoreTable,
}

/// Method "ours" at several thresholds. The embedder and the score table are
/// computed once; each threshold trains its own policy with the same seeds.
pub fn run_delta_sweep(config: &ExperimentConfig, deltas: &[f64]) -> Result<SweepOutcome> {
    if deltas.is_empty() {
        return Err(Error::InvalidArgument("delta sweep needs at least one delta".into()));
    }
    if let Some(d) = deltas.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::InvalidArgument(format!("delta must lie in [0, 1], got {d}")));
    }
    let started = Instant::now();
    let out = ensure_out_dir(config).stage("output")?;
    write_config(config, &out).stage("output")?;
    let data = prepare_datasets(config).stage("data")?;
    data.save(&out).stage("data")?;
    let (_, table) = retrieval_artifacts(config, &data, &out)?;
    let shared = started.elapsed();

    let (mask, _) = retrieve(&table, &data.prior, config.delta, config.retrieval.context_horizon).stage("retrieval")?;
    write_scores_csv(out.join(artifacts::SCORES), &data.prior, &table, &mask).stage("retrieval")?;

    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let t0 = Instant::now();
        let (mask, retrieved) =
            retrieve(&table, &data.prior, delta, config.retrieval.context_horizon).stage("retrieval")?;
        let policy = train_method_policy(config, Method::Ours, &data, Some(&retrieved)).stage("policy")?;
        let eval = evaluate_policy(config, &policy, &data.task).stage("evaluate")?;
        let mut row = metrics_row(config, Method::Ours, delta, &mask.selected, &data.prior, eval.success_rate, t0)
            .stage("output")?;
        row.wall_seconds += shared.as_secs_f64();
        rows.push(row);
    }
    write_metrics_csv(out.join(artifacts::SWEEP), &rows).stage("output")?;
    Ok(SweepOutcome { rows, data, table })
}

/// Separation curves of a freshly trained embedder, written to
/// `separation.csv`.
pub fn export_separation(config: &ExperimentConfig) -> Result<Vec<SeparationPoint>> {
    let out = ensure_out_dir(config).stage("output")?;
    let data = prepare_datasets(config).stage("data")?;
    if !data.is_labeled() {
        return Err(Error::Stage {
            stage: "retrieval",
            source: Box::new(Error::InvalidArgument("separation curves need a labeled prior".into())),
        });
    }
    let (_, table) = retrieval_artifacts(config, &data, &out)?;
    separation_curves(&table, &data.prior).stage("retrieval")
}

#[derive(Clone, Debug)]
pub struct InterventionOutcome {
    pub rows: Vec<InterventionRow>,
    /// Intervention data after the last round.
    pub task: DatasetStore,
}

/// Online protocol: pre-train on the whole prior, then per round collect
/// gated interventions, keep the latest `env.window` of them as task data,
/// optionally retrieve from the prior, fine-tune from the pre-trained
/// weights, and evaluate. `config.method` selects retrieval
/// (`ours_interventions` or `ours`) or none (`task_only`).
pub fn run_intervention_experiment(config: &ExperimentConfig, n_rounds: usize) -> Result<InterventionOutcome> {
    let with_retrieval = match config.method {
        Method::Ours | Method::OursInterventions => true,
        Method::TaskOnly => false,
        other => {
            return Err(Error::InvalidArgument(format!(
                "interventions support ours_interventions and task_only, not {other}"
            )))
        }
    };
    let method_name = if with_retrieval {
        Method::OursInterventions
    } else {
        Method::TaskOnly
    };
    let started = Instant::now();
    let out = ensure_out_dir(config).stage("output")?;
    write_config(config, &out).stage("output")?;
    let env: PickPlaceEnv = config.env.build().stage("data")?;
    let target: Task = config.env.target();
    let data = prepare_datasets(config).stage("data")?;
    data.save(&out).stage("data")?;
    let prior = &data.prior;

    let empty_ret = DatasetStore::empty(prior.state_dim(), prior.action_dim(), Role::Retrieved);
    let root = root_rng(config);
    let pretrained = fit_policy(config, prior, &empty_ret, false, &mut root.substream("sampler")).stage("policy")?;
    save_policy(&pretrained, out.join(artifacts::PRETRAINED)).stage("policy")?;
    let model = if with_retrieval {
        let m = fit_embedder(config, prior).stage("embedder")?;
        save_embedder(&m, out.join(artifacts::EMBEDDER)).stage("embedder")?;
        Some(m)
    } else {
        None
    };

    let expert = ExpertController {
        env: &env,
        task: target,
        noise_std: config.env.noise_std,
    };
    let mut task = DatasetStore::empty(prior.state_dim(), prior.action_dim(), Role::Task);
    let mut policy = pretrained.clone();
    let mut cumulative = 0;
    let mut rows = Vec::with_capacity(n_rounds + 1);
    let mut selected = vec![false; prior.len()];
    for round in 0..=n_rounds {
        if round > 0 {
            let controller = PolicyController {
                policy: &policy,
                var_scale: config.policy.var_scale,
                goal_source: None,
            };
            let (next, results) = run_intervention_round(
                &expert,
                &controller,
                &env,
                target,
                config.env.epsilon,
                config.env.window,
                config.env.episodes_per_round,
                &task,
                &root.substream("interventions").indexed(round as u64),
            )
            .stage("interventions")?;
            cumulative += results.iter().map(|r| r.interventions.len()).sum::<usize>();
            task = next;
            if !task.is_empty() {
                let retrieved = match &model {
                    Some(m) => {
                        let table = score_table(m, prior, &task).stage("retrieval")?;
                        let (mask, retrieved) = retrieve(&table, prior, config.delta, config.retrieval.context_horizon)
                            .stage("retrieval")?;
                        selected = mask.selected;
                        retrieved
                    }
                    None => empty_ret.clone(),
                };
                let mut sampler = root.substream("sampler").indexed(round as u64);
                policy = train_bc(pretrained.clone(), &task, &retrieved, &config.policy, &mut sampler)
                    .stage("policy")?
                    .policy;
            }
        }
        let eval = evaluate_policy(config, &policy, &task).stage("evaluate")?;
        let m = metrics_row(config, method_name, config.delta, &selected, prior, eval.success_rate, started)
            .stage("output")?;
        rows.push(InterventionRow {
            round,
            cumulative_interventions: cumulative,
            seed: m.seed,
            method: m.method,
            delta: m.delta,
            n_retrieved: m.n_retrieved,
            fraction_retrieved: m.fraction_retrieved,
            precision: m.precision,
            recall: m.recall,
            success_rate: m.success_rate,
            wall_seconds: m.wall_seconds,
        });
    }
    save_policy(&policy, out.join(artifacts::POLICY)).stage("policy")?;
    task.save(out.join(artifacts::TASK)).stage("output")?;
    write_intervention_csv(out.join(artifacts::INTERVENTIONS), &rows).stage("output")?;
    Ok(InterventionOutcome { rows, task })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(out: &Path) -> ExperimentConfig {
        ExperimentConfig::default()
            .with_overrides(&[
                "vae.steps=20",
                "vae.hidden=[8]",
                "vae.latent_dim=3",
                "policy.steps=20",
                "policy.hidden=[8]",
                "policy.modes=2",
                "policy.var_scale=0",
                "env.n_relevant=4",
                "env.n_adversarial=4",
                "env.n_task_demos=2",
                "env.n_eval_episodes=4",
                "env.episodes_per_round=2",
                &format!("paths.out={}", out.display()),
            ])
            .unwrap()
    }

    #[test]
    fn metrics_header_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&path, &[]).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap().trim_end(),
            "seed,method,delta,n_retrieved,fraction_retrieved,precision,recall,success_rate,wall_seconds"
        );
    }

    #[test]
    fn task_only_and_ground_truth_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path()).with_overrides(&["method=task_only"]).unwrap();
        let o = run_pipeline(&cfg).unwrap();
        assert_eq!(o.row.n_retrieved, 0);
        assert!(!dir.path().join(artifacts::EMBEDDER).exists());
        assert!(dir.path().join(artifacts::METRICS).exists());

        let cfg = cfg.with_overrides(&["method=ground_truth"]).unwrap();
        let o = run_pipeline(&cfg).unwrap();
        let n_a = o.data.prior.iter().filter(|t| t.task_label.as_deref() == Some("A")).count();
        assert_eq!(o.row.n_retrieved, n_a);
        assert_eq!((o.row.precision, o.row.recall), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn stage_names_on_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path())
            .with_overrides(&[&format!("paths.prior={}", dir.path().join("missing.jsonl").display())])
            .unwrap();
        match run_pipeline(&cfg).unwrap_err() {
            Error::Stage { stage, .. } => assert_eq!(stage, "data"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn zero_rounds_is_pretrained_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path()).with_overrides(&["method=task_only"]).unwrap();
        let o = run_intervention_experiment(&cfg, 0).unwrap();
        assert_eq!(o.rows.len(), 1);
        assert_eq!(o.rows[0].cumulative_interventions, 0);
        let o = run_intervention_experiment(&cfg, 2).unwrap();
        assert_eq!(o.rows.len(), 3);
        assert!(o.rows.windows(2).all(|w| w[0].cumulative_interventions <= w[1].cumulative_interventions));
        assert!(run_intervention_experiment(&cfg.with_overrides(&["method=mixture"]).unwrap(), 1).is_err());
    }
}
