//! Experiment configuration: one JSON document, every leaf overridable by a
//! dotted path.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::{Bin, EnvKind, PickPlaceEnv, Task};
use crate::policy::PolicyConfig;
use crate::vae::EmbedderConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    TaskOnly,
    Mixture,
    GroundTruth,
    Gcbc,
    GcbcFt,
    OursInterventions,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ours,
        Method::TaskOnly,
        Method::Mixture,
        Method::GroundTruth,
        Method::Gcbc,
        Method::GcbcFt,
        Method::OursInterventions,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::TaskOnly => "task_only",
            Method::Mixture => "mixture",
            Method::GroundTruth => "ground_truth",
            Method::Gcbc => "gcbc",
            Method::GcbcFt => "gcbc_ft",
            Method::OursInterventions => "ours_interventions",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Number of steps (including the retrieved one) kept per retrieved
    /// transition; 1 disables context expansion.
    pub context_horizon: usize,
    /// Weight of the action block in the embedding.
    pub action_scale: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            context_horizon: 1,
            action_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub name: EnvKind,
    /// Object count for `multi_task`; `two_bins` always has one.
    pub n_objects: usize,
    pub target_object: usize,
    pub target_bin: Bin,
    pub n_relevant: usize,
    pub n_adversarial: usize,
    pub n_task_demos: usize,
    pub noise_std: f64,
    pub n_eval_episodes: usize,
    pub max_steps: usize,
    /// Intervention gate threshold (L2, environment units).
    pub epsilon: f64,
    /// Intervention transitions kept as task data.
    pub window: usize,
    pub intervention_rounds: usize,
    pub episodes_per_round: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            name: EnvKind::TwoBins,
            n_objects: 4,
            target_object: 0,
            target_bin: Bin::A,
            n_relevant: 100,
            n_adversarial: 100,
            n_task_demos: 10,
            noise_std: 0.01,
            n_eval_episodes: 50,
            max_steps: 60,
            epsilon: 0.05,
            window: 1000,
            intervention_rounds: 5,
            episodes_per_round: 5,
        }
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<PickPlaceEnv> {
        let mut env = match self.name {
            EnvKind::TwoBins => PickPlaceEnv::two_bins(),
            EnvKind::MultiTask => PickPlaceEnv::multi_task(self.n_objects)?,
        };
        env.max_steps = self.max_steps;
        env.validate()?;
        env.check_task(self.target())?;
        Ok(env)
    }

    pub fn target(&self) -> Task {
        Task {
            object: self.target_object,
            bin: self.target_bin,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Existing prior dataset; generated from the environment when absent.
    pub prior: Option<PathBuf>,
    /// Existing task dataset; generated from the environment when absent.
    pub task: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            prior: None,
            task: None,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub delta: f64,
    pub method: Method,
    pub vae: EmbedderConfig,
    pub policy: PolicyConfig,
    pub retrieval: RetrievalConfig,
    pub env: EnvConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            delta: 0.75,
            method: Method::Ours,
            vae: EmbedderConfig::default(),
            policy: PolicyConfig::default(),
            retrieval: RetrievalConfig::default(),
            env: EnvConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn positive_widths(name: &str, widths: &[usize]) -> Result<()> {
    check(!widths.is_empty() && widths.iter().all(|&w| w > 0), || {
        format!("{name} must be a non-empty list of positive widths, got {widths:?}")
    })
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `key=value` overrides. Keys are dotted paths to existing
    /// leaves; values are parsed as JSON, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut doc;
            for part in key.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            }
            if node.is_object() {
                return Err(Error::Config(format!("config key {key:?} is a section, not a leaf")));
            }
            *node = value;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check((0.0..=1.0).contains(&self.delta), || format!("delta must lie in [0, 1], got {}", self.delta))?;

        let v = &self.vae;
        check(v.latent_dim > 0, || "vae.latent_dim must be positive".into())?;
        check(v.beta >= 0.0 && v.beta.is_finite(), || format!("vae.beta must be >= 0, got {}", v.beta))?;
        positive_widths("vae.hidden", &v.hidden)?;
        check(v.batch > 0, || "vae.batch must be positive".into())?;
        check(v.lr > 0.0 && v.lr.is_finite(), || format!("vae.lr must be positive, got {}", v.lr))?;
        check(v.std_floor > 0.0, || "vae.std_floor must be positive".into())?;

        let p = &self.policy;
        check(p.modes > 0, || "policy.modes must be positive".into())?;
        positive_widths("policy.hidden", &p.hidden)?;
        check(p.batch > 0, || "policy.batch must be positive".into())?;
        check(p.lr > 0.0 && p.lr.is_finite(), || format!("policy.lr must be positive, got {}", p.lr))?;
        check(p.var_scale >= 0.0 && p.var_scale.is_finite(), || {
            format!("policy.var_scale must be >= 0, got {}", p.var_scale)
        })?;
        check(p.sigma_floor > 0.0, || "policy.sigma_floor must be positive".into())?;

        let r = &self.retrieval;
        check(r.context_horizon >= 1, || "retrieval.context_horizon must be >= 1".into())?;
        check(r.action_scale >= 0.0 && r.action_scale.is_finite(), || {
            format!("retrieval.action_scale must be >= 0, got {}", r.action_scale)
        })?;

        let e = &self.env;
        check(e.noise_std >= 0.0 && e.noise_std.is_finite(), || {
            format!("env.noise_std must be >= 0, got {}", e.noise_std)
        })?;
        check(e.n_eval_episodes > 0, || "env.n_eval_episodes must be positive".into())?;
        check(e.n_task_demos > 0 || self.paths.task.is_some(), || {
            "env.n_task_demos must be positive".into()
        })?;
        check(e.epsilon >= 0.0, || format!("env.epsilon must be >= 0, got {}", e.epsilon))?;
        check(e.window > 0, || "env.window must be positive".into())?;
        check(e.episodes_per_round > 0, || "env.episodes_per_round must be positive".into())?;
        e.build()?;
        Ok(())
    }

    pub fn embedder_config(&self) -> EmbedderConfig {
        EmbedderConfig {
            action_scale: self.retrieval.action_scale,
            ..self.vae.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_json_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.policy.modes, 5);
        assert_eq!(cfg.vae.beta, 1e-4);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = ExperimentConfig::from_json_str(r#"{"seed": 3, "policy": {"steps": 10}}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.policy.steps, 10);
        assert_eq!(cfg.policy.batch, 32);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json_str(r#"{"sede": 3}"#).is_err());
        assert!(ExperimentConfig::from_json_str(r#"{"vae": {"action_scale": 2}}"#).is_err());
        let cfg = ExperimentConfig::default();
        assert!(cfg.with_overrides(&["policy.nope=1"]).is_err());
        assert!(cfg.with_overrides(&["policy=1"]).is_err());
        assert!(cfg.with_overrides(&["seed"]).is_err());
    }

    #[test]
    fn ranges_validated() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.with_overrides(&["delta=1.5"]).is_err());
        assert!(cfg.with_overrides(&["policy.modes=0"]).is_err());
        assert!(cfg.with_overrides(&["env.noise_std=-1"]).is_err());
        assert!(cfg.with_overrides(&["env.target_object=1"]).is_err());
        assert!(cfg.with_overrides(&["env.name=multi_task", "env.target_object=3"]).is_ok());
        assert!(cfg.with_overrides(&["retrieval.context_horizon=0"]).is_err());
    }

    #[test]
    fn dotted_overrides() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&["delta=0.5", "method=mixture", "vae.hidden=[8,8]", "env.target_bin=B", "seed=9"])
            .unwrap();
        assert_eq!(cfg.delta, 0.5);
        assert_eq!(cfg.method, Method::Mixture);
        assert_eq!(cfg.vae.hidden, vec![8, 8]);
        assert_eq!(cfg.env.target_bin, Bin::B);
        assert_eq!(cfg.seed, 9);
        let p = cfg.with_overrides(&["paths.prior=data/prior.jsonl"]).unwrap();
        assert_eq!(p.paths.prior, Some(PathBuf::from("data/prior.jsonl")));
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("best".parse::<Method>().is_err());
    }

    #[test]
    fn embedder_gets_action_scale() {
        let cfg = ExperimentConfig::default().with_overrides(&["retrieval.action_scale=0.5"]).unwrap();
        assert_eq!(cfg.embedder_config().action_scale, 0.5);
    }
}
