//! Checkpoints: a JSON manifest next to a flat little-endian `f64` blob.
//!
//! The manifest names each parameter tensor with its offset and length in the
//! blob. Tensors are the flat parameter vectors of the networks, in the layer
//! layout documented in [`crate::nn`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::nn::{Activation, MlpSpec, Network, ParamVector};
use crate::policy::GmmPolicy;
use crate::vae::EmbedderModel;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest<M> {
    pub format_version: u32,
    pub kind: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub blob_values: usize,
    pub tensors: Vec<TensorEntry>,
    pub meta: M,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EmbedderMeta {
    state_encoder: MlpSpec,
    action_encoder: MlpSpec,
    fusion_encoder: MlpSpec,
    decoder: MlpSpec,
    latent_dim: usize,
    beta: f64,
    action_scale: f64,
    feature_activation: Activation,
    norm_stats: NormStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PolicyMeta {
    trunk: MlpSpec,
    head: MlpSpec,
    modes: usize,
    action_dim: usize,
    sigma_floor: f64,
    goal_conditioned: bool,
    feature_activation: Activation,
    norm_stats: NormStats,
}

/// Blob path for a manifest path: same stem, `.bin` extension.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn write_checkpoint<M: Serialize>(path: &Path, kind: &str, meta: M, tensors: &[(&str, &[f64])]) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, values) in tensors {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            offset,
            len: values.len(),
        });
        offset += values.len();
        for v in *values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| Error::InvalidArgument(format!("bad checkpoint path {}", path.display())))?,
        blob_values: offset,
        tensors: entries,
        meta,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_checkpoint<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<(M, Vec<(String, Vec<f64>)>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest<M> = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::InvalidArgument(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            manifest.format_version
        )));
    }
    if manifest.kind != kind {
        return Err(Error::InvalidArgument(format!(
            "{}: expected a {kind} checkpoint, found {}",
            path.display(),
            manifest.kind
        )));
    }
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    if bytes.len() != 8 * manifest.blob_values {
        return Err(Error::dims("checkpoint blob bytes", 8 * manifest.blob_values, bytes.len()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let tensors = manifest
        .tensors
        .into_iter()
        .map(|t| {
            values
                .get(t.offset..t.offset + t.len)
                .map(|v| (t.name.clone(), v.to_vec()))
                .ok_or_else(|| Error::InvalidArgument(format!("tensor {} overruns the blob", t.name)))
        })
        .collect::<Result<_>>()?;
    Ok((manifest.meta, tensors))
}

fn take_network(tensors: &mut Vec<(String, Vec<f64>)>, name: &str, spec: MlpSpec) -> Result<Network> {
    let pos = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks tensor {name}")))?;
    let (_, values) = tensors.remove(pos);
    spec.validate()?;
    if values.len() != spec.param_count() {
        return Err(Error::dims("checkpoint tensor", spec.param_count(), values.len()));
    }
    Ok(Network {
        spec,
        params: ParamVector(values),
    })
}

pub fn save_embedder(model: &EmbedderModel, path: impl AsRef<Path>) -> Result<()> {
    let meta = EmbedderMeta {
        state_encoder: model.state_encoder.spec.clone(),
        action_encoder: model.action_encoder.spec.clone(),
        fusion_encoder: model.fusion_encoder.spec.clone(),
        decoder: model.decoder.spec.clone(),
        latent_dim: model.latent_dim,
        beta: model.beta,
        action_scale: model.action_scale,
        feature_activation: model.feature_activation,
        norm_stats: model.norm_stats.clone(),
    };
    write_checkpoint(
        path.as_ref(),
        "embedder",
        meta,
        &[
            ("state_encoder", model.state_encoder.params.as_slice()),
            ("action_encoder", model.action_encoder.params.as_slice()),
            ("fusion_encoder", model.fusion_encoder.params.as_slice()),
            ("decoder", model.decoder.params.as_slice()),
        ],
    )
}

/// Loads an embedder checkpoint.
pub fn load_embedder(path: impl AsRef<Path>) -> Result<EmbedderModel> {
    let (meta, mut t): (EmbedderMeta, _) = read_checkpoint(path.as_ref(), "embedder")?;
    Ok(EmbedderModel {
        state_encoder: take_network(&mut t, "state_encoder", meta.state_encoder)?,
        action_encoder: take_network(&mut t, "action_encoder", meta.action_encoder)?,
        fusion_encoder: take_network(&mut t, "fusion_encoder", meta.fusion_encoder)?,
        decoder: take_network(&mut t, "decoder", meta.decoder)?,
        latent_dim: meta.latent_dim,
        beta: meta.beta,
        action_scale: meta.action_scale,
        feature_activation: meta.feature_activation,
        norm_stats: meta.norm_stats,
    })
}

pub fn save_policy(policy: &GmmPolicy, path: impl AsRef<Path>) -> Result<()> {
    let meta = PolicyMeta {
        trunk: policy.trunk.spec.clone(),
        head: policy.head.spec.clone(),
        modes: policy.modes,
        action_dim: policy.action_dim,
        sigma_floor: policy.sigma_floor,
        goal_conditioned: policy.goal_conditioned,
        feature_activation: policy.feature_activation,
        norm_stats: policy.norm_stats.clone(),
    };
    write_checkpoint(
        path.as_ref(),
        "policy",
        meta,
        &[("trunk", policy.trunk.params.as_slice()), ("head", policy.head.params.as_slice())],
    )
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<GmmPolicy> {
    let (meta, mut t): (PolicyMeta, _) = read_checkpoint(path.as_ref(), "policy")?;
    Ok(GmmPolicy {
        trunk: take_network(&mut t, "trunk", meta.trunk)?,
        head: take_network(&mut t, "head", meta.head)?,
        modes: meta.modes,
        action_dim: meta.action_dim,
        sigma_floor: meta.sigma_floor,
        goal_conditioned: meta.goal_conditioned,
        feature_activation: meta.feature_activation,
        norm_stats: meta.norm_stats,
    })
}
