//! State-action VAE embedder.
//!
//! States and actions are normalized with prior-dataset statistics, encoded
//! by separate MLPs, fused into a Gaussian posterior over a latent `z_sa`,
//! and decoded back to `[state ‖ action]`. Training maximizes the
//! beta-weighted ELBO against a standard-normal prior. At retrieval time a
//! transition is embedded as `[posterior mean ‖ action_scale · action]` and
//! two transitions are compared by negative Euclidean distance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetStore, NormStats};
use crate::nn::{Activation, AdamConfig, AdamState, MlpSpec, Network, Trace};
use crate::rng::SeededRng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub latent_dim: usize,
    pub beta: f64,
    /// Hidden widths of the state and action encoders; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Weight of the action block in the embedding. Configured with the
    /// retrieval settings, so it is not part of this section's schema.
    #[serde(skip, default = "unit_scale")]
    pub action_scale: f64,
    pub std_floor: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            beta: 1e-4,
            hidden: vec![64, 64],
            steps: 5_000,
            batch: 64,
            lr: 1e-4,
            action_scale: 1.0,
            std_floor: crate::data::DEFAULT_STD_FLOOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderModel {
    pub state_encoder: Network,
    pub action_encoder: Network,
    /// Emits `[mu ‖ logvar]`.
    pub fusion_encoder: Network,
    /// Reconstructs the normalized `[state ‖ action]`.
    pub decoder: Network,
    pub latent_dim: usize,
    pub beta: f64,
    pub action_scale: f64,
    /// Activation applied to the encoder features before fusion.
    pub feature_activation: Activation,
    pub norm_stats: NormStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Gradients for the four networks, laid out like their parameter vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeGradients {
    pub state_encoder: Vec<f64>,
    pub action_encoder: Vec<f64>,
    pub fusion_encoder: Vec<f64>,
    pub decoder: Vec<f64>,
}

impl VaeGradients {
    fn zeros(model: &EmbedderModel) -> Self {
        Self {
            state_encoder: vec![0.0; model.state_encoder.params.len()],
            action_encoder: vec![0.0; model.action_encoder.params.len()],
            fusion_encoder: vec![0.0; model.fusion_encoder.params.len()],
            decoder: vec![0.0; model.decoder.params.len()],
        }
    }
}

/// One normalized training example.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeSample {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
}

impl EmbedderModel {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        config: &EmbedderConfig,
        norm_stats: NormStats,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if config.hidden.is_empty() {
            return Err(Error::Config("vae.hidden must name at least one layer".into()));
        }
        if config.latent_dim == 0 {
            return Err(Error::Config("vae.latent_dim must be positive".into()));
        }
        if norm_stats.state_dim() != state_dim || norm_stats.action_dim() != action_dim {
            return Err(Error::dims("embedder norm stats", state_dim, norm_stats.state_dim()));
        }
        let act = Activation::Relu;
        let feat = *config.hidden.last().expect("non-empty");
        let widths = |input: usize| {
            std::iter::once(input)
                .chain(config.hidden.iter().copied())
                .collect::<Vec<_>>()
        };
        let mut decoder_widths = vec![config.latent_dim];
        decoder_widths.extend(config.hidden.iter().rev());
        decoder_widths.push(state_dim + action_dim);
        Ok(Self {
            state_encoder: Network::init(MlpSpec::new(widths(state_dim), act)?, rng),
            action_encoder: Network::init(MlpSpec::new(widths(action_dim), act)?, rng),
            fusion_encoder: Network::init(
                MlpSpec::new(vec![2 * feat, feat, 2 * config.latent_dim], act)?,
                rng,
            ),
            decoder: Network::init(MlpSpec::new(decoder_widths, act)?, rng),
            latent_dim: config.latent_dim,
            beta: config.beta,
            action_scale: config.action_scale,
            feature_activation: act,
            norm_stats,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_encoder.spec.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_encoder.spec.input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.latent_dim + self.action_dim()
    }

    /// Posterior `(mu, logvar)` for a normalized pair.
    pub fn posterior(&self, state: &[f64], action: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let act = self.feature_activation;
        let mut fused: Vec<f64> = self.state_encoder.forward(state)?;
        fused.extend(self.action_encoder.forward(action)?);
        fused.iter_mut().for_each(|v| *v = act.apply(*v));
        let mut out = self.fusion_encoder.forward(&fused)?;
        let logvar = out.split_off(self.latent_dim);
        Ok((out, logvar))
    }

    /// Embeds a raw (environment-unit) transition.
    pub fn encode(&self, state: &[f64], action: &[f64]) -> Result<Embedding> {
        if state.iter().chain(action).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedder input".into()));
        }
        let s = self.norm_stats.normalize_state(state)?;
        let a = self.norm_stats.normalize_action(action)?;
        let (mut z, _) = self.posterior(&s, &a)?;
        z.extend(a.iter().map(|v| self.action_scale * v));
        Ok(Embedding(z))
    }

    /// Embeds every transition of a store, in store order.
    pub fn encode_store(&self, store: &DatasetStore) -> Result<Vec<Embedding>> {
        let items: Vec<_> = store.iter().collect();
        items
            .par_iter()
            .map(|t| self.encode(&t.state, &t.action))
            .collect()
    }

    /// State encoder, action encoder, fusion encoder, decoder.
    pub fn networks(&self) -> [&Network; 4] {
        [
            &self.state_encoder,
            &self.action_encoder,
            &self.fusion_encoder,
            &self.decoder,
        ]
    }

    fn networks_mut(&mut self) -> [&mut Network; 4] {
        [
            &mut self.state_encoder,
            &mut self.action_encoder,
            &mut self.fusion_encoder,
            &mut self.decoder,
        ]
    }
}

/// KL divergence of `N(mu, exp(logvar))` from the standard normal.
pub fn kl_term(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(Error::dims("kl_term", mu.len(), logvar.len()));
    }
    Ok(0.5
        * mu.iter()
            .zip(logvar)
            .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
            .sum::<f64>())
}

struct PassCache {
    state_trace: Trace,
    action_trace: Trace,
    fusion_trace: Trace,
    decoder_trace: Trace,
    features: Vec<f64>,
}

/// Per-example loss and gradient (scaled by `weight`) for a fixed noise draw.
fn example_loss(
    model: &EmbedderModel,
    sample: &VaeSample,
    noise: &[f64],
    weight: f64,
    grads: &mut VaeGradients,
) -> Result<f64> {
    let act = model.feature_activation;
    let l = model.latent_dim;
    let state_trace = model.state_encoder.trace(&sample.state)?;
    let action_trace = model.action_encoder.trace(&sample.action)?;
    let raw_features: Vec<f64> = state_trace
        .output()
        .iter()
        .chain(action_trace.output())
        .copied()
        .collect();
    let features: Vec<f64> = raw_features.iter().map(|&v| act.apply(v)).collect();
    let fusion_trace = model.fusion_encoder.trace(&features)?;
    let (mu, logvar) = fusion_trace.output().split_at(l);
    if noise.len() != l {
        return Err(Error::dims("reparameterization noise", l, noise.len()));
    }
    let std: Vec<f64> = logvar.iter().map(|v| (0.5 * v).exp()).collect();
    let z: Vec<f64> = mu
        .iter()
        .zip(&std)
        .zip(noise)
        .map(|((m, s), e)| m + s * e)
        .collect();
    let decoder_trace = model.decoder.trace(&z)?;
    let target = sample.state.iter().chain(&sample.action);
    let residual: Vec<f64> = decoder_trace
        .output()
        .iter()
        .zip(target)
        .map(|(xh, x)| xh - x)
        .collect();
    let recon = 0.5 * residual.iter().map(|r| r * r).sum::<f64>();
    let kl = kl_term(mu, logvar)?;
    let loss = recon + model.beta * kl;

    let cache = PassCache {
        state_trace,
        action_trace,
        fusion_trace,
        decoder_trace,
        features: raw_features,
    };
    let upstream: Vec<f64> = residual.iter().map(|r| r * weight).collect();
    let grad_z = model
        .decoder
        .backprop_into(&cache.decoder_trace, &upstream, &mut grads.decoder)?;
    let (mu, logvar) = cache.fusion_trace.output().split_at(l);
    let mut grad_fusion_out = Vec::with_capacity(2 * l);
    for i in 0..l {
        grad_fusion_out.push(grad_z[i] + weight * model.beta * mu[i]);
    }
    for i in 0..l {
        grad_fusion_out.push(
            grad_z[i] * noise[i] * 0.5 * std[i]
                + weight * model.beta * 0.5 * (logvar[i].exp() - 1.0),
        );
    }
    let mut grad_features = model.fusion_encoder.backprop_into(
        &cache.fusion_trace,
        &grad_fusion_out,
        &mut grads.fusion_encoder,
    )?;
    for (g, &x) in grad_features.iter_mut().zip(&cache.features) {
        *g *= act.derivative(x, act.apply(x));
    }
    let split = model.state_encoder.spec.output_dim();
    let (gs, ga) = grad_features.split_at(split);
    model
        .state_encoder
        .backprop_into(&cache.state_trace, gs, &mut grads.state_encoder)?;
    model
        .action_encoder
        .backprop_into(&cache.action_trace, ga, &mut grads.action_encoder)?;
    Ok(loss)
}

/// Batch-mean negative ELBO and its exact gradients for given noise draws,
/// one `latent_dim` vector per example.
pub fn elbo_loss_with_noise(
    model: &EmbedderModel,
    batch: &[VaeSample],
    noise: &[Vec<f64>],
) -> Result<(f64, VaeGradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("ELBO batch"));
    }
    if noise.len() != batch.len() {
        return Err(Error::dims("noise batch", batch.len(), noise.len()));
    }
    let weight = 1.0 / batch.len() as f64;
    let mut grads = VaeGradients::zeros(model);
    let mut loss = 0.0;
    for (sample, eps) in batch.iter().zip(noise) {
        loss += weight * example_loss(model, sample, eps, weight, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Batch-mean negative ELBO with noise drawn from `rng`, example by example.
pub fn elbo_loss(
    model: &EmbedderModel,
    batch: &[VaeSample],
    rng: &mut SeededRng,
) -> Result<(f64, VaeGradients)> {
    let noise: Vec<Vec<f64>> = batch
        .iter()
        .map(|_| rng.standard_normal(model.latent_dim))
        .collect();
    elbo_loss_with_noise(model, batch, &noise)
}

pub fn similarity(z1: &Embedding, z2: &Embedding) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::dims("similarity", z1.len(), z2.len()));
    }
    Ok(-z1
        .0
        .iter()
        .zip(&z2.0)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

#[derive(Clone, Debug)]
pub struct TrainedEmbedder {
    pub model: EmbedderModel,
    pub loss_trace: Vec<f64>,
}

/// Fits the embedder on a prior store. Each step draws `batch` indices
/// uniformly with replacement, then one noise vector per example, both from
/// `rng` in that order.
pub fn train_embedder(
    store: &DatasetStore,
    config: &EmbedderConfig,
    rng: &mut SeededRng,
) -> Result<TrainedEmbedder> {
    if store.is_empty() {
        return Err(Error::Empty("prior store for embedder training"));
    }
    if config.batch == 0 {
        return Err(Error::Config("vae.batch must be positive".into()));
    }
    let stats = NormStats::compute(store, config.std_floor)?;
    let mut model = EmbedderModel::new(
        store.state_dim(),
        store.action_dim(),
        config,
        stats.clone(),
        rng,
    )?;
    let samples: Vec<VaeSample> = store
        .iter()
        .map(|t| {
            Ok(VaeSample {
                state: stats.normalize_state(&t.state)?,
                action: stats.normalize_action(&t.action)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut optimizers: Vec<AdamState> = model
        .networks_mut()
        .iter()
        .map(|n| AdamState::new(n.params.len(), AdamConfig::with_lr(config.lr)))
        .collect();
    let mut loss_trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<VaeSample> = (0..config.batch)
            .map(|_| samples[rng.below(samples.len())].clone())
            .collect();
        let (loss, grads) = elbo_loss(&model, &batch, rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "embedder loss at step {step} (last finite loss {:?})",
                loss_trace.last()
            )));
        }
        loss_trace.push(loss);
        let grad_slices = [
            &grads.state_encoder,
            &grads.action_encoder,
            &grads.fusion_encoder,
            &grads.decoder,
        ];
        for ((net, opt), g) in model
            .networks_mut()
            .into_iter()
            .zip(optimizers.iter_mut())
            .zip(grad_slices)
        {
            opt.update(net.params.as_mut_slice(), g)?;
        }
    }
    Ok(TrainedEmbedder { model, loss_trace })
}
