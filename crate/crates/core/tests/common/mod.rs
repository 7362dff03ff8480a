#![allow(dead_code)]

use behavior_retrieval::data::{DatasetStore, Role, Transition};
use behavior_retrieval::nn::{Activation, MlpSpec};
use behavior_retrieval::rng::SeededRng;
use behavior_retrieval::vae::EmbedderModel;

/// Central finite differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Finite-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;

/// Floor on the relative-error denominator. Rounding error of a central
/// difference grows with the loss value, so near-zero components are
/// compared against a small fraction of it instead of against themselves.
pub fn rel_floor(loss: f64) -> f64 {
    1e-4 * loss.abs().max(1.0)
}

/// Worst `|a - n| / max(|a|, |n|, floor)` over two gradient vectors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Plain nested-loop MLP evaluation, written against the documented layout
/// (row-major weights then biases, per layer) and independent of the library.
pub fn oracle_mlp(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Vec<f64> {
    let mut x = input.to_vec();
    let mut off = 0;
    let n_layers = spec.layer_widths.len() - 1;
    for l in 0..n_layers {
        let (n_in, n_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let mut y = vec![0.0; n_out];
        for o in 0..n_out {
            let mut acc = params[off + n_in * n_out + o];
            for i in 0..n_in {
                acc += params[off + o * n_in + i] * x[i];
            }
            y[o] = if l + 1 < n_layers {
                match spec.activations[l] {
                    Activation::Relu => acc.max(0.0),
                    Activation::Tanh => acc.tanh(),
                    Activation::Identity => acc,
                }
            } else {
                acc
            };
        }
        off += n_in * n_out + n_out;
        x = y;
    }
    x
}

/// Embedding `[mu ‖ scale · a_norm]` recomputed from the model's raw parts.
pub fn oracle_embedding(model: &EmbedderModel, state: &[f64], action: &[f64]) -> Vec<f64> {
    let stats = &model.norm_stats;
    let s: Vec<f64> = state
        .iter()
        .zip(&stats.state_mean)
        .zip(&stats.state_std)
        .map(|((v, m), sd)| (v - m) / sd)
        .collect();
    let a: Vec<f64> = action
        .iter()
        .zip(&stats.action_mean)
        .zip(&stats.action_std)
        .map(|((v, m), sd)| (v - m) / sd)
        .collect();
    let mut features = oracle_mlp(&model.state_encoder.spec, &model.state_encoder.params.0, &s);
    features.extend(oracle_mlp(&model.action_encoder.spec, &model.action_encoder.params.0, &a));
    for f in &mut features {
        *f = f.max(0.0);
    }
    let fused = oracle_mlp(&model.fusion_encoder.spec, &model.fusion_encoder.params.0, &features);
    let mut z = fused[..model.latent_dim].to_vec();
    z.extend(a.iter().map(|v| model.action_scale * v));
    z
}

/// Store of `n_episodes` random episodes of length `len`.
pub fn random_store(
    n_episodes: usize,
    len: usize,
    state_dim: usize,
    action_dim: usize,
    labels: &[&str],
    rng: &mut SeededRng,
) -> DatasetStore {
    let mut transitions = Vec::new();
    for e in 0..n_episodes {
        let label = (!labels.is_empty()).then(|| labels[e % labels.len()].to_string());
        for t in 0..len {
            transitions.push(Transition {
                episode_id: e as u64,
                t: t as u64,
                state: (0..state_dim).map(|_| rng.uniform_range(-2.0, 2.0)).collect(),
                action: (0..action_dim).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
                task_label: label.clone(),
            });
        }
    }
    DatasetStore::from_transitions(state_dim, action_dim, Role::Prior, transitions).unwrap()
}
