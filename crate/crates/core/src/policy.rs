//! Gaussian-mixture behavior cloning.
//!
//! The policy maps a normalized observation (optionally concatenated with a
//! normalized goal state) through an MLP trunk and a linear head to the
//! parameters of a `K`-mode diagonal Gaussian mixture over normalized
//! actions. Head output layout: `K` mixture logits, then `K * D_a` means
//! (mode-major), then `K * D_a` pre-softplus standard deviations.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetStore, NormStats, Transition};
use crate::nn::{Activation, AdamConfig, AdamState, MlpSpec, Network};
use crate::rng::SeededRng;
use crate::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub modes: usize,
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub var_scale: f64,
    pub sigma_floor: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            modes: 5,
            hidden: vec![64, 64],
            steps: 5_000,
            batch: 32,
            lr: 1e-3,
            var_scale: 0.1,
            sigma_floor: 1e-4,
        }
    }
}

/// Normalized goal state for goal-conditioned policies.
#[derive(Clone, Debug, PartialEq)]
pub struct Goal(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmPolicy {
    pub trunk: Network,
    pub head: Network,
    pub modes: usize,
    pub action_dim: usize,
    pub sigma_floor: f64,
    pub goal_conditioned: bool,
    /// Activation applied to the trunk output before the head.
    pub feature_activation: Activation,
    pub norm_stats: NormStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    /// `modes x action_dim`
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn head_width(modes: usize, action_dim: usize) -> usize {
    modes * (1 + 2 * action_dim)
}

impl GmmParams {
    pub fn from_raw(raw: &[f64], modes: usize, action_dim: usize, sigma_floor: f64) -> Result<Self> {
        if raw.len() != head_width(modes, action_dim) {
            return Err(Error::dims("gmm head output", head_width(modes, action_dim), raw.len()));
        }
        let (logits, rest) = raw.split_at(modes);
        let (means, stds) = rest.split_at(modes * action_dim);
        let lse = log_sum_exp(logits);
        Ok(Self {
            weights: logits.iter().map(|l| (l - lse).exp()).collect(),
            means: means.chunks(action_dim).map(<[f64]>::to_vec).collect(),
            stds: stds
                .chunks(action_dim)
                .map(|c| c.iter().map(|&r| softplus(r) + sigma_floor).collect())
                .collect(),
        })
    }

    pub fn modes(&self) -> usize {
        self.weights.len()
    }

    /// Index of the heaviest mode (lowest index on ties).
    pub fn argmax_mode(&self) -> usize {
        self.weights
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &w)| if w > best.1 { (k, w) } else { best })
            .0
    }
}

fn component_log_density(mean: &[f64], std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(std)
        .zip(action)
        .map(|((m, s), a)| {
            let u = (a - m) / s;
            -0.5 * u * u - s.ln() - HALF_LN_2PI
        })
        .sum()
}

/// `-log sum_k w_k prod_d N(a_d; mu_kd, sigma_kd)`, via log-sum-exp.
pub fn gmm_nll(params: &GmmParams, action: &[f64]) -> Result<f64> {
    let k = params.modes();
    if k == 0 || params.means.len() != k || params.stds.len() != k {
        return Err(Error::InvalidArgument("malformed mixture".into()));
    }
    if params.means.iter().chain(&params.stds).any(|m| m.len() != action.len()) {
        return Err(Error::dims("gmm action", params.means[0].len(), action.len()));
    }
    if action.iter().any(|v| !v.is_finite())
        || params
            .weights
            .iter()
            .chain(params.means.iter().flatten())
            .chain(params.stds.iter().flatten())
            .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("gmm_nll input".into()));
    }
    let terms: Vec<f64> = (0..k)
        .map(|i| params.weights[i].ln() + component_log_density(&params.means[i], &params.stds[i], action))
        .collect();
    Ok(-log_sum_exp(&terms))
}

/// Mixture NLL of `action` and its gradient with respect to the raw head
/// outputs.
pub fn gmm_nll_raw(
    raw: &[f64],
    modes: usize,
    action_dim: usize,
    sigma_floor: f64,
    action: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if raw.len() != head_width(modes, action_dim) {
        return Err(Error::dims("gmm head output", head_width(modes, action_dim), raw.len()));
    }
    if action.len() != action_dim {
        return Err(Error::dims("gmm action", action_dim, action.len()));
    }
    if raw.iter().chain(action).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gmm_nll input".into()));
    }
    let (logits, rest) = raw.split_at(modes);
    let (means, std_raw) = rest.split_at(modes * action_dim);
    let lse_logits = log_sum_exp(logits);
    let stds: Vec<f64> = std_raw.iter().map(|&r| softplus(r) + sigma_floor).collect();
    let joint: Vec<f64> = (0..modes)
        .map(|k| {
            let span = k * action_dim..(k + 1) * action_dim;
            logits[k] - lse_logits + component_log_density(&means[span.clone()], &stds[span], action)
        })
        .collect();
    let lse = log_sum_exp(&joint);
    let nll = -lse;

    let mut grad = vec![0.0; raw.len()];
    for k in 0..modes {
        let resp = (joint[k] - lse).exp();
        let weight = (logits[k] - lse_logits).exp();
        grad[k] = weight - resp;
        for d in 0..action_dim {
            let i = k * action_dim + d;
            let s = stds[i];
            let diff = action[d] - means[i];
            grad[modes + i] = -resp * diff / (s * s);
            let d_sigma = -resp * (diff * diff / (s * s * s) - 1.0 / s);
            grad[modes + modes * action_dim + i] = d_sigma * sigmoid(std_raw[i]);
        }
    }
    Ok((nll, grad))
}

impl GmmPolicy {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        config: &PolicyConfig,
        goal_conditioned: bool,
        norm_stats: NormStats,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if config.modes == 0 {
            return Err(Error::Config("policy.modes must be positive".into()));
        }
        if config.hidden.is_empty() {
            return Err(Error::Config("policy.hidden must name at least one layer".into()));
        }
        if !(config.sigma_floor > 0.0) {
            return Err(Error::Config("policy.sigma_floor must be positive".into()));
        }
        if norm_stats.state_dim() != state_dim || norm_stats.action_dim() != action_dim {
            return Err(Error::dims("policy norm stats", state_dim, norm_stats.state_dim()));
        }
        let input = if goal_conditioned { 2 * state_dim } else { state_dim };
        let mut trunk_widths = vec![input];
        trunk_widths.extend(&config.hidden);
        let feat = *config.hidden.last().expect("non-empty");
        let act = Activation::Relu;
        Ok(Self {
            trunk: Network::init(MlpSpec::new(trunk_widths, act)?, rng),
            head: Network::init(
                MlpSpec::new(vec![feat, head_width(config.modes, action_dim)], act)?,
                rng,
            ),
            modes: config.modes,
            action_dim,
            sigma_floor: config.sigma_floor,
            goal_conditioned,
            feature_activation: act,
            norm_stats,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.norm_stats.state_dim()
    }

    fn network_input(&self, obs_norm: &[f64], goal: Option<&Goal>) -> Result<Vec<f64>> {
        if obs_norm.len() != self.state_dim() {
            return Err(Error::dims("policy observation", self.state_dim(), obs_norm.len()));
        }
        match (self.goal_conditioned, goal) {
            (false, None) => Ok(obs_norm.to_vec()),
            (true, Some(g)) => {
                if g.0.len() != self.state_dim() {
                    return Err(Error::dims("policy goal", self.state_dim(), g.0.len()));
                }
                Ok(obs_norm.iter().chain(&g.0).copied().collect())
            }
            (true, None) => Err(Error::InvalidArgument(
                "goal-conditioned policy called without a goal".into(),
            )),
            (false, Some(_)) => Err(Error::InvalidArgument(
                "goal passed to a policy that is not goal-conditioned".into(),
            )),
        }
    }

    fn raw_output(&self, input: &[f64]) -> Result<Vec<f64>> {
        let act = self.feature_activation;
        let h: Vec<f64> = self
            .trunk
            .forward(input)?
            .into_iter()
            .map(|v| act.apply(v))
            .collect();
        self.head.forward(&h)
    }

    /// Mixture over normalized actions for a raw observation.
    pub fn forward(&self, observation: &[f64], goal: Option<&Goal>) -> Result<GmmParams> {
        let obs = self.norm_stats.normalize_state(observation)?;
        let input = self.network_input(&obs, goal)?;
        GmmParams::from_raw(&self.raw_output(&input)?, self.modes, self.action_dim, self.sigma_floor)
    }

    /// Action in environment units. `var_scale == 0` returns the mean of the
    /// heaviest mode without consuming randomness; otherwise a mode is drawn
    /// by weight and the action from that mode with stds scaled by `var_scale`.
    pub fn sample_action(
        &self,
        observation: &[f64],
        goal: Option<&Goal>,
        rng: &mut SeededRng,
        var_scale: f64,
    ) -> Result<Vec<f64>> {
        let params = self.forward(observation, goal)?;
        let action = if var_scale == 0.0 {
            params.means[params.argmax_mode()].clone()
        } else {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut k = params.modes() - 1;
            for (i, w) in params.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            params.means[k]
                .iter()
                .zip(&params.stds[k])
                .map(|(m, s)| m + var_scale * s * rng.normal())
                .collect()
        };
        self.norm_stats.denormalize_action(&action)
    }

    /// Per-example NLL with gradients accumulated (times `weight`) into the
    /// trunk and head buffers.
    fn example_grad(
        &self,
        sample: &BcSample,
        weight: f64,
        trunk_grad: &mut [f64],
        head_grad: &mut [f64],
    ) -> Result<f64> {
        let act = self.feature_activation;
        let trunk_trace = self.trunk.trace(&sample.input)?;
        let h: Vec<f64> = trunk_trace.output().iter().map(|&v| act.apply(v)).collect();
        let head_trace = self.head.trace(&h)?;
        let (nll, g_raw) = gmm_nll_raw(
            head_trace.output(),
            self.modes,
            self.action_dim,
            self.sigma_floor,
            &sample.action,
        )?;
        let upstream: Vec<f64> = g_raw.iter().map(|g| g * weight).collect();
        let mut g_h = self.head.backprop_into(&head_trace, &upstream, head_grad)?;
        for (g, &x) in g_h.iter_mut().zip(trunk_trace.output()) {
            *g *= act.derivative(x, act.apply(x));
        }
        self.trunk.backprop_into(&trunk_trace, &g_h, trunk_grad)?;
        Ok(nll)
    }

    /// Mean NLL over a set of samples.
    pub fn mean_nll(&self, samples: &[BcSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Empty("sample set"));
        }
        let mut total = 0.0;
        for s in samples {
            let raw = self.raw_output(&s.input)?;
            total += gmm_nll_raw(&raw, self.modes, self.action_dim, self.sigma_floor, &s.action)?.0;
        }
        Ok(total / samples.len() as f64)
    }

    /// Normalized training samples for a store. Goal-conditioned samples use
    /// the final state of their own episode as the goal.
    pub fn samples(&self, store: &DatasetStore) -> Result<Vec<BcSample>> {
        let mut out = Vec::with_capacity(store.len());
        for ep in store.episodes() {
            let goal = match (self.goal_conditioned, ep.transitions.last()) {
                (true, Some(last)) => Some(Goal(self.norm_stats.normalize_state(&last.state)?)),
                _ => None,
            };
            for tr in &ep.transitions {
                out.push(self.sample_from(tr, goal.as_ref())?);
            }
        }
        Ok(out)
    }

    fn sample_from(&self, tr: &Transition, goal: Option<&Goal>) -> Result<BcSample> {
        let obs = self.norm_stats.normalize_state(&tr.state)?;
        Ok(BcSample {
            input: self.network_input(&obs, goal)?,
            action: self.norm_stats.normalize_action(&tr.action)?,
        })
    }
}

/// Network-ready training example: normalized input (and goal) plus
/// normalized action.
#[derive(Clone, Debug, PartialEq)]
pub struct BcSample {
    pub input: Vec<f64>,
    pub action: Vec<f64>,
}

/// Mean NLL of a batch and its parameter gradients (trunk, head).
pub fn batch_loss(policy: &GmmPolicy, batch: &[&BcSample]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("policy batch"));
    }
    let mut trunk_grad = vec![0.0; policy.trunk.params.len()];
    let mut head_grad = vec![0.0; policy.head.params.len()];
    let w = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for s in batch {
        loss += w * policy.example_grad(s, w, &mut trunk_grad, &mut head_grad)?;
    }
    Ok((loss, trunk_grad, head_grad))
}

/// Two independent uniform samplers, `batch` draws each. The second source
/// is skipped when empty.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    pub n_task: usize,
    pub n_retrieved: usize,
    pub batch: usize,
}

impl BalancedSampler {
    pub fn next_batch(&self, rng: &mut SeededRng) -> (Vec<usize>, Vec<usize>) {
        let task = (0..self.batch).map(|_| rng.below(self.n_task)).collect();
        let retrieved = if self.n_retrieved == 0 {
            Vec::new()
        } else {
            (0..self.batch).map(|_| rng.below(self.n_retrieved)).collect()
        };
        (task, retrieved)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedPolicy {
    pub policy: GmmPolicy,
    pub loss_trace: Vec<f64>,
}

/// Balanced-batch behavior cloning: every step takes the mean NLL of `batch`
/// task samples plus the mean NLL of `batch` retrieved samples and applies
/// one Adam update. With no retrieved data only the task term remains.
pub fn train_bc(
    policy: GmmPolicy,
    task: &DatasetStore,
    retrieved: &DatasetStore,
    config: &PolicyConfig,
    rng: &mut SeededRng,
) -> Result<TrainedPolicy> {
    if task.is_empty() {
        return Err(Error::Empty("task store for policy training"));
    }
    if config.batch == 0 {
        return Err(Error::Config("policy.batch must be positive".into()));
    }
    let task_samples = policy.samples(task)?;
    let ret_samples = policy.samples(retrieved)?;
    train_on_samples(policy, &task_samples, &ret_samples, config, rng)
}

pub fn train_on_samples(
    mut policy: GmmPolicy,
    task_samples: &[BcSample],
    ret_samples: &[BcSample],
    config: &PolicyConfig,
    rng: &mut SeededRng,
) -> Result<TrainedPolicy> {
    if task_samples.is_empty() {
        return Err(Error::Empty("task samples"));
    }
    let sampler = BalancedSampler {
        n_task: task_samples.len(),
        n_retrieved: ret_samples.len(),
        batch: config.batch,
    };
    let mut trunk_opt = AdamState::new(policy.trunk.params.len(), AdamConfig::with_lr(config.lr));
    let mut head_opt = AdamState::new(policy.head.params.len(), AdamConfig::with_lr(config.lr));
    let mut loss_trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (ti, ri) = sampler.next_batch(rng);
        let task_batch: Vec<&BcSample> = ti.iter().map(|&i| &task_samples[i]).collect();
        let (mut loss, mut g_trunk, mut g_head) = batch_loss(&policy, &task_batch)?;
        if !ri.is_empty() {
            let ret_batch: Vec<&BcSample> = ri.iter().map(|&i| &ret_samples[i]).collect();
            let (l2, gt2, gh2) = batch_loss(&policy, &ret_batch)?;
            loss += l2;
            g_trunk.iter_mut().zip(gt2).for_each(|(a, b)| *a += b);
            g_head.iter_mut().zip(gh2).for_each(|(a, b)| *a += b);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "policy loss at step {step} (last finite loss {:?})",
                loss_trace.last()
            )));
        }
        loss_trace.push(loss);
        trunk_opt.update(policy.trunk.params.as_mut_slice(), &g_trunk)?;
        head_opt.update(policy.head.params.as_mut_slice(), &g_head)?;
    }
    Ok(TrainedPolicy { policy, loss_trace })
}

/// Final state of a uniformly drawn task episode, normalized.
pub fn make_goal(task: &DatasetStore, stats: &NormStats, rng: &mut SeededRng) -> Result<Goal> {
    if task.is_empty() {
        return Err(Error::Empty("task store for goal sampling"));
    }
    let episodes = task.episodes();
    let ep = &episodes[rng.below(episodes.len())];
    let last = ep.transitions.last().expect("episodes are non-empty");
    Ok(Goal(stats.normalize_state(&last.state)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Role;

    fn params(weights: &[f64], means: &[&[f64]], stds: &[&[f64]]) -> GmmParams {
        GmmParams {
            weights: weights.to_vec(),
            means: means.iter().map(|m| m.to_vec()).collect(),
            stds: stds.iter().map(|s| s.to_vec()).collect(),
        }
    }

    fn small_policy(seed: u64, goal: bool) -> GmmPolicy {
        let cfg = PolicyConfig {
            modes: 3,
            hidden: vec![8, 8],
            ..PolicyConfig::default()
        };
        GmmPolicy::new(4, 2, &cfg, goal, NormStats::identity(4, 2), &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn single_gaussian_at_mean() {
        let p = params(&[1.0], &[&[0.7]], &[&[1.0]]);
        let nll = gmm_nll(&p, &[0.7]).unwrap();
        assert!((nll - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((nll - 0.918939).abs() < 1e-6);
    }

    #[test]
    fn duplicating_component_is_neutral() {
        let p = params(&[0.3, 0.7], &[&[0.0, 1.0], &[2.0, -1.0]], &[&[1.0, 0.5], &[0.3, 2.0]]);
        let dup = params(
            &[0.15, 0.7, 0.15],
            &[&[0.0, 1.0], &[2.0, -1.0], &[0.0, 1.0]],
            &[&[1.0, 0.5], &[0.3, 2.0], &[1.0, 0.5]],
        );
        let a = [0.4, 0.1];
        assert!((gmm_nll(&p, &a).unwrap() - gmm_nll(&dup, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_bad_input() {
        let p = params(&[1.0], &[&[0.0]], &[&[1.0]]);
        assert!(gmm_nll(&p, &[f64::NAN]).is_err());
        assert!(gmm_nll(&p, &[0.0, 1.0]).is_err());
        assert!(gmm_nll_raw(&[0.0, 0.0, 0.0], 1, 1, 1e-4, &[f64::INFINITY]).is_err());
    }

    #[test]
    fn raw_and_param_forms_agree() {
        let mut rng = SeededRng::new(3);
        let raw = rng.standard_normal(head_width(3, 2));
        let a = rng.standard_normal(2);
        let p = GmmParams::from_raw(&raw, 3, 2, 1e-4).unwrap();
        let (nll, _) = gmm_nll_raw(&raw, 3, 2, 1e-4, &a).unwrap();
        assert!((nll - gmm_nll(&p, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn zero_head_gives_uniform_weights() {
        let mut pol = small_policy(1, false);
        pol.head.params.as_mut_slice().fill(0.0);
        let g = pol.forward(&[0.3, 0.1, -0.2, 1.0], None).unwrap();
        for w in &g.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        let floor_plus = softplus(0.0) + pol.sigma_floor;
        assert!(g.stds.iter().flatten().all(|&s| (s - floor_plus).abs() < 1e-15));
    }

    #[test]
    fn forward_checks_goal_flag() {
        let plain = small_policy(0, false);
        let gc = small_policy(0, true);
        let obs = [0.0; 4];
        assert!(plain.forward(&obs, Some(&Goal(vec![0.0; 4]))).is_err());
        assert!(gc.forward(&obs, None).is_err());
        assert!(gc.forward(&obs, Some(&Goal(vec![0.0; 3]))).is_err());
        assert!(gc.forward(&obs, Some(&Goal(vec![0.0; 4]))).is_ok());
        assert!(plain.forward(&obs[..3], None).is_err());
    }

    #[test]
    fn greedy_sampling_takes_heaviest_mean() {
        let pol = small_policy(5, false);
        let obs = [0.2, -0.4, 0.9, 0.0];
        let g = pol.forward(&obs, None).unwrap();
        let mut rng = SeededRng::new(0);
        let a = pol.sample_action(&obs, None, &mut rng, 0.0).unwrap();
        assert_eq!(a, g.means[g.argmax_mode()]);
        assert_eq!(a, pol.sample_action(&obs, None, &mut rng, 0.0).unwrap());
    }

    #[test]
    fn stochastic_single_mode_mean() {
        let cfg = PolicyConfig {
            modes: 1,
            hidden: vec![4],
            ..PolicyConfig::default()
        };
        let pol = GmmPolicy::new(2, 1, &cfg, false, NormStats::identity(2, 1), &mut SeededRng::new(2)).unwrap();
        let obs = [0.5, -0.5];
        let g = pol.forward(&obs, None).unwrap();
        let (mu, sigma) = (g.means[0][0], g.stds[0][0]);
        let mut rng = SeededRng::new(8);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| pol.sample_action(&obs, None, &mut rng, 1.0).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        let se = sigma / (n as f64).sqrt();
        assert!((mean - mu).abs() < 3.0 * se, "mean {mean} mu {mu} se {se}");
    }

    fn store(episodes: &[Vec<([f64; 4], [f64; 2])>], role: Role) -> DatasetStore {
        let trs = episodes.iter().enumerate().flat_map(|(e, steps)| {
            steps.iter().enumerate().map(move |(t, (s, a))| Transition {
                episode_id: e as u64,
                t: t as u64,
                state: s.to_vec(),
                action: a.to_vec(),
                task_label: None,
            })
        });
        DatasetStore::from_transitions(4, 2, role, trs).unwrap()
    }

    #[test]
    fn balanced_batches_have_both_halves() {
        let sampler = BalancedSampler {
            n_task: 7,
            n_retrieved: 30,
            batch: 16,
        };
        let mut rng = SeededRng::new(0);
        for _ in 0..20 {
            let (t, r) = sampler.next_batch(&mut rng);
            assert_eq!((t.len(), r.len()), (16, 16));
            assert!(t.iter().all(|&i| i < 7) && r.iter().all(|&i| i < 30));
        }
        let solo = BalancedSampler {
            n_retrieved: 0,
            ..sampler
        };
        assert!(solo.next_batch(&mut rng).1.is_empty());
    }

    #[test]
    fn training_reproducible_and_task_only_equivalence() {
        let ep: Vec<_> = (0..6)
            .map(|t| ([t as f64 * 0.1, 0.2, -0.1, 0.0], [0.5 - t as f64 * 0.05, 1.0]))
            .collect();
        let task = store(&[ep.clone()], Role::Task);
        let empty = DatasetStore::empty(4, 2, Role::Retrieved);
        let cfg = PolicyConfig {
            steps: 30,
            batch: 4,
            modes: 2,
            hidden: vec![8],
            ..PolicyConfig::default()
        };
        let mk = || small_policy(4, false);
        let a = train_bc(mk(), &task, &empty, &cfg, &mut SeededRng::new(1)).unwrap();
        let b = train_bc(mk(), &task, &empty, &cfg, &mut SeededRng::new(1)).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.policy, b.policy);
        assert!(train_bc(mk(), &empty, &task, &cfg, &mut SeededRng::new(1)).is_err());
    }

    #[test]
    fn goals() {
        let e0: Vec<_> = (0..3).map(|t| ([t as f64, 0.0, 0.0, 0.0], [0.0, 0.0])).collect();
        let e1: Vec<_> = (0..2).map(|t| ([10.0 + t as f64, 0.0, 0.0, 0.0], [0.0, 0.0])).collect();
        let stats = NormStats::identity(4, 2);
        let single = store(&[e0.clone()], Role::Task);
        let mut rng = SeededRng::new(0);
        for _ in 0..5 {
            assert_eq!(make_goal(&single, &stats, &mut rng).unwrap().0, vec![2.0, 0.0, 0.0, 0.0]);
        }
        let two = store(&[e0, e1], Role::Task);
        let n = 1000;
        let hits = (0..n)
            .filter(|_| make_goal(&two, &stats, &mut rng).unwrap().0[0] == 11.0)
            .count();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.05);
        assert!(make_goal(&DatasetStore::empty(4, 2, Role::Task), &stats, &mut rng).is_err());
    }
    #[test]
    fn raw_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(11);
        let raw = rng.standard_normal(head_width(3, 2));
        let a = rng.standard_normal(2);
        let (_, g) = gmm_nll_raw(&raw, 3, 2, 1e-4, &a).unwrap();
        let h = 1e-6;
        for i in 0..raw.len() {
            let mut up = raw.clone();
            let mut dn = raw.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (gmm_nll_raw(&up, 3, 2, 1e-4, &a).unwrap().0 - gmm_nll_raw(&dn, 3, 2, 1e-4, &a).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()), "coord {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn overfits_small_set() {
        let mut rng = SeededRng::new(6);
        let ep: Vec<_> = (0..20)
            .map(|_| {
                let s = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
                (s, [s[0] - s[1], 0.5 * s[2]])
            })
            .collect();
        let task = store(&[ep], Role::Task);
        let pol = small_policy(9, false);
        let samples = pol.samples(&task).unwrap();
        let before = pol.mean_nll(&samples).unwrap();
        let cfg = PolicyConfig {
            steps: 2000,
            batch: 20,
            modes: 3,
            hidden: vec![8, 8],
            ..PolicyConfig::default()
        };
        let empty = DatasetStore::empty(4, 2, Role::Retrieved);
        let trained = train_bc(pol, &task, &empty, &cfg, &mut SeededRng::new(0)).unwrap();
        let after = trained.policy.mean_nll(&samples).unwrap();
        assert!(before - after > 1.0, "before {before} after {after}");
    }

}
