//! Point-mass pick-place environments, scripted experts, rollouts and the
//! intervention loop.
//!
//! Observation layout: agent position, object positions, held flags, then
//! the offsets from the agent to each object and to bins A and B:
//! `[ax, ay, o0x, o0y, .., held_0, .., o0x-ax, o0y-ay, .., Ax-ax, Ay-ay, Bx-ax, By-ay]`.
//! Action layout: `[dx, dy, grip]`, followed for multi-object environments by
//! a one-hot (argmax-decoded) object selector of length `M`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetStore, Episode, NormStats, Role, Transition};
use crate::policy::{make_goal, GmmPolicy, Goal};
use crate::rng::SeededRng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bin {
    A,
    B,
}

impl Bin {
    pub fn other(self) -> Self {
        match self {
            Bin::A => Bin::B,
            Bin::B => Bin::A,
        }
    }
}

/// One pick-place behavior: move `object` into `bin`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Task {
    pub object: usize,
    pub bin: Bin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    TwoBins,
    MultiTask,
}

/// Axis-aligned box `[lo, hi]` per coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Region {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| p[i] >= self.lo[i] && p[i] <= self.hi[i])
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.lo[0] + self.hi[0]), 0.5 * (self.lo[1] + self.hi[1])]
    }

    fn sample(&self, rng: &mut SeededRng) -> [f64; 2] {
        [
            rng.uniform_range(self.lo[0], self.hi[0]),
            rng.uniform_range(self.lo[1], self.hi[1]),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PickPlaceEnv {
    pub kind: EnvKind,
    pub agent_region: Region,
    /// One start region per object.
    pub object_regions: Vec<Region>,
    pub bin_a: [f64; 2],
    pub bin_b: [f64; 2],
    pub grasp_radius: f64,
    pub success_radius: f64,
    /// The scripted expert opens the gripper once this close to its bin.
    pub release_radius: f64,
    pub max_step: f64,
    pub max_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub agent: [f64; 2],
    pub objects: Vec<[f64; 2]>,
    pub held: Option<usize>,
    pub steps: usize,
    /// Set when an object is released inside a bin; the episode is over.
    pub placed: Option<(usize, Bin)>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clamp_unit(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

pub fn task_label(kind: EnvKind, task: Task) -> String {
    let bin = match task.bin {
        Bin::A => "A",
        Bin::B => "B",
    };
    match kind {
        EnvKind::TwoBins => bin.to_string(),
        EnvKind::MultiTask => format!("{}{bin}", task.object),
    }
}

impl PickPlaceEnv {
    pub fn two_bins() -> Self {
        Self {
            kind: EnvKind::TwoBins,
            agent_region: Region {
                lo: [0.0, 0.7],
                hi: [1.0, 1.0],
            },
            object_regions: vec![Region {
                lo: [0.25, 0.1],
                hi: [0.75, 0.4],
            }],
            bin_a: [0.1, 0.6],
            bin_b: [0.9, 0.6],
            grasp_radius: 0.08,
            success_radius: 0.1,
            release_radius: 0.08,
            max_step: 0.05,
            max_steps: 60,
        }
    }

    pub fn multi_task(n_objects: usize) -> Result<Self> {
        if n_objects < 2 {
            return Err(Error::InvalidArgument(format!(
                "multi-task environment needs at least 2 objects, got {n_objects}"
            )));
        }
        let width = 0.6 / n_objects as f64;
        let object_regions = (0..n_objects)
            .map(|i| {
                let x0 = 0.2 + i as f64 * width;
                Region {
                    lo: [x0, 0.1],
                    hi: [x0 + 0.5 * width, 0.4],
                }
            })
            .collect();
        Ok(Self {
            kind: EnvKind::MultiTask,
            object_regions,
            ..Self::two_bins()
        })
    }

    pub fn n_objects(&self) -> usize {
        self.object_regions.len()
    }

    pub fn state_dim(&self) -> usize {
        6 + 5 * self.n_objects()
    }

    pub fn action_dim(&self) -> usize {
        match self.kind {
            EnvKind::TwoBins => 3,
            EnvKind::MultiTask => 3 + self.n_objects(),
        }
    }

    pub fn bin_pos(&self, bin: Bin) -> [f64; 2] {
        match bin {
            Bin::A => self.bin_a,
            Bin::B => self.bin_b,
        }
    }

    /// All tasks the environment supports, object-major.
    pub fn tasks(&self) -> Vec<Task> {
        (0..self.n_objects())
            .flat_map(|object| [Bin::A, Bin::B].map(|bin| Task { object, bin }))
            .collect()
    }

    pub fn label(&self, task: Task) -> String {
        task_label(self.kind, task)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n_objects() >= 1
            && (self.kind == EnvKind::MultiTask || self.n_objects() == 1)
            && self.grasp_radius > 0.0
            && self.success_radius > 0.0
            && self.release_radius > 0.0
            && self.release_radius < self.success_radius
            && self.max_step > 0.0
            && self.max_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid environment geometry".into()))
        }
    }

    pub fn check_task(&self, task: Task) -> Result<()> {
        if task.object < self.n_objects() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "task object {} out of range for {} objects",
                task.object,
                self.n_objects()
            )))
        }
    }

    pub fn reset(&self, rng: &mut SeededRng) -> EnvState {
        let agent = self.agent_region.sample(rng);
        let objects = self.object_regions.iter().map(|r| r.sample(rng)).collect();
        EnvState {
            agent,
            objects,
            held: None,
            steps: 0,
            placed: None,
        }
    }

    pub fn is_terminal(&self, state: &EnvState) -> bool {
        state.placed.is_some() || state.steps >= self.max_steps
    }

    pub fn is_success(&self, state: &EnvState, task: Task) -> bool {
        state.placed == Some((task.object, task.bin))
    }

    pub fn step(&self, state: &EnvState, action: &[f64]) -> Result<EnvState> {
        if action.len() != self.action_dim() {
            return Err(Error::dims("env action", self.action_dim(), action.len()));
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("env action {action:?}")));
        }
        let mut next = state.clone();
        next.steps += 1;
        let delta = [
            action[0].clamp(-self.max_step, self.max_step),
            action[1].clamp(-self.max_step, self.max_step),
        ];
        next.agent = clamp_unit([state.agent[0] + delta[0], state.agent[1] + delta[1]]);
        let grip = action[2] > 0.5;
        match next.held {
            Some(i) => {
                next.objects[i] = next.agent;
                if !grip {
                    next.held = None;
                    next.placed = [Bin::A, Bin::B]
                        .into_iter()
                        .find(|&b| dist(next.agent, self.bin_pos(b)) <= self.success_radius)
                        .map(|b| (i, b));
                }
            }
            None if grip => {
                let i = self.selected_object(action);
                if dist(next.agent, next.objects[i]) <= self.grasp_radius {
                    next.held = Some(i);
                    next.objects[i] = next.agent;
                }
            }
            None => {}
        }
        Ok(next)
    }

    fn selected_object(&self, action: &[f64]) -> usize {
        match self.kind {
            EnvKind::TwoBins => 0,
            EnvKind::MultiTask => action[3..]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0,
        }
    }

    pub fn observe(&self, state: &EnvState) -> Vec<f64> {
        let mut obs = Vec::with_capacity(self.state_dim());
        obs.extend(state.agent);
        for o in &state.objects {
            obs.extend(o);
        }
        obs.extend((0..self.n_objects()).map(|i| if state.held == Some(i) { 1.0 } else { 0.0 }));
        for p in state.objects.iter().chain([&self.bin_a, &self.bin_b]) {
            obs.extend([p[0] - state.agent[0], p[1] - state.agent[1]]);
        }
        obs
    }

    /// Inverse of [`observe`](Self::observe) for the fields an observation
    /// carries (step counter and placement are not observed).
    pub fn parse_observation(&self, obs: &[f64]) -> Result<EnvState> {
        if obs.len() != self.state_dim() {
            return Err(Error::dims("env observation", self.state_dim(), obs.len()));
        }
        let m = self.n_objects();
        Ok(EnvState {
            agent: [obs[0], obs[1]],
            objects: (0..m).map(|i| [obs[2 + 2 * i], obs[3 + 2 * i]]).collect(),
            held: (0..m).find(|&i| obs[2 + 2 * m + i] > 0.5),
            steps: 0,
            placed: None,
        })
    }

    /// Phase logic: approach, grasp, carry, release. Noise perturbs only the
    /// displacement components.
    pub fn scripted_expert(&self, state: &EnvState, task: Task, noise_std: f64, rng: &mut SeededRng) -> Vec<f64> {
        let goal = match state.held {
            Some(_) => self.bin_pos(task.bin),
            None => state.objects[task.object],
        };
        let d = [goal[0] - state.agent[0], goal[1] - state.agent[1]];
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let step = if len <= self.max_step {
            d
        } else {
            let s = self.max_step / len;
            [d[0] * s, d[1] * s]
        };
        let grip = match state.held {
            // Ramps down while closing in on the bin and crosses 0.5 exactly
            // at the release radius.
            Some(_) => (len / (2.0 * self.release_radius)).min(1.0),
            None if len <= self.max_step => 1.0,
            None => 0.0,
        };
        let mut delta = step;
        if noise_std > 0.0 {
            delta[0] += noise_std * rng.normal();
            delta[1] += noise_std * rng.normal();
        }
        let mut action = vec![delta[0], delta[1], grip];
        if self.kind == EnvKind::MultiTask {
            action.extend((0..self.n_objects()).map(|i| if i == task.object { 1.0 } else { 0.0 }));
        }
        action
    }

    /// One expert episode. Returns the transitions and whether it succeeded.
    pub fn expert_episode(
        &self,
        task: Task,
        noise_std: f64,
        episode_id: u64,
        rng: &mut SeededRng,
    ) -> Result<(Vec<Transition>, bool)> {
        let label = self.label(task);
        let mut state = self.reset(rng);
        let mut out = Vec::new();
        while !self.is_terminal(&state) {
            let action = self.scripted_expert(&state, task, noise_std, rng);
            out.push(Transition {
                episode_id,
                t: state.steps as u64,
                state: self.observe(&state),
                action: action.clone(),
                task_label: Some(label.clone()),
            });
            state = self.step(&state, &action)?;
        }
        Ok((out, self.is_success(&state, task)))
    }

    /// Adversarial tasks for a target: the other bin for the same object
    /// first, then every other task in order.
    pub fn adversarial_tasks(&self, target: Task) -> Vec<Task> {
        let mut tasks = vec![Task {
            object: target.object,
            bin: target.bin.other(),
        }];
        tasks.extend(self.tasks().into_iter().filter(|t| t.object != target.object));
        tasks
    }
}

pub const RETRIES_PER_EPISODE: usize = 100;

/// `n_relevant` successful expert episodes of `target` followed by
/// `n_adversarial` episodes cycling through the adversarial tasks, with
/// sequential episode ids.
pub fn generate_dataset(
    env: &PickPlaceEnv,
    target: Task,
    n_relevant: usize,
    n_adversarial: usize,
    noise_std: f64,
    rng: &mut SeededRng,
) -> Result<DatasetStore> {
    env.validate()?;
    env.check_task(target)?;
    if !(noise_std >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let adversarial = env.adversarial_tasks(target);
    let schedule = std::iter::repeat(target)
        .take(n_relevant)
        .chain((0..n_adversarial).map(|i| adversarial[i % adversarial.len()]));
    let mut transitions = Vec::new();
    for (id, task) in schedule.enumerate() {
        let mut attempts = 0;
        loop {
            let (episode, ok) = env.expert_episode(task, noise_std, id as u64, rng)?;
            if ok {
                transitions.extend(episode);
                break;
            }
            attempts += 1;
            if attempts >= RETRIES_PER_EPISODE {
                return Err(Error::RetryBudgetExhausted(format!(
                    "episode {id} ({}) failed {attempts} times",
                    env.label(task)
                )));
            }
        }
    }
    DatasetStore::from_transitions(env.state_dim(), env.action_dim(), Role::Prior, transitions)
}

/// Per-episode context chosen by a controller at reset.
#[derive(Clone, Debug, Default)]
pub struct EpisodeContext {
    pub goal: Option<Goal>,
}

/// Anything that maps observations to actions in environment units.
pub trait Controller: Sync {
    fn begin(&self, _rng: &mut SeededRng) -> Result<EpisodeContext> {
        Ok(EpisodeContext::default())
    }

    fn act(&self, obs: &[f64], ctx: &EpisodeContext, rng: &mut SeededRng) -> Result<Vec<f64>>;
}

pub struct PolicyController<'a> {
    pub policy: &'a GmmPolicy,
    pub var_scale: f64,
    /// Source of goals for goal-conditioned policies.
    pub goal_source: Option<(&'a DatasetStore, &'a NormStats)>,
}

impl Controller for PolicyController<'_> {
    fn begin(&self, rng: &mut SeededRng) -> Result<EpisodeContext> {
        match (self.policy.goal_conditioned, self.goal_source) {
            (true, Some((task, stats))) => Ok(EpisodeContext {
                goal: Some(make_goal(task, stats, rng)?),
            }),
            (true, None) => Err(Error::InvalidArgument(
                "goal-conditioned policy needs a goal source".into(),
            )),
            (false, _) => Ok(EpisodeContext::default()),
        }
    }

    fn act(&self, obs: &[f64], ctx: &EpisodeContext, rng: &mut SeededRng) -> Result<Vec<f64>> {
        self.policy.sample_action(obs, ctx.goal.as_ref(), rng, self.var_scale)
    }
}

pub struct ExpertController<'a> {
    pub env: &'a PickPlaceEnv,
    pub task: Task,
    pub noise_std: f64,
}

impl Controller for ExpertController<'_> {
    fn act(&self, obs: &[f64], _ctx: &EpisodeContext, rng: &mut SeededRng) -> Result<Vec<f64>> {
        let state = self.env.parse_observation(obs)?;
        Ok(self.env.scripted_expert(&state, self.task, self.noise_std, rng))
    }
}

/// Uniform displacements within the step limit and uniform grip/selector.
pub struct RandomController<'a> {
    pub env: &'a PickPlaceEnv,
}

impl Controller for RandomController<'_> {
    fn act(&self, _obs: &[f64], _ctx: &EpisodeContext, rng: &mut SeededRng) -> Result<Vec<f64>> {
        let m = self.env.max_step;
        let mut a = vec![rng.uniform_range(-m, m), rng.uniform_range(-m, m)];
        a.extend((2..self.env.action_dim()).map(|_| rng.uniform()));
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub success: bool,
    pub steps_taken: usize,
    pub trajectory: Episode,
    /// Timesteps at which the expert took over.
    pub interventions: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub success_rate: f64,
    pub episodes: Vec<RolloutResult>,
}

/// Rollout with an optional intervening expert. When `gate` is given, the
/// expert action is executed whenever it differs from the controller's by
/// more than `epsilon` in L2.
fn rollout(
    env: &PickPlaceEnv,
    controller: &dyn Controller,
    gate: Option<(&dyn Controller, f64)>,
    task: Task,
    episode_id: u64,
    rng: &mut SeededRng,
) -> Result<RolloutResult> {
    let label = env.label(task);
    let mut env_rng = rng.substream("env");
    let mut act_rng = rng.substream("policy");
    let mut expert_rng = rng.substream("expert");
    let mut state = env.reset(&mut env_rng);
    let ctx = controller.begin(&mut act_rng)?;
    let expert_ctx = EpisodeContext::default();
    let mut transitions = Vec::new();
    let mut interventions = Vec::new();
    while !env.is_terminal(&state) {
        let obs = env.observe(&state);
        let mut action = controller.act(&obs, &ctx, &mut act_rng)?;
        if let Some((expert, epsilon)) = gate {
            let a_exp = expert.act(&obs, &expert_ctx, &mut expert_rng)?;
            let gap = action
                .iter()
                .zip(&a_exp)
                .map(|(p, e)| (p - e).powi(2))
                .sum::<f64>()
                .sqrt();
            if gap > epsilon {
                action = a_exp;
                interventions.push(state.steps as u64);
            }
        }
        transitions.push(Transition {
            episode_id,
            t: state.steps as u64,
            state: obs,
            action: action.clone(),
            task_label: Some(label.clone()),
        });
        state = env.step(&state, &action)?;
    }
    Ok(RolloutResult {
        success: env.is_success(&state, task),
        steps_taken: state.steps,
        trajectory: Episode {
            id: episode_id,
            transitions,
        },
        interventions,
    })
}

/// Mean success over `n_episodes` rollouts. Episode `i` draws all of its
/// randomness from `rng.indexed(i)`, so results do not depend on scheduling.
pub fn evaluate(
    controller: &dyn Controller,
    env: &PickPlaceEnv,
    task: Task,
    n_episodes: usize,
    rng: &SeededRng,
) -> Result<EvalReport> {
    env.check_task(task)?;
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be positive".into()));
    }
    let episodes = (0..n_episodes)
        .into_par_iter()
        .map(|i| rollout(env, controller, None, task, i as u64, &mut rng.indexed(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let wins = episodes.iter().filter(|e| e.success).count();
    Ok(EvalReport {
        success_rate: wins as f64 / n_episodes as f64,
        episodes,
    })
}

/// Runs `n_episodes` gated rollouts, appends every maximal run of
/// consecutive interventions to `task_data` as its own episode and keeps the
/// most recent `window` intervention transitions.
#[allow(clippy::too_many_arguments)]
pub fn run_intervention_round(
    expert: &dyn Controller,
    policy: &dyn Controller,
    env: &PickPlaceEnv,
    task: Task,
    epsilon: f64,
    window: usize,
    n_episodes: usize,
    task_data: &DatasetStore,
    rng: &SeededRng,
) -> Result<(DatasetStore, Vec<RolloutResult>)> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    env.check_task(task)?;
    let results = (0..n_episodes)
        .into_par_iter()
        .map(|i| rollout(env, policy, Some((expert, epsilon)), task, i as u64, &mut rng.indexed(i as u64)))
        .collect::<Result<Vec<_>>>()?;

    let mut segments: Vec<Vec<Transition>> = task_data.episodes().iter().map(|e| e.transitions.clone()).collect();
    for r in &results {
        let mut current: Vec<Transition> = Vec::new();
        for tr in &r.trajectory.transitions {
            let intervened = r.interventions.binary_search(&tr.t).is_ok();
            let contiguous = current.last().is_some_and(|p| p.t + 1 == tr.t);
            if !intervened || !contiguous {
                if !current.is_empty() {
                    segments.push(std::mem::take(&mut current));
                }
            }
            if intervened {
                current.push(tr.clone());
            }
        }
        if !current.is_empty() {
            segments.push(current);
        }
    }

    let total: usize = segments.iter().map(Vec::len).sum();
    let mut skip = total.saturating_sub(window);
    let mut kept = Vec::new();
    let mut next_id = 0u64;
    for seg in segments {
        if skip >= seg.len() {
            skip -= seg.len();
            continue;
        }
        let tail = &seg[skip..];
        skip = 0;
        for (t, tr) in tail.iter().enumerate() {
            kept.push(Transition {
                episode_id: next_id,
                t: t as u64,
                ..tr.clone()
            });
        }
        next_id += 1;
    }
    let store = DatasetStore::from_transitions(env.state_dim(), env.action_dim(), Role::Task, kept)?;
    Ok((store, results))
}
