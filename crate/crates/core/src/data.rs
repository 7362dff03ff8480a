//! Transition datasets.
//!
//! A [`DatasetStore`] is an immutable, episode-grouped collection of
//! `(state, action)` transitions. Transitions are addressed either by
//! `(episode_id, t)` or by their flat position in iteration order (episodes
//! ascending by id, timesteps ascending within an episode); score tables and
//! retrieval masks are aligned with the flat order.
//!
//! On disk a store is JSON lines: a manifest line
//! `{"version":1,"state_dim":S,"action_dim":A}` followed by one record per
//! transition, `{"episode":e,"t":t,"state":[..],"action":[..],"task_label":..}`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    #[serde(rename = "episode")]
    pub episode_id: u64,
    pub t: u64,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    /// Ground-truth task, for evaluation code only.
    pub task_label: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub state_dim: usize,
    pub action_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prior,
    Task,
    Retrieved,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: u64,
    pub transitions: Vec<Transition>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn task_label(&self) -> Option<&str> {
        self.transitions.first().and_then(|t| t.task_label.as_deref())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStore {
    manifest: Manifest,
    role: Role,
    episodes: Vec<Episode>,
    /// Flat index of each episode's first transition.
    offsets: Vec<usize>,
    len: usize,
}

impl DatasetStore {
    pub fn empty(state_dim: usize, action_dim: usize, role: Role) -> Self {
        Self {
            manifest: Manifest {
                version: FORMAT_VERSION,
                state_dim,
                action_dim,
            },
            role,
            episodes: Vec::new(),
            offsets: Vec::new(),
            len: 0,
        }
    }

    /// Builds a store, checking dimensions, timestep contiguity and label
    /// consistency. Transitions may arrive in any episode order but must be in
    /// time order within each episode.
    pub fn from_transitions(
        state_dim: usize,
        action_dim: usize,
        role: Role,
        transitions: impl IntoIterator<Item = Transition>,
    ) -> Result<Self> {
        let mut grouped: BTreeMap<u64, Vec<Transition>> = BTreeMap::new();
        for tr in transitions {
            check_transition(&tr, state_dim, action_dim).map_err(Error::InvalidArgument)?;
            push_checked(&mut grouped, tr, role).map_err(Error::InvalidArgument)?;
        }
        Ok(Self::from_grouped(state_dim, action_dim, role, grouped))
    }

    fn from_grouped(
        state_dim: usize,
        action_dim: usize,
        role: Role,
        grouped: BTreeMap<u64, Vec<Transition>>,
    ) -> Self {
        let mut store = Self::empty(state_dim, action_dim, role);
        for (id, transitions) in grouped {
            store.offsets.push(store.len);
            store.len += transitions.len();
            store.episodes.push(Episode { id, transitions });
        }
        store
    }

    /// Reads a JSON-lines dataset file.
    pub fn load(path: impl AsRef<Path>, role: Role) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };

        let first = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing manifest line".into()))?
            .map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&first)
            .map_err(|e| parse_err(1, format!("invalid manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(parse_err(
                1,
                format!("unsupported version {}", manifest.version),
            ));
        }

        let mut grouped: BTreeMap<u64, Vec<Transition>> = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let tr: Transition = serde_json::from_str(&line)
                .map_err(|e| parse_err(lineno, format!("malformed record: {e}")))?;
            check_transition(&tr, manifest.state_dim, manifest.action_dim)
                .map_err(|m| parse_err(lineno, m))?;
            push_checked(&mut grouped, tr, role).map_err(|m| parse_err(lineno, m))?;
        }
        Ok(Self::from_grouped(
            manifest.state_dim,
            manifest.action_dim,
            role,
            grouped,
        ))
    }

    /// Writes the store as JSON lines. Floats use shortest round-trip
    /// formatting, so `load(save(store))` is bit-exact.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(tr) = self
            .iter()
            .find(|tr| tr.state.iter().chain(&tr.action).any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite(format!(
                "transition (episode {}, t {})",
                tr.episode_id, tr.t
            )));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let write = |w: &mut BufWriter<File>, s: String| -> Result<()> {
            w.write_all(s.as_bytes())
                .and_then(|_| w.write_all(b"\n"))
                .map_err(|e| Error::io(path, e))
        };
        write(&mut w, serde_json::to_string(&self.manifest)?)?;
        for tr in self.iter() {
            write(&mut w, serde_json::to_string(tr)?)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn manifest(&self) -> Manifest {
        self.manifest
    }

    pub fn state_dim(&self) -> usize {
        self.manifest.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.manifest.action_dim
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> + '_ {
        self.episodes.iter().flat_map(|e| e.transitions.iter())
    }

    /// Transition at a flat index.
    pub fn get(&self, index: usize) -> Option<&Transition> {
        if index >= self.len {
            return None;
        }
        let ep = self.offsets.partition_point(|&o| o <= index) - 1;
        self.episodes[ep].transitions.get(index - self.offsets[ep])
    }

    /// Flat index of `(episode_id, t)`.
    pub fn index_of(&self, episode_id: u64, t: u64) -> Option<usize> {
        let ep = self
            .episodes
            .binary_search_by_key(&episode_id, |e| e.id)
            .ok()?;
        let pos = self.episodes[ep]
            .transitions
            .binary_search_by_key(&t, |tr| tr.t)
            .ok()?;
        Some(self.offsets[ep] + pos)
    }

    /// Flat indices of `(episode_id, t)` and its predecessors in the same
    /// episode with timestep in `[t - horizon + 1, t]`, in time order.
    pub fn window_indices(&self, episode_id: u64, t: u64, horizon: usize) -> Result<Vec<usize>> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("window horizon must be positive".into()));
        }
        let idx = self
            .index_of(episode_id, t)
            .ok_or(Error::UnknownTransition {
                episode: episode_id,
                t,
            })?;
        let earliest = t.saturating_sub(horizon as u64 - 1);
        let ep = self.offsets.partition_point(|&o| o <= idx) - 1;
        let start = self.offsets[ep];
        let mut first = idx;
        while first > start && self.episodes[ep].transitions[first - 1 - start].t >= earliest {
            first -= 1;
        }
        Ok((first..=idx).collect())
    }

    /// New store holding the transitions selected by `mask`, keeping their
    /// `(episode_id, t)` identity. Timesteps may have gaps afterwards, which is
    /// only legal for [`Role::Retrieved`] stores.
    pub fn subset(&self, mask: &[bool], role: Role) -> Result<Self> {
        if mask.len() != self.len {
            return Err(Error::dims("subset mask", self.len, mask.len()));
        }
        let mut store = Self::empty(self.state_dim(), self.action_dim(), role);
        let mut flat = 0;
        for ep in &self.episodes {
            let picked: Vec<Transition> = ep
                .transitions
                .iter()
                .zip(&mask[flat..flat + ep.len()])
                .filter(|(_, &m)| m)
                .map(|(tr, _)| tr.clone())
                .collect();
            flat += ep.len();
            if !picked.is_empty() {
                store.offsets.push(store.len);
                store.len += picked.len();
                store.episodes.push(Episode {
                    id: ep.id,
                    transitions: picked,
                });
            }
        }
        Ok(store)
    }

    /// Concatenates stores, renumbering episodes sequentially.
    pub fn concat(stores: &[&DatasetStore], role: Role) -> Result<Self> {
        let Some(first) = stores.first() else {
            return Err(Error::Empty("store list"));
        };
        let (s, a) = (first.state_dim(), first.action_dim());
        let mut out = Self::empty(s, a, role);
        let mut next_id = 0u64;
        for store in stores {
            if store.state_dim() != s {
                return Err(Error::dims("concat state_dim", s, store.state_dim()));
            }
            if store.action_dim() != a {
                return Err(Error::dims("concat action_dim", a, store.action_dim()));
            }
            for ep in &store.episodes {
                let transitions = ep
                    .transitions
                    .iter()
                    .map(|tr| Transition {
                        episode_id: next_id,
                        ..tr.clone()
                    })
                    .collect::<Vec<_>>();
                out.offsets.push(out.len);
                out.len += transitions.len();
                out.episodes.push(Episode {
                    id: next_id,
                    transitions,
                });
                next_id += 1;
            }
        }
        Ok(out)
    }
}

fn check_transition(tr: &Transition, state_dim: usize, action_dim: usize) -> Result<(), String> {
    if tr.state.len() != state_dim {
        return Err(format!(
            "dimension mismatch: state has {} entries, manifest state_dim is {}",
            tr.state.len(),
            state_dim
        ));
    }
    if tr.action.len() != action_dim {
        return Err(format!(
            "dimension mismatch: action has {} entries, manifest action_dim is {}",
            tr.action.len(),
            action_dim
        ));
    }
    Ok(())
}

/// Retrieved stores keep the timesteps of their source, so they only need
/// increasing `t`; every other role needs `t = 0, 1, 2, ...`.
fn push_checked(
    grouped: &mut BTreeMap<u64, Vec<Transition>>,
    tr: Transition,
    role: Role,
) -> Result<(), String> {
    let episode = grouped.entry(tr.episode_id).or_default();
    let expected = episode.len() as u64;
    let ok = match (role, episode.last()) {
        (Role::Retrieved, Some(prev)) => tr.t > prev.t,
        (Role::Retrieved, None) => true,
        _ => tr.t == expected,
    };
    if !ok {
        return Err(format!(
            "non-consecutive timestep in episode {}: expected t={}, got t={}",
            tr.episode_id, expected, tr.t
        ));
    }
    if let Some(first) = episode.first() {
        if first.task_label != tr.task_label {
            return Err(format!(
                "task_label changes within episode {}",
                tr.episode_id
            ));
        }
    }
    episode.push(tr);
    Ok(())
}

/// Per-dimension normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
    pub std_floor: f64,
}

/// Single-pass (Welford) mean and population standard deviation per column.
fn column_moments<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    let mut n = 0.0;
    for row in rows {
        n += 1.0;
        for ((m, s), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(row) {
            let d = x - *m;
            *m += d / n;
            *s += d * (x - *m);
        }
    }
    let std = m2.iter().map(|s| (s / n).sqrt()).collect();
    (mean, std)
}

impl NormStats {
    pub fn compute(store: &DatasetStore, std_floor: f64) -> Result<Self> {
        if store.is_empty() {
            return Err(Error::Empty("store for normalization statistics"));
        }
        if !(std_floor > 0.0) {
            return Err(Error::InvalidArgument("std_floor must be positive".into()));
        }
        let (state_mean, state_std) =
            column_moments(store.iter().map(|t| t.state.as_slice()), store.state_dim());
        let (action_mean, action_std) =
            column_moments(store.iter().map(|t| t.action.as_slice()), store.action_dim());
        let floor = |v: Vec<f64>| v.into_iter().map(|s| s.max(std_floor)).collect();
        Ok(Self {
            state_mean,
            state_std: floor(state_std),
            action_mean,
            action_std: floor(action_std),
            std_floor,
        })
    }

    /// Statistics that leave data unchanged.
    pub fn identity(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            action_mean: vec![0.0; action_dim],
            action_std: vec![1.0; action_dim],
            std_floor: DEFAULT_STD_FLOOR,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_mean.len()
    }

    pub fn normalize_state(&self, s: &[f64]) -> Result<Vec<f64>> {
        affine(s, &self.state_mean, &self.state_std, "state", false)
    }

    pub fn normalize_action(&self, a: &[f64]) -> Result<Vec<f64>> {
        affine(a, &self.action_mean, &self.action_std, "action", false)
    }

    pub fn denormalize_state(&self, s: &[f64]) -> Result<Vec<f64>> {
        affine(s, &self.state_mean, &self.state_std, "state", true)
    }

    pub fn denormalize_action(&self, a: &[f64]) -> Result<Vec<f64>> {
        affine(a, &self.action_mean, &self.action_std, "action", true)
    }

    pub fn normalize(&self, x: &Transition) -> Result<Transition> {
        Ok(Transition {
            state: self.normalize_state(&x.state)?,
            action: self.normalize_action(&x.action)?,
            ..x.clone()
        })
    }

    pub fn denormalize(&self, x: &Transition) -> Result<Transition> {
        Ok(Transition {
            state: self.denormalize_state(&x.state)?,
            action: self.denormalize_action(&x.action)?,
            ..x.clone()
        })
    }
}

fn affine(
    x: &[f64],
    mean: &[f64],
    std: &[f64],
    what: &'static str,
    inverse: bool,
) -> Result<Vec<f64>> {
    if x.len() != mean.len() {
        return Err(Error::dims(what, mean.len(), x.len()));
    }
    Ok(x.iter()
        .zip(mean.iter().zip(std))
        .map(|(&v, (&m, &s))| if inverse { v * s + m } else { (v - m) / s })
        .collect())
}
