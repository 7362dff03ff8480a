//! Scoring prior transitions against task data and selecting the relevant ones.
//!
//! Each prior transition gets a raw score, its best similarity to any task
//! transition. Raw scores are min-max normalized over the prior store and a
//! transition is retrieved when its normalized score is strictly above the
//! threshold `delta`. Selection can optionally pull in the preceding steps of
//! every retrieved transition.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetStore, Role};
use crate::vae::{similarity, EmbedderModel, Embedding};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    /// Best-match similarity per prior transition, in store order.
    pub raw: Vec<f64>,
    /// Min-max normalized scores; empty until [`normalize_scores`] runs.
    pub normalized: Vec<f64>,
    pub f_plus: f64,
    pub f_minus: f64,
}

impl ScoreTable {
    /// Table over precomputed raw scores.
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Empty("raw score vector"));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("raw scores".into()));
        }
        let f_plus = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let f_minus = raw.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            raw,
            normalized: Vec::new(),
            f_plus,
            f_minus,
        })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalMask {
    /// Final selection, aligned with the prior store.
    pub selected: Vec<bool>,
    /// Threshold selection before context expansion.
    pub thresholded: Vec<bool>,
    pub delta: f64,
    pub context_horizon: usize,
}

impl RetrievalMask {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    /// Mask from an explicit selection (used for oracle baselines).
    pub fn from_selection(selected: Vec<bool>, delta: f64) -> Self {
        Self {
            thresholded: selected.clone(),
            selected,
            delta,
            context_horizon: 1,
        }
    }
}

fn best_match(z: &Embedding, task: &[Embedding]) -> Result<f64> {
    task.iter()
        .map(|zt| similarity(z, zt))
        .try_fold(f64::NEG_INFINITY, |best, s| Ok(best.max(s?)))
}

/// Raw scores from precomputed embeddings.
pub fn score_embeddings(prior: &[Embedding], task: &[Embedding]) -> Result<ScoreTable> {
    if prior.is_empty() {
        return Err(Error::Empty("prior embeddings"));
    }
    if task.is_empty() {
        return Err(Error::Empty("task embeddings"));
    }
    let raw = prior
        .par_iter()
        .map(|z| best_match(z, task))
        .collect::<Result<Vec<_>>>()?;
    ScoreTable::from_raw(raw)
}

/// `raw_i = max_j similarity(encode(prior_i), encode(task_j))`, with
/// `f_plus`/`f_minus` the extremes of `raw`. Parallel over prior transitions;
/// each entry is computed independently, so the result does not depend on
/// scheduling.
pub fn score_prior(
    model: &EmbedderModel,
    prior: &DatasetStore,
    task: &DatasetStore,
) -> Result<ScoreTable> {
    if prior.is_empty() {
        return Err(Error::Empty("prior store"));
    }
    if task.is_empty() {
        return Err(Error::Empty("task store"));
    }
    for store in [prior, task] {
        if store.state_dim() != model.state_dim() {
            return Err(Error::dims("score_prior state_dim", model.state_dim(), store.state_dim()));
        }
        if store.action_dim() != model.action_dim() {
            return Err(Error::dims(
                "score_prior action_dim",
                model.action_dim(),
                store.action_dim(),
            ));
        }
    }
    let task_z = model.encode_store(task)?;
    let prior_z = model.encode_store(prior)?;
    score_embeddings(&prior_z, &task_z)
}

/// Fills `normalized` with `(raw - f_minus) / (f_plus - f_minus)`. A flat
/// table (`f_plus == f_minus`) normalizes to all ones.
pub fn normalize_scores(mut table: ScoreTable) -> ScoreTable {
    let span = table.f_plus - table.f_minus;
    table.normalized = if span > 0.0 {
        table
            .raw
            .iter()
            .map(|r| ((r - table.f_minus) / span).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![1.0; table.raw.len()]
    };
    table
}

/// Strict threshold: selected iff normalized score `> delta`.
pub fn select(table: &ScoreTable, delta: f64) -> Result<RetrievalMask> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in [0, 1], got {delta}"
        )));
    }
    if table.normalized.len() != table.raw.len() {
        return Err(Error::InvalidArgument(
            "score table is not normalized".into(),
        ));
    }
    let selected: Vec<bool> = table.normalized.iter().map(|&n| n > delta).collect();
    Ok(RetrievalMask {
        thresholded: selected.clone(),
        selected,
        delta,
        context_horizon: 1,
    })
}

/// Adds, for every thresholded transition, its predecessors within a window
/// of `horizon` steps. Expansion starts from the thresholded set, so
/// repeating it is a no-op.
pub fn expand_context(
    mask: &RetrievalMask,
    prior: &DatasetStore,
    horizon: usize,
) -> Result<RetrievalMask> {
    if mask.len() != prior.len() || mask.thresholded.len() != prior.len() {
        return Err(Error::dims("retrieval mask", prior.len(), mask.len()));
    }
    let mut selected = mask.thresholded.clone();
    for (tr, _) in prior.iter().zip(&mask.thresholded).filter(|(_, &s)| s) {
        for idx in prior.window_indices(tr.episode_id, tr.t, horizon)? {
            selected[idx] = true;
        }
    }
    Ok(RetrievalMask {
        selected,
        thresholded: mask.thresholded.clone(),
        delta: mask.delta,
        context_horizon: horizon,
    })
}

/// The retrieved dataset: exactly the selected prior transitions, in order.
pub fn build_retrieved(prior: &DatasetStore, mask: &RetrievalMask) -> Result<DatasetStore> {
    prior.subset(&mask.selected, Role::Retrieved)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationPoint {
    pub timestep: u64,
    pub label: String,
    pub mean_normalized_score: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub n_selected: usize,
    pub fraction_selected: f64,
    pub precision: f64,
    pub recall: f64,
    pub separation: Vec<SeparationPoint>,
}

/// Per-timestep mean normalized score for each ground-truth label, ordered by
/// `(timestep, label)`.
pub fn separation_curves(table: &ScoreTable, prior: &DatasetStore) -> Result<Vec<SeparationPoint>> {
    if table.normalized.len() != prior.len() {
        return Err(Error::dims("separation scores", prior.len(), table.normalized.len()));
    }
    let mut acc: BTreeMap<(u64, &str), (f64, usize)> = BTreeMap::new();
    for (tr, &score) in prior.iter().zip(&table.normalized) {
        let label = tr
            .task_label
            .as_deref()
            .ok_or(Error::MissingLabel(tr.episode_id))?;
        let e = acc.entry((tr.t, label)).or_insert((0.0, 0));
        e.0 += score;
        e.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|((timestep, label), (sum, count))| SeparationPoint {
            timestep,
            label: label.to_string(),
            mean_normalized_score: sum / count as f64,
            count,
        })
        .collect())
}

/// Size, precision and recall of a selection against ground-truth labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionQuality {
    pub n_selected: usize,
    pub fraction_selected: f64,
    pub precision: f64,
    pub recall: f64,
}

/// An empty selection has precision 1; with no relevant transitions recall
/// is 1.
pub fn selection_quality(
    selected: &[bool],
    prior: &DatasetStore,
    relevant_labels: &[&str],
) -> Result<SelectionQuality> {
    if selected.len() != prior.len() {
        return Err(Error::dims("retrieval mask", prior.len(), selected.len()));
    }
    let relevant: BTreeSet<&str> = relevant_labels.iter().copied().collect();
    let (mut tp, mut n_rel) = (0usize, 0usize);
    for (tr, &sel) in prior.iter().zip(selected) {
        let label = tr
            .task_label
            .as_deref()
            .ok_or(Error::MissingLabel(tr.episode_id))?;
        if relevant.contains(label) {
            n_rel += 1;
            if sel {
                tp += 1;
            }
        }
    }
    let n_selected = selected.iter().filter(|&&s| s).count();
    Ok(SelectionQuality {
        n_selected,
        fraction_selected: if prior.is_empty() {
            0.0
        } else {
            n_selected as f64 / prior.len() as f64
        },
        precision: if n_selected == 0 {
            1.0
        } else {
            tp as f64 / n_selected as f64
        },
        recall: if n_rel == 0 {
            1.0
        } else {
            tp as f64 / n_rel as f64
        },
    })
}

/// Selection quality plus separation curves.
pub fn evaluate_retrieval(
    table: &ScoreTable,
    mask: &RetrievalMask,
    prior: &DatasetStore,
    relevant_labels: &[&str],
) -> Result<RetrievalReport> {
    let q = selection_quality(&mask.selected, prior, relevant_labels)?;
    Ok(RetrievalReport {
        n_selected: q.n_selected,
        fraction_selected: q.fraction_selected,
        precision: q.precision,
        recall: q.recall,
        separation: separation_curves(table, prior)?,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreRow {
    pub episode: u64,
    pub t: u64,
    pub raw_score: f64,
    pub normalized_score: f64,
    pub selected: bool,
    pub task_label: Option<String>,
}

/// Writes `episode,t,raw_score,normalized_score,selected,task_label`.
pub fn write_scores_csv(
    path: impl AsRef<Path>,
    prior: &DatasetStore,
    table: &ScoreTable,
    mask: &RetrievalMask,
) -> Result<()> {
    if table.normalized.len() != prior.len() || mask.len() != prior.len() {
        return Err(Error::dims("score export", prior.len(), table.normalized.len()));
    }
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for ((tr, (&raw, &norm)), &sel) in prior
        .iter()
        .zip(table.raw.iter().zip(&table.normalized))
        .zip(&mask.selected)
    {
        w.serialize(ScoreRow {
            episode: tr.episode_id,
            t: tr.t,
            raw_score: raw,
            normalized_score: norm,
            selected: sel,
            task_label: tr.task_label.clone(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_separation_csv(path: impl AsRef<Path>, points: &[SeparationPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Transition;

    fn table(raw: &[f64]) -> ScoreTable {
        normalize_scores(ScoreTable::from_raw(raw.to_vec()).unwrap())
    }

    fn labeled_store(labels: &[(&str, u64)]) -> DatasetStore {
        let mut trs = Vec::new();
        for (ep, (label, len)) in labels.iter().enumerate() {
            for t in 0..*len {
                trs.push(Transition {
                    episode_id: ep as u64,
                    t,
                    state: vec![t as f64],
                    action: vec![0.0],
                    task_label: Some(label.to_string()),
                });
            }
        }
        DatasetStore::from_transitions(1, 1, Role::Prior, trs).unwrap()
    }

    #[test]
    fn minmax_values() {
        let t = table(&[-2.0, -1.0, -0.5]);
        assert_eq!(t.normalized[0], 0.0);
        assert!((t.normalized[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(t.normalized[2], 1.0);
        assert_eq!(table(&[-3.0, -3.0]).normalized, vec![1.0, 1.0]);
    }

    #[test]
    fn threshold_boundaries() {
        let t = ScoreTable {
            raw: vec![0.0, 0.5, 1.0],
            normalized: vec![0.0, 0.5, 1.0],
            f_plus: 1.0,
            f_minus: 0.0,
        };
        assert_eq!(select(&t, 0.6).unwrap().selected, vec![false, false, true]);
        assert_eq!(select(&t, 1.0).unwrap().count(), 0);
        assert_eq!(select(&t, 0.0).unwrap().selected, vec![false, true, true]);
        assert!(select(&t, 1.5).is_err());
        assert!(select(&t, -0.1).is_err());
        let unnormalized = ScoreTable::from_raw(vec![1.0]).unwrap();
        assert!(select(&unnormalized, 0.5).is_err());
    }

    #[test]
    fn singleton_task_score_is_plain_similarity() {
        let prior = vec![Embedding(vec![0.0, 0.0]), Embedding(vec![3.0, 4.0])];
        let task = vec![Embedding(vec![0.0, 0.0])];
        let t = score_embeddings(&prior, &task).unwrap();
        assert_eq!(t.raw, vec![0.0, -5.0]);
        assert_eq!(t.f_plus, 0.0);
        assert_eq!(t.f_minus, -5.0);
        assert!(score_embeddings(&[], &task).is_err());
        assert!(score_embeddings(&prior, &[]).is_err());
    }

    #[test]
    fn context_expansion() {
        let prior = labeled_store(&[("A", 6), ("B", 4)]);
        let mut sel = vec![false; 10];
        sel[4] = true; // episode 0, t = 4
        sel[6] = true; // episode 1, t = 0
        let mask = RetrievalMask::from_selection(sel.clone(), 0.5);
        assert_eq!(expand_context(&mask, &prior, 1).unwrap().selected, sel);

        let once = expand_context(&mask, &prior, 3).unwrap();
        let picked: Vec<usize> = (0..10).filter(|&i| once.selected[i]).collect();
        assert_eq!(picked, vec![2, 3, 4, 6]);
        let twice = expand_context(&once, &prior, 3).unwrap();
        assert_eq!(twice, once);

        let short = RetrievalMask::from_selection(vec![true; 3], 0.5);
        assert!(expand_context(&short, &prior, 2).is_err());
    }

    #[test]
    fn build_retrieved_counts() {
        let prior = labeled_store(&[("A", 100), ("B", 100)]);
        let none = RetrievalMask::from_selection(vec![false; 200], 0.5);
        assert!(build_retrieved(&prior, &none).unwrap().is_empty());
        let all = RetrievalMask::from_selection(vec![true; 200], 0.5);
        let full = build_retrieved(&prior, &all).unwrap();
        assert!(full.iter().eq(prior.iter()));
        let some: Vec<bool> = (0..200).map(|i| i % 5 == 1 && i < 185).collect();
        let n = some.iter().filter(|&&s| s).count();
        assert_eq!(n, 37);
        let ret = build_retrieved(&prior, &RetrievalMask::from_selection(some, 0.5)).unwrap();
        assert_eq!(ret.len(), 37);
        assert_eq!(ret.role(), Role::Retrieved);
        assert!(build_retrieved(&prior, &RetrievalMask::from_selection(vec![true], 0.5)).is_err());
    }

    #[test]
    fn report_precision_recall() {
        let prior = labeled_store(&[("A", 5), ("B", 5)]);
        let t = table(&(0..10).map(|i| -(i as f64)).collect::<Vec<_>>());
        let exact = RetrievalMask::from_selection((0..10).map(|i| i < 5).collect(), 0.5);
        let r = evaluate_retrieval(&t, &exact, &prior, &["A"]).unwrap();
        assert_eq!((r.precision, r.recall), (1.0, 1.0));
        assert_eq!(r.n_selected, 5);
        assert_eq!(r.fraction_selected, 0.5);

        let empty = RetrievalMask::from_selection(vec![false; 10], 0.5);
        let r = evaluate_retrieval(&t, &empty, &prior, &["A"]).unwrap();
        assert_eq!((r.precision, r.recall), (1.0, 0.0));
    }

    #[test]
    fn unlabeled_prior_rejected() {
        let prior = DatasetStore::from_transitions(
            1,
            1,
            Role::Prior,
            [Transition {
                episode_id: 0,
                t: 0,
                state: vec![0.0],
                action: vec![0.0],
                task_label: None,
            }],
        )
        .unwrap();
        let t = table(&[0.0]);
        let m = RetrievalMask::from_selection(vec![true], 0.5);
        assert!(matches!(
            evaluate_retrieval(&t, &m, &prior, &["A"]),
            Err(Error::MissingLabel(0))
        ));
    }

    #[test]
    fn separation_single_label_counts() {
        let prior = labeled_store(&[("A", 3), ("A", 5)]);
        let t = table(&(0..8).map(|i| i as f64).collect::<Vec<_>>());
        let curves = separation_curves(&t, &prior).unwrap();
        assert_eq!(curves.len(), 5);
        let counts: Vec<usize> = curves.iter().map(|p| p.count).collect();
        assert_eq!(counts, vec![2, 2, 2, 1, 1]);
        assert!(curves.iter().all(|p| p.label == "A"));
    }
}
