mod common;

use behavior_retrieval::data::{DatasetStore, NormStats, Role, Transition};
use behavior_retrieval::policy::{gmm_nll, gmm_nll_raw, GmmParams};
use behavior_retrieval::retrieval::{expand_context, normalize_scores, select, ScoreTable};
use proptest::prelude::*;

fn store_strategy() -> impl Strategy<Value = DatasetStore> {
    (1usize..4, 1usize..3, prop::collection::vec(1usize..6, 1..5)).prop_flat_map(|(sd, ad, lens)| {
        let total: usize = lens.iter().sum();
        (
            prop::collection::vec(prop::collection::vec(-1e6f64..1e6, sd + ad), total),
            prop::collection::vec(prop::option::of("[a-z]{1,3}"), lens.len()),
        )
            .prop_map(move |(values, labels)| {
                let mut rows = values.into_iter();
                let mut transitions = Vec::new();
                for (e, &len) in lens.iter().enumerate() {
                    for t in 0..len {
                        let v = rows.next().unwrap();
                        transitions.push(Transition {
                            episode_id: 10 * e as u64 + 3,
                            t: t as u64,
                            state: v[..sd].to_vec(),
                            action: v[sd..].to_vec(),
                            task_label: labels[e].clone(),
                        });
                    }
                }
                DatasetStore::from_transitions(sd, ad, Role::Prior, transitions).unwrap()
            })
    })
}

fn mixture_strategy() -> impl Strategy<Value = (GmmParams, Vec<f64>)> {
    (1usize..5, 1usize..4).prop_flat_map(|(k, d)| {
        (
            prop::collection::vec(0.05f64..1.0, k),
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), k),
            prop::collection::vec(prop::collection::vec(0.2f64..2.0, d), k),
            prop::collection::vec(-2.0f64..2.0, d),
        )
            .prop_map(|(w, means, stds, action)| {
                let total: f64 = w.iter().sum();
                let weights = w.iter().map(|x| x / total).collect();
                (GmmParams { weights, means, stds }, action)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jsonl_round_trip_is_exact(store in store_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        store.save(&path).unwrap();
        let back = DatasetStore::load(&path, Role::Prior).unwrap();
        prop_assert_eq!(back, store);
    }

    #[test]
    fn normalization_inverts(store in store_strategy()) {
        let stats = NormStats::compute(&store, 1e-6).unwrap();
        for tr in store.iter() {
            let back = stats.denormalize(&stats.normalize(tr).unwrap()).unwrap();
            for (a, b) in back.state.iter().chain(&back.action).zip(tr.state.iter().chain(&tr.action)) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn subset_concat_preserves_order(store in store_strategy(), bits in prop::collection::vec(any::<bool>(), 40)) {
        let mask: Vec<bool> = (0..store.len()).map(|i| bits[i % bits.len()]).collect();
        let sub = store.subset(&mask, Role::Retrieved).unwrap();
        let expected: Vec<&Transition> = store.iter().zip(&mask).filter(|(_, &m)| m).map(|(t, _)| t).collect();
        prop_assert_eq!(sub.iter().collect::<Vec<_>>(), expected);
        let both = DatasetStore::concat(&[&store, &store], Role::Prior).unwrap();
        prop_assert_eq!(both.len(), 2 * store.len());
    }

    #[test]
    fn context_expansion_is_a_superset(
        raw in prop::collection::vec(-5.0f64..5.0, 20),
        delta in 0.0f64..1.0,
        horizon in 1usize..6,
    ) {
        let mut rng = behavior_retrieval::rng::SeededRng::new(raw.len() as u64);
        let prior = common::random_store(4, 5, 2, 1, &[], &mut rng);
        let table = normalize_scores(ScoreTable::from_raw(raw).unwrap());
        let base = select(&table, delta).unwrap();
        let wide = expand_context(&base, &prior, horizon).unwrap();
        for (i, tr) in prior.iter().enumerate() {
            if base.selected[i] {
                prop_assert!(wide.selected[i]);
            }
            if wide.selected[i] && !base.selected[i] {
                // Some later step of the same episode within the window was thresholded.
                let hit = (1..horizon as u64).any(|k| {
                    prior.index_of(tr.episode_id, tr.t + k).is_some_and(|j| base.selected[j])
                });
                prop_assert!(hit);
            }
        }
        prop_assert_eq!(expand_context(&wide, &prior, horizon).unwrap().selected, wide.selected.clone());
    }

    #[test]
    fn mixture_nll_matches_direct_sum((params, action) in mixture_strategy()) {
        let density: f64 = (0..params.modes())
            .map(|k| {
                params.weights[k]
                    * params.means[k]
                        .iter()
                        .zip(&params.stds[k])
                        .zip(&action)
                        .map(|((m, s), a)| {
                            (-(a - m) * (a - m) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
                        })
                        .product::<f64>()
            })
            .sum();
        let nll = gmm_nll(&params, &action).unwrap();
        prop_assert!((nll + density.ln()).abs() < 1e-9);
    }

    #[test]
    fn raw_head_gradient_matches_differences(
        raw in prop::collection::vec(-1.5f64..1.5, 3 * (1 + 2 * 2)),
        action in prop::collection::vec(-1.5f64..1.5, 2),
    ) {
        let (loss, grad) = gmm_nll_raw(&raw, 3, 2, 1e-3, &action).unwrap();
        let numeric = common::numeric_grad(&raw, common::FD_STEP, |r| gmm_nll_raw(r, 3, 2, 1e-3, &action).unwrap().0);
        prop_assert!(common::max_rel_err(&grad, &numeric, common::rel_floor(loss)) < 1e-5);
    }
}
