use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use veto_core::data::{apply_pca, fit_pca};
use veto_core::evaluation::{
    adjusted_rand_score, cluster_purities, judge, purity, run_simulated_session, HardClustering, SessionMode,
    SimulationConfig,
};
use veto_core::feedback::{
    feedback_penalty, joint_label_distribution, mutual_information, penalized_objective,
};
use veto_core::mixture::{em_fit, log_likelihood, m_step, responsibilities, EmConfig, ResponsibilitySource, WEIGHT_FLOOR};
use veto_core::optimizer::{e_step_sweep, RelaxedState};
use veto_core::{load_csv, synth, Dataset, FeedbackRecord, MixtureModel, MixtureParams, SoftClustering};

fn normalize_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    m
}

fn dataset(max_n: usize, max_d: usize) -> impl Strategy<Value = Dataset> {
    (2..=max_n, 1..=max_d).prop_flat_map(|(n, d)| {
        prop::collection::vec(-5.0f64..5.0, n * d)
            .prop_map(move |v| Dataset::new(Array2::from_shape_vec((n, d), v).unwrap(), None).unwrap())
    })
}

fn params(k: usize, d: usize) -> impl Strategy<Value = MixtureParams> {
    (
        prop::collection::vec(0.1f64..1.0, k),
        prop::collection::vec(-3.0f64..3.0, k * d),
        prop::collection::vec(0.3f64..3.0, k * d),
    )
        .prop_map(move |(w, m, v)| {
            let s: f64 = w.iter().sum();
            MixtureParams::new(
                Array1::from_iter(w.iter().map(|x| x / s)),
                Array2::from_shape_vec((k, d), m).unwrap(),
                Array2::from_shape_vec((k, d), v).unwrap(),
            )
            .unwrap()
        })
}

fn data_and_params() -> impl Strategy<Value = (Dataset, MixtureParams)> {
    (2usize..30, 1usize..4, 1usize..5).prop_flat_map(|(n, d, k)| {
        (
            prop::collection::vec(-5.0f64..5.0, n * d)
                .prop_map(move |v| Dataset::new(Array2::from_shape_vec((n, d), v).unwrap(), None).unwrap()),
            params(k, d),
        )
    })
}

fn labels(n: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..k, n)
}

fn soft(m: Array2<f64>) -> SoftClustering {
    SoftClustering::new(m, ResponsibilitySource::ModelPosterior).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_is_exact(data in dataset(20, 4), tag in 0u8..3) {
        let labels: Vec<String> = (0..data.n()).map(|j| format!("g{}", (j as u8 + tag) % 3)).collect();
        let data = Dataset::new(data.points().clone(), Some(labels)).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = load_csv(&buf[..], Some("label")).unwrap();
        prop_assert_eq!(back.points(), data.points());
        prop_assert_eq!(back.gold_labels(), data.gold_labels());
    }

    #[test]
    fn full_rank_pca_preserves_distances(data in dataset(15, 4)) {
        let proj = match fit_pca(&data, 1.0) {
            Ok(p) => p,
            Err(_) => return Ok(()),
        };
        prop_assert!(proj.explained_variance_fraction() >= 1.0 - 1e-12);
        let out = apply_pca(&data, &proj).unwrap();
        if out.dim() < data.dim() {
            // Rank-deficient input: the dropped directions carry no variance.
            prop_assume!(false);
        }
        for i in 0..data.n() {
            for j in 0..data.n() {
                let a = (&data.row(i) - &data.row(j)).mapv(|v| v * v).sum().sqrt();
                let b = (&out.row(i) - &out.row(j)).mapv(|v| v * v).sum().sqrt();
                prop_assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pca_meets_requested_fraction(data in dataset(15, 4), frac in 0.05f64..1.0) {
        if let Ok(p) = fit_pca(&data, frac) {
            prop_assert!(p.explained_variance_fraction() >= frac - 1e-12);
        }
    }

    #[test]
    fn responsibilities_are_normalized((data, p) in data_and_params()) {
        let r = responsibilities(&p, &data).unwrap();
        for row in r.resp().rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn permuting_components_permutes_columns((data, p) in data_and_params(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let k = p.n_components();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let q = p.permuted(&perm);
        let a = responsibilities(&p, &data).unwrap();
        let b = responsibilities(&q, &data).unwrap();
        for j in 0..data.n() {
            for h in 0..k {
                prop_assert!((b.resp()[[j, h]] - a.resp()[[j, perm[h]]]).abs() < 1e-12);
            }
        }
        let la = log_likelihood(&p, &data).unwrap();
        let lb = log_likelihood(&q, &data).unwrap();
        prop_assert!((la - lb).abs() <= 1e-12 * la.abs().max(1.0));
    }

    #[test]
    fn m_step_respects_floors((data, p) in data_and_params()) {
        let r = responsibilities(&p, &data).unwrap();
        let fitted = m_step(&data, &r).unwrap();
        prop_assert!((fitted.weights().sum() - 1.0).abs() < 1e-9);
        prop_assert!(fitted.weights().iter().all(|&w| w >= WEIGHT_FLOOR * (1.0 - 1e-12)));
        prop_assert!(fitted.variances().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn mutual_information_bounds(n in 2usize..40, k in 1usize..5, ks in 1usize..5, seed in any::<u64>()) {
        let (cur, past) = random_pair(n, k, ks, seed);
        let dist = joint_label_distribution(&soft(cur.clone()), &past).unwrap();
        let mi = mutual_information(&dist);
        let bound = (k as f64).ln().min((ks as f64).ln());
        prop_assert!(mi >= -1e-12 && mi <= bound + 1e-12);
        prop_assert!((dist.joint.sum() - 1.0).abs() < 1e-12);
        for h in 0..k {
            let mean = cur.column(h).sum() / n as f64;
            prop_assert!((dist.row_marginal[h] - mean).abs() < 1e-12);
        }
        for h in 0..ks {
            let mean = past.column(h).sum() / n as f64;
            prop_assert!((dist.col_marginal[h] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_decomposition(n in 2usize..40, k in 1usize..5, ks in 1usize..5, seed in any::<u64>()) {
        let (cur, past) = random_pair(n, k, ks, seed);
        let mi = mutual_information(&joint_label_distribution(&soft(cur.clone()), &past).unwrap());
        let all: BTreeSet<usize> = (0..ks).collect();
        let rej = FeedbackRecord::new(0, BTreeSet::new(), all.clone(), past.clone()).unwrap();
        let acc = FeedbackRecord::new(0, all, BTreeSet::new(), past.clone()).unwrap();
        prop_assert_eq!(feedback_penalty(&soft(cur.clone()), &rej).unwrap(), mi);
        prop_assert_eq!(feedback_penalty(&soft(cur), &acc).unwrap(), -mi);
    }

    #[test]
    fn zero_beta_objective_is_log_likelihood((data, p) in data_and_params(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let past = random_soft(&mut rng, data.n(), 3);
        let rec = FeedbackRecord::new(0, BTreeSet::new(), [0, 2].into(), past).unwrap();
        prop_assert_eq!(
            penalized_objective(&p, &data, &[rec], 0.0).unwrap(),
            log_likelihood(&p, &data).unwrap()
        );
    }

    #[test]
    fn accepted_sweeps_never_decrease_e_objective((data, p) in data_and_params(), seed in any::<u64>(), alpha in 0.05f64..5.0, beta in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = p.n_components();
        let history = vec![
            FeedbackRecord::new(0, [0].into(), [1].into(), random_soft(&mut rng, data.n(), 2)).unwrap(),
            FeedbackRecord::reject_all(1, &soft(random_soft(&mut rng, data.n(), 3))),
        ];
        let q = random_soft(&mut rng, data.n(), k);
        let mut state = RelaxedState::with_q(p, q, &data, &history, alpha, beta).unwrap();
        let all: Vec<usize> = (0..data.n()).collect();
        for _ in 0..4 {
            let out = e_step_sweep(&mut state, &data, &history, &all, &mut rng).unwrap();
            if out.accepted {
                prop_assert!(out.objective_after >= out.objective_before - 1e-9 * out.objective_before.abs().max(1.0));
            } else {
                prop_assert_eq!(out.objective_after, out.objective_before);
            }
        }
    }

    #[test]
    fn ars_is_symmetric_and_permutation_invariant(a in labels(12, 4), b in labels(12, 3), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let ha = HardClustering::new(a.clone(), 4).unwrap();
        let hb = HardClustering::new(b, 3).unwrap();
        let ab = adjusted_rand_score(&ha, &hb).unwrap();
        prop_assert_eq!(ab, adjusted_rand_score(&hb, &ha).unwrap());
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let relabeled = HardClustering::new(a.iter().map(|&l| perm[l]).collect(), 4).unwrap();
        prop_assert!((adjusted_rand_score(&relabeled, &hb).unwrap() - ab).abs() < 1e-12);
    }

    #[test]
    fn purity_one_iff_clusters_single_label(pred in labels(10, 3), gold in labels(10, 3)) {
        let hc = HardClustering::new(pred.clone(), 3).unwrap();
        let p = purity(&hc, &gold).unwrap();
        let single = (0..3).all(|c| {
            let members: BTreeSet<usize> = pred.iter().zip(&gold).filter(|(&x, _)| x == c).map(|(_, &g)| g).collect();
            members.len() <= 1
        });
        prop_assert_eq!(p == 1.0, single);
    }

    #[test]
    fn simulated_user_partitions_clusters(pred in labels(12, 4), gold in labels(12, 3), threshold in 0.0f64..1.0) {
        let hc = HardClustering::new(pred, 4).unwrap();
        let fb = judge(&cluster_purities(&hc, &gold).unwrap(), threshold);
        prop_assert!(fb.accepted.is_disjoint(&fb.rejected));
        if fb.all_rejected {
            prop_assert_eq!(fb.rejected.len(), 4);
        } else {
            prop_assert_eq!(fb.accepted.len() + fb.rejected.len(), 4);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn em_trace_is_non_decreasing(seed in any::<u64>(), k in 1usize..5) {
        let data = synth::random_blobs(120, 2, 3, 3.0, seed).unwrap();
        let fit = em_fit(&data, k, &EmConfig { seed, ..EmConfig::default() }).unwrap();
        for w in fit.objective_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-8);
        }
    }

    #[test]
    fn em_converged_point_is_a_fixed_point(seed in any::<u64>()) {
        let data = synth::random_blobs(150, 2, 3, 4.0, seed).unwrap();
        let cfg = EmConfig { seed, ..EmConfig::default() };
        let fit = em_fit(&data, 3, &cfg).unwrap();
        prop_assume!(fit.converged);
        let ll = log_likelihood(&fit.params, &data).unwrap();
        let again = m_step(&data, &responsibilities(&fit.params, &data).unwrap()).unwrap();
        let ll2 = log_likelihood(&again, &data).unwrap();
        prop_assert!((ll2 - ll).abs() < cfg.rel_tol * ll.abs());
    }

    #[test]
    fn per_cluster_sessions_never_reject_accepted(seed in any::<u64>()) {
        let data = synth::four_gaussians(120, 3.0, seed).unwrap();
        let cfg = SimulationConfig { iterations: 3, ..SimulationConfig::default() };
        let cfg = SimulationConfig { fit: veto_core::FitConfig { seed, restarts: 1, ..cfg.fit }, ..cfg };
        let rep = run_simulated_session(&data, 3, SessionMode::PerCluster, &cfg).unwrap();
        for fb in &rep.feedback {
            prop_assert!(fb.accepted.is_disjoint(&fb.rejected));
        }
        prop_assert_eq!(rep.clusterings.len(), rep.per_clustering_purity.len());
    }
}

fn random_soft(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Array2<f64> {
    use rand::Rng;
    normalize_rows(Array2::from_shape_fn((n, k), |_| rng.random::<f64>() + 0.01))
}

fn random_pair(n: usize, k: usize, ks: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (random_soft(&mut rng, n, k), random_soft(&mut rng, n, ks))
}
