mod common;

use common::*;
use kt_core::models::gaussian::{
    empirical_raw_moments, is_exchangeable, required_samples_gaussian, sample_gaussian_mixture, GaussianLearnConfig,
    SigmaChoice,
};
use kt_core::models::hmm::{decode_window, encode_window, sample_hmm, stationary_distribution, HmmSequences};
use kt_core::models::io::{read_multiview_file, read_points_file, read_sequences_file, SampleSet};
use kt_core::models::multiview::{sample_topic, TopicParams};
use kt_core::models::*;
use kt_core::robust_krank;
use kt_core::spectral::sigma_k;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn multiview_truth() -> MultiViewParams {
    let m1 = DMatrix::from_row_slice(3, 2, &[0.7, 0.1, 0.2, 0.2, 0.1, 0.7]);
    let m2 = DMatrix::from_row_slice(2, 2, &[0.8, 0.3, 0.2, 0.7]);
    let m3 = DMatrix::from_row_slice(4, 2, &[0.4, 0.1, 0.3, 0.1, 0.2, 0.3, 0.1, 0.5]);
    MultiViewParams::new(DVector::from_vec(vec![0.4, 0.6]), vec![m1, m2, m3]).unwrap()
}

fn hmm_truth() -> HmmParams {
    let p = DMatrix::from_row_slice(2, 2, &[0.8, 0.3, 0.2, 0.7]);
    let m = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.1, 0.8]);
    HmmParams::new(p, m).unwrap()
}

fn gaussian_truth(sigma: f64) -> GaussianMixtureParams {
    let means = DMatrix::from_row_slice(3, 2, &[1.0, -0.4, 0.5, 0.9, -0.3, 0.6]);
    GaussianMixtureParams::new(DVector::from_vec(vec![0.35, 0.65]), means, sigma).unwrap()
}

/// `E[x₁ ⊗ … ⊗ x_{2q+1}]` windowed as `[prefix, middle, reversed suffix]`,
/// by summing over every hidden path started from the stationary law.
fn enumerated_window_moment(h: &HmmParams, q: usize) -> Vec<f64> {
    let (n, r) = (h.alphabet(), h.states());
    let len = 2 * q + 1;
    let w = n.pow(q as u32);
    let mut t = vec![0.0; w * n * w];
    let paths = r.pow(len as u32);
    for path in 0..paths {
        let states = decode_window(path, r, len);
        let mut prob = h.stationary[states[0]];
        for s in 1..len {
            prob *= h.transition[(states[s], states[s - 1])];
        }
        for obs in 0..n.pow(len as u32) {
            let xs = decode_window(obs, n, len);
            let p = xs.iter().zip(&states).fold(prob, |acc, (&x, &s)| acc * h.observation[(x, s)]);
            let a = encode_window(&xs[..q], n);
            let suffix: Vec<usize> = xs[q + 1..].iter().rev().copied().collect();
            let c = encode_window(&suffix, n);
            t[(a * n + xs[q]) * w + c] += p;
        }
    }
    t
}

#[test]
fn multiview_population_identity() {
    let p = multiview_truth();
    let t = p.population_moment().unwrap();
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                let want: f64 = (0..2).map(|r| p.weights[r] * p.means[0][(i, r)] * p.means[1][(j, r)] * p.means[2][(k, r)]).sum();
                worst = worst.max((t.get(&[i, j, k]) - want).abs());
            }
        }
    }
    assert!(worst <= 1e-15, "{worst}");
}

#[test]
fn multiview_sampling_is_deterministic_and_consistent() {
    let p = multiview_truth();
    let a = sample_multiview(&p, 1000, 5).unwrap();
    assert_eq!(a, sample_multiview(&p, 1000, 5).unwrap());
    assert_ne!(a, sample_multiview(&p, 1000, 6).unwrap());

    let n = 100_000;
    let s = sample_multiview(&p, n, 9).unwrap();
    let emp = estimate_moment_tensor(&s, 3).unwrap();
    let dev = emp.sub(&p.population_moment().unwrap()).unwrap().max_abs();
    assert!(dev <= 3.0 / (n as f64).sqrt(), "{dev}");
}

#[test]
fn multiview_recovers_unequal_views() {
    let p = multiview_truth();
    let (est, diag) = multiview::learn_multiview_from_tensor(&p.population_moment().unwrap(), 2, &SearchOptions::default()).unwrap();
    let e = parameter_error(&p.means, &p.weights, &est.means, &est.weights).unwrap();
    assert!(e.max <= 1e-3, "{e:?}");
    assert!((diag.raw_weight_sum - 1.0).abs() < 1e-3);
}

#[test]
fn topic_model_round_trip() {
    let topics = DMatrix::from_row_slice(3, 2, &[0.6, 0.1, 0.3, 0.2, 0.1, 0.7]);
    let tp = TopicParams::new(DVector::from_vec(vec![0.3, 0.7]), topics.clone(), 3).unwrap();
    let s = sample_topic(&tp, 100_000, 4).unwrap();
    assert_eq!(s.dims(), &[3, 3, 3]);
    let (est, _) = learn_topic(&s, 2, 3, &SearchOptions::default()).unwrap();
    let e = parameter_error(std::slice::from_ref(&topics), &tp.weights, std::slice::from_ref(&est.topics), &est.weights).unwrap();
    assert!(e.max <= 0.05, "{e:?}");
}

#[test]
fn required_samples_match_hand_computation() {
    assert_eq!(required_samples_multiview(0.1, 3, 3, 1.0, None, None).unwrap(), 39_214);
    assert_eq!(required_samples_multiview(0.05, 3, 4, 0.7, Some(0.05), None).unwrap(), 187_896);
    assert_eq!(required_samples_gaussian(0.1, 3, 3, 1.2, 0.5, 0.05, None).unwrap(), 14_533);
    assert!(required_samples_multiview(0.0, 3, 3, 1.0, None, None).is_err());
    assert!(required_samples_multiview(1e-200, 40, 1000, 1.0, None, None).is_err());
}

#[test]
fn hmm_population_matches_path_enumeration() {
    let h = hmm_truth();
    for q in 1..=2 {
        let got = h.population_moment(q).unwrap();
        let want = enumerated_window_moment(&h, q);
        let worst = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-12, "q={q}: {worst}");
    }
}

#[test]
fn hmm_three_state_enumeration() {
    let mut g = rng(21);
    let h = HmmParams::new(stochastic(3, 3, &mut g), stochastic(2, 3, &mut g)).unwrap();
    let got = h.population_moment(1).unwrap();
    let want = enumerated_window_moment(&h, 1);
    assert!(got.data().iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-12));
}

#[test]
fn hmm_embedding_matches_population() {
    let h = hmm_truth();
    let n = 200_000;
    let seqs = sample_hmm(&h, 5, n, 3).unwrap();
    let emp = estimate_moment_tensor(&hmm_embed(&seqs, 2, 1_000).unwrap(), 3).unwrap();
    let dev = emp.sub(&h.population_moment(2).unwrap()).unwrap().max_abs();
    assert!(dev <= 3.0 / (n as f64).sqrt(), "{dev}");
}

#[test]
fn hmm_window_budget_refuses() {
    let seqs = HmmSequences::new(4, 9, vec![0; 9]).unwrap();
    assert!(matches!(hmm_embed(&seqs, 4, 100), Err(kt_core::Error::Budget { .. })));
}

#[test]
fn hmm_learns_from_samples() {
    let h = hmm_truth();
    let seqs = sample_hmm(&h, 3, 200_000, 8).unwrap();
    let (est, _) = learn_hmm(&seqs, 2, 1, &SearchOptions::default(), 1_000).unwrap();
    let e = hmm::hmm_parameter_error(&h, &est).unwrap();
    assert!(e.observation <= 0.1 && e.transition <= 0.2, "{e:?}");
}

#[test]
fn hmm_with_larger_window() {
    let p = DMatrix::from_row_slice(3, 3, &[0.7, 0.1, 0.2, 0.2, 0.8, 0.1, 0.1, 0.1, 0.7]);
    let m = DMatrix::from_row_slice(3, 3, &[0.8, 0.1, 0.15, 0.1, 0.7, 0.15, 0.1, 0.2, 0.7]);
    let h = HmmParams::new(p, m).unwrap();
    let (est, diag) = hmm::learn_hmm_from_tensor(&h.population_moment(2).unwrap(), 3, &SearchOptions::default()).unwrap();
    let e = hmm::hmm_parameter_error(&h, &est).unwrap();
    assert_eq!(diag.route, hmm::TransitionRoute::CollapsedRows);
    assert!(e.observation <= 1e-4 && e.transition <= 1e-4, "{e:?}");
}

#[test]
fn suffix_window_conditioning_chain() {
    let mut g = rng(24);
    let tau = 100.0;
    for _ in 0..10 {
        let r = g.random_range(3..=4);
        let h = HmmParams::new(stochastic(r, r, &mut g), stochastic(2, r, &mut g)).unwrap();
        let k = robust_krank(&h.observation, tau).unwrap().krank;
        let tau_p = 1.0 / h.transition_sigma_min().unwrap();
        let (_, _, c2) = h.view_matrices(2).unwrap();
        let kappa = robust_krank(&c2, tau * tau * tau_p * ((2 * k) as f64).sqrt()).unwrap().krank;
        assert!(kappa >= r.min(2 * k), "κ = {kappa}, k = {k}, R = {r}");
    }
}

#[test]
fn reverse_transition_properties() {
    let mut g = rng(25);
    for _ in 0..20 {
        let r = g.random_range(2..=5);
        let p = stochastic(r, r, &mut g);
        let w = stationary_distribution(&p).unwrap();
        assert!(((&p * &w) - &w).amax() < 1e-12 && (w.sum() - 1.0).abs() < 1e-12);
        let rev = reverse_transition(&p, &w).unwrap();
        for c in rev.column_iter() {
            assert!((c.sum() - 1.0).abs() < 1e-12);
        }
        assert!(((&rev * &w) - &w).amax() < 1e-12);
        for i in 0..r {
            for j in 0..r {
                assert!((rev[(i, j)] * w[j] - p[(j, i)] * w[i]).abs() < 1e-12);
            }
        }
        assert!((reverse_transition(&rev, &w).unwrap() - &p).amax() < 1e-12);
    }
}

#[test]
fn gaussian_noise_tensors_are_exchangeable() {
    for order in 1..=5 {
        let t = gaussian_noise_tensor(order, 0.7, 3).unwrap();
        assert!(is_exchangeable(&t, 0.0));
        for perm in [vec![0usize], vec![1, 0], vec![2, 0, 1], vec![3, 1, 0, 2], vec![4, 2, 3, 0, 1]] {
            if perm.len() == order {
                assert_eq!(t.permute_modes(&perm).unwrap(), t);
            }
        }
    }
    assert_eq!(gaussian_univariate_moment(6, 2.0), 15.0 * 64.0);
    assert_eq!(gaussian_univariate_moment(3, 2.0), 0.0);
}

#[test]
fn mom_tensor_error_shrinks_at_root_n() {
    let gm = gaussian_truth(1.0);
    let truth = &gm.population_mom(3).unwrap()[2];
    let sizes = [10_000usize, 100_000, 1_000_000];
    let errs: Vec<f64> = sizes
        .iter()
        .map(|&n| {
            let e: Vec<f64> = (0..5u64)
                .map(|k| {
                    let x = sample_gaussian_mixture(&gm, n, replication_seed(n as u64, k)).unwrap();
                    mom_tensor(&x, 3, 1.0).unwrap().sub(truth).unwrap().max_abs()
                })
                .collect();
            e.iter().sum::<f64>() / e.len() as f64
        })
        .collect();
    let lx: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / 3.0, ly.iter().sum::<f64>() / 3.0);
    let slope = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / lx.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((slope + 0.5).abs() <= 0.15, "slope {slope}, errors {errs:?}");
}

#[test]
fn raw_moment_error_meets_sample_bound() {
    let gm = gaussian_truth(0.5);
    let eps = 0.1;
    let c_max = gm.means.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let n = required_samples_gaussian(eps, 3, 3, c_max, 0.5, 0.05, None).unwrap() as usize;
    let truth = gm.population_raw_moments(3).unwrap();
    let trials = 40;
    let good = (0..trials)
        .filter(|&k| {
            let x = sample_gaussian_mixture(&gm, n, replication_seed(77, k)).unwrap();
            let emp = empirical_raw_moments(&x, 3).unwrap();
            emp[2].sub(&truth[2]).unwrap().max_abs() < eps
        })
        .count();
    assert!(good as f64 >= 0.95 * trials as f64, "{good}/{trials} at N = {n}");
}

#[test]
fn sigma_estimate_is_close() {
    let gm = gaussian_truth(0.5);
    let x = sample_gaussian_mixture(&gm, 100_000, 31).unwrap();
    let s = estimate_sigma(&x).unwrap();
    assert!((0.48..=0.52).contains(&s), "{s}");
}

#[test]
fn gaussian_learns_from_samples_with_estimated_sigma() {
    let gm = gaussian_truth(0.5);
    let x = sample_gaussian_mixture(&gm, 400_000, 32).unwrap();
    let cfg = GaussianLearnConfig { sigma: SigmaChoice::Estimate, search: SearchOptions::default() };
    let (est, diag) = learn_gaussian_mixture(&x, 2, 3, &cfg).unwrap();
    let e = parameter_error(std::slice::from_ref(&gm.means), &gm.weights, std::slice::from_ref(&est.means), &est.weights).unwrap();
    assert!(e.max <= 0.1, "{e:?}");
    assert!((diag.sigma - 0.5).abs() < 0.02);
}

#[test]
fn gaussian_order_four_from_exact_moments() {
    let gm = gaussian_truth(1.0);
    let (est, diag) = learn_gaussian_from_moments(&gm.population_mom(4).unwrap(), 2, 1.0, &SearchOptions::default()).unwrap();
    let e = parameter_error(std::slice::from_ref(&gm.means), &gm.weights, std::slice::from_ref(&est.means), &est.weights).unwrap();
    assert!(e.max <= 1e-3, "{e:?}");
    assert!(diag.lower_search.is_some());
}

#[test]
fn sample_files_round_trip() {
    let dir = std::env::temp_dir().join(format!("kt-core-io-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let views = sample_multiview(&multiview_truth(), 50, 1).unwrap();
    let seqs = sample_hmm(&hmm_truth(), 3, 50, 2).unwrap();
    let points = sample_gaussian_mixture(&gaussian_truth(0.5), 50, 3).unwrap();
    SampleSet::Views(views.clone()).write(dir.join("v.csv")).unwrap();
    SampleSet::Sequences(seqs.clone()).write(dir.join("s.csv")).unwrap();
    SampleSet::Points(points.clone()).write(dir.join("p.csv")).unwrap();
    assert_eq!(read_multiview_file(dir.join("v.csv"), Some(views.dims().to_vec())).unwrap(), views);
    assert_eq!(read_sequences_file(dir.join("s.csv"), Some(2)).unwrap(), seqs);
    assert_eq!(read_points_file(dir.join("p.csv")).unwrap(), points);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn model_params_json_is_tagged() {
    let m = ModelParams::Hmm(hmm_truth());
    let s = serde_json::to_string(&m).unwrap();
    assert!(s.contains("\"kind\":\"hmm\""));
    assert_eq!(serde_json::from_str::<ModelParams>(&s).unwrap(), m);
}

#[test]
fn parameter_error_recovers_relabeling() {
    let p = multiview_truth();
    let perm = [1usize, 0];
    let means: Vec<DMatrix<f64>> = p.means.iter().map(|m| m.select_columns(&perm)).collect();
    let w = DVector::from_vec(vec![p.weights[1], p.weights[0]]);
    let e = parameter_error(&p.means, &p.weights, &means, &w).unwrap();
    assert_eq!(e.permutation, vec![1, 0]);
    assert!(e.max < 1e-15);
    assert!(sigma_k(&p.means[0]).unwrap() > 0.0);
}

proptest! {
    #[test]
    fn windows_round_trip(n in 1usize..=5, len in 1usize..=5, seed: u64) {
        let mut g = rng(seed);
        let w: Vec<usize> = (0..len).map(|_| g.random_range(0..n)).collect();
        prop_assert_eq!(decode_window(encode_window(&w, n), n, len), w);
    }

    #[test]
    fn replication_seeds_are_distinct(base: u64, k in 0u64..1000) {
        prop_assert_ne!(replication_seed(base, k), replication_seed(base, k + 1));
        prop_assert_eq!(replication_seed(base, k), replication_seed(base, k));
    }
}
