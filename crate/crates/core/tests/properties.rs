use emgs::copula::{is_rank_consistent, normal_scores, truncated_normal, LatentSampler};
use emgs::ecm::{cm_step_column, e_step_delta, inclusion_probability};
use emgs::glasso::kkt_check;
use emgs::linalg::{is_spd, max_asymmetry};
use emgs::metrics::{edge_counts, f1_score, roc_auc};
use emgs::model::{edge_count, threshold_graph, ThresholdRule, VariableKind};
use emgs::simulate::{gen_ar1, simulate, Family, Margin, SimSpec};
use emgs::{glasso_fit, DMatrix, Dataset, GlassoOptions, Hyperparams};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spd(p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| rng.random::<f64>() - 0.5);
    &a * a.transpose() + DMatrix::identity(p, p) * 0.2
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn column_updates_stay_spd(p in 3usize..=15, seed in any::<u64>(), v0 in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut omega = spd(p, &mut rng);
        let x = DMatrix::from_fn(2 * p, p, |_, _| rng.random::<f64>() - 0.5);
        let s = x.tr_mul(&x);
        let hp = Hyperparams { v0, ..Hyperparams::default() };
        for _ in 0..2 {
            let (_, dstar) = e_step_delta(&omega, 0.5, &hp, &DMatrix::from_element(1, 1, 1.0)).unwrap();
            for col in 0..p {
                omega = cm_step_column(&omega, &s, &dstar, &hp, (2 * p) as f64, col).unwrap();
                prop_assert!(is_spd(&omega));
                prop_assert!(max_asymmetry(&omega) < 1e-12);
            }
        }
    }

    #[test]
    fn inclusion_probability_in_unit_interval(w in -10.0f64..10.0, pi in 0.001f64..0.999, v0 in 0.001f64..1.0) {
        let q = inclusion_probability(w, pi, v0, 100.0, 1.0);
        prop_assert!((0.0..=1.0).contains(&q));
        prop_assert_eq!(q, inclusion_probability(-w, pi, v0, 100.0, 1.0));
    }

    #[test]
    fn truncated_normal_respects_bounds(
        m in -5.0f64..5.0,
        sd in 0.05f64..3.0,
        a in -8.0f64..8.0,
        width in 1e-6f64..5.0,
        u in 1e-12f64..(1.0 - 1e-12),
    ) {
        let (x, _) = truncated_normal(m, sd, a, a + width, u);
        prop_assert!(x >= a && x <= a + width, "{x} outside [{a}, {}]", a + width);
    }

    #[test]
    fn gibbs_sweeps_preserve_ranks(seed in 0u64..500, missing in 0.0f64..0.3) {
        let spec = SimSpec {
            family: Family::Ar1,
            p: 4,
            n: 40,
            margin: Margin::Poisson { theta: 1.5 },
            missing_rate: missing,
            seed,
        };
        let sim = simulate(&spec).unwrap();
        let sampler = LatentSampler::new(&sim.data, false);
        let mut z = normal_scores(&sim.data);
        prop_assert!(is_rank_consistent(&z, &sim.data));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5 {
            sampler.sweep(&mut z, &sim.graph.omega, &mut rng).unwrap();
            prop_assert!(is_rank_consistent(&z, &sim.data));
        }
    }

    #[test]
    fn normal_scores_see_only_ranks(seed in any::<u64>(), shift in -5.0f64..5.0, scale in 0.1f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = DMatrix::from_fn(25, 3, |_, _| f64::from(rng.random_range(0..6u8)));
        let kinds = vec![VariableKind::Ordinal; 3];
        let names: Vec<String> = (1..=3).map(|j| format!("V{j}")).collect();
        let miss = DMatrix::from_element(25, 3, false);
        let a = Dataset::new(values.clone(), miss.clone(), kinds.clone(), names.clone()).unwrap();
        let b = Dataset::new(values.map(|v| (scale * v).exp() + shift), miss, kinds, names).unwrap();
        prop_assert_eq!(normal_scores(&a), normal_scores(&b));
    }

    #[test]
    fn auc_invariant_under_monotone_maps(scores in prop::collection::vec(-3.0f64..3.0, 4..40), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<bool> = scores.iter().map(|_| rng.random::<bool>()).collect();
        labels[0] = true;
        labels[1] = false;
        let base = roc_auc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 1.0).collect();
        prop_assert!((roc_auc(&warped, &labels).unwrap() - base).abs() < 1e-12);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((roc_auc(&flipped, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn topk_f1_equals_precision(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = gen_ar1(8).unwrap().adjacency;
        let k = edge_count(&truth);
        let est = DMatrix::from_fn(8, 8, |_, _| rng.random::<f64>() - 0.5);
        let est = (&est + est.transpose()) * 0.5;
        let top = threshold_graph(&est, None, ThresholdRule::TopK(k)).unwrap();
        let c = edge_counts(&top, &truth);
        prop_assert_eq!(c.tp + c.fp, k);
        prop_assert_eq!(c.tp + c.fn_, k);
        prop_assert!((f1_score(&top, &truth).unwrap() - c.tp as f64 / k as f64).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn glasso_kkt_on_random_problems(p in 3usize..12, seed in any::<u64>(), frac in 0.05f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(3 * p, p, |_, _| rng.random::<f64>() - 0.5);
        let s = x.tr_mul(&x) / (3 * p) as f64;
        let rho = frac * emgs::glasso::rho_max(&s);
        let fit = glasso_fit(&s, rho, &GlassoOptions::default()).unwrap();
        prop_assert!(fit.converged);
        prop_assert!(kkt_check(&fit, &s, rho) < 1e-4);
        prop_assert!(is_spd(&fit.omega));
    }
}
