//! Property-based invariants.

use proptest::prelude::*;

use egloce::config::ExperimentConfig;
use egloce::guidance::{cfg_combine, negative_guidance_combine, GuidanceConfig, StepWindow};
use egloce::metrics::{safe_tv, sliced_w2, total_variation};
use egloce::mixture::{GaussianComponent, GaussianMixture, Provenance, SampleBatch};
use egloce::sampler::{ddim_step, derive_seed, tweedie_estimate};
use egloce::schedule::NoiseSchedule;
use egloce::semantics::LatentDecoder;
use egloce::world::World;

fn prob_vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, len).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-12.0f64..12.0, 2)
}

fn mixture() -> impl Strategy<Value = GaussianMixture> {
    prop::collection::vec((point(), 0.1f64..3.0, 0.05f64..1.0, any::<bool>()), 1..5).prop_map(
        |parts| {
            let mut mask: Vec<bool> = parts.iter().map(|p| p.3).collect();
            mask[0] = false;
            let comps = parts
                .into_iter()
                .map(|(m, v, w, _)| GaussianComponent::isotropic(w, m, v))
                .collect();
            GaussianMixture::normalized(comps, mask).unwrap()
        },
    )
}

fn batch(max: usize) -> impl Strategy<Value = SampleBatch> {
    prop::collection::vec(point(), 1..max)
        .prop_map(|rows| SampleBatch::from_rows(&rows, 0, Provenance::DirectSample).unwrap())
}

proptest! {
    #[test]
    fn responsibilities_form_a_distribution(m in mixture(), z in point(), abar in 0.001f64..1.0) {
        let d = m.diffused(abar).unwrap();
        let r = d.responsibilities(&z);
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(r.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!(d.score(&z).iter().all(|g| g.is_finite()));
    }

    #[test]
    fn diffusion_keeps_weights_and_shrinks_means(m in mixture(), abar in 0.001f64..1.0) {
        let d = m.diffused(abar).unwrap();
        prop_assert_eq!(d.weights(), m.weights());
        for (a, b) in d.components().iter().zip(m.components()) {
            for j in 0..2 {
                prop_assert!((a.mean[j] - abar.sqrt() * b.mean[j]).abs() < 1e-12);
                prop_assert!((a.var[j] - (abar * b.var[j] + 1.0 - abar)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ddim_at_same_abar_undoes_tweedie(z in point(), eps in point(), abar in 0.01f64..1.0) {
        let z0 = tweedie_estimate(&z, &eps, abar).unwrap();
        let back = ddim_step(&z0, &eps, abar);
        for j in 0..2 {
            prop_assert!((back[j] - z[j]).abs() < 1e-9 * (1.0 + z[j].abs() + eps[j].abs()));
        }
    }

    #[test]
    fn guidance_combinators_interpolate(u in point(), c in point(), n in point(), w in -5.0f64..15.0) {
        prop_assert_eq!(cfg_combine(&u, &c, 0.0), u.clone());
        let one = cfg_combine(&u, &c, 1.0);
        for j in 0..2 {
            prop_assert!((one[j] - c[j]).abs() < 1e-12);
        }
        let neg = negative_guidance_combine(&u, &c, &n, w);
        for j in 0..2 {
            prop_assert!((neg[j] - (u[j] + w * (c[j] - n[j]))).abs() < 1e-9);
        }
    }

    #[test]
    fn feature_map_is_unit_and_positive(x in point(), tau in 0.2f64..20.0) {
        let space = World::default_world().concept_space(tau, &LatentDecoder::Identity).unwrap();
        let phi = space.feature_map(&x);
        let n: f64 = phi.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-12);
        prop_assert!(phi.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn tv_is_a_bounded_metric(p in prob_vector(5), q in prob_vector(5), r in prob_vector(5)) {
        let d = |a: &[f64], b: &[f64]| total_variation(a, b).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d(&p, &q)));
        prop_assert_eq!(d(&p, &q), d(&q, &p));
        prop_assert_eq!(d(&p, &p), 0.0);
        prop_assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-12);
    }

    #[test]
    fn safe_tv_lies_in_unit_interval(mm in prob_vector(4), w in prob_vector(3)) {
        let v = safe_tv(&mm, &[true, false, false, false], &w).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
    }

    #[test]
    fn sliced_w2_symmetric_nonnegative(a in batch(40), b in batch(40), seed in any::<u64>()) {
        let ab = sliced_w2(&a, &b, 16, seed).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, sliced_w2(&b, &a, 16, seed).unwrap());
        prop_assert_eq!(sliced_w2(&a, &a, 16, seed).unwrap(), 0.0);
    }

    #[test]
    fn seed_derivation_is_a_pure_function(master in any::<u64>(), i in any::<u64>()) {
        prop_assert_eq!(derive_seed(master, i), derive_seed(master, i));
        prop_assert_ne!(derive_seed(master, i), derive_seed(master, i.wrapping_add(1)));
    }

    #[test]
    fn linear_schedules_verify(t in 1usize..2000, start in 1e-5f64..0.01, extra in 0.0f64..0.05) {
        let s = NoiseSchedule::build_linear(t, start, start + extra).unwrap();
        prop_assert!(s.verify().is_ok());
    }

    #[test]
    fn guidance_config_json_round_trip(
        omega in 0.0f64..10.0,
        lr in 0.0f64..1.0,
        lt in 0.0f64..1.0,
        k in 0usize..10,
        start in 1usize..50,
        len in 0usize..10,
    ) {
        let cfg = GuidanceConfig {
            omega,
            lambda_rep: lr,
            lambda_ret: lt,
            k,
            window: Some(StepWindow::new(start, start + len).unwrap()),
            ..GuidanceConfig::default()
        };
        let back: GuidanceConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn disabled_guidance_reduces_to_vanilla(seed in any::<u64>(), which in 0usize..3) {
        let exp = egloce::runner::Experiment::new(ExperimentConfig::default()).unwrap();
        let base = exp.config.guidance;
        let cfg = match which {
            0 => GuidanceConfig { k: 0, ..base },
            1 => GuidanceConfig { window: None, ..base },
            _ => GuidanceConfig { lambda_rep: 0.0, lambda_ret: 0.0, ..base },
        };
        let s = exp.sampler().with_config(cfg).unwrap();
        prop_assert_eq!(
            s.run_chain(seed).unwrap().final_latent,
            exp.sampler().run_vanilla(seed).unwrap().final_latent
        );
    }
}
