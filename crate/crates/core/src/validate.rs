//! The `validate` command: every module's invariants as named checks.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::gradcheck::{central_difference, relative_error};
use crate::guidance::{
    dual_energy_update, stale_epsilon_gradient, GradMode, GuidanceConfig, GuidanceEnergy,
    QuadraticEnergy, StepWindow,
};
use crate::metrics::{erased_mass, mode_mass, sliced_w2, total_variation};
use crate::mixture::{GaussianComponent, GaussianMixture};
use crate::runner::{thread_pool, Experiment};
use crate::sampler::{tweedie_estimate, Sampler};
use crate::schedule::{NoiseSchedule, SamplingGrid, ScheduleSpec};
use crate::semantics::{alignment_with_grad, LatentDecoder};
use crate::vector::all_finite;
use crate::world::{World, DEFAULT_TEMPERATURE};

/// Shipped example configs, checked for finite trajectories.
pub const EXAMPLE_CONFIGS: [(&str, &str); 7] = [
    ("default", include_str!("../../../configs/default.json")),
    ("sweep_k", include_str!("../../../configs/sweep_k.json")),
    (
        "sweep_retention",
        include_str!("../../../configs/sweep_retention.json"),
    ),
    (
        "sweep_window",
        include_str!("../../../configs/sweep_window.json"),
    ),
    (
        "sweep_scale",
        include_str!("../../../configs/sweep_scale.json"),
    ),
    (
        "sweep_grad_mode",
        include_str!("../../../configs/sweep_grad_mode.json"),
    ),
    (
        "linear_decoder",
        include_str!("../../../configs/linear_decoder.json"),
    ),
];

type CheckResult = std::result::Result<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckOutcome> {
        self.outcomes.iter().find(|o| o.name == name)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .outcomes
            .iter()
            .map(|o| o.name.len())
            .max()
            .unwrap_or(0);
        for o in &self.outcomes {
            let status = if o.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{:<width$}  {status}  {}", o.name, o.detail)?;
        }
        let failed = self.outcomes.iter().filter(|o| !o.passed).count();
        write!(f, "{} checks, {failed} failed", self.outcomes.len())
    }
}

/// All checks against the default schedule.
pub fn validate() -> ValidationReport {
    let schedule = ScheduleSpec::default()
        .build()
        .expect("default schedule parameters are valid");
    validate_with(&schedule)
}

/// All checks, with `schedule` under test for the schedule-level checks.
/// The sampler-level checks always use the default schedule.
pub fn validate_with(schedule: &NoiseSchedule) -> ValidationReport {
    let checks: [(&'static str, &dyn Fn() -> CheckResult); 17] = [
        ("schedule-invariants", &|| check_schedule(schedule)),
        ("sampling-grid", &|| check_grid(schedule)),
        ("tweedie-conjugate-oracle", &check_tweedie),
        ("score-finite-difference", &check_score),
        (
            "feature-jacobian-finite-difference",
            &check_feature_jacobian,
        ),
        ("energy-gradient-finite-difference", &check_energy_gradients),
        ("stale-epsilon-identity", &check_stale_identity),
        ("full-chain-frozen-epsilon", &check_full_chain_frozen),
        ("reduction-invariant", &check_reduction),
        ("chain-determinism", &check_determinism),
        ("window-containment", &check_window_count),
        ("quadratic-descent", &check_quadratic_descent),
        ("vanilla-mode-weights", &check_vanilla_weights),
        ("metrics-mass-identity", &check_mass_identity),
        ("sliced-w2-symmetry", &check_sliced_w2),
        ("safe-tv-triangle", &check_tv_triangle),
        ("example-configs-finite", &check_examples),
    ];
    let outcomes = checks
        .iter()
        .map(|(name, f)| {
            let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
                .unwrap_or_else(|_| Err("panicked".into()));
            match r {
                Ok(detail) => CheckOutcome {
                    name,
                    passed: true,
                    detail,
                },
                Err(detail) => CheckOutcome {
                    name,
                    passed: false,
                    detail,
                },
            }
        })
        .collect();
    ValidationReport { outcomes }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn default_schedule() -> NoiseSchedule {
    ScheduleSpec::default().build().expect("default schedule")
}

fn default_sampler(cfg: GuidanceConfig) -> Sampler {
    let world = World::default_world();
    let space = world
        .concept_space(DEFAULT_TEMPERATURE, &LatentDecoder::Identity)
        .expect("default concept space");
    Sampler::new(
        &world,
        "p",
        "c",
        &default_schedule(),
        50,
        space,
        LatentDecoder::Identity,
        cfg,
    )
    .expect("default sampler")
}

fn check_schedule(schedule: &NoiseSchedule) -> CheckResult {
    schedule.verify().map_err(|e| e.to_string())?;
    Ok(format!("T={}", schedule.num_steps()))
}

fn check_grid(schedule: &NoiseSchedule) -> CheckResult {
    let steps = 50.min(schedule.num_steps());
    let grid = SamplingGrid::new(schedule, steps).map_err(|e| e.to_string())?;
    ensure(
        grid.timestep(0) == 0 && grid.timestep(steps) == schedule.num_steps(),
        || "grid endpoints are not 0 and T".into(),
    )?;
    ensure(
        (1..=steps).all(|i| grid.timestep(i) > grid.timestep(i - 1)),
        || "grid timesteps are not increasing".into(),
    )?;
    Ok(format!("N={steps}"))
}

fn check_tweedie() -> CheckResult {
    let schedule = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let mu = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let s2: f64 = rng.random_range(0.2..3.0);
        let m = GaussianMixture::new(
            vec![GaussianComponent::isotropic(1.0, mu.to_vec(), s2)],
            vec![false],
        )
        .map_err(|e| e.to_string())?;
        let t = rng.random_range(1..=schedule.num_steps());
        let a = schedule.alpha_bar(t).map_err(|e| e.to_string())?;
        let z = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let eps = m
            .diffused(a)
            .and_then(|d| d.epsilon_pred(&z, a))
            .map_err(|e| e.to_string())?;
        let est = tweedie_estimate(&z, &eps, a).map_err(|e| e.to_string())?;
        let gain = s2 * a.sqrt() / (a * s2 + 1.0 - a);
        for j in 0..2 {
            let exact = mu[j] + gain * (z[j] - a.sqrt() * mu[j]);
            worst = worst.max((est[j] - exact).abs());
        }
    }
    ensure(worst < 1e-10, || format!("max error {worst:.3e}"))?;
    Ok(format!("max error {worst:.3e} over 1000 points"))
}

fn check_score() -> CheckResult {
    let world = World::default_world();
    let schedule = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for t in [1, 50, 200, 500, 900] {
        let a = schedule.alpha_bar(t).map_err(|e| e.to_string())?;
        let m = world
            .unconditional()
            .diffused(a)
            .map_err(|e| e.to_string())?;
        for _ in 0..40 {
            let z = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
            let fd = central_difference(|x| m.log_density(x), &z, 1e-4);
            worst = worst.max(relative_error(&m.score(&z), &fd, 1e-6));
        }
    }
    ensure(worst < 1e-5, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("max relative error {worst:.3e}"))
}

fn check_feature_jacobian() -> CheckResult {
    let world = World::default_world();
    let space = world
        .concept_space(2.0, &LatentDecoder::Identity)
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let x = [rng.random_range(-8.0..6.0), rng.random_range(-8.0..6.0)];
        let (_, jac) = space.feature_map_jacobian(&x);
        for i in 0..space.len() {
            let fd = central_difference(|y| space.feature_map(y)[i], &x, 1e-5);
            worst = worst.max(relative_error(&jac[i * 2..i * 2 + 2], &fd, 1e-6));
        }
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("max relative error {worst:.3e}"))
}

fn check_energy_gradients() -> CheckResult {
    let world = World::default_world();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for decoder in [LatentDecoder::Identity, LatentDecoder::default_linear()] {
        let space = world
            .concept_space(4.0, &decoder)
            .map_err(|e| e.to_string())?;
        let e_c = space.text_embed(&["c"]).map_err(|e| e.to_string())?;
        let e_p = space
            .text_embed(&world.active_prompt().embedding)
            .map_err(|e| e.to_string())?;
        for e in [&e_c, &e_p] {
            for _ in 0..50 {
                let z = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
                let (_, g) = alignment_with_grad(&space, &decoder, &z, e);
                let fd =
                    central_difference(|y| alignment_with_grad(&space, &decoder, y, e).0, &z, 1e-5);
                worst = worst.max(relative_error(&g, &fd, 1e-6));
            }
        }
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("max relative error {worst:.3e}"))
}

fn check_stale_identity() -> CheckResult {
    let sampler = default_sampler(GuidanceConfig::default());
    let energy = sampler.energy();
    let cfg = GuidanceConfig {
        lambda_rep: 0.7,
        lambda_ret: 0.3,
        ..GuidanceConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for step in [5, 20, 35, 45] {
        let a = sampler.grid().alpha_bar(step);
        for _ in 0..25 {
            let z = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            let eps = sampler.eps_pred(step, &z);
            let z0 = tweedie_estimate(&z, &eps, a).map_err(|e| e.to_string())?;
            let terms = energy.evaluate(&z0);
            let expected: Vec<f64> = (0..2)
                .map(|j| {
                    (cfg.lambda_rep * terms.grad_rep[j] + cfg.lambda_ret * terms.grad_ret[j])
                        / a.sqrt()
                })
                .collect();
            let got = stale_epsilon_gradient(&terms, &cfg, a);
            worst = worst.max(relative_error(&got, &expected, 1e-300));
            let (next, _) = dual_energy_update(&z, &eps, a, &energy, &cfg, |_| unreachable!())
                .map_err(|e| e.to_string())?;
            let stepped: Vec<f64> = z.iter().zip(&got).map(|(zi, gi)| zi - gi).collect();
            ensure(next == stepped, || {
                "update is not z_t minus the stale gradient".into()
            })?;
        }
    }
    ensure(worst < 1e-12, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("max relative error {worst:.3e}"))
}

fn check_full_chain_frozen() -> CheckResult {
    let sampler = default_sampler(GuidanceConfig::default());
    let energy = sampler.energy();
    let stale = GuidanceConfig::default();
    let full = GuidanceConfig {
        grad_mode: GradMode::FullChain,
        ..stale
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for step in [20, 30] {
        let a = sampler.grid().alpha_bar(step);
        for _ in 0..20 {
            let z = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            let eps = sampler.eps_pred(step, &z);
            let (s, _) = dual_energy_update(&z, &eps, a, &energy, &stale, |_| eps.clone())
                .map_err(|e| e.to_string())?;
            let (f, _) = dual_energy_update(&z, &eps, a, &energy, &full, |_| eps.clone())
                .map_err(|e| e.to_string())?;
            let ds: Vec<f64> = z.iter().zip(&s).map(|(a, b)| a - b).collect();
            let df: Vec<f64> = z.iter().zip(&f).map(|(a, b)| a - b).collect();
            worst = worst.max(relative_error(&df, &ds, 1e-9));
        }
    }
    ensure(worst < 1e-5, || format!("max relative error {worst:.3e}"))?;
    Ok(format!(
        "finite-difference vs stale step, max relative error {worst:.3e}"
    ))
}

fn check_reduction() -> CheckResult {
    let base = GuidanceConfig::default();
    let disabled = [
        ("K=0", GuidanceConfig { k: 0, ..base }),
        (
            "no window",
            GuidanceConfig {
                window: None,
                ..base
            },
        ),
        (
            "lambda=0",
            GuidanceConfig {
                lambda_rep: 0.0,
                lambda_ret: 0.0,
                ..base
            },
        ),
    ];
    let vanilla = default_sampler(base);
    for (label, cfg) in disabled {
        let s = vanilla.with_config(cfg).map_err(|e| e.to_string())?;
        for seed in 0..20 {
            let a = s.run_chain(seed).map_err(|e| e.to_string())?;
            let b = vanilla.run_vanilla(seed).map_err(|e| e.to_string())?;
            ensure(a.final_latent == b.final_latent, || {
                format!("{label}: seed {seed} differs")
            })?;
        }
    }
    Ok("K=0, no window, lambda=0 all bit-identical over 20 seeds".into())
}

fn check_determinism() -> CheckResult {
    let s = default_sampler(GuidanceConfig::default()).with_trajectory(true);
    for seed in [0, 17, 123] {
        let a = s.run_chain(seed).map_err(|e| e.to_string())?;
        let b = s.run_chain(seed).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("seed {seed} not reproducible"))?;
    }
    Ok("3 seeds reproduced bit-exactly".into())
}

fn check_window_count() -> CheckResult {
    let base = default_sampler(GuidanceConfig::default());
    for (k, w) in [(3, (20, 35)), (1, (1, 50)), (5, (10, 10))] {
        let window = StepWindow::new(w.0, w.1).map_err(|e| e.to_string())?;
        let cfg = GuidanceConfig {
            k,
            window: Some(window),
            ..GuidanceConfig::default()
        };
        let r = base
            .with_config(cfg)
            .and_then(|s| s.run_chain(9))
            .map_err(|e| e.to_string())?;
        ensure(r.inner_updates == k * window.step_count(), || {
            format!("K={k} window {w:?}: {} updates", r.inner_updates)
        })?;
    }
    Ok("updates = K * |window|".into())
}

fn check_quadratic_descent() -> CheckResult {
    let grid = SamplingGrid::new(&default_schedule(), 50).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for step in [5, 25, 45] {
        let a = grid.alpha_bar(step);
        for _ in 0..100 {
            let target = vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let energy = QuadraticEnergy { target };
            let z = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            let eps = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let lambda = a * rng.random_range(0.01..0.99);
            let cfg = GuidanceConfig {
                lambda_rep: lambda,
                lambda_ret: 0.0,
                ..GuidanceConfig::default()
            };
            let before = energy
                .evaluate(&tweedie_estimate(&z, &eps, a).map_err(|e| e.to_string())?)
                .rep;
            let (next, _) = dual_energy_update(&z, &eps, a, &energy, &cfg, |_| unreachable!())
                .map_err(|e| e.to_string())?;
            let after = energy
                .evaluate(&tweedie_estimate(&next, &eps, a).map_err(|e| e.to_string())?)
                .rep;
            ensure(after < before, || {
                format!("step {step}: lambda {lambda:.3e} energy {before:.6e} -> {after:.6e}")
            })?;
        }
    }
    Ok("strict decrease for lambda < abar_t at steps 5, 25, 45".into())
}

fn check_vanilla_weights() -> CheckResult {
    let s = default_sampler(GuidanceConfig::vanilla(1.0));
    let rows: Vec<Vec<f64>> = (0..2000)
        .map(|seed| s.run_vanilla(seed).map(|r| r.final_latent))
        .collect::<crate::Result<_>>()
        .map_err(|e| e.to_string())?;
    let batch =
        crate::mixture::SampleBatch::from_rows(&rows, 0, crate::mixture::Provenance::ChainOutput)
            .map_err(|e| e.to_string())?;
    let world = World::default_world();
    let mixture = &world.active_prompt().mixture;
    let mm = mode_mass(&batch, mixture).map_err(|e| e.to_string())?;
    // 4.5 binomial standard deviations at n = 2000, w = 0.25
    let worst = mm
        .iter()
        .zip(mixture.weights())
        .map(|(f, w)| (f - w).abs())
        .fold(0.0, f64::max);
    ensure(worst < 0.044, || {
        format!("max deviation {worst:.4} at n=2000")
    })?;
    Ok(format!("max deviation {worst:.4} at n=2000"))
}

fn check_mass_identity() -> CheckResult {
    let world = World::default_world();
    let m = &world.active_prompt().mixture;
    for seed in 0..5 {
        let b = m.sample(500, seed).map_err(|e| e.to_string())?;
        let mm = mode_mass(&b, m).map_err(|e| e.to_string())?;
        let er = erased_mass(&b, m).map_err(|e| e.to_string())?;
        let safe: f64 = mm
            .iter()
            .zip(m.unsafe_mask())
            .filter(|(_, u)| !**u)
            .map(|(v, _)| v)
            .sum();
        ensure((er + safe - 1.0).abs() < 1e-9, || {
            format!("seed {seed}: {er} + {safe}")
        })?;
        ensure((mm.iter().sum::<f64>() - 1.0).abs() < 1e-9, || {
            "mode_mass does not sum to 1".into()
        })?;
    }
    Ok("erased + safe = 1".into())
}

fn check_sliced_w2() -> CheckResult {
    let m = World::default_world().active_prompt().mixture.clone();
    let a = m.sample(400, 1).map_err(|e| e.to_string())?;
    let b = m.sample(250, 2).map_err(|e| e.to_string())?;
    let ab = sliced_w2(&a, &b, 64, 3).map_err(|e| e.to_string())?;
    let ba = sliced_w2(&b, &a, 64, 3).map_err(|e| e.to_string())?;
    ensure(ab == ba, || format!("{ab} != {ba}"))?;
    let aa = sliced_w2(&a, &a, 64, 3).map_err(|e| e.to_string())?;
    ensure(aa == 0.0, || format!("self distance {aa}"))?;
    Ok(format!("d(a,b) = d(b,a) = {ab:.4}, d(a,a) = 0"))
}

fn check_tv_triangle() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let draw = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    for _ in 0..200 {
        let (a, b, c) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let tv = |p: &[f64], q: &[f64]| total_variation(p, q).expect("equal lengths");
        ensure(tv(&a, &c) <= tv(&a, &b) + tv(&b, &c) + 1e-15, || {
            "triangle inequality violated".into()
        })?;
    }
    Ok("200 random triples".into())
}

fn check_examples() -> CheckResult {
    let pool = thread_pool(0).map_err(|e| e.to_string())?;
    for (name, text) in EXAMPLE_CONFIGS {
        let mut cfg = ExperimentConfig::from_json(text).map_err(|e| format!("{name}: {e}"))?;
        cfg.run.chains = 8;
        cfg.sampler.capture_trajectory = true;
        let exp = Experiment::new(cfg).map_err(|e| format!("{name}: {e}"))?;
        for row in exp
            .run_all(&pool, false)
            .map_err(|e| format!("{name}: {e}"))?
        {
            for c in &row.chains {
                let finite = c.trajectory.iter().flatten().all(|p| {
                    all_finite(&p.z_t)
                        && all_finite(&p.z0_est)
                        && p.e_rep.is_finite()
                        && p.e_ret.is_finite()
                });
                ensure(finite && all_finite(&c.final_latent), || {
                    format!("{name}: non-finite trajectory")
                })?;
            }
        }
    }
    Ok(format!("{} configs", EXAMPLE_CONFIGS.len()))
}
