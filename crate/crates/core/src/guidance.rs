//! Guidance combinators and the dual-energy inner update.
//!
//! Everything here is a pure function of its arguments. The sampler decides
//! when the inner update runs; this module only defines what one iteration
//! does.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::tweedie_estimate;
use crate::semantics::{alignment_with_grad, ConceptSpace, LatentDecoder, TextEmbedding};
use crate::vector::{all_finite, norm};

/// How `grad_{z_t}` of the energy treats the noise prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    /// `eps_pred` is held fixed, so `d z0|t / d z_t = I / sqrt(abar_t)`.
    #[default]
    StaleEpsilon,
    /// Total derivative through the noise model, by central differences of
    /// the combined scalar energy.
    FullChain,
}

impl std::fmt::Display for GradMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::StaleEpsilon => "stale-epsilon",
            Self::FullChain => "full-chain",
        })
    }
}

/// Inclusive range of sampler steps where the inner loop runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[usize; 2]", into = "[usize; 2]")]
pub struct StepWindow {
    pub start: usize,
    pub end: usize,
}

impl StepWindow {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::Guidance(format!(
                "window start {start} exceeds end {end}"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, step: usize) -> bool {
        (self.start..=self.end).contains(&step)
    }

    /// Number of sampler steps covered.
    pub fn step_count(&self) -> usize {
        self.end - self.start + 1
    }
}

impl TryFrom<[usize; 2]> for StepWindow {
    type Error = Error;

    fn try_from(v: [usize; 2]) -> Result<Self> {
        Self::new(v[0], v[1])
    }
}

impl From<StepWindow> for [usize; 2] {
    fn from(w: StepWindow) -> Self {
        [w.start, w.end]
    }
}

/// Default repulsion scale, calibrated for the default world.
pub const DEFAULT_LAMBDA_REP: f64 = 0.012;
/// Default retention scale; keeps the 2:1 repulsion/retention ratio.
pub const DEFAULT_LAMBDA_RET: f64 = 0.006;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub omega: f64,
    pub lambda_rep: f64,
    pub lambda_ret: f64,
    #[serde(rename = "K")]
    pub k: usize,
    /// `None` disables the inner loop entirely.
    pub window: Option<StepWindow>,
    pub grad_mode: GradMode,
    /// Seed for a standalone chain. The harness ignores it and derives one
    /// seed per chain from `run.master_seed`.
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega: 1.0,
            lambda_rep: DEFAULT_LAMBDA_REP,
            lambda_ret: DEFAULT_LAMBDA_RET,
            k: 3,
            window: Some(StepWindow { start: 20, end: 35 }),
            grad_mode: GradMode::StaleEpsilon,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    /// Guidance switched off: plain classifier-free guided DDIM.
    pub fn vanilla(omega: f64) -> Self {
        Self {
            omega,
            lambda_rep: 0.0,
            lambda_ret: 0.0,
            k: 0,
            window: None,
            ..Self::default()
        }
    }

    pub fn validate(&self, sampler_steps: usize) -> Result<()> {
        if !self.omega.is_finite() {
            return Err(Error::Guidance("omega must be finite".into()));
        }
        for (name, v) in [
            ("lambda_rep", self.lambda_rep),
            ("lambda_ret", self.lambda_ret),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Guidance(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if let Some(w) = self.window {
            if w.start > w.end || w.start < 1 || w.end > sampler_steps {
                return Err(Error::Guidance(format!(
                    "window [{}, {}] outside [1, {sampler_steps}]",
                    w.start, w.end
                )));
            }
        }
        Ok(())
    }

    /// True when the inner loop can change anything at all.
    pub fn is_active(&self) -> bool {
        self.k > 0 && self.window.is_some() && (self.lambda_rep > 0.0 || self.lambda_ret > 0.0)
    }

    pub fn applies_at(&self, step: usize) -> bool {
        self.is_active() && self.window.is_some_and(|w| w.contains(step))
    }
}

/// `eps_uncond + omega * (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_uncond: &[f64], eps_cond: &[f64], omega: f64) -> Vec<f64> {
    eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(u, c)| u + omega * (c - u))
        .collect()
}

/// `eps_uncond + omega * (eps_cond - eps_neg)`.
pub fn negative_guidance_combine(
    eps_uncond: &[f64],
    eps_cond: &[f64],
    eps_neg: &[f64],
    omega: f64,
) -> Vec<f64> {
    eps_uncond
        .iter()
        .zip(eps_cond)
        .zip(eps_neg)
        .map(|((u, c), n)| u + omega * (c - n))
        .collect()
}

/// `z - rho * grad`.
pub fn energy_step(z: &[f64], grad: &[f64], rho: f64) -> Vec<f64> {
    z.iter().zip(grad).map(|(zi, gi)| zi - rho * gi).collect()
}

/// Energies and their gradients with respect to the clean estimate `z0|t`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTerms {
    pub rep: f64,
    pub ret: f64,
    pub grad_rep: Vec<f64>,
    pub grad_ret: Vec<f64>,
}

/// Something that scores a clean-latent estimate.
pub trait GuidanceEnergy: Sync {
    fn evaluate(&self, z0: &[f64]) -> EnergyTerms;
}

/// Repulsion from a concept plus retention toward a prompt.
#[derive(Debug, Clone, Copy)]
pub struct DualEnergy<'a> {
    pub space: &'a ConceptSpace,
    pub decoder: &'a LatentDecoder,
    pub prompt: &'a TextEmbedding,
    pub concept: &'a TextEmbedding,
}

impl GuidanceEnergy for DualEnergy<'_> {
    fn evaluate(&self, z0: &[f64]) -> EnergyTerms {
        let (rep, grad_rep) = alignment_with_grad(self.space, self.decoder, z0, self.concept);
        let (align, grad_align) = alignment_with_grad(self.space, self.decoder, z0, self.prompt);
        EnergyTerms {
            rep,
            ret: -align,
            grad_rep,
            grad_ret: grad_align.into_iter().map(|g| -g).collect(),
        }
    }
}

/// `|z0 - target|^2` in the repulsion slot, zero retention. A convex test
/// energy with a known Lipschitz constant.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticEnergy {
    pub target: Vec<f64>,
}

impl GuidanceEnergy for QuadraticEnergy {
    fn evaluate(&self, z0: &[f64]) -> EnergyTerms {
        let diff: Vec<f64> = z0.iter().zip(&self.target).map(|(a, b)| a - b).collect();
        EnergyTerms {
            rep: diff.iter().map(|d| d * d).sum(),
            ret: 0.0,
            grad_rep: diff.iter().map(|d| 2.0 * d).collect(),
            grad_ret: vec![0.0; diff.len()],
        }
    }
}

/// Per-iteration record of the inner loop, taken before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerDiagnostics {
    pub e_rep: f64,
    pub e_ret: f64,
    pub grad_norm: f64,
}

/// Central-difference step for the full-chain gradient.
const FULL_CHAIN_STEP: f64 = 1e-5;

/// Gradient of `lambda_rep * E_rep + lambda_ret * E_ret` with respect to
/// `z_t` when `eps_pred` is frozen: `(lambda_rep g_rep + lambda_ret g_ret) /
/// sqrt(abar_t)`.
pub fn stale_epsilon_gradient(terms: &EnergyTerms, cfg: &GuidanceConfig, abar_t: f64) -> Vec<f64> {
    let inv = 1.0 / abar_t.sqrt();
    terms
        .grad_rep
        .iter()
        .zip(&terms.grad_ret)
        .map(|(r, t)| (cfg.lambda_rep * r + cfg.lambda_ret * t) * inv)
        .collect()
}

/// One inner iteration: estimate `z0|t`, score it, and descend the combined
/// energy in `z_t`. `eps_model` is only consulted in full-chain mode.
pub fn dual_energy_update<E, F>(
    z_t: &[f64],
    eps_pred: &[f64],
    abar_t: f64,
    energy: &E,
    cfg: &GuidanceConfig,
    eps_model: F,
) -> Result<(Vec<f64>, InnerDiagnostics)>
where
    E: GuidanceEnergy + ?Sized,
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !(abar_t > 0.0 && abar_t <= 1.0) {
        return Err(Error::AbarOutOfRange(abar_t));
    }
    if cfg.lambda_rep == 0.0 && cfg.lambda_ret == 0.0 {
        let z0 = tweedie_estimate(z_t, eps_pred, abar_t)?;
        let terms = energy.evaluate(&z0);
        let diag = InnerDiagnostics {
            e_rep: terms.rep,
            e_ret: terms.ret,
            grad_norm: 0.0,
        };
        return Ok((z_t.to_vec(), diag));
    }

    let (terms, grad) = match cfg.grad_mode {
        GradMode::StaleEpsilon => {
            let z0 = tweedie_estimate(z_t, eps_pred, abar_t)?;
            let terms = energy.evaluate(&z0);
            let grad = stale_epsilon_gradient(&terms, cfg, abar_t);
            (terms, grad)
        }
        GradMode::FullChain => {
            let combined = |z: &[f64]| -> Result<f64> {
                let z0 = tweedie_estimate(z, &eps_model(z), abar_t)?;
                let t = energy.evaluate(&z0);
                Ok(cfg.lambda_rep * t.rep + cfg.lambda_ret * t.ret)
            };
            let z0 = tweedie_estimate(z_t, &eps_model(z_t), abar_t)?;
            let terms = energy.evaluate(&z0);
            let mut grad = Vec::with_capacity(z_t.len());
            let mut probe = z_t.to_vec();
            for j in 0..z_t.len() {
                let h = FULL_CHAIN_STEP * z_t[j].abs().max(1.0);
                probe[j] = z_t[j] + h;
                let up = combined(&probe)?;
                probe[j] = z_t[j] - h;
                let down = combined(&probe)?;
                probe[j] = z_t[j];
                grad.push((up - down) / (2.0 * h));
            }
            (terms, grad)
        }
    };

    if !all_finite(&grad) {
        return Err(Error::NonFiniteGradient);
    }
    let diag = InnerDiagnostics {
        e_rep: terms.rep,
        e_ret: terms.ret,
        grad_norm: norm(&grad),
    };
    Ok((energy_step(z_t, &grad, 1.0), diag))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_model(_: &[f64]) -> Vec<f64> {
        unreachable!("stale mode never calls the model")
    }

    #[test]
    fn cfg_identities() {
        let u = [0.3, -1.0];
        let c = [2.0, 0.5];
        assert_eq!(cfg_combine(&u, &c, 1.0), c.to_vec());
        assert_eq!(cfg_combine(&u, &c, 0.0), u.to_vec());
        assert_eq!(cfg_combine(&[0.0, 0.0], &c, 7.5), vec![15.0, 3.75]);
    }

    #[test]
    fn negative_guidance_identities() {
        let u = [0.3, -1.0];
        let c = [2.0, 0.5];
        let n = [-0.4, 0.9];
        assert_eq!(
            negative_guidance_combine(&u, &c, &u, 3.0),
            cfg_combine(&u, &c, 3.0)
        );
        assert_eq!(negative_guidance_combine(&u, &c, &n, 0.0), u.to_vec());
        assert_eq!(negative_guidance_combine(&u, &c, &c, 9.0), u.to_vec());
    }

    #[test]
    fn energy_step_examples() {
        assert_eq!(energy_step(&[1.0, 0.0], &[2.0, 0.0], 0.0), vec![1.0, 0.0]);
        let z = energy_step(&[1.0, 0.0], &[2.0, 0.0], 0.1);
        assert!((z[0] - 0.8).abs() < 1e-15 && z[1] == 0.0);
        let g = [0.25, -0.5];
        let twice = energy_step(&energy_step(&[1.0, 2.0], &g, 0.5), &g, 0.5);
        assert_eq!(energy_step(&[1.0, 2.0], &g, 1.0), twice);
    }

    #[test]
    fn zero_lambdas_leave_latent_untouched() {
        let cfg = GuidanceConfig {
            lambda_rep: 0.0,
            lambda_ret: 0.0,
            ..GuidanceConfig::default()
        };
        let quad = QuadraticEnergy {
            target: vec![0.0, 0.0],
        };
        let z = [-0.0, 1.234_567_890_123];
        let (out, _) = dual_energy_update(&z, &[0.1, 0.2], 0.5, &quad, &cfg, no_model).unwrap();
        assert_eq!(out[0].to_bits(), z[0].to_bits());
        assert_eq!(out[1].to_bits(), z[1].to_bits());
    }

    #[test]
    fn quadratic_hand_example() {
        let cfg = GuidanceConfig {
            lambda_rep: 0.1,
            lambda_ret: 0.0,
            ..GuidanceConfig::default()
        };
        let quad = QuadraticEnergy {
            target: vec![0.0, 0.0],
        };
        let (out, diag) =
            dual_energy_update(&[1.0, 0.0], &[0.0, 0.0], 1.0, &quad, &cfg, no_model).unwrap();
        assert!((out[0] - 0.8).abs() < 1e-15 && out[1] == 0.0);
        assert_eq!(diag.e_rep, 1.0);
        assert!((diag.grad_norm - 0.2).abs() < 1e-15);
    }

    #[test]
    fn window_and_activity() {
        let cfg = GuidanceConfig::default();
        assert!(cfg.applies_at(20) && cfg.applies_at(35));
        assert!(!cfg.applies_at(19) && !cfg.applies_at(36));
        assert!(!GuidanceConfig { k: 0, ..cfg }.is_active());
        assert!(!GuidanceConfig {
            window: None,
            ..cfg
        }
        .is_active());
        assert!(!GuidanceConfig::vanilla(7.5).is_active());
        assert!(StepWindow::new(5, 4).is_err());
        assert!(GuidanceConfig {
            window: Some(StepWindow { start: 20, end: 60 }),
            ..cfg
        }
        .validate(50)
        .is_err());
        assert!(GuidanceConfig {
            lambda_rep: -1.0,
            ..cfg
        }
        .validate(50)
        .is_err());
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        struct Broken;
        impl GuidanceEnergy for Broken {
            fn evaluate(&self, z0: &[f64]) -> EnergyTerms {
                EnergyTerms {
                    rep: 0.0,
                    ret: 0.0,
                    grad_rep: vec![f64::NAN; z0.len()],
                    grad_ret: vec![0.0; z0.len()],
                }
            }
        }
        let cfg = GuidanceConfig::default();
        let r = dual_energy_update(&[0.0, 0.0], &[0.0, 0.0], 0.5, &Broken, &cfg, no_model);
        assert!(matches!(r, Err(Error::NonFiniteGradient)));
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = GuidanceConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"window\":[20,35]"));
        assert!(json.contains("\"grad_mode\":\"stale-epsilon\""));
        let back: GuidanceConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let bad: std::result::Result<GuidanceConfig, _> =
            serde_json::from_str(r#"{"window":[30,20]}"#);
        assert!(bad.is_err());
    }
}
