//! Diagonal-covariance Gaussian mixtures used both as data distributions and
//! as exact score models.
//!
//! Under the forward process `z_t = sqrt(abar) z_0 + sqrt(1 - abar) eps`, a
//! component `N(mu, S)` becomes `N(sqrt(abar) mu, abar S + (1 - abar) I)`, so
//! the noisy marginals stay mixtures and their scores are available in closed
//! form. The noise prediction of the toy model is
//! `eps(z, t) = -sqrt(1 - abar_t) * score_t(z)`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::{all_finite, log_sum_exp, softmax};

/// Variances below this are rejected at construction.
pub const MIN_VARIANCE: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: Vec<f64>, var: Vec<f64>) -> Self {
        Self { weight, mean, var }
    }

    /// Component with the same variance on every axis.
    pub fn isotropic(weight: f64, mean: Vec<f64>, var: f64) -> Self {
        let d = mean.len();
        Self::new(weight, mean, vec![var; d])
    }

    fn log_pdf(&self, z: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((zi, mi), vi) in z.iter().zip(&self.mean).zip(&self.var) {
            let diff = zi - mi;
            acc += diff * diff / vi + vi.ln() + LN_2PI;
        }
        -0.5 * acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<GaussianComponent>,
    unsafe_mask: Vec<bool>,
}

impl GaussianMixture {
    /// Validates and builds a mixture. Weights must sum to 1 within 1e-12.
    pub fn new(components: Vec<GaussianComponent>, unsafe_mask: Vec<bool>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Mixture("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::Mixture("dimension must be positive".into()));
        }
        if unsafe_mask.len() != components.len() {
            return Err(Error::Mixture(format!(
                "unsafe mask has {} entries for {} components",
                unsafe_mask.len(),
                components.len()
            )));
        }
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.var.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: if c.mean.len() != dim {
                        c.mean.len()
                    } else {
                        c.var.len()
                    },
                });
            }
            if !(c.weight.is_finite() && c.weight > 0.0 && c.weight <= 1.0) {
                return Err(Error::Mixture(format!(
                    "component {i} weight {} outside (0, 1]",
                    c.weight
                )));
            }
            if !all_finite(&c.mean) {
                return Err(Error::Mixture(format!(
                    "component {i} has a non-finite mean"
                )));
            }
            if c.var.iter().any(|v| !(v.is_finite() && *v >= MIN_VARIANCE)) {
                return Err(Error::Mixture(format!(
                    "component {i} has a variance below {MIN_VARIANCE:e} or non-finite"
                )));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Mixture(format!("weights sum to {total}, not 1")));
        }
        Ok(Self {
            dim,
            components,
            unsafe_mask,
        })
    }

    /// Like [`GaussianMixture::new`] but rescales the weights to sum to one.
    pub fn normalized(
        mut components: Vec<GaussianComponent>,
        unsafe_mask: Vec<bool>,
    ) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::Mixture(
                "weights must have a positive finite sum".into(),
            ));
        }
        components.iter_mut().for_each(|c| c.weight /= total);
        Self::new(components, unsafe_mask)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn unsafe_mask(&self) -> &[bool] {
        &self.unsafe_mask
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// Draws `n` i.i.d. points; deterministic given `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<SampleBatch> {
        Ok(self.sample_with_components(n, seed)?.0)
    }

    /// Draws `n` points and also returns the component each came from.
    pub fn sample_with_components(&self, n: usize, seed: u64) -> Result<(SampleBatch, Vec<usize>)> {
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picker = WeightedIndex::new(self.components.iter().map(|c| c.weight))
            .map_err(|e| Error::Mixture(e.to_string()))?;
        let mut points = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = picker.sample(&mut rng);
            let c = &self.components[k];
            for (m, v) in c.mean.iter().zip(&c.var) {
                let e: f64 = StandardNormal.sample(&mut rng);
                points.push(m + v.sqrt() * e);
            }
            labels.push(k);
        }
        let batch = SampleBatch::new(self.dim, points, seed, Provenance::DirectSample)?;
        Ok((batch, labels))
    }

    /// Closed-form forward marginal at cumulative alpha `abar`.
    pub fn diffused(&self, abar: f64) -> Result<Self> {
        if !(abar > 0.0 && abar <= 1.0) {
            return Err(Error::AbarOutOfRange(abar));
        }
        if abar == 1.0 {
            return Ok(self.clone());
        }
        let scale = abar.sqrt();
        let components = self
            .components
            .iter()
            .map(|c| GaussianComponent {
                weight: c.weight,
                mean: c.mean.iter().map(|m| scale * m).collect(),
                var: c.var.iter().map(|v| abar * v + (1.0 - abar)).collect(),
            })
            .collect();
        Ok(Self {
            dim: self.dim,
            components,
            unsafe_mask: self.unsafe_mask.clone(),
        })
    }

    /// `log w_i + log N(z; mu_i, S_i)` for every component.
    pub fn component_log_densities(&self, z: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.weight.ln() + c.log_pdf(z))
            .collect()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        log_sum_exp(&self.component_log_densities(z))
    }

    /// Posterior component probabilities at `z`.
    pub fn responsibilities(&self, z: &[f64]) -> Vec<f64> {
        softmax(&self.component_log_densities(z))
    }

    /// Index of the component with the largest responsibility.
    pub fn assign(&self, z: &[f64]) -> usize {
        let logs = self.component_log_densities(z);
        let mut best = 0;
        for (i, l) in logs.iter().enumerate() {
            if *l > logs[best] {
                best = i;
            }
        }
        best
    }

    /// Exact `grad_z log p(z) = sum_i r_i(z) S_i^{-1} (mu_i - z)`.
    pub fn score(&self, z: &[f64]) -> Vec<f64> {
        let resp = self.responsibilities(z);
        let mut out = vec![0.0; self.dim];
        for (r, c) in resp.iter().zip(&self.components) {
            for (j, o) in out.iter_mut().enumerate() {
                *o += r * (c.mean[j] - z[j]) / c.var[j];
            }
        }
        out
    }

    /// Noise prediction `-sqrt(1 - abar) * score(z)` for a mixture already
    /// diffused to `abar`. At `abar = 1` this is identically zero.
    pub fn epsilon_pred(&self, z: &[f64], abar: f64) -> Result<Vec<f64>> {
        if !(abar > 0.0 && abar <= 1.0) {
            return Err(Error::AbarOutOfRange(abar));
        }
        let s = (1.0 - abar).sqrt();
        Ok(self.score(z).into_iter().map(|g| -s * g).collect())
    }

    /// The mixture restricted to safe components with renormalized weights.
    pub fn safe_oracle(&self) -> Result<Self> {
        let safe: Vec<GaussianComponent> = self
            .components
            .iter()
            .zip(&self.unsafe_mask)
            .filter(|(_, u)| !**u)
            .map(|(c, _)| c.clone())
            .collect();
        if safe.is_empty() {
            return Err(Error::NoSafeComponents);
        }
        if safe.len() == self.components.len() {
            return Ok(self.clone());
        }
        let n = safe.len();
        Self::normalized(safe, vec![false; n])
    }
}

/// Where a batch of latents came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    DirectSample,
    ChainOutput,
}

/// `n x d` latents stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    dim: usize,
    points: Vec<f64>,
    pub seed: u64,
    pub provenance: Provenance,
}

impl SampleBatch {
    pub fn new(dim: usize, points: Vec<f64>, seed: u64, provenance: Provenance) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Mixture("batch dimension must be positive".into()));
        }
        if !points.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: points.len() % dim,
            });
        }
        if !all_finite(&points) {
            return Err(Error::Mixture("batch contains non-finite entries".into()));
        }
        Ok(Self {
            dim,
            points,
            seed,
            provenance,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], seed: u64, provenance: Provenance) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::EmptyBatch)?;
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        Self::new(dim, rows.concat(), seed, provenance)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.points.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.points
    }

    /// Rows for which `keep` is true, in order.
    pub fn select(&self, keep: impl Fn(usize, &[f64]) -> bool) -> Self {
        let points = self
            .iter()
            .enumerate()
            .filter(|(i, p)| keep(*i, p))
            .flat_map(|(_, p)| p.iter().copied())
            .collect();
        Self {
            dim: self.dim,
            points,
            seed: self.seed,
            provenance: self.provenance,
        }
    }
}
