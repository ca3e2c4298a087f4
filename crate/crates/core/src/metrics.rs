//! Erasure and fidelity measurements on final samples.
//!
//! Class membership is decided by argmax responsibility under the prompt's
//! clean mixture, the toy stand-in for a hard content classifier.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mixture::{GaussianMixture, SampleBatch};
use crate::semantics::{repulsion_energy, ConceptSpace, LatentDecoder, TextEmbedding};
use crate::vector::{dot, norm};

/// Default number of random projections for [`sliced_w2`].
pub const DEFAULT_PROJECTIONS: usize = 64;

/// Separates the subsampling stream from the projection stream.
const SUBSAMPLE_STREAM: u64 = 0x5D58_8B65_6C07_8965;

fn check_batch(batch: &SampleBatch, mixture: &GaussianMixture) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.dim() != mixture.dim() {
        return Err(Error::DimensionMismatch {
            expected: mixture.dim(),
            got: batch.dim(),
        });
    }
    Ok(())
}

/// Component index of every sample.
pub fn assignments(batch: &SampleBatch, mixture: &GaussianMixture) -> Result<Vec<usize>> {
    check_batch(batch, mixture)?;
    Ok(batch.iter().map(|z| mixture.assign(z)).collect())
}

/// Fraction of samples assigned to an unsafe component.
pub fn erased_mass(batch: &SampleBatch, mixture: &GaussianMixture) -> Result<f64> {
    let mask = mixture.unsafe_mask();
    let hits = assignments(batch, mixture)?
        .into_iter()
        .filter(|&k| mask[k])
        .count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Per-component assignment frequencies.
pub fn mode_mass(batch: &SampleBatch, mixture: &GaussianMixture) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; mixture.len()];
    for k in assignments(batch, mixture)? {
        counts[k] += 1;
    }
    Ok(frequencies(&counts))
}

fn frequencies(counts: &[usize]) -> Vec<f64> {
    let n: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / n as f64).collect()
}

/// `0.5 * sum |p_i - q_i|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Total variation between `mode_mass` renormalized over the safe components
/// and the safe-oracle weights (listed in safe-component order).
pub fn safe_tv(mode_mass: &[f64], unsafe_mask: &[bool], safe_weights: &[f64]) -> Result<f64> {
    if mode_mass.len() != unsafe_mask.len() {
        return Err(Error::DimensionMismatch {
            expected: unsafe_mask.len(),
            got: mode_mass.len(),
        });
    }
    let safe: Vec<f64> = mode_mass
        .iter()
        .zip(unsafe_mask)
        .filter(|(_, u)| !**u)
        .map(|(m, _)| *m)
        .collect();
    let total: f64 = safe.iter().sum();
    if total <= 0.0 {
        return Err(Error::NoSafeMass);
    }
    let renorm: Vec<f64> = safe.iter().map(|m| m / total).collect();
    total_variation(&renorm, safe_weights)
}

/// One-dimensional 2-Wasserstein distance between equal-size samples under
/// the sorted (quantile) coupling. Both slices are sorted in place.
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.sort_unstable_by(f64::total_cmp);
    b.sort_unstable_by(f64::total_cmp);
    let sq: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq / a.len() as f64).sqrt()
}

/// `count` seeded unit directions in `dim` dimensions.
pub fn random_directions(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

/// Sliced 2-Wasserstein distance: the mean 1-D W2 over `projections` seeded
/// directions. The larger batch is subsampled (seeded) to the smaller size.
pub fn sliced_w2(a: &SampleBatch, b: &SampleBatch, projections: usize, seed: u64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let dirs = random_directions(a.dim(), projections, seed);
    sliced_w2_along(a, b, &dirs, seed)
}

/// [`sliced_w2`] with caller-supplied unit directions.
pub fn sliced_w2_along(
    a: &SampleBatch,
    b: &SampleBatch,
    directions: &[Vec<f64>],
    seed: u64,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    if directions.is_empty() {
        return Err(Error::Config(
            "sliced_w2 needs at least one projection".into(),
        ));
    }
    if let Some(d) = directions.iter().find(|d| d.len() != a.dim()) {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: d.len(),
        });
    }
    let n = a.len().min(b.len());
    let rows_a = subsample_rows(a, n, seed);
    let rows_b = subsample_rows(b, n, seed);
    let total: f64 = directions
        .iter()
        .map(|d| {
            let mut pa: Vec<f64> = rows_a.iter().map(|&i| dot(a.point(i), d)).collect();
            let mut pb: Vec<f64> = rows_b.iter().map(|&i| dot(b.point(i), d)).collect();
            wasserstein_1d(&mut pa, &mut pb)
        })
        .sum();
    Ok(total / directions.len() as f64)
}

fn subsample_rows(batch: &SampleBatch, n: usize, seed: u64) -> Vec<usize> {
    if batch.len() == n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SUBSAMPLE_STREAM);
    let mut rows = index::sample(&mut rng, batch.len(), n).into_vec();
    rows.sort_unstable();
    rows
}

/// Mean `<phi(D(z)), e_p>` over the batch.
pub fn alignment(
    batch: &SampleBatch,
    space: &ConceptSpace,
    decoder: &LatentDecoder,
    e_prompt: &TextEmbedding,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    // repulsion_energy is exactly the alignment with whatever embedding it is given
    let sum: f64 = batch
        .iter()
        .map(|z| repulsion_energy(space, decoder, z, e_prompt))
        .sum();
    Ok(sum / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n: usize,
    pub erased_mass: f64,
    pub mode_mass: Vec<f64>,
    pub safe_tv: f64,
    pub sliced_w2: f64,
    pub alignment: f64,
}

/// Inputs shared by every evaluation of one world.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub mixture: &'a GaussianMixture,
    pub space: &'a ConceptSpace,
    pub decoder: &'a LatentDecoder,
    pub e_prompt: &'a TextEmbedding,
    pub projections: usize,
    /// Seeds both the safe-oracle reference draw and the projections.
    pub seed: u64,
}

impl EvalContext<'_> {
    /// Full report for chain outputs. `sliced_w2` compares the outputs
    /// assigned to safe components against an equal-size direct draw from
    /// the safe oracle.
    pub fn evaluate(&self, batch: &SampleBatch) -> Result<MetricsReport> {
        let assigned = assignments(batch, self.mixture)?;
        let mask = self.mixture.unsafe_mask();
        let mut counts = vec![0usize; self.mixture.len()];
        for &k in &assigned {
            counts[k] += 1;
        }
        let mode_mass = frequencies(&counts);
        let erased_mass = assigned.iter().filter(|&&k| mask[k]).count() as f64 / batch.len() as f64;
        let oracle = self.mixture.safe_oracle()?;
        let safe_tv = safe_tv(&mode_mass, mask, &oracle.weights())?;
        let safe_batch = batch.select(|i, _| !mask[assigned[i]]);
        let reference = oracle.sample(safe_batch.len(), self.seed)?;
        let sliced_w2 = sliced_w2(&safe_batch, &reference, self.projections, self.seed)?;
        let alignment = alignment(batch, self.space, self.decoder, self.e_prompt)?;
        Ok(MetricsReport {
            n: batch.len(),
            erased_mass,
            mode_mass,
            safe_tv,
            sliced_w2,
            alignment,
        })
    }

    /// Sliced W2 between two independent safe-oracle draws of size `n`; the
    /// Monte Carlo floor for the fidelity comparison.
    pub fn oracle_self_distance(&self, n: usize) -> Result<f64> {
        let oracle = self.mixture.safe_oracle()?;
        let a = oracle.sample(n, self.seed.wrapping_add(1))?;
        let b = oracle.sample(n, self.seed.wrapping_add(2))?;
        sliced_w2(&a, &b, self.projections, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{GaussianComponent, Provenance};
    use crate::world::{World, DEFAULT_TEMPERATURE};

    fn batch(rows: &[Vec<f64>]) -> SampleBatch {
        SampleBatch::from_rows(rows, 0, Provenance::DirectSample).unwrap()
    }

    fn four_mode() -> GaussianMixture {
        World::default_world().active_prompt().mixture.clone()
    }

    #[test]
    fn oracle_samples_are_not_erased() {
        let m = four_mode();
        let b = m.safe_oracle().unwrap().sample(10_000, 1).unwrap();
        assert!(erased_mass(&b, &m).unwrap() < 0.005);
    }

    #[test]
    fn full_mixture_erased_mass_near_weight() {
        let m = four_mode();
        let b = m.sample(10_000, 2).unwrap();
        assert!((erased_mass(&b, &m).unwrap() - 0.25).abs() < 0.02);
    }

    #[test]
    fn batch_at_unsafe_mean_is_fully_erased() {
        let m = four_mode();
        let b = batch(&vec![vec![3.0, 3.0]; 5]);
        assert_eq!(erased_mass(&b, &m).unwrap(), 1.0);
    }

    #[test]
    fn empty_batch_errors() {
        let m = four_mode();
        let b = batch(&[vec![0.0, 0.0]]).select(|_, _| false);
        assert!(matches!(erased_mass(&b, &m), Err(Error::EmptyBatch)));
        assert!(matches!(mode_mass(&b, &m), Err(Error::EmptyBatch)));
    }

    #[test]
    fn mode_mass_examples() {
        let m = GaussianMixture::new(
            vec![
                GaussianComponent::isotropic(0.5, vec![-4.0], 1.0),
                GaussianComponent::isotropic(0.5, vec![4.0], 1.0),
            ],
            vec![false, false],
        )
        .unwrap();
        let mm = mode_mass(&m.sample(20_000, 3).unwrap(), &m).unwrap();
        assert!((mm[0] - 0.5).abs() < 0.02);
        assert_eq!(mm.iter().sum::<f64>(), 1.0);
        let one = mode_mass(&batch(&[vec![4.0]]), &m).unwrap();
        assert_eq!(one, vec![0.0, 1.0]);
    }

    #[test]
    fn safe_tv_examples() {
        assert_eq!(
            safe_tv(&[0.2, 0.8], &[false, false], &[0.2, 0.8]).unwrap(),
            0.0
        );
        assert_eq!(
            safe_tv(&[1.0, 0.0], &[false, false], &[0.5, 0.5]).unwrap(),
            0.5
        );
        // unsafe mass is dropped before renormalizing
        assert_eq!(
            safe_tv(&[0.5, 0.5, 0.0], &[true, false, false], &[0.5, 0.5]).unwrap(),
            0.5
        );
        assert!(matches!(
            safe_tv(&[1.0, 0.0], &[true, false], &[1.0]),
            Err(Error::NoSafeMass)
        ));
        let ab = safe_tv(&[0.3, 0.7], &[false, false], &[0.6, 0.4]).unwrap();
        let ba = safe_tv(&[0.6, 0.4], &[false, false], &[0.3, 0.7]).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn sliced_w2_examples() {
        let a = batch(&[vec![0.0], vec![0.0]]);
        let b = batch(&[vec![1.0], vec![1.0]]);
        assert_eq!(sliced_w2_along(&a, &b, &[vec![1.0]], 0).unwrap(), 1.0);
        let c = four_mode().sample(500, 4).unwrap();
        assert_eq!(sliced_w2(&c, &c, 64, 9).unwrap(), 0.0);
        let d = batch(&[vec![0.0, 0.0, 0.0]]);
        assert!(matches!(
            sliced_w2(&c, &d, 8, 0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sliced_w2_symmetric_with_subsampling() {
        let m = four_mode();
        let a = m.sample(300, 5).unwrap();
        let b = m.sample(170, 6).unwrap();
        assert_eq!(
            sliced_w2(&a, &b, 32, 1).unwrap(),
            sliced_w2(&b, &a, 32, 1).unwrap()
        );
    }

    #[test]
    fn alignment_examples() {
        let world = World::default_world();
        let space = world.concept_space(0.5, &LatentDecoder::Identity).unwrap();
        let q = space.text_embed(&["q/0"]).unwrap();
        let at_q = batch(&vec![vec![-9.0, -9.0]; 3]);
        let at_p = batch(&vec![vec![3.0, -3.0]; 3]);
        assert!(
            (alignment(&at_q, &space, &LatentDecoder::Identity, &q).unwrap() - 1.0).abs() < 1e-9
        );
        assert!(
            alignment(&at_p, &space, &LatentDecoder::Identity, &q)
                .unwrap()
                .abs()
                < 1e-9
        );
    }

    #[test]
    fn report_mass_adds_up() {
        let world = World::default_world();
        let m = &world.active_prompt().mixture;
        let space = world
            .concept_space(DEFAULT_TEMPERATURE, &LatentDecoder::Identity)
            .unwrap();
        let e_p = space.text_embed(&world.active_prompt().embedding).unwrap();
        let ctx = EvalContext {
            mixture: m,
            space: &space,
            decoder: &LatentDecoder::Identity,
            e_prompt: &e_p,
            projections: DEFAULT_PROJECTIONS,
            seed: 11,
        };
        let r = ctx.evaluate(&m.sample(2000, 12).unwrap()).unwrap();
        let safe: f64 = r
            .mode_mass
            .iter()
            .zip(m.unsafe_mask())
            .filter(|(_, u)| !**u)
            .map(|(v, _)| v)
            .sum();
        assert!((r.erased_mass + safe - 1.0).abs() < 1e-9);
        assert!(r.safe_tv < 0.05);
        assert!((-1.0..=1.0).contains(&r.alignment));
    }
}
