//! Samples from the approximate posterior `𝒢(s − m, D)`.
//!
//! A prior realization `s'` is pushed through the measurement model with
//! fresh noise, Wiener filtered back to `m'`, and the residual `s' − m'`
//! (which has covariance exactly `D`) is re-centred on the actual mean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cg::CgConfig;
use crate::error::{Error, Result};
use crate::field::MultiField;
use crate::operators::forward;
use crate::wiener::WienerProblem;

/// Where a sample's randomness came from: a ChaCha8 stream `stream` keyed
/// by `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSeed {
    pub seed: u64,
    pub stream: u64,
}

impl SampleSeed {
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct SampleSet {
    samples: Vec<MultiField>,
    generation_iteration: usize,
    seeds: Vec<SampleSeed>,
    cg_iterations: usize,
}

impl SampleSet {
    /// Wraps externally produced samples (e.g. the singleton `{m}`).
    pub fn from_samples(samples: Vec<MultiField>, generation_iteration: usize) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptySamples)?;
        for s in &samples[1..] {
            s.check_compatible(first)?;
        }
        Ok(Self {
            samples,
            generation_iteration,
            seeds: Vec::new(),
            cg_iterations: 0,
        })
    }

    pub fn samples(&self) -> &[MultiField] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn generation_iteration(&self) -> usize {
        self.generation_iteration
    }

    pub fn seeds(&self) -> &[SampleSeed] {
        &self.seeds
    }

    /// Total CG iterations spent drawing the set.
    pub fn cg_iterations(&self) -> usize {
        self.cg_iterations
    }

    pub fn into_samples(self) -> Vec<MultiField> {
        self.samples
    }

    /// Multiplies component `j` of every sample by `factors[j]`.
    pub fn rescale_components(&mut self, factors: &[f64]) {
        for s in &mut self.samples {
            for (j, &f) in factors.iter().enumerate() {
                s.component_mut(j).values_mut().iter_mut().for_each(|v| *v *= f);
            }
        }
    }
}

/// One draw `s* = s' − m' + m`. Returns the sample and the CG iterations
/// spent on the mock reconstruction.
pub fn draw_posterior_sample<R: Rng + ?Sized>(
    problem: &WienerProblem<'_>,
    mean: &MultiField,
    cfg: &CgConfig,
    rng: &mut R,
) -> Result<(MultiField, usize)> {
    if mean.grid() != problem.model.grid() || mean.len() != problem.components() {
        return Err(Error::ShapeMismatch("mean does not match the problem".into()));
    }
    let prior_draw = problem.prior.draw_sample(rng);
    let noise = problem.model.draw_noise(rng);
    let mock = forward(problem.model.response(), problem.mixture, &prior_draw)?.add(&noise);
    let (mock_mean, stats) = problem.with_data(&mock).wiener_mean(cfg, None)?;
    let mut sample = prior_draw.sub(&mock_mean);
    sample.axpy(1.0, mean);
    Ok((sample, stats.iterations))
}

/// Draws `count` independent samples on streams `0..count` of `seed`.
pub fn draw_sample_set(
    problem: &WienerProblem<'_>,
    mean: &MultiField,
    count: usize,
    cfg: &CgConfig,
    seed: u64,
    generation_iteration: usize,
) -> Result<SampleSet> {
    if count == 0 {
        return Err(Error::InvalidConfig("sample count must be at least 1".into()));
    }
    let seeds: Vec<SampleSeed> = (0..count as u64).map(|stream| SampleSeed { seed, stream }).collect();
    draw_samples_with_seeds(problem, mean, &seeds, cfg, generation_iteration)
}

/// Draws one sample per given seed, in parallel; the result is independent
/// of scheduling order.
pub fn draw_samples_with_seeds(
    problem: &WienerProblem<'_>,
    mean: &MultiField,
    seeds: &[SampleSeed],
    cfg: &CgConfig,
    generation_iteration: usize,
) -> Result<SampleSet> {
    if seeds.is_empty() {
        return Err(Error::EmptySamples);
    }
    let drawn = seeds
        .par_iter()
        .map(|s| draw_posterior_sample(problem, mean, cfg, &mut s.rng()))
        .collect::<Result<Vec<_>>>()?;
    let cg_iterations = drawn.iter().map(|(_, it)| it).sum();
    Ok(SampleSet {
        samples: drawn.into_iter().map(|(s, _)| s).collect(),
        generation_iteration,
        seeds: seeds.to_vec(),
        cg_iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Grid, HarmonicCovariance, PowerSpectrum};
    use crate::operators::{DataSet, MeasurementModel, MixtureMatrix, NoiseCovariance, PriorCovariance, Response};

    fn fixture(variance: f64, mixture: MixtureMatrix) -> (MeasurementModel, PriorCovariance, MixtureMatrix, DataSet) {
        let g = Grid::unit_interval(16).unwrap();
        let model = MeasurementModel::new(
            Response::identity(&g, mixture.channels()),
            NoiseCovariance::uniform(&g, mixture.channels(), variance).unwrap(),
        )
        .unwrap();
        let prior = PriorCovariance::shared(
            HarmonicCovariance::from_spectrum(&g, &PowerSpectrum::falling()).unwrap(),
            mixture.components(),
        );
        let d = DataSet::new(&g, vec![vec![0.3; 16]; mixture.channels()]).unwrap();
        (model, prior, mixture, d)
    }

    #[test]
    fn zero_mixture_sample_is_prior_draw_plus_mean() {
        let (model, prior, mix, d) = fixture(0.1, MixtureMatrix::zeros(3, 2));
        let p = WienerProblem::new(&model, &mix, &prior, &d).unwrap();
        let mean = prior.draw_sample(&mut ChaCha8Rng::seed_from_u64(9));
        let seed = SampleSeed { seed: 4, stream: 0 };
        let (s, _) = draw_posterior_sample(&p, &mean, &CgConfig::relative(1e-10), &mut seed.rng()).unwrap();
        // replay the prior draw from the same stream
        let expected = prior.draw_sample(&mut seed.rng()).add(&mean);
        assert!(s.sub(&expected).max_abs() < 1e-12);
    }

    #[test]
    fn vanishing_likelihood_gives_prior_fluctuations() {
        let (model, prior, mix, d) = fixture(1e12, MixtureMatrix::identity(2));
        let p = WienerProblem::new(&model, &mix, &prior, &d).unwrap();
        let mean = MultiField::zeros(model.grid(), 2);
        let seed = SampleSeed { seed: 11, stream: 3 };
        let (s, _) = draw_posterior_sample(&p, &mean, &CgConfig::relative(1e-10), &mut seed.rng()).unwrap();
        let expected = prior.draw_sample(&mut seed.rng());
        assert!(s.sub(&expected).max_abs() < 1e-4 * expected.max_abs());
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let (model, prior, mix, d) = fixture(
            0.1,
            MixtureMatrix::from_rows(&[vec![1.0, 0.2], vec![0.4, 0.9], vec![-0.3, 0.5]]).unwrap(),
        );
        let p = WienerProblem::new(&model, &mix, &prior, &d).unwrap();
        let mean = MultiField::zeros(model.grid(), 2);
        let cfg = CgConfig::relative(1e-8);
        let a = draw_sample_set(&p, &mean, 4, &cfg, 77, 0).unwrap();
        let b = draw_sample_set(&p, &mean, 4, &cfg, 77, 0).unwrap();
        assert_eq!(a.samples(), b.samples());
        assert_eq!(a.seeds()[2], SampleSeed { seed: 77, stream: 2 });
        let single = draw_sample_set(&p, &mean, 1, &cfg, 77, 5).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.generation_iteration(), 5);
        assert_eq!(single.samples()[0], a.samples()[0]);
        assert!(draw_sample_set(&p, &mean, 0, &cfg, 77, 0).is_err());
    }
}
