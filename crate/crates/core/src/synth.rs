//! Synthetic ground truth and data for the two shipped scenarios and
//! parameterized variants.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid, HarmonicCovariance, MultiField, PowerSpectrum};
use crate::inference::InferenceInputs;
use crate::mixture::normalize_columns;
use crate::operators::{forward, DataSet, MeasurementModel, MixtureMatrix, NoiseCovariance, PriorCovariance, Response};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    Uniform {
        variance: f64,
    },
    /// Each channel gets `base_variance` times a factor drawn log-uniformly
    /// in `[min_factor, max_factor]`.
    LogUniformFactors {
        base_variance: f64,
        min_factor: f64,
        max_factor: f64,
    },
    PerChannel {
        variances: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub fraction: f64,
    pub block_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub shape: Vec<usize>,
    pub lengths: Vec<f64>,
    pub channels: usize,
    pub components: usize,
    pub spectrum: PowerSpectrum,
    pub noise: NoiseSpec,
    pub mask: Option<MaskSpec>,
    /// Fixed mixture instead of a random draw; used as given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Five equally probing channels, two components, `σ² = 0.1`, 1024 points.
    pub fn scenario1(seed: u64) -> Self {
        Self {
            shape: vec![1024],
            lengths: vec![1.0],
            channels: 5,
            components: 2,
            spectrum: PowerSpectrum::falling(),
            noise: NoiseSpec::Uniform { variance: 0.1 },
            mask: None,
            mixture: None,
            seed,
        }
    }

    /// As [`Self::scenario1`] with 22% masked in runs of 64 points and
    /// noise levels 2 to 25 times higher.
    pub fn scenario2(seed: u64) -> Self {
        Self {
            noise: NoiseSpec::LogUniformFactors {
                base_variance: 0.1,
                min_factor: 2.0,
                max_factor: 25.0,
            },
            mask: Some(MaskSpec {
                fraction: 0.22,
                block_len: 64,
            }),
            ..Self::scenario1(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "scenario1" => Ok(Self::scenario1(seed)),
            "scenario2" => Ok(Self::scenario2(seed)),
            other => Err(Error::InvalidConfig(format!("unknown preset '{other}'"))),
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.shape.clone(), self.lengths.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        if self.channels == 0 || self.components == 0 {
            return Err(Error::InvalidConfig(
                "need at least one channel and one component".into(),
            ));
        }
        if let Some(m) = &self.mask {
            if !(0.0..1.0).contains(&m.fraction) {
                return Err(Error::InvalidConfig(format!(
                    "mask fraction {} outside [0, 1)",
                    m.fraction
                )));
            }
            if m.block_len == 0 || m.block_len > grid.size() {
                return Err(Error::InvalidConfig(format!("mask block length {}", m.block_len)));
            }
        }
        let bad = |v: f64| !(v.is_finite() && v >= 0.0);
        match &self.noise {
            NoiseSpec::Uniform { variance } if bad(*variance) => {
                return Err(Error::InvalidConfig(format!("noise variance {variance}")));
            }
            NoiseSpec::LogUniformFactors {
                base_variance,
                min_factor,
                max_factor,
            } if bad(*base_variance) || !(*min_factor > 0.0 && min_factor <= max_factor && max_factor.is_finite()) => {
                return Err(Error::InvalidConfig("invalid log-uniform noise factors".into()));
            }
            NoiseSpec::PerChannel { variances }
                if variances.len() != self.channels || variances.iter().any(|&v| bad(v)) =>
            {
                return Err(Error::InvalidConfig(
                    "per-channel variances do not match the channels".into(),
                ));
            }
            _ => {}
        }
        if let Some(rows) = &self.mixture {
            if rows.len() != self.channels || rows.iter().any(|r| r.len() != self.components) {
                return Err(Error::InvalidConfig("fixed mixture has the wrong shape".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub components: MultiField,
    pub mixture: MixtureMatrix,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub truth: GroundTruth,
    pub data: DataSet,
    pub response: Response,
    pub noise: NoiseCovariance,
    /// The noise realization that was added to the signal.
    pub noise_realization: DataSet,
    pub channel_variances: Vec<f64>,
}

impl Scenario {
    pub fn grid(&self) -> &Grid {
        self.response.grid()
    }

    pub fn model(&self) -> Result<MeasurementModel> {
        MeasurementModel::new(self.response.clone(), self.noise.clone())
    }

    pub fn prior(&self) -> Result<PriorCovariance> {
        let block = HarmonicCovariance::from_spectrum(self.grid(), &self.spec.spectrum)?;
        Ok(PriorCovariance::shared(block, self.spec.components))
    }

    pub fn inference_inputs(&self) -> Result<InferenceInputs> {
        Ok(InferenceInputs {
            data: self.data.clone(),
            model: self.model()?,
            prior: self.prior()?,
        })
    }
}

/// Draws components, mixture, noise levels, masks and noise, in that order,
/// from a ChaCha8 stream seeded by `spec.seed`.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let grid = spec.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let block = HarmonicCovariance::from_spectrum(&grid, &spec.spectrum)?;
    let prior = PriorCovariance::shared(block, spec.components);
    let components = prior.draw_sample(&mut rng);

    let mixture = match &spec.mixture {
        Some(rows) => MixtureMatrix::from_rows(rows)?,
        None => {
            let raw = DMatrix::from_fn(spec.channels, spec.components, |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            });
            let (m, _, _) = normalize_columns(&MixtureMatrix::new(raw)?, &components)?;
            m
        }
    };

    let channel_variances = match &spec.noise {
        NoiseSpec::Uniform { variance } => vec![*variance; spec.channels],
        NoiseSpec::PerChannel { variances } => variances.clone(),
        NoiseSpec::LogUniformFactors {
            base_variance,
            min_factor,
            max_factor,
        } => (0..spec.channels)
            .map(|_| {
                let u: f64 = rng.random();
                base_variance * (min_factor.ln() + u * (max_factor.ln() - min_factor.ln())).exp()
            })
            .collect(),
    };

    let response = match spec.mask {
        Some(m) => {
            let masks = (0..spec.channels)
                .map(|_| mask_blocks(&grid, m.fraction, m.block_len, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Response::from_masks(&grid, masks)?
        }
        None => Response::identity(&grid, spec.channels),
    };

    let noise = NoiseCovariance::per_channel(&grid, &channel_variances)?;
    let noise_realization = noise.draw(&response, &mut rng);
    let data = forward(&response, &mixture, &components)?.add(&noise_realization);

    Ok(Scenario {
        spec: spec.clone(),
        truth: GroundTruth { components, mixture },
        data,
        response,
        noise,
        noise_realization,
        channel_variances,
    })
}

/// One channel's mask: random block starts (with periodic wrap) are
/// accumulated until at least `round(fraction · n)` pixels are masked.
/// `true` marks a measured pixel.
pub fn mask_blocks<R: Rng + ?Sized>(grid: &Grid, fraction: f64, block_len: usize, rng: &mut R) -> Result<Vec<bool>> {
    let n = grid.size();
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!("mask fraction {fraction} outside [0, 1)")));
    }
    if block_len == 0 || block_len > n {
        return Err(Error::InvalidConfig(format!("block length {block_len} for {n} pixels")));
    }
    let target = (fraction * n as f64).round() as usize;
    let mut mask = vec![true; n];
    let mut masked = 0;
    while masked < target {
        let start = rng.random_range(0..n);
        for k in 0..block_len {
            let p = (start + k) % n;
            if mask[p] {
                mask[p] = false;
                masked += 1;
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_fraction_masks_nothing() {
        let g = Grid::unit_interval(64).unwrap();
        let m = mask_blocks(&g, 0.0, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(m.iter().all(|&b| b));
    }

    #[test]
    fn full_length_block_masks_everything() {
        let g = Grid::unit_interval(64).unwrap();
        let m = mask_blocks(&g, 0.5, 64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(m.iter().all(|&b| !b));
    }

    #[test]
    fn infeasible_masks_are_rejected() {
        let g = Grid::unit_interval(64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(mask_blocks(&g, 1.0, 8, &mut rng).is_err());
        assert!(mask_blocks(&g, 0.2, 0, &mut rng).is_err());
        assert!(mask_blocks(&g, 0.2, 65, &mut rng).is_err());
        let mut spec = ScenarioSpec::scenario2(0);
        spec.mask = Some(MaskSpec {
            fraction: 1.0,
            block_len: 64,
        });
        assert!(generate_scenario(&spec).is_err());
    }

    #[test]
    fn presets() {
        let s1 = ScenarioSpec::preset("scenario1", 3).unwrap();
        assert_eq!((s1.shape[0], s1.channels, s1.components), (1024, 5, 2));
        assert!(s1.mask.is_none());
        let s2 = ScenarioSpec::preset("scenario2", 3).unwrap();
        assert_eq!(
            s2.mask,
            Some(MaskSpec {
                fraction: 0.22,
                block_len: 64
            })
        );
        assert!(ScenarioSpec::preset("scenario3", 3).is_err());
    }

    #[test]
    fn scenario_two_noise_levels_in_range() {
        let sc = generate_scenario(&ScenarioSpec::scenario2(42)).unwrap();
        assert_eq!(sc.channel_variances.len(), 5);
        for v in &sc.channel_variances {
            assert!((0.2..=2.5).contains(v), "{v}");
        }
        for i in 0..5 {
            let masked = sc.response.mask(i).iter().filter(|&&b| !b).count();
            assert!((225..=288).contains(&masked), "{masked}");
        }
    }

    #[test]
    fn noiseless_identity_mixture_reproduces_components() {
        let spec = ScenarioSpec {
            shape: vec![32],
            lengths: vec![1.0],
            channels: 2,
            components: 2,
            spectrum: PowerSpectrum::falling(),
            noise: NoiseSpec::Uniform { variance: 0.0 },
            mask: None,
            mixture: Some(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
            seed: 5,
        };
        let sc = generate_scenario(&spec).unwrap();
        for i in 0..2 {
            assert_eq!(sc.data.channel(i), sc.truth.components.component(i).values());
        }
        assert!(sc.model().is_err());
    }
}
