//! Wiener filtering of the components for a fixed mixture.
//!
//! `D⁻¹ = M† R† N⁻¹ R M + S⁻¹`, `j = M† R† N⁻¹ d`, `m = D j`. `D` itself is
//! never formed; its diagonal is estimated from posterior samples.

use crate::cg::{cg_solve, CgConfig, CgStats};
use crate::error::{Error, Result};
use crate::field::{Field, MultiField};
use crate::operators::{adjoint, apply_d_inverse, DataSet, MeasurementModel, MixtureMatrix, PriorCovariance};

#[derive(Debug, Clone, Copy)]
pub struct WienerProblem<'a> {
    pub model: &'a MeasurementModel,
    pub mixture: &'a MixtureMatrix,
    pub prior: &'a PriorCovariance,
    pub data: &'a DataSet,
}

impl<'a> WienerProblem<'a> {
    pub fn new(
        model: &'a MeasurementModel,
        mixture: &'a MixtureMatrix,
        prior: &'a PriorCovariance,
        data: &'a DataSet,
    ) -> Result<Self> {
        if mixture.components() != prior.components() {
            return Err(Error::ShapeMismatch(format!(
                "mixture has {} columns but prior {} blocks",
                mixture.components(),
                prior.components()
            )));
        }
        if mixture.channels() != model.channels() || data.channels() != model.channels() {
            return Err(Error::ShapeMismatch(format!(
                "mixture rows {}, model channels {}, data channels {}",
                mixture.channels(),
                model.channels(),
                data.channels()
            )));
        }
        if prior.grid() != model.grid() || data.grid() != model.grid() {
            return Err(Error::ShapeMismatch("prior, data and model grids differ".into()));
        }
        if !prior.is_invertible() {
            let zeros = (0..prior.components()).map(|j| prior.block(j).zero_modes()).sum();
            return Err(Error::SingularCovariance(zeros));
        }
        Ok(Self {
            model,
            mixture,
            prior,
            data,
        })
    }

    /// Same operators, different data.
    pub fn with_data<'b>(&self, data: &'b DataSet) -> WienerProblem<'b>
    where
        'a: 'b,
    {
        WienerProblem {
            model: self.model,
            mixture: self.mixture,
            prior: self.prior,
            data,
        }
    }

    pub fn components(&self) -> usize {
        self.prior.components()
    }

    /// `j = M† R† N⁻¹ d`
    pub fn information_source(&self) -> Result<MultiField> {
        let weighted = self.model.apply_noise_inverse(self.data)?;
        adjoint(self.model.response(), self.mixture, &weighted)
    }

    pub fn apply_d_inverse(&self, m: &MultiField) -> Result<MultiField> {
        apply_d_inverse(self.model, self.mixture, self.prior, m)
    }

    /// Solves `D⁻¹ m = j` by conjugate gradients from `x0` (zero if absent).
    /// Non-convergence surfaces as [`Error::NotConverged`] with the best iterate.
    pub fn wiener_mean(&self, cfg: &CgConfig, x0: Option<&MultiField>) -> Result<(MultiField, CgStats)> {
        let j = self.information_source()?;
        let start = match x0 {
            Some(x) => x.clone(),
            None => MultiField::zeros(self.model.grid(), self.components()),
        };
        let out = cg_solve(|x| self.apply_d_inverse(x), &j, &start, cfg)?;
        if !out.stats.converged {
            return Err(Error::NotConverged {
                stats: out.stats,
                best: Box::new(out.x),
            });
        }
        Ok((out.x, out.stats))
    }
}

/// Per-pixel `D_xx = ⟨(s_x − m_x)²⟩` over the samples, around the known mean.
pub fn posterior_variance(samples: &[MultiField], mean: &MultiField) -> Result<MultiField> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut acc: Vec<Vec<f64>> = mean.components().iter().map(|f| vec![0.0; f.values().len()]).collect();
    for s in samples {
        s.check_compatible(mean)?;
        for ((a, sf), mf) in acc.iter_mut().zip(s.components()).zip(mean.components()) {
            for ((a, x), m) in a.iter_mut().zip(sf.values()).zip(mf.values()) {
                *a += (x - m) * (x - m);
            }
        }
    }
    let inv = 1.0 / samples.len() as f64;
    MultiField::new(
        acc.into_iter()
            .map(|mut a| {
                a.iter_mut().for_each(|v| *v *= inv);
                Field::new(mean.grid().clone(), a)
            })
            .collect::<Result<_>>()?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Grid, HarmonicCovariance, PowerSpectrum};
    use crate::operators::{NoiseCovariance, Response};

    fn setup(grid: &Grid, variance: f64) -> (MeasurementModel, PriorCovariance) {
        let model = MeasurementModel::new(
            Response::identity(grid, 2),
            NoiseCovariance::uniform(grid, 2, variance).unwrap(),
        )
        .unwrap();
        let prior = PriorCovariance::shared(
            HarmonicCovariance::from_spectrum(grid, &PowerSpectrum::falling()).unwrap(),
            2,
        );
        (model, prior)
    }

    #[test]
    fn zero_data_gives_zero_source_and_mean() {
        let g = Grid::unit_interval(16).unwrap();
        let (model, prior) = setup(&g, 0.1);
        let d = DataSet::zeros(&g, 2);
        let mix = MixtureMatrix::identity(2);
        let p = WienerProblem::new(&model, &mix, &prior, &d).unwrap();
        assert_eq!(p.information_source().unwrap().max_abs(), 0.0);
        let (m, stats) = p.wiener_mean(&CgConfig::relative(1e-10), None).unwrap();
        assert_eq!(m.max_abs(), 0.0);
        assert_eq!(stats.iterations, 0);
    }

    #[test]
    fn source_equals_data_for_identity_operators() {
        let g = Grid::new(vec![8], vec![8.0]).unwrap();
        let (model, prior) = setup(&g, 1.0);
        let d = DataSet::new(&g, vec![(0..8).map(|i| i as f64).collect(), vec![-1.0; 8]]).unwrap();
        let mix = MixtureMatrix::identity(2);
        let j = WienerProblem::new(&model, &mix, &prior, &d)
            .unwrap()
            .information_source()
            .unwrap();
        for c in 0..2 {
            assert_eq!(j.component(c).values(), d.channel(c));
        }
    }

    #[test]
    fn huge_noise_drives_mean_to_zero() {
        let g = Grid::unit_interval(16).unwrap();
        let (model, prior) = setup(&g, 1e8);
        let d = DataSet::new(&g, vec![vec![1.0; 16], vec![-1.0; 16]]).unwrap();
        let mix = MixtureMatrix::identity(2);
        let (m, _) = WienerProblem::new(&model, &mix, &prior, &d)
            .unwrap()
            .wiener_mean(&CgConfig::relative(1e-10), None)
            .unwrap();
        assert!(m.max_abs() < 1e-6, "{}", m.max_abs());
    }

    #[test]
    fn mismatched_problem_is_rejected() {
        let g = Grid::unit_interval(16).unwrap();
        let (model, prior) = setup(&g, 1.0);
        let d = DataSet::zeros(&g, 2);
        let mix = MixtureMatrix::zeros(2, 3);
        assert!(WienerProblem::new(&model, &mix, &prior, &d).is_err());
    }

    #[test]
    fn non_convergence_carries_best_iterate() {
        let g = Grid::unit_interval(64).unwrap();
        let (model, prior) = setup(&g, 0.1);
        let d = DataSet::new(&g, vec![vec![1.0; 64], (0..64).map(|i| (i as f64).sin()).collect()]).unwrap();
        let mix = MixtureMatrix::from_rows(&[vec![1.0, 0.3], vec![0.2, 1.0]]).unwrap();
        let p = WienerProblem::new(&model, &mix, &prior, &d).unwrap();
        match p.wiener_mean(&CgConfig::new(0.0, 1e-14, 2).unwrap(), None) {
            Err(Error::NotConverged { stats, best }) => {
                assert_eq!(stats.iterations, 2);
                assert!(best.all_finite());
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn variance_of_exact_samples_is_zero() {
        let g = Grid::unit_interval(8).unwrap();
        let m = MultiField::new(vec![Field::from_fn(&g, |x| x[0]).unwrap()]).unwrap();
        let v = posterior_variance(&[m.clone(), m.clone(), m.clone()], &m).unwrap();
        assert_eq!(v.max_abs(), 0.0);
    }

    #[test]
    fn symmetric_pair_gives_squared_offset() {
        let g = Grid::unit_interval(8).unwrap();
        let m = MultiField::new(vec![Field::from_fn(&g, |x| x[0]).unwrap()]).unwrap();
        let delta = MultiField::new(vec![Field::from_fn(&g, |x| 0.5 + x[0] * x[0]).unwrap()]).unwrap();
        let v = posterior_variance(&[m.add(&delta), m.sub(&delta)], &m).unwrap();
        for (a, d) in v.component(0).values().iter().zip(delta.component(0).values()) {
            assert!((a - d * d).abs() < 1e-14);
        }
        assert!(matches!(posterior_variance(&[], &m), Err(Error::EmptySamples)));
    }
}
