//! Dense reference implementations built from direct sums, independent of
//! the FFT-based operators under test.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use nica::field::{Field, Grid, HarmonicCovariance, MultiField, PowerSpectrum};
use nica::operators::{DataSet, MeasurementModel, MixtureMatrix, NoiseCovariance, PriorCovariance, Response};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Multi-index of pixel `p` in row-major order.
pub fn unravel(shape: &[usize], mut p: usize) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for a in (0..shape.len()).rev() {
        idx[a] = p % shape[a];
        p /= shape[a];
    }
    idx
}

fn signed(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// `V Σ_p f_p exp(+2πi Σ_a k_a p_a / n_a)` for harmonic index `k`.
pub fn direct_dft(grid: &Grid, values: &[f64], k: &[usize]) -> Complex64 {
    let shape = grid.shape();
    let mut acc = Complex64::new(0.0, 0.0);
    for (p, v) in values.iter().enumerate() {
        let x = unravel(shape, p);
        let phase: f64 = x
            .iter()
            .zip(k)
            .zip(shape)
            .map(|((&xi, &ki), &n)| (xi * ki) as f64 / n as f64)
            .sum();
        acc += Complex64::from_polar(*v, 2.0 * PI * phase);
    }
    acc * grid.pixel_volume()
}

/// Matrix of the harmonic-diagonal operator with eigenvalue `g(P(|k|))`,
/// acting on pixel-value vectors: `(1/N) Σ_k g(P(|k|)) cos(2π k·(x_q − x_p))`.
pub fn dense_harmonic_operator(grid: &Grid, spectrum: &PowerSpectrum, g: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let shape = grid.shape();
    let n = grid.size();
    let weights: Vec<(Vec<usize>, f64)> = (0..n)
        .map(|m| {
            let idx = unravel(shape, m);
            let k2: f64 = idx
                .iter()
                .zip(shape)
                .zip(grid.lengths())
                .map(|((&i, &nn), &l)| (signed(i, nn) / l).powi(2))
                .sum();
            (idx, g(spectrum.eval(k2.sqrt())))
        })
        .collect();
    DMatrix::from_fn(n, n, |p, q| {
        let xp = unravel(shape, p);
        let xq = unravel(shape, q);
        weights
            .iter()
            .map(|(m, w)| {
                let phase: f64 = m
                    .iter()
                    .zip(&xp)
                    .zip(&xq)
                    .zip(shape)
                    .map(|(((&mi, &a), &b), &nn)| (mi * ((b + nn - a) % nn)) as f64 / nn as f64)
                    .sum();
                w * (2.0 * PI * phase).cos()
            })
            .sum::<f64>()
            / n as f64
    })
}

pub fn flatten(m: &MultiField) -> DVector<f64> {
    DVector::from_iterator(
        m.len() * m.grid().size(),
        m.components().iter().flat_map(|f| f.values().iter().copied()),
    )
}

pub fn unflatten(grid: &Grid, v: &DVector<f64>, c: usize) -> MultiField {
    let n = grid.size();
    MultiField::new(
        (0..c)
            .map(|j| Field::new(grid.clone(), v.rows(j * n, n).iter().copied().collect()).unwrap())
            .collect(),
    )
    .unwrap()
}

pub fn flatten_data(d: &DataSet) -> DVector<f64> {
    let n = d.grid().size();
    DVector::from_iterator(
        d.channels() * n,
        d.channel_data().iter().flat_map(|c| c.iter().copied()),
    )
}

/// A small random inference problem.
pub struct Instance {
    pub grid: Grid,
    pub spectra: Vec<PowerSpectrum>,
    pub masks: Vec<Vec<bool>>,
    pub variances: Vec<Vec<f64>>,
    pub mixture: MixtureMatrix,
    pub data: DataSet,
    pub model: MeasurementModel,
    pub prior: PriorCovariance,
}

impl Instance {
    pub fn random(rng: &mut ChaCha8Rng, max_n: usize, max_c: usize, max_channels: usize) -> Self {
        let grid = if rng.random_bool(0.3) {
            Grid::new(
                vec![rng.random_range(2..=4), rng.random_range(2..=4)],
                vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)],
            )
            .unwrap()
        } else {
            Grid::new(vec![rng.random_range(4..=max_n)], vec![rng.random_range(0.5..3.0)]).unwrap()
        };
        let c = rng.random_range(1..=max_c);
        let channels = rng.random_range(1..=max_channels);
        Self::random_with(rng, grid, c, channels)
    }

    /// Random spectra, masks, noise, mixture and data on a fixed layout.
    pub fn random_with(rng: &mut ChaCha8Rng, grid: Grid, c: usize, channels: usize) -> Self {
        let spectra: Vec<PowerSpectrum> = (0..c)
            .map(|_| PowerSpectrum::Lorentzian {
                amplitude: rng.random_range(0.2..3.0),
                scale: rng.random_range(0.5..8.0),
            })
            .collect();
        let n = grid.size();
        let masks: Vec<Vec<bool>> = (0..channels)
            .map(|_| {
                let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
                m[0] = true;
                m
            })
            .collect();
        let variances: Vec<Vec<f64>> = (0..channels)
            .map(|_| (0..n).map(|_| rng.random_range(0.05..2.0)).collect())
            .collect();
        let mixture = MixtureMatrix::new(DMatrix::from_fn(channels, c, |_, _| rng.random_range(-1.5..1.5))).unwrap();
        let data = DataSet::new(
            &grid,
            masks
                .iter()
                .map(|m| {
                    m.iter()
                        .map(|&b| if b { rng.random_range(-2.0..2.0) } else { 0.0 })
                        .collect()
                })
                .collect(),
        )
        .unwrap();
        let model = MeasurementModel::new(
            Response::from_masks(&grid, masks.clone()).unwrap(),
            NoiseCovariance::new(variances.clone()).unwrap(),
        )
        .unwrap();
        let prior = PriorCovariance::new(
            spectra
                .iter()
                .map(|s| HarmonicCovariance::from_spectrum(&grid, s).unwrap())
                .collect(),
        )
        .unwrap();
        Self {
            grid,
            spectra,
            masks,
            variances,
            mixture,
            data,
            model,
            prior,
        }
    }

    pub fn components(&self) -> usize {
        self.spectra.len()
    }

    pub fn channels(&self) -> usize {
        self.masks.len()
    }

    fn weight(&self, i: usize, p: usize) -> f64 {
        if self.masks[i][p] {
            1.0 / self.variances[i][p]
        } else {
            0.0
        }
    }

    pub fn dense_prior_inverse(&self) -> DMatrix<f64> {
        let n = self.grid.size();
        let c = self.components();
        let mut out = DMatrix::zeros(c * n, c * n);
        for (j, s) in self.spectra.iter().enumerate() {
            out.view_mut((j * n, j * n), (n, n))
                .copy_from(&dense_harmonic_operator(&self.grid, s, |p| 1.0 / p));
        }
        out
    }

    /// `M† R† N⁻¹ R M + S⁻¹` with `R† = mask / V`.
    pub fn dense_d_inverse(&self) -> DMatrix<f64> {
        let n = self.grid.size();
        let c = self.components();
        let v = self.grid.pixel_volume();
        let mut out = self.dense_prior_inverse();
        for j in 0..c {
            for jj in 0..c {
                for p in 0..n {
                    let w: f64 = (0..self.channels())
                        .map(|i| self.mixture.get(i, j) * self.mixture.get(i, jj) * self.weight(i, p))
                        .sum();
                    out[(j * n + p, jj * n + p)] += w / v;
                }
            }
        }
        out
    }

    pub fn dense_source(&self) -> DVector<f64> {
        let n = self.grid.size();
        let c = self.components();
        let v = self.grid.pixel_volume();
        DVector::from_fn(c * n, |r, _| {
            let (j, p) = (r / n, r % n);
            (0..self.channels())
                .map(|i| self.mixture.get(i, j) * self.weight(i, p) * self.data.channel(i)[p])
                .sum::<f64>()
                / v
        })
    }

    pub fn dense_mean(&self) -> DVector<f64> {
        self.dense_d_inverse().lu().solve(&self.dense_source()).unwrap()
    }

    /// Pixel-value covariance of posterior residuals.
    pub fn dense_residual_covariance(&self) -> DMatrix<f64> {
        self.dense_d_inverse().try_inverse().unwrap() / self.grid.pixel_volume()
    }

    /// `½⟨Σ_i Σ_p w (Ms)²⟩ − ⟨Σ_i Σ_p d w (Ms)⟩ + ½ m†S⁻¹m`, evaluated term by term.
    pub fn dense_sampled_kl(&self, mixture: &MixtureMatrix, mean: &MultiField, samples: &[MultiField]) -> f64 {
        let n = self.grid.size();
        let mut quad = 0.0;
        let mut lin = 0.0;
        for s in samples {
            for i in 0..self.channels() {
                for p in 0..n {
                    let pred: f64 = (0..self.components())
                        .map(|j| mixture.get(i, j) * s.component(j).values()[p])
                        .sum();
                    quad += self.weight(i, p) * pred * pred;
                    lin += self.weight(i, p) * self.data.channel(i)[p] * pred;
                }
            }
        }
        let l = samples.len() as f64;
        let m = flatten(mean);
        let prior = (m.transpose() * self.dense_prior_inverse() * &m)[(0, 0)] * self.grid.pixel_volume();
        0.5 * quad / l - lin / l + 0.5 * prior
    }

    /// Per-channel weighted least squares over the stacked samples, solved by SVD.
    pub fn dense_mixture_update(&self, samples: &[MultiField]) -> DMatrix<f64> {
        let n = self.grid.size();
        let c = self.components();
        let mut out = DMatrix::zeros(self.channels(), c);
        for i in 0..self.channels() {
            let rows = samples.len() * n;
            let design = DMatrix::from_fn(rows, c, |r, j| {
                let (l, p) = (r / n, r % n);
                self.weight(i, p).sqrt() * samples[l].component(j).values()[p]
            });
            let target = DVector::from_fn(rows, |r, _| {
                let p = r % n;
                self.weight(i, p).sqrt() * self.data.channel(i)[p]
            });
            let sol = design.svd(true, true).solve(&target, 1e-14).unwrap();
            out.set_row(i, &sol.transpose());
        }
        out
    }

    pub fn random_multifield(&self, rng: &mut ChaCha8Rng) -> MultiField {
        let n = self.grid.size();
        MultiField::new(
            (0..self.components())
                .map(|_| Field::new(self.grid.clone(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap())
                .collect(),
        )
        .unwrap()
    }
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
