//! Periodic regular grids, real-valued fields and harmonic-diagonal covariances.
//!
//! The harmonic transform follows the continuum convention
//! `f(k) = ∫ dx f(x) exp(+2πi k·x)`, discretized as a pixel-volume weighted
//! sum. The inverse carries the factor `1 / total volume`, which makes it the
//! adjoint of the forward transform under the volume-weighted field inner
//! product `⟨a, b⟩ = V Σ_p a_p b_p` and keeps the round trip exact.
//!
//! Only the Hermitian-independent half of the modes is stored: all axes but
//! the last are kept in full FFT order, the last axis keeps `n/2 + 1` entries.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A periodic regular grid with per-axis pixel counts and box lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    shape: Vec<usize>,
    lengths: Vec<f64>,
}

impl Grid {
    pub fn new(shape: Vec<usize>, lengths: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidGrid("grid needs at least one axis".into()));
        }
        if shape.len() != lengths.len() {
            return Err(Error::InvalidGrid(format!(
                "{} axes in shape but {} lengths",
                shape.len(),
                lengths.len()
            )));
        }
        if let Some(n) = shape.iter().find(|&&n| n < 2) {
            return Err(Error::InvalidGrid(format!("axis with {n} pixels, need at least 2")));
        }
        if let Some(l) = lengths.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidGrid(format!("box length {l} must be positive")));
        }
        Ok(Self { shape, lengths })
    }

    /// One-dimensional grid over the unit interval.
    pub fn unit_interval(n: usize) -> Result<Self> {
        Self::new(vec![n], vec![1.0])
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    /// Number of pixels.
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn total_volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    pub fn pixel_volume(&self) -> f64 {
        self.total_volume() / self.size() as f64
    }

    /// Shape of the stored half spectrum.
    pub fn harmonic_shape(&self) -> Vec<usize> {
        let mut h = self.shape.clone();
        let last = h.len() - 1;
        h[last] = h[last] / 2 + 1;
        h
    }

    pub fn harmonic_size(&self) -> usize {
        self.harmonic_shape().iter().product()
    }

    /// Euclidean wavenumber magnitude (cycles per unit length) of every
    /// stored harmonic mode, in storage order.
    pub fn mode_wavenumbers(&self) -> Vec<f64> {
        let hshape = self.harmonic_shape();
        let mut out = Vec::with_capacity(self.harmonic_size());
        let mut idx = vec![0usize; hshape.len()];
        for _ in 0..self.harmonic_size() {
            let k2: f64 = idx
                .iter()
                .zip(&self.shape)
                .zip(&self.lengths)
                .map(|((&i, &n), &l)| {
                    let m = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
                    (m / l).powi(2)
                })
                .sum();
            out.push(k2.sqrt());
            for a in (0..hshape.len()).rev() {
                idx[a] += 1;
                if idx[a] < hshape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        out
    }

    /// Physical coordinates of pixel `p` (row-major order).
    pub fn position(&self, mut p: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        for a in (0..self.dim()).rev() {
            let i = p % self.shape[a];
            p /= self.shape[a];
            x[a] = i as f64 * self.lengths[a] / self.shape[a] as f64;
        }
        x
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "grid{:?} over {:?}", self.shape, self.lengths)
    }
}

/// A real scalar field sampled on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.size() {
            return Err(Error::ShapeMismatch(format!("{} values for {}", values.len(), grid)));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self {
            values: vec![0.0; grid.size()],
            grid: grid.clone(),
        }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = (0..grid.size()).map(|p| f(&grid.position(p))).collect();
        Self::new(grid.clone(), values)
    }

    pub(crate) fn from_raw(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.size());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Volume-weighted inner product.
    pub fn dot(&self, other: &Field) -> f64 {
        self.grid.pixel_volume() * dot_plain(&self.values, &other.values)
    }

    pub fn scaled(&self, a: f64) -> Field {
        Field::from_raw(self.grid.clone(), self.values.iter().map(|v| a * v).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn dot_plain(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The ordered list of component fields `s = (s_1, ..., s_c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiField {
    components: Vec<Field>,
}

impl MultiField {
    pub fn new(components: Vec<Field>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::ShapeMismatch("multi-field needs a component".into()))?;
        if components.iter().any(|f| f.grid() != first.grid()) {
            return Err(Error::ShapeMismatch("components live on different grids".into()));
        }
        Ok(Self { components })
    }

    pub fn zeros(grid: &Grid, count: usize) -> Self {
        assert!(count > 0, "multi-field needs a component");
        Self {
            components: (0..count).map(|_| Field::zeros(grid)).collect(),
        }
    }

    pub fn grid(&self) -> &Grid {
        self.components[0].grid()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn components(&self) -> &[Field] {
        &self.components
    }

    pub fn component(&self, j: usize) -> &Field {
        &self.components[j]
    }

    pub fn component_mut(&mut self, j: usize) -> &mut Field {
        &mut self.components[j]
    }

    pub fn into_components(self) -> Vec<Field> {
        self.components
    }

    pub(crate) fn check_compatible(&self, other: &MultiField) -> Result<()> {
        if self.len() != other.len() || self.grid() != other.grid() {
            return Err(Error::ShapeMismatch(format!(
                "{} components on {} vs {} components on {}",
                self.len(),
                self.grid(),
                other.len(),
                other.grid()
            )));
        }
        Ok(())
    }

    /// Volume-weighted inner product summed over components.
    pub fn dot(&self, other: &MultiField) -> f64 {
        self.components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.components.iter().fold(0.0, |m, f| m.max(f.max_abs()))
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &MultiField) {
        for (f, g) in self.components.iter_mut().zip(&x.components) {
            for (v, w) in f.values.iter_mut().zip(&g.values) {
                *v += a * w;
            }
        }
    }

    pub fn scaled(&self, a: f64) -> MultiField {
        MultiField {
            components: self.components.iter().map(|f| f.scaled(a)).collect(),
        }
    }

    pub fn add(&self, other: &MultiField) -> MultiField {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &MultiField) -> MultiField {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.components.iter().all(|f| f.values.iter().all(|v| v.is_finite()))
    }
}

/// Isotropic power spectrum `P(|k|)`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PowerSpectrum {
    /// `P(k) = value`
    Flat { value: f64 },
    /// `P(k) = amplitude / (scale k² + 1)`
    Lorentzian { amplitude: f64, scale: f64 },
    #[serde(skip)]
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl PowerSpectrum {
    /// `1 / (4k² + 1)`, the falling spectrum used by the shipped scenarios.
    pub fn falling() -> Self {
        PowerSpectrum::Lorentzian {
            amplitude: 1.0,
            scale: 4.0,
        }
    }

    pub fn custom(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        PowerSpectrum::Custom(Arc::new(f))
    }

    pub fn eval(&self, k: f64) -> f64 {
        match self {
            PowerSpectrum::Flat { value } => *value,
            PowerSpectrum::Lorentzian { amplitude, scale } => amplitude / (scale * k * k + 1.0),
            PowerSpectrum::Custom(f) => f(k),
        }
    }
}

impl fmt::Debug for PowerSpectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PowerSpectrum::Flat { value } => write!(f, "Flat({value})"),
            PowerSpectrum::Lorentzian { amplitude, scale } => {
                write!(f, "Lorentzian({amplitude} / ({scale} k^2 + 1))")
            }
            PowerSpectrum::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

type AxisPlans = (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>);

/// Planned forward and inverse harmonic transforms for one grid.
pub struct HarmonicTransform {
    grid: Grid,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    // forward/inverse complex plans for every axis but the last
    axes: Vec<AxisPlans>,
}

impl fmt::Debug for HarmonicTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HarmonicTransform").field("grid", &self.grid).finish()
    }
}

impl HarmonicTransform {
    pub fn new(grid: &Grid) -> Self {
        let last = *grid.shape().last().unwrap();
        let mut real = RealFftPlanner::<f64>::new();
        let mut cplx = FftPlanner::<f64>::new();
        let axes = grid.shape()[..grid.dim() - 1]
            .iter()
            .map(|&n| (cplx.plan_fft_forward(n), cplx.plan_fft_inverse(n)))
            .collect();
        Self {
            grid: grid.clone(),
            r2c: real.plan_fft_forward(last),
            c2r: real.plan_fft_inverse(last),
            axes,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Half-spectrum coefficients of `f` under the `exp(+2πikx)` convention.
    pub fn forward(&self, f: &Field) -> Result<Vec<Complex64>> {
        if f.grid() != &self.grid {
            return Err(Error::ShapeMismatch(format!(
                "field on {} for transform on {}",
                f.grid(),
                self.grid
            )));
        }
        if let Some(i) = f.values().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(self.forward_unchecked(f.values()))
    }

    pub(crate) fn forward_unchecked(&self, values: &[f64]) -> Vec<Complex64> {
        let shape = self.grid.shape();
        let nl = *shape.last().unwrap();
        let hl = nl / 2 + 1;
        let rows = values.len() / nl;
        let mut out = vec![Complex64::new(0.0, 0.0); rows * hl];
        let mut input = self.r2c.make_input_vec();
        let mut spec = self.r2c.make_output_vec();
        let mut scratch = self.r2c.make_scratch_vec();
        for r in 0..rows {
            input.copy_from_slice(&values[r * nl..(r + 1) * nl]);
            self.r2c
                .process_with_scratch(&mut input, &mut spec, &mut scratch)
                .expect("buffer sizes come from the plan");
            out[r * hl..(r + 1) * hl].copy_from_slice(&spec);
        }
        self.along_leading_axes(&mut out, true);
        let v = self.grid.pixel_volume();
        for c in out.iter_mut() {
            *c = c.conj() * v;
        }
        out
    }

    /// Inverse of [`forward`](Self::forward); also its adjoint under the
    /// volume-weighted inner products.
    pub fn inverse(&self, coeffs: &[Complex64]) -> Result<Field> {
        if coeffs.len() != self.grid.harmonic_size() {
            return Err(Error::ShapeMismatch(format!(
                "{} coefficients for {} stored modes",
                coeffs.len(),
                self.grid.harmonic_size()
            )));
        }
        Ok(Field::from_raw(self.grid.clone(), self.inverse_unchecked(coeffs)))
    }

    pub(crate) fn inverse_unchecked(&self, coeffs: &[Complex64]) -> Vec<f64> {
        let nl = *self.grid.shape().last().unwrap();
        let hl = nl / 2 + 1;
        let inv_vol = 1.0 / self.grid.total_volume();
        let mut work: Vec<Complex64> = coeffs.iter().map(|c| c.conj() * inv_vol).collect();
        self.along_leading_axes(&mut work, false);
        let rows = work.len() / hl;
        let mut out = vec![0.0; rows * nl];
        let mut spec = self.c2r.make_input_vec();
        let mut real = self.c2r.make_output_vec();
        let mut scratch = self.c2r.make_scratch_vec();
        for r in 0..rows {
            spec.copy_from_slice(&work[r * hl..(r + 1) * hl]);
            // self-conjugate modes are real for Hermitian input; drop round-off
            spec[0].im = 0.0;
            if nl.is_multiple_of(2) {
                spec[hl - 1].im = 0.0;
            }
            self.c2r
                .process_with_scratch(&mut spec, &mut real, &mut scratch)
                .expect("buffer sizes come from the plan");
            out[r * nl..(r + 1) * nl].copy_from_slice(&real);
        }
        out
    }

    fn along_leading_axes(&self, data: &mut [Complex64], forward: bool) {
        if self.axes.is_empty() {
            return;
        }
        let hshape = self.grid.harmonic_shape();
        for (a, (fwd, inv)) in self.axes.iter().enumerate() {
            let plan = if forward { fwd } else { inv };
            let n = hshape[a];
            let stride: usize = hshape[a + 1..].iter().product();
            let outer: usize = hshape[..a].iter().product();
            let mut line = vec![Complex64::new(0.0, 0.0); n];
            for o in 0..outer {
                for s in 0..stride {
                    let base = o * n * stride + s;
                    for (i, x) in line.iter_mut().enumerate() {
                        *x = data[base + i * stride];
                    }
                    plan.process(&mut line);
                    for (i, x) in line.iter().enumerate() {
                        data[base + i * stride] = *x;
                    }
                }
            }
        }
    }
}

/// Covariance `S` of a statistically homogeneous field: diagonal in the
/// harmonic basis with eigenvalue `P(|k|)` per mode.
///
/// As an operator on fields `S f = F⁻¹ (P ⊙ F f)`; the pixel-value
/// covariance matrix of a field drawn from `𝒢(s, S)` is `S / V`.
#[derive(Debug, Clone)]
pub struct HarmonicCovariance {
    transform: Arc<HarmonicTransform>,
    diag: Vec<f64>,
}

impl HarmonicCovariance {
    pub fn from_spectrum(grid: &Grid, spectrum: &PowerSpectrum) -> Result<Self> {
        let transform = Arc::new(HarmonicTransform::new(grid));
        Self::with_transform(transform, spectrum)
    }

    /// Reuses an existing transform plan.
    pub fn with_transform(transform: Arc<HarmonicTransform>, spectrum: &PowerSpectrum) -> Result<Self> {
        let diag = transform
            .grid()
            .mode_wavenumbers()
            .into_iter()
            .map(|k| {
                let p = spectrum.eval(k);
                if !p.is_finite() {
                    Err(Error::NonFinite(0))
                } else if p < 0.0 {
                    Err(Error::NegativePower { k, power: p })
                } else {
                    Ok(p)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { transform, diag })
    }

    pub fn grid(&self) -> &Grid {
        self.transform.grid()
    }

    pub fn transform(&self) -> &Arc<HarmonicTransform> {
        &self.transform
    }

    /// Eigenvalues per stored harmonic mode.
    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn zero_modes(&self) -> usize {
        self.diag.iter().filter(|&&d| d == 0.0).count()
    }

    pub fn is_invertible(&self) -> bool {
        self.zero_modes() == 0
    }

    fn check(&self, f: &Field) -> Result<()> {
        if f.grid() != self.grid() {
            return Err(Error::ShapeMismatch(format!(
                "field on {} for covariance on {}",
                f.grid(),
                self.grid()
            )));
        }
        Ok(())
    }

    fn apply_weights(&self, f: &Field, weight: impl Fn(f64) -> f64) -> Field {
        let mut coeffs = self.transform.forward_unchecked(f.values());
        for (c, &d) in coeffs.iter_mut().zip(&self.diag) {
            *c *= weight(d);
        }
        Field::from_raw(self.grid().clone(), self.transform.inverse_unchecked(&coeffs))
    }

    pub fn apply(&self, f: &Field) -> Result<Field> {
        self.check(f)?;
        Ok(self.apply_weights(f, |d| d))
    }

    /// `S⁻¹ f`; rejected when any mode carries zero power.
    pub fn apply_inverse(&self, f: &Field) -> Result<Field> {
        self.check(f)?;
        let zeros = self.zero_modes();
        if zeros > 0 {
            return Err(Error::SingularCovariance(zeros));
        }
        Ok(self.apply_weights(f, |d| 1.0 / d))
    }

    pub fn apply_sqrt(&self, f: &Field) -> Result<Field> {
        self.check(f)?;
        Ok(self.apply_weights(f, f64::sqrt))
    }

    /// Draws a zero-mean realization with pixel covariance `S / V`:
    /// white pixel noise, weighted per mode by the square root of the
    /// eigenvalue.
    pub fn draw_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Field {
        let grid = self.grid();
        let white: Vec<f64> = (0..grid.size()).map(|_| rng.sample(StandardNormal)).collect();
        let white = Field::from_raw(grid.clone(), white);
        self.apply_weights(&white, f64::sqrt)
            .scaled(1.0 / grid.pixel_volume().sqrt())
    }
}
