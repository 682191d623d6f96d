//! The measurement model `d = R M s + n` as matrix-free operators.
//!
//! Fields carry the volume-weighted inner product, data vectors the plain
//! one. With pointwise sampling `(R s)_X = s(x_X)` the adjoint therefore
//! injects data back as `R† d = d / V` on measured pixels.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::field::{Field, Grid, HarmonicCovariance, MultiField};

/// Response of a single channel.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelResponse {
    Identity,
    /// `true` where the sensor delivered a measurement.
    Mask(Vec<bool>),
}

impl ChannelResponse {
    pub fn is_measured(&self, p: usize) -> bool {
        match self {
            ChannelResponse::Identity => true,
            ChannelResponse::Mask(m) => m[p],
        }
    }
}

/// Per-channel response operator `R_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    grid: Grid,
    channels: Vec<ChannelResponse>,
}

impl Response {
    pub fn identity(grid: &Grid, channels: usize) -> Self {
        Self {
            grid: grid.clone(),
            channels: vec![ChannelResponse::Identity; channels],
        }
    }

    pub fn from_masks(grid: &Grid, masks: Vec<Vec<bool>>) -> Result<Self> {
        if let Some(m) = masks.iter().find(|m| m.len() != grid.size()) {
            return Err(Error::ShapeMismatch(format!("mask of length {} on {}", m.len(), grid)));
        }
        Ok(Self {
            grid: grid.clone(),
            channels: masks
                .into_iter()
                .map(|m| {
                    if m.iter().all(|&b| b) {
                        ChannelResponse::Identity
                    } else {
                        ChannelResponse::Mask(m)
                    }
                })
                .collect(),
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, i: usize) -> &ChannelResponse {
        &self.channels[i]
    }

    pub fn mask(&self, i: usize) -> Vec<bool> {
        (0..self.grid.size()).map(|p| self.channels[i].is_measured(p)).collect()
    }

    pub fn measured_count(&self, i: usize) -> usize {
        match &self.channels[i] {
            ChannelResponse::Identity => self.grid.size(),
            ChannelResponse::Mask(m) => m.iter().filter(|&&b| b).count(),
        }
    }

    /// `R_i f`: the field sampled at every pixel, zero where unmeasured.
    pub fn apply_channel(&self, i: usize, values: &[f64]) -> Vec<f64> {
        match &self.channels[i] {
            ChannelResponse::Identity => values.to_vec(),
            ChannelResponse::Mask(m) => values.iter().zip(m).map(|(&v, &b)| if b { v } else { 0.0 }).collect(),
        }
    }

    /// `R_i† d_i`
    pub fn adjoint_channel(&self, i: usize, data: &[f64]) -> Vec<f64> {
        let inv_v = 1.0 / self.grid.pixel_volume();
        match &self.channels[i] {
            ChannelResponse::Identity => data.iter().map(|d| d * inv_v).collect(),
            ChannelResponse::Mask(m) => data
                .iter()
                .zip(m)
                .map(|(&d, &b)| if b { d * inv_v } else { 0.0 })
                .collect(),
        }
    }
}

/// Diagonal per-channel noise covariance `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCovariance {
    variances: Vec<Vec<f64>>,
}

impl NoiseCovariance {
    pub fn new(variances: Vec<Vec<f64>>) -> Result<Self> {
        for (i, ch) in variances.iter().enumerate() {
            if let Some(p) = ch.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonPositiveVariance {
                    channel: i,
                    pixel: p,
                    value: ch[p],
                });
            }
        }
        Ok(Self { variances })
    }

    pub fn uniform(grid: &Grid, channels: usize, variance: f64) -> Result<Self> {
        Self::per_channel(grid, &vec![variance; channels])
    }

    pub fn per_channel(grid: &Grid, variances: &[f64]) -> Result<Self> {
        Self::new(variances.iter().map(|&v| vec![v; grid.size()]).collect())
    }

    pub fn channels(&self) -> usize {
        self.variances.len()
    }

    pub fn variance(&self, i: usize) -> &[f64] {
        &self.variances[i]
    }

    /// `N⁻¹ d` with every variance required positive.
    pub fn apply_inverse(&self, d: &DataSet) -> Result<DataSet> {
        if d.channels() != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "{} data channels vs {} noise channels",
                d.channels(),
                self.channels()
            )));
        }
        let mut out = Vec::with_capacity(d.channels());
        for (i, (ch, var)) in d.channels.iter().zip(&self.variances).enumerate() {
            if var.len() != ch.len() {
                return Err(Error::ShapeMismatch(format!("channel {i} variance length")));
            }
            if let Some(p) = var.iter().position(|&v| v <= 0.0) {
                return Err(Error::NonPositiveVariance {
                    channel: i,
                    pixel: p,
                    value: var[p],
                });
            }
            out.push(ch.iter().zip(var).map(|(x, v)| x / v).collect());
        }
        Ok(DataSet {
            grid: d.grid.clone(),
            channels: out,
        })
    }

    /// Draws `n ~ 𝒢(0, N)` on measured points; unmeasured points stay zero.
    pub fn draw<Rn: Rng + ?Sized>(&self, response: &Response, rng: &mut Rn) -> DataSet {
        let channels = self
            .variances
            .iter()
            .enumerate()
            .map(|(i, var)| {
                var.iter()
                    .enumerate()
                    .map(|(p, v)| {
                        if response.channel(i).is_measured(p) {
                            let z: f64 = rng.sample(rand_distr::StandardNormal);
                            z * v.sqrt()
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        DataSet {
            grid: response.grid().clone(),
            channels,
        }
    }
}

/// Multi-channel data `d`. Unmeasured points hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    grid: Grid,
    channels: Vec<Vec<f64>>,
}

impl DataSet {
    pub fn new(grid: &Grid, channels: Vec<Vec<f64>>) -> Result<Self> {
        for (i, ch) in channels.iter().enumerate() {
            if ch.len() != grid.size() {
                return Err(Error::ShapeMismatch(format!(
                    "channel {i} has {} points on {}",
                    ch.len(),
                    grid
                )));
            }
            if let Some(p) = ch.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(p));
            }
        }
        Ok(Self {
            grid: grid.clone(),
            channels,
        })
    }

    pub fn zeros(grid: &Grid, channels: usize) -> Self {
        Self {
            grid: grid.clone(),
            channels: vec![vec![0.0; grid.size()]; channels],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channel_data(&self) -> &[Vec<f64>] {
        &self.channels
    }

    /// Plain inner product over all channels.
    pub fn dot(&self, other: &DataSet) -> f64 {
        self.channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| crate::field::dot_plain(a, b))
            .sum()
    }

    pub fn add(&self, other: &DataSet) -> DataSet {
        DataSet {
            grid: self.grid.clone(),
            channels: self
                .channels
                .iter()
                .zip(&other.channels)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                .collect(),
        }
    }

    pub fn sub(&self, other: &DataSet) -> DataSet {
        self.add(&other.scaled(-1.0))
    }

    pub fn scaled(&self, a: f64) -> DataSet {
        DataSet {
            grid: self.grid.clone(),
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|x| a * x).collect())
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.channels.iter().flatten().fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

/// Channels × components mixture `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureMatrix(DMatrix<f64>);

impl MixtureMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 || m.ncols() == 0 {
            return Err(Error::ShapeMismatch("empty mixture matrix".into()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(m.iter().position(|v| !v.is_finite()).unwrap()));
        }
        if m.nrows() < m.ncols() {
            log::warn!(
                "mixture has fewer channels ({}) than components ({})",
                m.nrows(),
                m.ncols()
            );
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::ShapeMismatch("ragged mixture rows".into()));
        }
        Self::new(DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j]))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn zeros(channels: usize, components: usize) -> Self {
        Self(DMatrix::zeros(channels, components))
    }

    pub fn channels(&self) -> usize {
        self.0.nrows()
    }

    pub fn components(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn column_norm(&self, j: usize) -> f64 {
        self.0.column(j).norm()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.channels())
            .map(|i| self.0.row(i).iter().copied().collect())
            .collect()
    }
}

/// Block-diagonal prior covariance `S`, one harmonic block per component.
#[derive(Debug, Clone)]
pub struct PriorCovariance {
    blocks: Vec<HarmonicCovariance>,
}

impl PriorCovariance {
    pub fn new(blocks: Vec<HarmonicCovariance>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::ShapeMismatch("prior needs at least one block".into()))?;
        if blocks.iter().any(|b| b.grid() != first.grid()) {
            return Err(Error::ShapeMismatch("prior blocks on different grids".into()));
        }
        Ok(Self { blocks })
    }

    /// `c` independent components sharing one covariance.
    pub fn shared(block: HarmonicCovariance, components: usize) -> Self {
        Self {
            blocks: vec![block; components],
        }
    }

    pub fn grid(&self) -> &Grid {
        self.blocks[0].grid()
    }

    pub fn components(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, j: usize) -> &HarmonicCovariance {
        &self.blocks[j]
    }

    pub fn is_invertible(&self) -> bool {
        self.blocks.iter().all(HarmonicCovariance::is_invertible)
    }

    fn check(&self, s: &MultiField) -> Result<()> {
        if s.len() != self.components() || s.grid() != self.grid() {
            return Err(Error::ShapeMismatch(format!(
                "{} components on {} for a prior of {} blocks on {}",
                s.len(),
                s.grid(),
                self.components(),
                self.grid()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, s: &MultiField) -> Result<MultiField> {
        self.check(s)?;
        MultiField::new(
            self.blocks
                .iter()
                .zip(s.components())
                .map(|(b, f)| b.apply(f))
                .collect::<Result<_>>()?,
        )
    }

    pub fn apply_inverse(&self, s: &MultiField) -> Result<MultiField> {
        self.check(s)?;
        MultiField::new(
            self.blocks
                .iter()
                .zip(s.components())
                .map(|(b, f)| b.apply_inverse(f))
                .collect::<Result<_>>()?,
        )
    }

    pub fn draw_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> MultiField {
        MultiField::new(self.blocks.iter().map(|b| b.draw_sample(rng)).collect()).expect("blocks share a grid")
    }
}

fn check_mixture(m: &MixtureMatrix, components: usize, channels: usize) -> Result<()> {
    if m.components() != components || m.channels() != channels {
        return Err(Error::ShapeMismatch(format!(
            "mixture is {}x{}, expected {}x{}",
            m.channels(),
            m.components(),
            channels,
            components
        )));
    }
    Ok(())
}

/// Noiseless data prediction `R M s`.
pub fn forward(r: &Response, m: &MixtureMatrix, s: &MultiField) -> Result<DataSet> {
    check_mixture(m, s.len(), r.channels())?;
    if s.grid() != r.grid() {
        return Err(Error::ShapeMismatch(format!(
            "field on {} for response on {}",
            s.grid(),
            r.grid()
        )));
    }
    let n = r.grid().size();
    let channels = (0..r.channels())
        .map(|i| {
            let mut mixed = vec![0.0; n];
            for (j, comp) in s.components().iter().enumerate() {
                let w = m.get(i, j);
                for (acc, v) in mixed.iter_mut().zip(comp.values()) {
                    *acc += w * v;
                }
            }
            r.apply_channel(i, &mixed)
        })
        .collect();
    Ok(DataSet {
        grid: r.grid().clone(),
        channels,
    })
}

/// `M† R† d`, the adjoint of [`forward`].
pub fn adjoint(r: &Response, m: &MixtureMatrix, d: &DataSet) -> Result<MultiField> {
    if d.channels() != r.channels() || d.grid() != r.grid() {
        return Err(Error::ShapeMismatch(format!(
            "{} data channels on {} for a response of {} channels on {}",
            d.channels(),
            d.grid(),
            r.channels(),
            r.grid()
        )));
    }
    check_mixture(m, m.components(), r.channels())?;
    let grid = r.grid();
    let injected: Vec<Vec<f64>> = (0..r.channels()).map(|i| r.adjoint_channel(i, d.channel(i))).collect();
    let comps = (0..m.components())
        .map(|j| {
            let mut acc = vec![0.0; grid.size()];
            for (i, inj) in injected.iter().enumerate() {
                let w = m.get(i, j);
                for (a, v) in acc.iter_mut().zip(inj) {
                    *a += w * v;
                }
            }
            Field::from_raw(grid.clone(), acc)
        })
        .collect();
    MultiField::new(comps)
}

/// Response and noise bundled, with the precomputed inverse-noise weights
/// `R_i N_i⁻¹` (zero where a channel is unmeasured).
#[derive(Debug, Clone)]
pub struct MeasurementModel {
    response: Response,
    noise: NoiseCovariance,
    weights: Vec<Vec<f64>>,
}

impl MeasurementModel {
    pub fn new(response: Response, noise: NoiseCovariance) -> Result<Self> {
        if response.channels() != noise.channels() {
            return Err(Error::ShapeMismatch(format!(
                "{} response channels vs {} noise channels",
                response.channels(),
                noise.channels()
            )));
        }
        let n = response.grid().size();
        let mut weights = Vec::with_capacity(response.channels());
        for i in 0..response.channels() {
            let var = noise.variance(i);
            if var.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "channel {i} variance length {}",
                    var.len()
                )));
            }
            let mut w = vec![0.0; n];
            for p in 0..n {
                if response.channel(i).is_measured(p) {
                    if !(var[p] > 0.0) {
                        return Err(Error::NonPositiveVariance {
                            channel: i,
                            pixel: p,
                            value: var[p],
                        });
                    }
                    w[p] = 1.0 / var[p];
                }
            }
            weights.push(w);
        }
        Ok(Self {
            response,
            noise,
            weights,
        })
    }

    pub fn response(&self) -> &Response {
        &self.response
    }

    pub fn noise(&self) -> &NoiseCovariance {
        &self.noise
    }

    pub fn grid(&self) -> &Grid {
        self.response.grid()
    }

    pub fn channels(&self) -> usize {
        self.response.channels()
    }

    /// Inverse-noise weight of channel `i`, zero on unmeasured points.
    pub fn weights(&self, i: usize) -> &[f64] {
        &self.weights[i]
    }

    /// `N⁻¹ d` restricted to measured points.
    pub fn apply_noise_inverse(&self, d: &DataSet) -> Result<DataSet> {
        if d.channels() != self.channels() || d.grid() != self.grid() {
            return Err(Error::ShapeMismatch("data does not match measurement model".into()));
        }
        Ok(DataSet {
            grid: d.grid.clone(),
            channels: d
                .channels
                .iter()
                .zip(&self.weights)
                .map(|(c, w)| c.iter().zip(w).map(|(x, w)| x * w).collect())
                .collect(),
        })
    }

    /// `n' ~ 𝒢(0, N)` on measured points.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DataSet {
        self.noise.draw(&self.response, rng)
    }
}

/// `D⁻¹ m = M† R† N⁻¹ R M m + S⁻¹ m`.
pub fn apply_d_inverse(
    model: &MeasurementModel,
    mixture: &MixtureMatrix,
    prior: &PriorCovariance,
    m: &MultiField,
) -> Result<MultiField> {
    let mut out = prior.apply_inverse(m)?;
    add_likelihood_curvature(model, mixture, m, &mut out)?;
    Ok(out)
}

/// `out += M† R† N⁻¹ R M m`
pub(crate) fn add_likelihood_curvature(
    model: &MeasurementModel,
    mixture: &MixtureMatrix,
    m: &MultiField,
    out: &mut MultiField,
) -> Result<()> {
    check_mixture(mixture, m.len(), model.channels())?;
    let n = model.grid().size();
    let inv_v = 1.0 / model.grid().pixel_volume();
    let mut mixed = vec![0.0; n];
    for i in 0..model.channels() {
        mixed.iter_mut().for_each(|v| *v = 0.0);
        for (j, comp) in m.components().iter().enumerate() {
            let w = mixture.get(i, j);
            for (acc, v) in mixed.iter_mut().zip(comp.values()) {
                *acc += w * v;
            }
        }
        for (acc, w) in mixed.iter_mut().zip(model.weights(i)) {
            *acc *= w * inv_v;
        }
        for j in 0..m.len() {
            let w = mixture.get(i, j);
            for (o, v) in out.component_mut(j).values_mut().iter_mut().zip(&mixed) {
                *o += w * v;
            }
        }
    }
    Ok(())
}
