//! The alternating minimization: Wiener mean for the current mixture,
//! posterior samples, sample-averaged mixture solve, column normalization.
//! The MAP baseline replaces the sample set by the mean alone.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cg::CgConfig;
use crate::error::{Error, Result};
use crate::field::MultiField;
use crate::mixture::{align_to_reference, map_mixture_update, mixture_update, normalize_columns};
use crate::operators::{DataSet, MeasurementModel, MixtureMatrix, PriorCovariance};
use crate::sampler::{draw_sample_set, SampleSet};
use crate::wiener::{posterior_variance, WienerProblem};

/// Iteration count, sample-count ramp and CG tolerance staging.
///
/// The sample count stays at `initial_samples` for the first `ramp_start`
/// fraction of iterations, then grows geometrically to reach
/// `final_samples` on the last iteration. CG uses `early_rel_tol` until the
/// `final_phase` fraction of iterations has passed, `final_rel_tol` after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub iterations: usize,
    pub initial_samples: usize,
    pub final_samples: usize,
    pub ramp_start: f64,
    pub early_rel_tol: f64,
    pub final_rel_tol: f64,
    pub final_phase: f64,
    pub cg_max_iter: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            iterations: 300,
            initial_samples: 1,
            final_samples: 25,
            ramp_start: 0.6,
            early_rel_tol: 1e-4,
            final_rel_tol: 1e-7,
            final_phase: 0.9,
            cg_max_iter: 5000,
        }
    }
}

impl Schedule {
    pub fn with_iterations(iterations: usize) -> Self {
        Self {
            iterations,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_samples == 0 || self.final_samples < self.initial_samples {
            return Err(Error::InvalidConfig(format!(
                "sample counts must satisfy 1 ≤ initial ({}) ≤ final ({})",
                self.initial_samples, self.final_samples
            )));
        }
        if !(0.0..=1.0).contains(&self.ramp_start) || !(0.0..=1.0).contains(&self.final_phase) {
            return Err(Error::InvalidConfig("schedule fractions must lie in [0, 1]".into()));
        }
        if !(self.final_rel_tol > 0.0 && self.final_rel_tol <= self.early_rel_tol) {
            return Err(Error::InvalidConfig("need 0 < final_rel_tol ≤ early_rel_tol".into()));
        }
        if self.cg_max_iter == 0 {
            return Err(Error::InvalidConfig("cg_max_iter must be at least 1".into()));
        }
        Ok(())
    }

    fn phase_start(&self, fraction: f64) -> usize {
        (fraction * self.iterations as f64).ceil() as usize
    }

    /// Samples drawn in (0-based) iteration `t`.
    pub fn sample_count(&self, t: usize) -> usize {
        let start = self.phase_start(self.ramp_start);
        let last = self.iterations.saturating_sub(1);
        if t >= last {
            return self.final_samples;
        }
        if t < start || last <= start {
            return self.initial_samples;
        }
        let frac = (t - start) as f64 / (last - start) as f64;
        let ratio = self.final_samples as f64 / self.initial_samples as f64;
        let n = (self.initial_samples as f64 * ratio.powf(frac)).round() as usize;
        n.clamp(self.initial_samples, self.final_samples)
    }

    pub fn cg_config(&self, t: usize) -> CgConfig {
        let rel_tol = if t >= self.phase_start(self.final_phase) {
            self.final_rel_tol
        } else {
            self.early_rel_tol
        };
        CgConfig {
            abs_tol: 0.0,
            rel_tol,
            max_iter: self.cg_max_iter,
        }
    }

    /// Tolerance used for the closing Wiener solve and uncertainty samples.
    pub fn final_cg_config(&self) -> CgConfig {
        CgConfig {
            abs_tol: 0.0,
            rel_tol: self.final_rel_tol,
            max_iter: self.cg_max_iter,
        }
    }
}

/// Optional stop once the smoothed sampled-KL monitor stalls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauStop {
    pub window: usize,
    pub rel_change: f64,
}

impl Default for PlateauStop {
    fn default() -> Self {
        Self {
            window: 20,
            rel_change: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    Kl,
    Map,
}

#[derive(Debug, Clone)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    pub schedule: Schedule,
    pub seed: u64,
    /// Starting mixture; drawn standard normal and normalized when absent.
    pub initial_mixture: Option<MixtureMatrix>,
    pub plateau: Option<PlateauStop>,
}

impl InferenceConfig {
    pub fn kl(schedule: Schedule, seed: u64) -> Self {
        Self {
            mode: InferenceMode::Kl,
            schedule,
            seed,
            initial_mixture: None,
            plateau: None,
        }
    }

    pub fn map(schedule: Schedule, seed: u64) -> Self {
        Self {
            mode: InferenceMode::Map,
            ..Self::kl(schedule, seed)
        }
    }
}

/// What the inference sees: data, measurement model, component priors.
#[derive(Debug, Clone)]
pub struct InferenceInputs {
    pub data: DataSet,
    pub model: MeasurementModel,
    pub prior: PriorCovariance,
}

impl InferenceInputs {
    pub fn components(&self) -> usize {
        self.prior.components()
    }

    pub fn problem<'a>(&'a self, mixture: &'a MixtureMatrix) -> Result<WienerProblem<'a>> {
        WienerProblem::new(&self.model, mixture, &self.prior, &self.data)
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorState {
    pub mean: MultiField,
    pub mixture: MixtureMatrix,
    pub samples: SampleSet,
    pub iteration: usize,
}

impl PosteriorState {
    /// Sample estimate of `D_xx`.
    pub fn variance(&self) -> Result<MultiField> {
        posterior_variance(self.samples.samples(), &self.mean)
    }

    /// Per-pixel `sqrt(D_xx)`.
    pub fn std(&self) -> Result<MultiField> {
        let mut v = self.variance()?;
        for j in 0..v.len() {
            v.component_mut(j).values_mut().iter_mut().for_each(|x| *x = x.sqrt());
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub epsilon: Option<f64>,
    pub sampled_kl: f64,
    pub sample_count: usize,
    pub cg_iterations: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn epsilons(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.epsilon).collect()
    }

    /// Everything except wall-clock timings, which differ between runs.
    pub fn deterministic_part(&self) -> Vec<(usize, Option<f64>, f64, usize, usize)> {
        self.records
            .iter()
            .map(|r| (r.iteration, r.epsilon, r.sampled_kl, r.sample_count, r.cg_iterations))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub state: PosteriorState,
    pub trace: Trace,
    /// Iterations in which some mixture row needed the ridge.
    pub regularized_iterations: Vec<usize>,
}

/// Pooled RMS deviation `sqrt(Σ (m − s)² / l)` over all sites of all components.
pub fn epsilon_metric(mean: &MultiField, truth: &MultiField) -> Result<f64> {
    mean.check_compatible(truth)?;
    let (sum, count) = mean
        .components()
        .iter()
        .zip(truth.components())
        .fold((0.0, 0usize), |(s, n), (a, b)| {
            let d: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum();
            (s + d, n + a.values().len())
        });
    Ok((sum / count as f64).sqrt())
}

/// Sample estimate of the objective terms that depend on `M` and `m`:
/// `½⟨s†M†R†N⁻¹RMs⟩ − ⟨d†N⁻¹RMs⟩ + ½ m†S⁻¹m`.
pub fn sampled_kl(
    mean: &MultiField,
    mixture: &MixtureMatrix,
    model: &MeasurementModel,
    data: &DataSet,
    prior: &PriorCovariance,
    samples: &[MultiField],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if mixture.channels() != model.channels() || mixture.components() != mean.len() {
        return Err(Error::ShapeMismatch("mixture does not match model and mean".into()));
    }
    let n = model.grid().size();
    let mut quad = 0.0;
    let mut lin = 0.0;
    let mut pred = vec![0.0; n];
    for s in samples {
        s.check_compatible(mean)?;
        for i in 0..model.channels() {
            pred.iter_mut().for_each(|v| *v = 0.0);
            for (j, comp) in s.components().iter().enumerate() {
                let w = mixture.get(i, j);
                for (p, v) in pred.iter_mut().zip(comp.values()) {
                    *p += w * v;
                }
            }
            for ((p, w), d) in pred.iter().zip(model.weights(i)).zip(data.channel(i)) {
                quad += w * p * p;
                lin += w * d * p;
            }
        }
    }
    let l = samples.len() as f64;
    let prior_term = mean.dot(&prior.apply_inverse(mean)?);
    Ok(0.5 * quad / l - lin / l + 0.5 * prior_term)
}

/// Comparison of an estimate with known ground truth, after alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub epsilon: f64,
    /// Pooled RMS of `sqrt(D_xx)` over all components and sites.
    pub uncertainty_floor: f64,
    /// Share of sites with `|m − s| ≤ sqrt(D_xx)`.
    pub coverage: f64,
    /// Frobenius norm of the aligned mixture minus the true mixture.
    pub mixture_deviation: f64,
    pub permutation: Vec<usize>,
    pub signs: Vec<f64>,
}

/// Aligns `(mixture, mean)` to the truth and scores it. `std` holds the
/// per-site `sqrt(D_xx)` in the estimate's component order.
pub fn evaluate(
    mean: &MultiField,
    mixture: &MixtureMatrix,
    std: &MultiField,
    true_components: &MultiField,
    true_mixture: &MixtureMatrix,
) -> Result<Evaluation> {
    std.check_compatible(mean)?;
    if true_mixture.channels() != mixture.channels() || true_mixture.components() != mixture.components() {
        return Err(Error::ShapeMismatch("true mixture has a different shape".into()));
    }
    let aligned = align_to_reference(mixture, mean, true_components)?;
    let std = aligned.alignment.permute_field(std);
    let mut sq = 0.0;
    let mut covered = 0usize;
    let mut sites = 0usize;
    for ((m, s), t) in aligned
        .mean
        .components()
        .iter()
        .zip(std.components())
        .zip(true_components.components())
    {
        for ((m, s), t) in m.values().iter().zip(s.values()).zip(t.values()) {
            sq += s * s;
            if (m - t).abs() <= *s {
                covered += 1;
            }
            sites += 1;
        }
    }
    Ok(Evaluation {
        epsilon: aligned.epsilon,
        uncertainty_floor: (sq / sites as f64).sqrt(),
        coverage: covered as f64 / sites as f64,
        mixture_deviation: (aligned.mixture.matrix() - true_mixture.matrix()).norm(),
        permutation: aligned.alignment.permutation,
        signs: aligned.alignment.signs,
    })
}

fn random_mixture(rng: &mut ChaCha8Rng, channels: usize, components: usize) -> Result<MixtureMatrix> {
    let m = DMatrix::from_fn(channels, components, |_, _| rng.sample::<f64, _>(StandardNormal));
    let m = MixtureMatrix::new(m)?;
    let (m, _, _) = normalize_columns(
        &m,
        &MultiField::zeros(&crate::field::Grid::unit_interval(2)?, components),
    )?;
    Ok(m)
}

fn at(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Iteration {
        iteration,
        source: Box::new(e),
    }
}

/// Runs the sample-based alternating minimization.
pub fn run_inference(
    inputs: &InferenceInputs,
    config: &InferenceConfig,
    truth: Option<&MultiField>,
) -> Result<InferenceResult> {
    run(inputs, config, truth)
}

/// MAP baseline: identical loop, mixture solved from the mean alone.
pub fn run_map(
    inputs: &InferenceInputs,
    config: &InferenceConfig,
    truth: Option<&MultiField>,
) -> Result<InferenceResult> {
    let config = InferenceConfig {
        mode: InferenceMode::Map,
        ..config.clone()
    };
    run(inputs, &config, truth)
}

fn run(inputs: &InferenceInputs, config: &InferenceConfig, truth: Option<&MultiField>) -> Result<InferenceResult> {
    let schedule = &config.schedule;
    schedule.validate()?;
    let c = inputs.components();
    if c == 0 {
        return Err(Error::InvalidConfig("need at least one component".into()));
    }
    if let Some(t) = truth {
        if t.len() != c || t.grid() != inputs.model.grid() {
            return Err(Error::ShapeMismatch("ground truth does not match the inputs".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut mixture = match &config.initial_mixture {
        Some(m) => {
            if m.channels() != inputs.model.channels() || m.components() != c {
                return Err(Error::ShapeMismatch("initial mixture has the wrong shape".into()));
            }
            m.clone()
        }
        None => random_mixture(&mut rng, inputs.model.channels(), c)?,
    };
    let mut mean = MultiField::zeros(inputs.model.grid(), c);
    let mut trace = Trace::default();
    let mut regularized_iterations = Vec::new();

    for t in 0..schedule.iterations {
        let started = Instant::now();
        let iteration = t + 1;
        let cg = schedule.cg_config(t);
        let iter_seed = rng.next_u64();

        let problem = inputs.problem(&mixture).map_err(at(iteration))?;
        let (m, mean_stats) = problem.wiener_mean(&cg, Some(&mean)).map_err(at(iteration))?;
        let mut cg_iterations = mean_stats.iterations;

        let samples = match config.mode {
            InferenceMode::Kl => {
                let set = draw_sample_set(&problem, &m, schedule.sample_count(t), &cg, iter_seed, iteration)
                    .map_err(at(iteration))?;
                cg_iterations += set.cg_iterations();
                set
            }
            InferenceMode::Map => SampleSet::from_samples(vec![m.clone()], iteration)?,
        };

        let update = match config.mode {
            InferenceMode::Kl => mixture_update(samples.samples(), &inputs.model, &inputs.data),
            InferenceMode::Map => map_mixture_update(&m, &inputs.model, &inputs.data),
        }
        .map_err(at(iteration))?;
        if !update.regularized_channels.is_empty() {
            regularized_iterations.push(iteration);
        }
        let kl = sampled_kl(
            &m,
            &update.mixture,
            &inputs.model,
            &inputs.data,
            &inputs.prior,
            samples.samples(),
        )
        .map_err(at(iteration))?;

        let (new_mixture, new_mean, _) = normalize_columns(&update.mixture, &m).map_err(at(iteration))?;
        mixture = new_mixture;
        mean = new_mean;

        let epsilon = match truth {
            Some(t) => Some(align_to_reference(&mixture, &mean, t)?.epsilon),
            None => None,
        };
        trace.records.push(TraceRecord {
            iteration,
            epsilon,
            sampled_kl: kl,
            sample_count: samples.len(),
            cg_iterations,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        log::debug!("iteration {iteration}: kl {kl:.6e} eps {epsilon:?} cg {cg_iterations}");

        if let Some(stop) = config.plateau {
            if plateaued(&trace, stop) {
                log::info!("sampled KL plateaued after {iteration} iterations");
                break;
            }
        }
    }

    // closing estimate for the final mixture, with uncertainty samples
    let iteration = trace.len();
    let cg = schedule.final_cg_config();
    let problem = inputs.problem(&mixture).map_err(at(iteration + 1))?;
    let (mean, _) = problem.wiener_mean(&cg, Some(&mean)).map_err(at(iteration + 1))?;
    let samples = draw_sample_set(&problem, &mean, schedule.final_samples, &cg, rng.next_u64(), iteration)
        .map_err(at(iteration + 1))?;

    Ok(InferenceResult {
        state: PosteriorState {
            mean,
            mixture,
            samples,
            iteration,
        },
        trace,
        regularized_iterations,
    })
}

fn plateaued(trace: &Trace, stop: PlateauStop) -> bool {
    let w = stop.window.max(1);
    let n = trace.len();
    if n < 2 * w {
        return false;
    }
    let avg = |r: &[TraceRecord]| r.iter().map(|x| x.sampled_kl).sum::<f64>() / r.len() as f64;
    let recent = avg(&trace.records[n - w..]);
    let before = avg(&trace.records[n - 2 * w..n - w]);
    ((recent - before) / before.abs().max(f64::MIN_POSITIVE)).abs() < stop.rel_change
}
