//! Mixture-matrix estimation, column normalization and degeneracy alignment.
//!
//! The mixture terms of the sampled objective,
//! `½⟨s†M†R†N⁻¹RMs⟩ − ⟨d†N⁻¹RMs⟩`, are quadratic in `M` and decouple by
//! channel: row `i` of `M` solves the `c × c` system
//! `A⁽ⁱ⁾ M_{i,·} = b⁽ⁱ⁾` with
//! `A⁽ⁱ⁾_{jj'} = ⟨(R_i s_j)† N_i⁻¹ (R_i s_j')⟩` and
//! `b⁽ⁱ⁾_j = ⟨d_i† N_i⁻¹ R_i s_j⟩`, averaged over samples.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::field::MultiField;
use crate::operators::{DataSet, MeasurementModel, MixtureMatrix};

/// Relative ridge added to an ill-conditioned per-channel system.
pub const RIDGE: f64 = 1e-10;

/// Per-channel normal equations of the mixture update.
#[derive(Debug, Clone)]
pub struct MixtureSolveCache {
    systems: Vec<DMatrix<f64>>,
    sources: Vec<DVector<f64>>,
}

/// Result of a mixture solve. `regularized_channels` lists the rows whose
/// system needed the ridge.
#[derive(Debug, Clone)]
pub struct MixtureUpdate {
    pub mixture: MixtureMatrix,
    pub regularized_channels: Vec<usize>,
}

impl MixtureSolveCache {
    pub fn accumulate(samples: &[MultiField], model: &MeasurementModel, data: &DataSet) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptySamples)?;
        let c = first.len();
        if data.channels() != model.channels() || data.grid() != model.grid() {
            return Err(Error::ShapeMismatch("data does not match measurement model".into()));
        }
        let mut systems = vec![DMatrix::zeros(c, c); model.channels()];
        let mut sources = vec![DVector::zeros(c); model.channels()];
        for s in samples {
            if s.len() != c || s.grid() != model.grid() {
                return Err(Error::ShapeMismatch("sample does not match measurement model".into()));
            }
            for i in 0..model.channels() {
                let w = model.weights(i);
                let d = data.channel(i);
                let a = &mut systems[i];
                let b = &mut sources[i];
                for j in 0..c {
                    let sj = s.component(j).values();
                    let wsj: Vec<f64> = sj.iter().zip(w).map(|(x, w)| x * w).collect();
                    b[j] += wsj.iter().zip(d).map(|(x, y)| x * y).sum::<f64>();
                    for jp in j..c {
                        let v: f64 = wsj.iter().zip(s.component(jp).values()).map(|(x, y)| x * y).sum();
                        a[(j, jp)] += v;
                    }
                }
            }
        }
        let inv = 1.0 / samples.len() as f64;
        for a in &mut systems {
            for j in 0..c {
                for jp in j..c {
                    a[(j, jp)] *= inv;
                    a[(jp, j)] = a[(j, jp)];
                }
            }
        }
        for b in &mut sources {
            *b *= inv;
        }
        Ok(Self { systems, sources })
    }

    pub fn system(&self, channel: usize) -> &DMatrix<f64> {
        &self.systems[channel]
    }

    pub fn source(&self, channel: usize) -> &DVector<f64> {
        &self.sources[channel]
    }

    pub fn solve(&self) -> Result<MixtureUpdate> {
        let channels = self.systems.len();
        let c = self.sources[0].len();
        let mut m = DMatrix::zeros(channels, c);
        let mut regularized = Vec::new();
        for i in 0..channels {
            let (row, ridged) = solve_spd(&self.systems[i], &self.sources[i]);
            if ridged {
                regularized.push(i);
            }
            m.row_mut(i).copy_from(&row.transpose());
        }
        if !regularized.is_empty() {
            log::warn!("mixture systems of channels {regularized:?} were singular; ridge applied");
        }
        Ok(MixtureUpdate {
            mixture: MixtureMatrix::new(m)?,
            regularized_channels: regularized,
        })
    }
}

fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    let c = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let ill = !(min > 1e-12 * max) || max == 0.0;
    let mut sys = a.clone();
    if ill {
        let ridge = (RIDGE * a.trace() / c as f64).max(RIDGE);
        for j in 0..c {
            sys[(j, j)] += ridge;
        }
    }
    let x = match sys.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => sys.lu().solve(b).unwrap_or_else(|| DVector::zeros(c)),
    };
    (x, ill)
}

/// Mixture update from posterior samples.
pub fn mixture_update(samples: &[MultiField], model: &MeasurementModel, data: &DataSet) -> Result<MixtureUpdate> {
    MixtureSolveCache::accumulate(samples, model, data)?.solve()
}

/// Point-estimate update: the sample set degenerates to the mean alone.
pub fn map_mixture_update(mean: &MultiField, model: &MeasurementModel, data: &DataSet) -> Result<MixtureUpdate> {
    mixture_update(std::slice::from_ref(mean), model, data)
}

/// Scales every column of `M` to unit norm and multiplies the matching
/// component by the removed norm, so `M m` is unchanged. Returns the norms.
pub fn normalize_columns(mixture: &MixtureMatrix, mean: &MultiField) -> Result<(MixtureMatrix, MultiField, Vec<f64>)> {
    if mixture.components() != mean.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} mixture columns for {} components",
            mixture.components(),
            mean.len()
        )));
    }
    let norms: Vec<f64> = (0..mixture.components()).map(|j| mixture.column_norm(j)).collect();
    if let Some(j) = norms.iter().position(|&n| !(n > 0.0)) {
        return Err(Error::ZeroColumn(j));
    }
    let mut m = mixture.matrix().clone();
    let mut comps = mean.clone();
    for (j, &n) in norms.iter().enumerate() {
        m.column_mut(j).iter_mut().for_each(|v| *v /= n);
        comps.component_mut(j).values_mut().iter_mut().for_each(|v| *v *= n);
    }
    Ok((MixtureMatrix::new(m)?, comps, norms))
}

/// A joint permutation and sign flip of components and mixture columns.
/// Aligned component `k` is `signs[k] · m[permutation[k]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub permutation: Vec<usize>,
    pub signs: Vec<f64>,
}

impl Alignment {
    pub fn identity(c: usize) -> Self {
        Self {
            permutation: (0..c).collect(),
            signs: vec![1.0; c],
        }
    }

    pub fn apply_field(&self, m: &MultiField) -> MultiField {
        MultiField::new(
            self.permutation
                .iter()
                .zip(&self.signs)
                .map(|(&j, &s)| m.component(j).scaled(s))
                .collect(),
        )
        .expect("permuted components share a grid")
    }

    /// Reorders components without sign flips, for nonnegative per-component
    /// quantities such as posterior standard deviations.
    pub fn permute_field(&self, f: &MultiField) -> MultiField {
        MultiField::new(self.permutation.iter().map(|&j| f.component(j).clone()).collect())
            .expect("permuted components share a grid")
    }

    pub fn apply_mixture(&self, mixture: &MixtureMatrix) -> MixtureMatrix {
        let src = mixture.matrix();
        let out = DMatrix::from_fn(src.nrows(), src.ncols(), |i, k| {
            self.signs[k] * src[(i, self.permutation[k])]
        });
        MixtureMatrix::new(out).expect("entries stay finite")
    }
}

#[derive(Debug, Clone)]
pub struct AlignedEstimate {
    pub alignment: Alignment,
    pub mixture: MixtureMatrix,
    pub mean: MultiField,
    /// RMS deviation of the aligned mean from the reference.
    pub epsilon: f64,
}

/// Finds the permutation and signs minimizing the RMS deviation from
/// `reference`, over all `c!·2^c` candidates.
///
/// For a fixed permutation the squared deviation is a sum of independent
/// per-component terms, so each sign is picked per component.
pub fn align_to_reference(
    mixture: &MixtureMatrix,
    mean: &MultiField,
    reference: &MultiField,
) -> Result<AlignedEstimate> {
    mean.check_compatible(reference)?;
    let c = mean.len();
    if c > 8 {
        return Err(Error::InvalidConfig(format!(
            "exhaustive alignment supports c ≤ 8, got {c}"
        )));
    }
    if mixture.components() != c {
        return Err(Error::ShapeMismatch(
            "mixture and mean disagree on component count".into(),
        ));
    }
    // cost[k][j] = (deviation with sign +1, with sign -1) of m_j against reference_k
    let cost: Vec<Vec<(f64, f64)>> = (0..c)
        .map(|k| {
            let r = reference.component(k).values();
            (0..c)
                .map(|j| {
                    let mj = mean.component(j).values();
                    let plus = mj.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
                    let minus = mj.iter().zip(r).map(|(a, b)| (a + b) * (a + b)).sum();
                    (plus, minus)
                })
                .collect()
        })
        .collect();

    let mut perm: Vec<usize> = (0..c).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        let total: f64 = perm
            .iter()
            .enumerate()
            .map(|(k, &j)| cost[k][j].0.min(cost[k][j].1))
            .sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, perm.clone()));
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let (total, permutation) = best.expect("at least one permutation");
    let signs = permutation
        .iter()
        .enumerate()
        .map(|(k, &j)| if cost[k][j].1 < cost[k][j].0 { -1.0 } else { 1.0 })
        .collect();
    let alignment = Alignment { permutation, signs };
    let sites = (c * mean.grid().size()) as f64;
    Ok(AlignedEstimate {
        mixture: alignment.apply_mixture(mixture),
        mean: alignment.apply_field(mean),
        epsilon: (total / sites).sqrt(),
        alignment,
    })
}

/// Lexicographic successor; false once the last permutation is reached.
fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Field, Grid};
    use crate::operators::{forward, NoiseCovariance, Response};

    fn comps(grid: &Grid, fs: &[fn(f64) -> f64]) -> MultiField {
        MultiField::new(fs.iter().map(|f| Field::from_fn(grid, |x| f(x[0])).unwrap()).collect()).unwrap()
    }

    #[test]
    fn permutations_are_enumerated() {
        let mut p = vec![0, 1, 2];
        let mut count = 1;
        while next_permutation(&mut p) {
            count += 1;
        }
        assert_eq!(count, 6);
        assert_eq!(p, vec![2, 1, 0]);
    }

    #[test]
    fn noiseless_consistent_system_recovers_mixture() {
        let g = Grid::unit_interval(32).unwrap();
        let s = comps(&g, &[|x| (6.0 * x).sin(), |x| x * x - 0.3]);
        let truth = MixtureMatrix::from_rows(&[vec![0.5, -1.0], vec![1.2, 0.3], vec![0.0, 0.7]]).unwrap();
        let r = Response::identity(&g, 3);
        let d = forward(&r, &truth, &s).unwrap();
        let model = MeasurementModel::new(r, NoiseCovariance::uniform(&g, 3, 1e-6).unwrap()).unwrap();
        let up = mixture_update(std::slice::from_ref(&s), &model, &d).unwrap();
        assert!(up.regularized_channels.is_empty());
        assert!((up.mixture.matrix() - truth.matrix()).amax() < 1e-10);
        let map = map_mixture_update(&s, &model, &d).unwrap();
        assert_eq!(map.mixture, up.mixture);
    }

    #[test]
    fn scalar_case_is_a_ratio() {
        let g = Grid::unit_interval(16).unwrap();
        let s = comps(&g, &[|x| 1.0 + x]);
        let d = DataSet::new(&g, vec![(0..16).map(|i| (i as f64 * 0.7).cos()).collect()]).unwrap();
        let model =
            MeasurementModel::new(Response::identity(&g, 1), NoiseCovariance::uniform(&g, 1, 0.3).unwrap()).unwrap();
        let up = mixture_update(std::slice::from_ref(&s), &model, &d).unwrap();
        let sv = s.component(0).values();
        let num: f64 = d.channel(0).iter().zip(sv).map(|(a, b)| a * b / 0.3).sum();
        let den: f64 = sv.iter().map(|b| b * b / 0.3).sum();
        assert!((up.mixture.get(0, 0) - num / den).abs() < 1e-12);
    }

    #[test]
    fn zero_mean_takes_the_ridge_path() {
        let g = Grid::unit_interval(8).unwrap();
        let model =
            MeasurementModel::new(Response::identity(&g, 2), NoiseCovariance::uniform(&g, 2, 1.0).unwrap()).unwrap();
        let d = DataSet::new(&g, vec![vec![1.0; 8], vec![2.0; 8]]).unwrap();
        let up = map_mixture_update(&MultiField::zeros(&g, 2), &model, &d).unwrap();
        assert_eq!(up.regularized_channels, vec![0, 1]);
        assert!(up.mixture.matrix().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn normalization_keeps_prediction() {
        let g = Grid::unit_interval(16).unwrap();
        let s = comps(&g, &[|x| (3.0 * x).sin(), |x| x]);
        let m = MixtureMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.6], vec![0.0, 0.8]]).unwrap();
        let (mn, sn, norms) = normalize_columns(&m, &s).unwrap();
        assert_eq!(norms, vec![2.0, 1.0]);
        assert_eq!(mn.get(0, 0), 1.0);
        assert_eq!(sn.component(1), s.component(1));
        for (a, b) in sn.component(0).values().iter().zip(s.component(0).values()) {
            assert_eq!(*a, 2.0 * b);
        }
        let r = Response::identity(&g, 3);
        let before = forward(&r, &m, &s).unwrap();
        let after = forward(&r, &mn, &sn).unwrap();
        assert!(before.sub(&after).max_abs() <= 1e-12 * before.max_abs());
        assert!(matches!(
            normalize_columns(&MixtureMatrix::zeros(3, 2), &s),
            Err(Error::ZeroColumn(0))
        ));
    }

    #[test]
    fn alignment_undoes_swap_and_flip() {
        let g = Grid::unit_interval(32).unwrap();
        let truth = comps(&g, &[|x| (6.0 * x).sin(), |x| x * x - 0.3, |x| (2.0 * x).cos()]);
        let mix = MixtureMatrix::from_rows(&[vec![1.0, 0.0, 0.2], vec![0.3, 1.0, 0.0], vec![0.0, 0.5, 1.0]]).unwrap();
        let scrambled = Alignment {
            permutation: vec![1, 0, 2],
            signs: vec![1.0, -1.0, 1.0],
        };
        let est = scrambled.apply_field(&truth);
        let est_mix = scrambled.apply_mixture(&mix);
        let aligned = align_to_reference(&est_mix, &est, &truth).unwrap();
        assert!(aligned.epsilon < 1e-15);
        assert_eq!(aligned.mean, truth);
        assert_eq!(aligned.mixture, mix);

        let already = align_to_reference(&mix, &truth, &truth).unwrap();
        assert_eq!(already.alignment, Alignment::identity(3));
    }
}
