//! Matrix-free conjugate gradients for symmetric positive-definite systems.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::MultiField;

/// Stopping rule: stop once `|A x − b| ≤ max(abs_tol, rel_tol · |A x0 − b|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl CgConfig {
    pub fn new(abs_tol: f64, rel_tol: f64, max_iter: usize) -> Result<Self> {
        let cfg = Self {
            abs_tol,
            rel_tol,
            max_iter,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn relative(rel_tol: f64) -> Self {
        Self {
            rel_tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol >= 0.0 && self.rel_tol >= 0.0) {
            return Err(Error::InvalidConfig("tolerances must be nonnegative".into()));
        }
        if self.abs_tol == 0.0 && self.rel_tol == 0.0 {
            return Err(Error::InvalidConfig("one of abs_tol, rel_tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            abs_tol: 0.0,
            rel_tol: 1e-4,
            max_iter: 5000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgStats {
    pub iterations: usize,
    pub initial_residual: f64,
    pub residual_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    /// Final iterate, or the lowest-residual iterate when not converged.
    pub x: MultiField,
    pub stats: CgStats,
}

/// Solves `A x = b` starting from `x0`.
///
/// Running out of iterations is not an error: the outcome carries
/// `converged = false` and the best iterate. A non-finite or nonpositive
/// curvature `pᵀAp` is a hard [`Error::CgBreakdown`].
pub fn cg_solve<A>(apply_a: A, b: &MultiField, x0: &MultiField, cfg: &CgConfig) -> Result<CgOutcome>
where
    A: Fn(&MultiField) -> Result<MultiField>,
{
    pcg_solve(apply_a, |r: &MultiField| Ok(r.clone()), b, x0, cfg)
}

/// Preconditioned variant; `precond` applies an SPD approximation of `A⁻¹`.
pub fn pcg_solve<A, P>(apply_a: A, precond: P, b: &MultiField, x0: &MultiField, cfg: &CgConfig) -> Result<CgOutcome>
where
    A: Fn(&MultiField) -> Result<MultiField>,
    P: Fn(&MultiField) -> Result<MultiField>,
{
    cfg.validate()?;
    b.check_compatible(x0)?;
    if !b.all_finite() || !x0.all_finite() {
        return Err(Error::CgBreakdown("non-finite right-hand side or start".into()));
    }

    let mut x = x0.clone();
    let mut r = b.sub(&apply_a(&x)?);
    let initial = r.norm();
    let target = cfg.abs_tol.max(cfg.rel_tol * initial);
    let mut res = initial;
    let mut best = (res, x.clone());
    let mut iterations = 0;

    if res <= target {
        return Ok(CgOutcome {
            x,
            stats: CgStats {
                iterations,
                initial_residual: initial,
                residual_norm: res,
                converged: true,
            },
        });
    }

    let mut z = precond(&r)?;
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    // a few restarts from the true residual guard against recurrence drift
    let mut restarts = 0;

    while iterations < cfg.max_iter {
        let ap = apply_a(&p)?;
        let pap = p.dot(&ap);
        if !pap.is_finite() || pap <= 0.0 {
            return Err(Error::CgBreakdown(format!(
                "curvature pᵀAp = {pap:e} at iteration {iterations}"
            )));
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        iterations += 1;
        res = r.norm();
        if !res.is_finite() {
            return Err(Error::CgBreakdown(format!(
                "residual became {res} at iteration {iterations}"
            )));
        }
        if res < best.0 {
            best = (res, x.clone());
        }
        if res <= target {
            let true_r = b.sub(&apply_a(&x)?);
            let true_res = true_r.norm();
            if true_res <= target || restarts >= 3 {
                return Ok(CgOutcome {
                    x,
                    stats: CgStats {
                        iterations,
                        initial_residual: initial,
                        residual_norm: true_res,
                        converged: true_res <= target,
                    },
                });
            }
            restarts += 1;
            r = true_r;
            z = precond(&r)?;
            p = z.clone();
            rz = r.dot(&z);
            continue;
        }
        z = precond(&r)?;
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        let mut next = z.clone();
        next.axpy(beta, &p);
        p = next;
    }

    let (best_res, best_x) = best;
    Ok(CgOutcome {
        x: best_x,
        stats: CgStats {
            iterations,
            initial_residual: initial,
            residual_norm: best_res,
            converged: false,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Field, Grid};

    fn vector(values: &[f64]) -> MultiField {
        let g = Grid::new(vec![values.len()], vec![values.len() as f64]).unwrap();
        MultiField::new(vec![Field::new(g, values.to_vec()).unwrap()]).unwrap()
    }

    #[test]
    fn identity_solves_in_one_iteration() {
        let b = vector(&[1.0, -2.0, 3.0, 0.5]);
        let out = cg_solve(|x| Ok(x.clone()), &b, &vector(&[0.0; 4]), &CgConfig::relative(1e-12)).unwrap();
        assert_eq!(out.stats.iterations, 1);
        assert!(out.stats.converged);
        assert!(out.x.sub(&b).max_abs() < 1e-15);
    }

    #[test]
    fn scalar_system_halves_rhs() {
        let b = vector(&[4.0, 2.0, -6.0]);
        let out = cg_solve(
            |x| Ok(x.scaled(2.0)),
            &b,
            &vector(&[0.0; 3]),
            &CgConfig::relative(1e-12),
        )
        .unwrap();
        assert!(out.x.sub(&b.scaled(0.5)).max_abs() < 1e-14);
    }

    #[test]
    fn exact_start_needs_no_iterations() {
        let b = vector(&[1.0, 1.0]);
        let out = cg_solve(
            |x| Ok(x.scaled(3.0)),
            &b,
            &b.scaled(1.0 / 3.0),
            &CgConfig::relative(1e-8),
        )
        .unwrap();
        assert_eq!(out.stats.iterations, 0);
    }

    #[test]
    fn indefinite_operator_breaks_down() {
        let b = vector(&[1.0, 1.0]);
        let err = cg_solve(|x| Ok(x.scaled(-1.0)), &b, &vector(&[0.0; 2]), &CgConfig::default()).unwrap_err();
        assert!(matches!(err, Error::CgBreakdown(_)));
        let err = cg_solve(|x| Ok(x.scaled(f64::NAN)), &b, &vector(&[0.0; 2]), &CgConfig::default()).unwrap_err();
        assert!(matches!(err, Error::CgBreakdown(_)));
    }

    #[test]
    fn iteration_cap_reports_failure_with_iterate() {
        // diag(1..=8) needs 8 iterations
        let b = vector(&[1.0; 8]);
        let apply = |x: &MultiField| {
            let v: Vec<f64> = x
                .component(0)
                .values()
                .iter()
                .enumerate()
                .map(|(i, v)| (i + 1) as f64 * v)
                .collect();
            Ok(vector(&v))
        };
        let cfg = CgConfig::new(0.0, 1e-12, 3).unwrap();
        let out = cg_solve(apply, &b, &vector(&[0.0; 8]), &cfg).unwrap();
        assert!(!out.stats.converged);
        assert_eq!(out.stats.iterations, 3);
        assert!(out.stats.residual_norm < out.stats.initial_residual);
    }

    #[test]
    fn config_validation() {
        assert!(CgConfig::new(0.0, 0.0, 10).is_err());
        assert!(CgConfig::new(1e-8, 0.0, 0).is_err());
        assert!(CgConfig::new(-1.0, 1e-3, 10).is_err());
        assert!(CgConfig::new(1e-8, 0.0, 1).is_ok());
    }

    #[test]
    fn jacobi_preconditioner_converges_faster() {
        let diag: Vec<f64> = (0..32).map(|i| 1.0 + (i * i) as f64).collect();
        let apply = |x: &MultiField| {
            let v: Vec<f64> = x.component(0).values().iter().zip(&diag).map(|(v, d)| v * d).collect();
            Ok(vector(&v))
        };
        let precond = |x: &MultiField| {
            let v: Vec<f64> = x.component(0).values().iter().zip(&diag).map(|(v, d)| v / d).collect();
            Ok(vector(&v))
        };
        let b = vector(&[1.0; 32]);
        let cfg = CgConfig::relative(1e-10);
        let plain = cg_solve(apply, &b, &vector(&[0.0; 32]), &cfg).unwrap();
        let pre = pcg_solve(apply, precond, &b, &vector(&[0.0; 32]), &cfg).unwrap();
        assert!(pre.stats.converged && plain.stats.converged);
        assert_eq!(pre.stats.iterations, 1);
        assert!(plain.stats.iterations > 1);
    }
}
