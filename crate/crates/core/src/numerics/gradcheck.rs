//! Finite-difference gradient checking.
//!
//! Central differences `(f(θ+h) − f(θ−h)) / 2h` probed per coordinate, or per
//! random unit direction for tensors above [`EXHAUSTIVE_LIMIT`] parameters
//! (at least [`MIN_PROJECTIONS`] directions). Relative error is
//! `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

/// Above this many elements a tensor is checked by random projection.
pub const EXHAUSTIVE_LIMIT: usize = 10_000;
/// Minimum number of random directions for projected checks.
pub const MIN_PROJECTIONS: usize = 32;

#[derive(Debug, Clone, serde::Serialize)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Coordinates probed (exhaustive) or directions probed (projected).
    pub probes: usize,
    pub exhaustive: bool,
    /// Set when a perturbed evaluation failed (e.g. non-finite loss), with
    /// the offending parameter coordinate.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub max_rel_err: f64,
    pub params: Vec<ParamReport>,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Check analytic gradients of `loss_fn` at `params` against central
/// differences.
///
/// `analytic[i]` must hold the gradient w.r.t. `params[i].1` (same shape),
/// typically produced by one [`Tape::backward`] pass. `loss_fn` is re-invoked
/// at perturbed parameter settings and must be a pure function of them.
pub fn grad_check(
    params: &[(String, Tensor)],
    analytic: &[Tensor],
    step: f64,
    tolerance: f64,
    mut loss_fn: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<GradCheckReport> {
    if params.len() != analytic.len() {
        return Err(Error::contract(format!(
            "grad_check: {} params but {} analytic gradients",
            params.len(),
            analytic.len()
        )));
    }
    for (i, ((name, p), g)) in params.iter().zip(analytic).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::contract(format!(
                "grad_check: param {i} ({name}) shape {:?} vs gradient shape {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }

    let mut theta: Vec<Tensor> = params.iter().map(|(_, p)| p.clone()).collect();
    let mut reports = Vec::with_capacity(params.len());

    for pi in 0..params.len() {
        let name = params[pi].0.clone();
        let n = theta[pi].numel();
        let mut max_err: f64 = 0.0;
        let mut failure = None;

        if n <= EXHAUSTIVE_LIMIT {
            for ci in 0..n {
                let orig = theta[pi].data()[ci];
                theta[pi].data_mut()[ci] = orig + step;
                let fp = loss_fn(&theta);
                theta[pi].data_mut()[ci] = orig - step;
                let fm = loss_fn(&theta);
                theta[pi].data_mut()[ci] = orig;
                match (fp, fm) {
                    (Ok(fp), Ok(fm)) if fp.is_finite() && fm.is_finite() => {
                        let numeric = (fp - fm) / (2.0 * step);
                        max_err = max_err.max(rel_err(analytic[pi].data()[ci], numeric));
                    }
                    _ => {
                        failure = Some(format!(
                            "non-finite or failed loss at {name}[{ci}] ± {step}"
                        ));
                        break;
                    }
                }
            }
            reports.push(ParamReport {
                name,
                max_rel_err: max_err,
                probes: n,
                exhaustive: true,
                failure,
            });
        } else {
            let dirs = MIN_PROJECTIONS;
            let mut stream = rng::derive(0x6772_6164, &[pi as u64]);
            for di in 0..dirs {
                // Rademacher direction, normalized: cheap and unbiased.
                let signs: Vec<f64> = (0..n)
                    .map(|_| if stream.gen::<bool>() { 1.0 } else { -1.0 })
                    .collect();
                let scale = 1.0 / (n as f64).sqrt();
                let dir_analytic: f64 = analytic[pi]
                    .data()
                    .iter()
                    .zip(&signs)
                    .map(|(g, s)| g * s * scale)
                    .sum();
                for (v, s) in theta[pi].data_mut().iter_mut().zip(&signs) {
                    *v += step * s * scale;
                }
                let fp = loss_fn(&theta);
                for (v, s) in theta[pi].data_mut().iter_mut().zip(&signs) {
                    *v -= 2.0 * step * s * scale;
                }
                let fm = loss_fn(&theta);
                for (v, s) in theta[pi].data_mut().iter_mut().zip(&signs) {
                    *v += step * s * scale;
                }
                match (fp, fm) {
                    (Ok(fp), Ok(fm)) if fp.is_finite() && fm.is_finite() => {
                        let numeric = (fp - fm) / (2.0 * step);
                        max_err = max_err.max(rel_err(dir_analytic, numeric));
                    }
                    _ => {
                        failure = Some(format!(
                            "non-finite or failed loss at {name}, direction {di}"
                        ));
                        break;
                    }
                }
            }
            reports.push(ParamReport {
                name,
                max_rel_err: max_err,
                probes: dirs,
                exhaustive: false,
                failure,
            });
        }
    }

    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let pass = max_rel_err <= tolerance && reports.iter().all(|r| r.failure.is_none());
    Ok(GradCheckReport {
        step,
        tolerance,
        pass,
        max_rel_err,
        params: reports,
    })
}
