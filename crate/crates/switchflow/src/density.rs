//! Nondegeneracy and density diagnostics.
//!
//! The spectral distribution of the reduced Malliavin matrix `C_t` across
//! paths is the computable signature of density existence: `lambda_min > 0`
//! on every path, superpolynomially decaying small-ball probabilities, and
//! stable negative moments of `det C_t`. A kernel density estimate
//! visualizes the law whose absolute continuity those diagnostics support.
//! Negative moments of a finite sample cannot certify integrability, so the
//! estimate carries a tail-dominance flag instead of pretending convergence.

use rayon::prelude::*;
use thiserror::Error;

use crate::chain::{simulate_chain, ChainMethod};
use crate::malliavin::{jacobian_flow, malliavin_matrix, FlowBundle, MalliavinError};
use crate::model::{Regime, State, SwitchingModel};
use crate::paths::{make_grid, simulate_path, PathError};
use crate::rng::{SeedStream, StreamRole};
use crate::stats::{binomial_stderr, neumaier_sum};

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("exact zero determinant encountered (degenerate Malliavin matrix)")]
    DegenerateSample,
    #[error("no samples provided")]
    EmptySamples,
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("epsilon list must be positive and decreasing")]
    BadEpsilons,
    #[error(transparent)]
    Chain(#[from] crate::chain::ChainError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Malliavin(#[from] MalliavinError),
}

/// Per-path spectral summaries of `C_t` and `M_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NondegeneracySample {
    pub n_paths: usize,
    pub lambda_min_c: Vec<f64>,
    pub det_c: Vec<f64>,
    pub lambda_min_m: Vec<f64>,
    /// Trace of `C_t` per path, the natural scale for zero thresholds.
    pub trace_c: Vec<f64>,
}

impl NondegeneracySample {
    /// Empirical `q`-quantile of `lambda_min(C_t)` (sorted-order index).
    pub fn lambda_min_quantile(&self, q: f64) -> f64 {
        let mut v = self.lambda_min_c.clone();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((q * (v.len() - 1) as f64).round() as usize).min(v.len() - 1);
        v[idx]
    }
}

/// Simulates `n_paths` and records `lambda_min`, determinant and trace of
/// `C_t` plus `lambda_min(M_t)` at the terminal node.
pub fn nondegeneracy_sample(
    model: &SwitchingModel,
    x0: &State,
    alpha0: Regime,
    t: f64,
    n_paths: usize,
    dt: f64,
    seeds: SeedStream,
) -> Result<NondegeneracySample, DensityError> {
    let rows: Vec<(f64, f64, f64, f64)> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| -> Result<(f64, f64, f64, f64), DensityError> {
            let mut crng = seeds.rng(p, StreamRole::Chain);
            let mut nrng = seeds.rng(p, StreamRole::Noise);
            let chain =
                simulate_chain(model.generator(), alpha0, t, &mut crng, ChainMethod::HoldingTimes)?;
            let grid = make_grid(t, dt, &chain)?;
            let path = simulate_path(model, &grid, x0, &mut nrng)?;
            let flows = FlowBundle::from_jacobian(jacobian_flow(model, &path));
            let mm = malliavin_matrix(model, &path, &flows, grid.cells())?;
            let eig_c = mm.c.clone().symmetric_eigen();
            let eig_m = mm.m.clone().symmetric_eigen();
            let det_c: f64 = eig_c.eigenvalues.iter().product();
            Ok((
                eig_c.eigenvalues.min(),
                det_c,
                eig_m.eigenvalues.min(),
                mm.c.trace(),
            ))
        })
        .collect::<Result<_, _>>()?;
    let mut out = NondegeneracySample {
        n_paths,
        lambda_min_c: Vec::with_capacity(n_paths),
        det_c: Vec::with_capacity(n_paths),
        lambda_min_m: Vec::with_capacity(n_paths),
        trace_c: Vec::with_capacity(n_paths),
    };
    for (lc, dc, lm, tc) in rows {
        out.lambda_min_c.push(lc);
        out.det_c.push(dc);
        out.lambda_min_m.push(lm);
        out.trace_c.push(tc);
    }
    Ok(out)
}

/// Row of the small-ball table: `(epsilon, P(lambda_min <= epsilon), stderr)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallBallRow {
    pub epsilon: f64,
    pub probability: f64,
    pub stderr: f64,
}

/// Empirical tail probabilities `P(lambda_min(C_t) <= eps)` with binomial
/// standard errors. Probabilities are non-increasing in `eps` by
/// construction.
pub fn small_ball_probe(
    sample: &NondegeneracySample,
    eps_list: &[f64],
) -> Result<Vec<SmallBallRow>, DensityError> {
    if eps_list.is_empty()
        || eps_list.iter().any(|&e| e <= 0.0)
        || eps_list.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(DensityError::BadEpsilons);
    }
    let n = sample.lambda_min_c.len();
    Ok(eps_list
        .iter()
        .map(|&eps| {
            let hits = sample.lambda_min_c.iter().filter(|&&l| l <= eps).count();
            let p = hits as f64 / n as f64;
            SmallBallRow {
                epsilon: eps,
                probability: p,
                stderr: binomial_stderr(p, n),
            }
        })
        .collect())
}

/// Row of the negative-moment table.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeMomentRow {
    pub p: f64,
    /// Sample mean of `(det C_t)^{-p}`.
    pub value: f64,
    /// True when the single largest path contributes more than half the sum
    /// (heavy-tail warning: the empirical moment is not trustworthy).
    pub tail_dominated: bool,
}

/// Empirical negative moments of `det C_t`. Errors on an exact zero
/// determinant — that is a degeneracy detection, not a heavy tail.
pub fn negative_moment_estimate(
    sample: &NondegeneracySample,
    p_list: &[f64],
) -> Result<Vec<NegativeMomentRow>, DensityError> {
    if sample.det_c.iter().any(|&d| d == 0.0) {
        return Err(DensityError::DegenerateSample);
    }
    Ok(p_list
        .iter()
        .map(|&p| {
            let terms: Vec<f64> = sample.det_c.iter().map(|&d| d.powf(-p)).collect();
            let total = neumaier_sum(&terms);
            let largest = terms.iter().cloned().fold(0.0f64, f64::max);
            NegativeMomentRow {
                p,
                value: total / terms.len() as f64,
                tail_dominated: largest > 0.5 * total,
            }
        })
        .collect())
}

/// Bandwidth choice for [`kernel_density`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Per-dimension Silverman rule `1.06 sd n^{-1/(4+n_dim)}`.
    Silverman,
    /// One fixed bandwidth for all dimensions.
    Fixed(f64),
}

/// Per-dimension bandwidths actually used (returned for reporting).
pub fn resolve_bandwidth(samples: &[State], bandwidth: Bandwidth) -> Result<Vec<f64>, DensityError> {
    if samples.is_empty() {
        return Err(DensityError::EmptySamples);
    }
    let dim = samples[0].len();
    match bandwidth {
        Bandwidth::Fixed(h) => {
            if h <= 0.0 {
                return Err(DensityError::BadBandwidth(h));
            }
            Ok(vec![h; dim])
        }
        Bandwidth::Silverman => {
            let n = samples.len() as f64;
            let exponent = -1.0 / (4.0 + dim as f64);
            (0..dim)
                .map(|j| {
                    let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
                    let sd = crate::stats::sample_variance(&col).sqrt();
                    let h = 1.06 * sd.max(1e-12) * n.powf(exponent);
                    if h <= 0.0 {
                        Err(DensityError::BadBandwidth(h))
                    } else {
                        Ok(h)
                    }
                })
                .collect()
        }
    }
}

/// Gaussian product-kernel density estimate at `eval_points`.
pub fn kernel_density(
    samples: &[State],
    bandwidth: Bandwidth,
    eval_points: &[State],
) -> Result<Vec<f64>, DensityError> {
    let h = resolve_bandwidth(samples, bandwidth)?;
    let dim = samples[0].len();
    let norm = h
        .iter()
        .map(|hj| hj * (2.0 * std::f64::consts::PI).sqrt())
        .product::<f64>()
        * samples.len() as f64;
    Ok(eval_points
        .iter()
        .map(|z| {
            let terms: Vec<f64> = samples
                .iter()
                .map(|s| {
                    let mut e = 0.0;
                    for j in 0..dim {
                        let u = (z[j] - s[j]) / h[j];
                        e += u * u;
                    }
                    (-0.5 * e).exp()
                })
                .collect();
            neumaier_sum(&terms) / norm
        })
        .collect())
}
