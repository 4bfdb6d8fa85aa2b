//! Bismut weight, discrete Skorohod integral, and gradient estimators.
//!
//! The weight for direction `xi` is `u_k = s(X_k, a_k)^T Phi_{k+1,K}^T w`
//! with `w = M^{-1} J[K] xi`, the grid transcription of the integrand
//! `s^T J_{s,t}^T M_t^{-1} J_{0,t} xi`. Its divergence is evaluated by the
//! Gaussian integration-by-parts sum
//!
//! ```text
//! delta(u) = sum_k u_k . dw_k - sum_k sum_i (D_k^i u_k)_i Delta_k,
//! ```
//!
//! which satisfies the duality `E[F delta(u)] = sum_k Delta_k E[(dF/dw_k) u_k]`
//! exactly for smooth grid functionals, making the abstract duality a
//! regression test rather than a limit statement. The reconstruction identity
//! `sum_k D_k u_k Delta_k = J[K] xi` pins the weight itself.
//!
//! The trace term needs the diagonal increment-derivatives of the weight.
//! They vanish identically for models with affine drift and state-independent
//! diffusion (every second-derivative flow and every `D_k M` is zero), are
//! computed by a flat `O(K^2)` scalar recursion for one-dimensional models,
//! and fall back to a per-cell reference assembly otherwise.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::chain::{simulate_chain, ChainMethod};
use crate::malliavin::{
    jacobian_flow, malliavin_derivative, malliavin_matrix, second_derivative_flow, step_matrix,
    FlowBundle, MalliavinError, MalliavinMatrix,
};
use crate::model::{Regime, State, SwitchingModel};
use crate::paths::{make_grid, replay_path, simulate_path, PathError, StatePath};
use crate::rng::{SeedStream, StreamRole};
use crate::stats::{mean_stderr, neumaier_sum};

#[derive(Debug, Error)]
pub enum BismutError {
    #[error(
        "Malliavin matrix too ill-conditioned: lambda_min = {lambda_min:.3e}, condition number {cond:.3e} (limit {limit:.1e})"
    )]
    IllConditioned {
        lambda_min: f64,
        cond: f64,
        limit: f64,
    },
    #[error("every path was rejected by the conditioning guard")]
    AllPathsRejected,
    #[error("direction must be a unit vector (or zero in tests), |xi| = {0}")]
    BadDirection(f64),
    #[error("functional does not supply a gradient")]
    MissingGradient,
    #[error(transparent)]
    Chain(#[from] crate::chain::ChainError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Malliavin(#[from] MalliavinError),
}

/// Condition-number limit for inverting the Malliavin matrix.
pub const COND_MAX: f64 = 1e12;

/// The Bismut weight along one path, for one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct BismutWeight {
    /// Direction (unit vector; the zero vector is permitted for tests).
    pub xi: DVector<f64>,
    /// `w = M^{-1} J[K] xi`.
    pub w: DVector<f64>,
    /// `u_k = s_k^T Phi_{k+1,K}^T w`, one `d`-vector per cell.
    pub u: Vec<DVector<f64>>,
    /// Condition number of `M` (ratio of extreme eigenvalues).
    pub conditioning: f64,
    pub lambda_min: f64,
}

impl BismutWeight {
    /// `sum_k u_k . dw_k`, the Ito-looking part of the divergence.
    pub fn dot_increments(&self, path: &StatePath) -> f64 {
        let terms: Vec<f64> = self
            .u
            .iter()
            .zip(&path.dw)
            .map(|(u, dw)| u.dot(dw))
            .collect();
        neumaier_sum(&terms)
    }
}

/// Builds the weight at the terminal node. Fails with a structured error
/// carrying `lambda_min(M)` when `M` is singular or its condition number
/// exceeds [`COND_MAX`] — the numerical signature of a nondegeneracy failure.
pub fn bismut_weight(
    model: &SwitchingModel,
    path: &StatePath,
    flows: &FlowBundle,
    mm: &MalliavinMatrix,
    xi: &DVector<f64>,
) -> Result<BismutWeight, BismutError> {
    let norm = xi.norm();
    if norm != 0.0 && (norm - 1.0).abs() > 1e-12 {
        return Err(BismutError::BadDirection(norm));
    }
    let eig = mm.m.clone().symmetric_eigen();
    let lambda_min = eig.eigenvalues.min();
    let lambda_max = eig.eigenvalues.max();
    let cond = if lambda_min > 0.0 {
        lambda_max / lambda_min
    } else {
        f64::INFINITY
    };
    if !(lambda_min > 0.0) || cond > COND_MAX {
        return Err(BismutError::IllConditioned {
            lambda_min,
            cond,
            limit: COND_MAX,
        });
    }
    let cells = path.grid.cells();
    let rhs = &flows.j[cells] * xi;
    let w = mm
        .m
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or(BismutError::IllConditioned {
            lambda_min,
            cond,
            limit: COND_MAX,
        })?;
    // backward sweep: wk = Phi_{k+1,K}^T w via wk <- A_k^T wk
    let mut u = vec![DVector::zeros(model.d()); cells];
    let mut wk = w.clone();
    for k in (0..cells).rev() {
        let a = path.grid.regime_per_cell[k];
        let sigma = model.sigma_matrix(&path.x[k], a);
        u[k] = sigma.transpose() * &wk;
        wk = step_matrix(model, path, k).transpose() * wk;
    }
    Ok(BismutWeight {
        xi: xi.clone(),
        w,
        u,
        conditioning: cond,
        lambda_min,
    })
}

/// Diagonal increment-derivative `D_k^i u_k` of the weight (a `d`-vector),
/// assembled from the second-derivative flow by the three-term formula
///
/// ```text
/// D_k^i u_k = s_k^T (D_k^i Phi_{k+1,K})^T w
///           + s_k^T Phi_{k+1,K}^T M^{-1} [ (D_k^i J[K]) xi - (D_k^i M) w ],
/// ```
///
/// (the `D_k^i s_k` term is exactly zero: the left-point state `X_k` does not
/// depend on `dw_k`). `D_k^i M` sums `D_k^i D_r` over all cells via the chain
/// rule `D_k^i D_r = (D_k^i Phi_{r+1,K}) s_r + Phi_{r+1,K} grad s(X_r) D_k^i X_r`.
pub fn weight_malliavin_derivative(
    model: &SwitchingModel,
    path: &StatePath,
    flows: &FlowBundle,
    mm: &MalliavinMatrix,
    weight: &BismutWeight,
    k: usize,
    i: usize,
) -> Result<DVector<f64>, BismutError> {
    let d = model.d();
    if model.trace_free() {
        return Ok(DVector::zeros(d));
    }
    let cells = path.grid.cells();
    let sdf = second_derivative_flow(model, path, flows, k, i)?;
    let j_end = &flows.j[cells];
    let n = model.n();

    let inverse_of = |node: usize| -> Result<DMatrix<f64>, BismutError> {
        flows.j[node]
            .clone()
            .try_inverse()
            .ok_or(BismutError::Malliavin(MalliavinError::SingularFlow { node }))
    };

    let inv_k1 = inverse_of(k + 1)?;
    let phi_k = j_end * &inv_k1;
    let a_k = path.grid.regime_per_cell[k];
    let sigma_k = model.sigma_matrix(&path.x[k], a_k);
    let dphi_k = (&sdf.dj[cells] - &phi_k * &sdf.dj[k + 1]) * &inv_k1;
    let term_b = sigma_k.transpose() * dphi_k.transpose() * &weight.w;

    // D_k^i M
    let mut dm = DMatrix::zeros(n, n);
    for r in 0..cells {
        let inv_r1 = inverse_of(r + 1)?;
        let phi_r = j_end * &inv_r1;
        let a_r = path.grid.regime_per_cell[r];
        let sigma_r = model.sigma_matrix(&path.x[r], a_r);
        let d_r = &phi_r * &sigma_r;
        let mut dd = (&sdf.dj[cells] - &phi_r * &sdf.dj[r + 1]) * &inv_r1 * &sigma_r;
        if r >= k + 1 {
            let v = malliavin_derivative(model, path, flows, k, r)?
                .column(i)
                .into_owned();
            for (j, col) in model.diffusion_cols().iter().enumerate() {
                if !col.is_constant_in_x() {
                    let extra = &phi_r * col.jac(&path.x[r], a_r) * &v;
                    let mut c = dd.column_mut(j);
                    c += extra;
                }
            }
        }
        dm += (&dd * d_r.transpose() + &d_r * dd.transpose()) * path.grid.delta(r);
    }
    let rhs = &sdf.dj[cells] * &weight.xi - &dm * &weight.w;
    let dwv = mm
        .m
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or(BismutError::IllConditioned {
            lambda_min: weight.lambda_min,
            cond: weight.conditioning,
            limit: COND_MAX,
        })?;
    let term_c = sigma_k.transpose() * phi_k.transpose() * dwv;
    Ok(term_b + term_c)
}

/// `sum_k sum_i (D_k^i u_k)_i Delta_k`, the trace subtracted inside the
/// divergence. Exactly zero for trace-free models; flat scalar `O(K^2)`
/// recursion for `n = d = 1`; per-cell reference assembly otherwise.
pub fn skorohod_trace(
    model: &SwitchingModel,
    path: &StatePath,
    flows: &FlowBundle,
    mm: &MalliavinMatrix,
    weight: &BismutWeight,
) -> Result<f64, BismutError> {
    if model.trace_free() {
        return Ok(0.0);
    }
    if model.n() == 1 && model.d() == 1 {
        return scalar_trace(model, path, mm, weight);
    }
    let cells = path.grid.cells();
    let mut terms = Vec::with_capacity(cells * model.d());
    for k in 0..cells {
        for i in 0..model.d() {
            let dku = weight_malliavin_derivative(model, path, flows, mm, weight, k, i)?;
            terms.push(dku[i] * path.grid.delta(k));
        }
    }
    Ok(neumaier_sum(&terms))
}

/// Scalar specialization of the trace: all flows are products of the step
/// scalars `A_k`, so `Phi_{a,b}` are prefix-product ratios and the whole
/// double loop runs on flat `f64` arrays with no allocation in the inner
/// loops.
fn scalar_trace(
    model: &SwitchingModel,
    path: &StatePath,
    mm: &MalliavinMatrix,
    weight: &BismutWeight,
) -> Result<f64, BismutError> {
    let kc = path.grid.cells();
    let m_val = mm.m[(0, 0)];
    let w = weight.w[0];
    let xi = weight.xi[0];
    let probe = |field: &crate::model::CoefficientField, x: &State, a: Regime| {
        (
            field.eval(x, a)[0],
            field.jac(x, a)[(0, 0)],
            field.hess(x, a).map_or(0.0, |h| h[0][(0, 0)]),
        )
    };
    let mut sig = vec![0.0; kc];
    let mut sigp = vec![0.0; kc];
    let mut sigpp = vec![0.0; kc];
    let mut bpp = vec![0.0; kc];
    let mut astep = vec![0.0; kc];
    let mut delta = vec![0.0; kc];
    let mut dw = vec![0.0; kc];
    for k in 0..kc {
        let a = path.grid.regime_per_cell[k];
        let x = &path.x[k];
        let (s, sp, spp) = probe(model.diffusion_col(0), x, a);
        let (_, bp, b2) = probe(model.drift(), x, a);
        sig[k] = s;
        sigp[k] = sp;
        sigpp[k] = spp;
        bpp[k] = b2;
        delta[k] = path.grid.delta(k);
        dw[k] = path.dw[k][0];
        astep[k] = 1.0 + bp * delta[k] + sp * dw[k];
    }
    // prefix products p[m] = J[m], suffix products s_arr[m] = Phi_{m,K}
    let mut p = vec![1.0; kc + 1];
    for k in 0..kc {
        p[k + 1] = p[k] * astep[k];
        if p[k + 1] == 0.0 {
            return Err(BismutError::Malliavin(MalliavinError::SingularFlow {
                node: k + 1,
            }));
        }
    }
    let mut s_arr = vec![1.0; kc + 1];
    for m in (0..kc).rev() {
        s_arr[m] = astep[m] * s_arr[m + 1];
    }
    let d_ker: Vec<f64> = (0..kc).map(|r| s_arr[r + 1] * sig[r]).collect();
    // k-independent part of D_k M: 2 dj_K * q1
    let q1: f64 = (0..kc)
        .map(|r| d_ker[r] * sig[r] * delta[r] / p[r + 1])
        .sum();
    let mut djbuf = vec![0.0; kc + 1];
    let mut vbuf = vec![0.0; kc + 1];
    let mut terms = Vec::with_capacity(kc);
    for k in 0..kc {
        djbuf[k + 1] = sigp[k] * p[k];
        vbuf[k + 1] = sig[k];
        for m in (k + 1)..kc {
            djbuf[m + 1] =
                astep[m] * djbuf[m] + (bpp[m] * delta[m] + sigpp[m] * dw[m]) * vbuf[m] * p[m];
            vbuf[m + 1] = astep[m] * vbuf[m];
        }
        let djk = djbuf[kc];
        let mut s2 = d_ker[k] * s_arr[k + 1] * djbuf[k + 1] * sig[k] * delta[k] / p[k + 1];
        let mut s3 = 0.0;
        for r in (k + 1)..kc {
            s2 += d_ker[r] * s_arr[r + 1] * djbuf[r + 1] * sig[r] * delta[r] / p[r + 1];
            s3 += d_ker[r] * s_arr[r + 1] * sigp[r] * vbuf[r] * delta[r];
        }
        let dm = 2.0 * (djk * q1 - s2 + s3);
        let dwv = (djk * xi - dm * w) / m_val;
        let term_b = sig[k] * w * (djk - s_arr[k + 1] * djbuf[k + 1]) / p[k + 1];
        let term_c = s_arr[k + 1] * sig[k] * dwv;
        terms.push((term_b + term_c) * delta[k]);
    }
    Ok(neumaier_sum(&terms))
}

/// `delta(u) = sum_k u_k . dw_k - sum_k trace(diag_k) Delta_k`, where
/// `diag_k` is the `d x d` matrix with columns `D_k^i u_k`.
pub fn discrete_skorohod(u: &[DVector<f64>], path: &StatePath, diag: &[DMatrix<f64>]) -> f64 {
    assert_eq!(u.len(), path.grid.cells());
    assert_eq!(diag.len(), u.len());
    let terms: Vec<f64> = u
        .iter()
        .zip(&path.dw)
        .zip(diag)
        .enumerate()
        .map(|(k, ((uk, dwk), dk))| uk.dot(dwk) - dk.trace() * path.grid.delta(k))
        .collect();
    neumaier_sum(&terms)
}

/// Which estimator produced a [`GradientEstimate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorTag {
    Bismut,
    Pathwise,
    FiniteDifference,
}

impl std::fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EstimatorTag::Bismut => write!(f, "bismut"),
            EstimatorTag::Pathwise => write!(f, "pathwise"),
            EstimatorTag::FiniteDifference => write!(f, "finite-difference"),
        }
    }
}

/// Monte Carlo estimate of `<grad P_t f, xi>` with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_paths: usize,
    /// Paths rejected by the conditioning guard (never silently averaged).
    pub rejected: usize,
    pub tag: EstimatorTag,
    pub seed: u64,
}

/// A test functional `f(x, a)`, optionally with gradient and sup-norm.
pub struct TestFunctional {
    pub f: Box<dyn Fn(&State, Regime) -> f64 + Send + Sync>,
    pub grad: Option<Box<dyn Fn(&State, Regime) -> DVector<f64> + Send + Sync>>,
    pub sup_norm: Option<f64>,
}

impl TestFunctional {
    pub fn new(
        f: impl Fn(&State, Regime) -> f64 + Send + Sync + 'static,
        grad: Option<Box<dyn Fn(&State, Regime) -> DVector<f64> + Send + Sync>>,
    ) -> Self {
        Self {
            f: Box::new(f),
            grad,
            sup_norm: None,
        }
    }

    pub fn constant(c: f64) -> Self {
        let mut t = Self::new(
            move |_x: &State, _a| c,
            Some(Box::new(|x: &State, _a| DVector::zeros(x.len()))),
        );
        t.sup_norm = Some(c.abs());
        t
    }

    /// `f(x) = w . x`.
    pub fn linear(weights: DVector<f64>) -> Self {
        let w = weights.clone();
        Self::new(
            move |x: &State, _a| weights.dot(x),
            Some(Box::new(move |_x: &State, _a| w.clone())),
        )
    }

    /// `f(x) = tanh(x_1)`.
    pub fn tanh_first() -> Self {
        let mut t = Self::new(
            |x: &State, _a| x[0].tanh(),
            Some(Box::new(|x: &State, _a| {
                let mut g = DVector::zeros(x.len());
                g[0] = 1.0 / x[0].cosh().powi(2);
                g
            })),
        );
        t.sup_norm = Some(1.0);
        t
    }

    /// `f(x) = (x_1)^2`.
    pub fn square_first() -> Self {
        Self::new(
            |x: &State, _a| x[0] * x[0],
            Some(Box::new(|x: &State, _a| {
                let mut g = DVector::zeros(x.len());
                g[0] = 2.0 * x[0];
                g
            })),
        )
    }

    /// `f(x) = x . x`.
    pub fn square_norm() -> Self {
        Self::new(
            |x: &State, _a| x.dot(x),
            Some(Box::new(|x: &State, _a| x * 2.0)),
        )
    }

    /// Discontinuous indicator `1_{x_1 > threshold}`; no gradient.
    pub fn indicator_first(threshold: f64) -> Self {
        let mut t = Self::new(move |x: &State, _a| f64::from(x[0] > threshold), None);
        t.sup_norm = Some(1.0);
        t
    }

    /// Smoothed indicator `(1 + tanh((x_1 - threshold)/width))/2`.
    pub fn smoothed_indicator(threshold: f64, width: f64) -> Self {
        let mut t = Self::new(
            move |x: &State, _a| 0.5 * (1.0 + ((x[0] - threshold) / width).tanh()),
            Some(Box::new(move |x: &State, _a| {
                let mut g = DVector::zeros(x.len());
                g[0] = 0.5 / width / ((x[0] - threshold) / width).cosh().powi(2);
                g
            })),
        );
        t.sup_norm = Some(1.0);
        t
    }

    /// Same functional scaled by a constant factor.
    pub fn scaled(self, factor: f64) -> Self {
        let f = self.f;
        let grad = self.grad.map(|g| {
            Box::new(move |x: &State, a: Regime| g(x, a) * factor)
                as Box<dyn Fn(&State, Regime) -> DVector<f64> + Send + Sync>
        });
        Self {
            f: Box::new(move |x, a| f(x, a) * factor),
            grad,
            sup_norm: self.sup_norm.map(|s| s * factor.abs()),
        }
    }
}

fn check_direction(xi: &DVector<f64>) -> Result<(), BismutError> {
    let norm = xi.norm();
    if norm != 0.0 && (norm - 1.0).abs() > 1e-12 {
        return Err(BismutError::BadDirection(norm));
    }
    Ok(())
}

fn reduce(values: Vec<Option<f64>>, tag: EstimatorTag, seed: u64) -> Result<GradientEstimate, BismutError> {
    let n_total = values.len();
    let accepted: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    let rejected = n_total - accepted.len();
    if accepted.is_empty() {
        return Err(BismutError::AllPathsRejected);
    }
    let (mean, stderr) = mean_stderr(&accepted);
    Ok(GradientEstimate {
        value: mean,
        stderr,
        n_paths: accepted.len(),
        rejected,
        tag,
        seed,
    })
}

/// One simulated path with everything the estimators need.
fn base_path(
    model: &SwitchingModel,
    x0: &State,
    alpha0: Regime,
    t: f64,
    dt: f64,
    seeds: SeedStream,
    p: u64,
) -> Result<(StatePath, Regime), BismutError> {
    let mut crng = seeds.rng(p, StreamRole::Chain);
    let mut nrng = seeds.rng(p, StreamRole::Noise);
    let chain = simulate_chain(model.generator(), alpha0, t, &mut crng, ChainMethod::HoldingTimes)?;
    let grid = make_grid(t, dt, &chain)?;
    let path = simulate_path(model, &grid, x0, &mut nrng)?;
    let alpha_t = chain.regime_at(t);
    Ok((path, alpha_t))
}

/// Bismut estimator: Monte Carlo mean of `f(X_t, a_t) delta(u)` over
/// independent (chain, noise) draws. Paths rejected by the conditioning guard
/// are counted in `rejected`, never averaged.
pub fn gradient_estimate(
    model: &SwitchingModel,
    x0: &State,
    alpha0: Regime,
    t: f64,
    f: &TestFunctional,
    xi: &DVector<f64>,
    n_paths: usize,
    dt: f64,
    seeds: SeedStream,
) -> Result<GradientEstimate, BismutError> {
    check_direction(xi)?;
    let values: Vec<Option<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| -> Result<Option<f64>, BismutError> {
            let (path, alpha_t) = base_path(model, x0, alpha0, t, dt, seeds, p)?;
            let cells = path.grid.cells();
            let flows = FlowBundle::from_jacobian(jacobian_flow(model, &path));
            let mm = malliavin_matrix(model, &path, &flows, cells)?;
            let weight = match bismut_weight(model, &path, &flows, &mm, xi) {
                Ok(w) => w,
                Err(BismutError::IllConditioned { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let trace = skorohod_trace(model, &path, &flows, &mm, &weight)?;
            let delta = weight.dot_increments(&path) - trace;
            Ok(Some((f.f)(path.terminal(), alpha_t) * delta))
        })
        .collect::<Result<_, _>>()?;
    reduce(values, EstimatorTag::Bismut, seeds.master())
}

/// Pathwise estimator: Monte Carlo mean of `grad f(X_t, a_t) . J[K] xi`.
pub fn pathwise_gradient(
    model: &SwitchingModel,
    x0: &State,
    alpha0: Regime,
    t: f64,
    f: &TestFunctional,
    xi: &DVector<f64>,
    n_paths: usize,
    dt: f64,
    seeds: SeedStream,
) -> Result<GradientEstimate, BismutError> {
    check_direction(xi)?;
    let grad = f.grad.as_ref().ok_or(BismutError::MissingGradient)?;
    let values: Vec<Option<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| -> Result<Option<f64>, BismutError> {
            let (path, alpha_t) = base_path(model, x0, alpha0, t, dt, seeds, p)?;
            let j = jacobian_flow(model, &path);
            let jxi = &j[path.grid.cells()] * xi;
            Ok(Some(grad(path.terminal(), alpha_t).dot(&jxi)))
        })
        .collect::<Result<_, _>>()?;
    reduce(values, EstimatorTag::Pathwise, seeds.master())
}

/// Central finite difference of the semigroup with common random numbers:
/// both bumps reuse the identical chain and Brownian increments.
pub fn finite_difference_gradient(
    model: &SwitchingModel,
    x0: &State,
    alpha0: Regime,
    t: f64,
    f: &TestFunctional,
    xi: &DVector<f64>,
    bump: f64,
    n_paths: usize,
    dt: f64,
    seeds: SeedStream,
) -> Result<GradientEstimate, BismutError> {
    check_direction(xi)?;
    assert!(bump > 0.0, "bump must be positive");
    let values: Vec<Option<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| -> Result<Option<f64>, BismutError> {
            let x_plus = x0 + xi * bump;
            let x_minus = x0 - xi * bump;
            let (path_plus, alpha_t) = base_path(model, &x_plus, alpha0, t, dt, seeds, p)?;
            let path_minus = replay_path(model, &path_plus.grid, &x_minus, &path_plus.dw)?;
            let diff = (f.f)(path_plus.terminal(), alpha_t) - (f.f)(path_minus.terminal(), alpha_t);
            Ok(Some(diff / (2.0 * bump)))
        })
        .collect::<Result<_, _>>()?;
    reduce(values, EstimatorTag::FiniteDifference, seeds.master())
}

/// One row of the strong Feller probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub offset: f64,
    /// `|P_t f(x + offset dir) - P_t f(x)|` estimate.
    pub diff: f64,
    pub stderr: f64,
}

/// CRN estimates of the semigroup difference at several offsets, plus a
/// least-squares slope (through the origin) of `|difference|` versus offset.
#[derive(Debug, Clone, PartialEq)]
pub struct StrongFellerTable {
    pub rows: Vec<ProbeRow>,
    pub slope: f64,
}

pub fn strong_feller_probe(
    model: &SwitchingModel,
    x0: &State,
    alpha0: Regime,
    t: f64,
    f: &TestFunctional,
    direction: &DVector<f64>,
    offsets: &[f64],
    n_paths: usize,
    dt: f64,
    seeds: SeedStream,
) -> Result<StrongFellerTable, BismutError> {
    let per_path: Vec<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| -> Result<Vec<f64>, BismutError> {
            let (base, alpha_t) = base_path(model, x0, alpha0, t, dt, seeds, p)?;
            let f_base = (f.f)(base.terminal(), alpha_t);
            offsets
                .iter()
                .map(|&off| {
                    let y = x0 + direction * off;
                    let shifted = replay_path(model, &base.grid, &y, &base.dw)?;
                    Ok((f.f)(shifted.terminal(), alpha_t) - f_base)
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::with_capacity(offsets.len());
    for (j, &off) in offsets.iter().enumerate() {
        let col: Vec<f64> = per_path.iter().map(|r| r[j]).collect();
        let (mean, stderr) = mean_stderr(&col);
        rows.push(ProbeRow {
            offset: off,
            diff: mean.abs(),
            stderr,
        });
    }
    let num: f64 = rows.iter().map(|r| r.diff * r.offset).sum();
    let den: f64 = rows.iter().map(|r| r.offset * r.offset).sum();
    Ok(StrongFellerTable {
        rows,
        slope: if den > 0.0 { num / den } else { 0.0 },
    })
}
