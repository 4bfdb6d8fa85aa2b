//! Switching SDE problem definitions.
//!
//! A [`SwitchingModel`] bundles the drift `b(x, a)`, the diffusion columns
//! `s_1(x, a), .., s_d(x, a)` (each with analytic first and, optionally,
//! second derivative oracles in `x`), and the generator matrix `Q` of the
//! regime chain. Derivative oracles are user-supplied callables rather than
//! automatic differentiation: the bracket engine and the second-derivative
//! flows need `grad` and `grad^2` explicitly.
//!
//! The [`zoo`] submodule holds built-in fixtures with closed-form reference
//! quantities used throughout the test suite.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// State vector in `R^n`.
pub type State = DVector<f64>;
/// Regime index, `0 .. m0`.
pub type Regime = usize;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("second-derivative oracle missing for {0}")]
    MissingHessian(String),
    #[error("unknown built-in model `{0}`")]
    UnknownBuiltin(String),
    #[error("bad parameter for built-in model: {0}")]
    BadParam(String),
    #[error("generator matrix must be square, got {rows}x{cols}")]
    NonSquareGenerator { rows: usize, cols: usize },
}

/// Generator (Q-) matrix of the regime chain.
///
/// Off-diagonal entries are jump rates; rows sum to zero. `K = max |q_ij|`
/// bounds the rates and sizes the mark domain of the Poisson-random-measure
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    q: DMatrix<f64>,
    k_max: f64,
}

/// One invariant violation found by [`validate_model`].
#[derive(Debug, Clone, PartialEq)]
pub enum ModelViolation {
    /// `q_ij < 0` for some `i != j`.
    NegativeRate { i: usize, j: usize, value: f64 },
    /// Row does not sum to zero within 1e-12.
    RowSum { row: usize, sum: f64 },
    /// An oracle returned a vector of the wrong length.
    BadOracleDim {
        oracle: String,
        regime: Regime,
        got: usize,
        expected: usize,
    },
    /// Model declares `d` diffusion columns but holds a different number.
    DiffusionCount { got: usize, expected: usize },
}

impl std::fmt::Display for ModelViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelViolation::NegativeRate { i, j, value } => {
                write!(f, "q[{i}][{j}] = {value} is negative")
            }
            ModelViolation::RowSum { row, sum } => {
                write!(f, "row {row} of Q sums to {sum}, expected 0")
            }
            ModelViolation::BadOracleDim {
                oracle,
                regime,
                got,
                expected,
            } => write!(
                f,
                "{oracle} returned length {got} at regime {regime}, expected {expected}"
            ),
            ModelViolation::DiffusionCount { got, expected } => {
                write!(f, "model declares d = {expected} but has {got} diffusion columns")
            }
        }
    }
}

impl GeneratorMatrix {
    /// Row-sum tolerance: Q entries are user inputs, exact arithmetic is
    /// expected at entry.
    pub const ROW_SUM_TOL: f64 = 1e-12;

    pub fn new(q: DMatrix<f64>) -> Result<Self, ModelError> {
        if q.nrows() != q.ncols() {
            return Err(ModelError::NonSquareGenerator {
                rows: q.nrows(),
                cols: q.ncols(),
            });
        }
        let k_max = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(Self { q, k_max })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let m0 = rows.len();
        let mut q = DMatrix::zeros(m0, rows.first().map_or(0, Vec::len));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != q.ncols() {
                return Err(ModelError::NonSquareGenerator {
                    rows: m0,
                    cols: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                q[(i, j)] = v;
            }
        }
        Self::new(q)
    }

    /// Number of regimes.
    pub fn m0(&self) -> usize {
        self.q.nrows()
    }

    /// `max |q_ij|`.
    pub fn k_max(&self) -> f64 {
        self.k_max
    }

    pub fn rate(&self, i: Regime, j: Regime) -> f64 {
        self.q[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn violations(&self) -> Vec<ModelViolation> {
        let mut out = Vec::new();
        for i in 0..self.m0() {
            let mut sum = 0.0;
            for j in 0..self.m0() {
                sum += self.q[(i, j)];
                if i != j && self.q[(i, j)] < 0.0 {
                    out.push(ModelViolation::NegativeRate {
                        i,
                        j,
                        value: self.q[(i, j)],
                    });
                }
            }
            if sum.abs() > Self::ROW_SUM_TOL {
                out.push(ModelViolation::RowSum { row: i, sum });
            }
        }
        out
    }
}

type ValueFn = dyn Fn(&State, Regime) -> State + Send + Sync;
type JacFn = dyn Fn(&State, Regime) -> DMatrix<f64> + Send + Sync;
type HessFn = dyn Fn(&State, Regime) -> Vec<DMatrix<f64>> + Send + Sync;

/// A coefficient field `R^n x S -> R^n` with analytic derivative oracles.
///
/// `hess` returns one symmetric `n x n` matrix per output component:
/// `hess[k][(i, j)] = d^2 f_k / dx_i dx_j`. Fields constructed as constant
/// or affine in `x` carry that information so downstream code can skip
/// vanishing terms exactly.
pub struct CoefficientField {
    value: Box<ValueFn>,
    jac: Box<JacFn>,
    hess: Option<Box<HessFn>>,
    constant_in_x: bool,
    affine_in_x: bool,
}

impl CoefficientField {
    pub fn new(
        value: impl Fn(&State, Regime) -> State + Send + Sync + 'static,
        jac: impl Fn(&State, Regime) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Box::new(value),
            jac: Box::new(jac),
            hess: None,
            constant_in_x: false,
            affine_in_x: false,
        }
    }

    pub fn with_hess(
        mut self,
        hess: impl Fn(&State, Regime) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
    ) -> Self {
        self.hess = Some(Box::new(hess));
        self
    }

    /// Field independent of `x` (jacobian and hessian vanish identically).
    pub fn constant(values: Vec<State>) -> Self {
        let n = values[0].len();
        let mut f = Self::new(
            move |_x, a| values[a].clone(),
            move |_x, _a| DMatrix::zeros(n, n),
        )
        .with_hess(move |_x, _a| vec![DMatrix::zeros(n, n); n]);
        f.constant_in_x = true;
        f.affine_in_x = true;
        f
    }

    /// Field `x -> A(a) x + c(a)` (hessian vanishes identically).
    pub fn affine(mats: Vec<DMatrix<f64>>, offsets: Vec<State>) -> Self {
        let n = mats[0].nrows();
        let m = mats.clone();
        let mut f = Self::new(
            move |x, a| &m[a] * x + &offsets[a],
            move |_x, a| mats[a].clone(),
        )
        .with_hess(move |_x, _a| vec![DMatrix::zeros(n, n); n]);
        f.affine_in_x = true;
        f
    }

    /// `x -> A(a) x`.
    pub fn linear(mats: Vec<DMatrix<f64>>) -> Self {
        let n = mats[0].nrows();
        let m0 = mats.len();
        Self::affine(mats, vec![DVector::zeros(n); m0])
    }

    pub fn eval(&self, x: &State, a: Regime) -> State {
        (self.value)(x, a)
    }

    pub fn jac(&self, x: &State, a: Regime) -> DMatrix<f64> {
        (self.jac)(x, a)
    }

    pub fn hess(&self, x: &State, a: Regime) -> Option<Vec<DMatrix<f64>>> {
        self.hess.as_ref().map(|h| h(x, a))
    }

    pub fn has_hess(&self) -> bool {
        self.hess.is_some()
    }

    /// True when the field does not depend on `x`.
    pub fn is_constant_in_x(&self) -> bool {
        self.constant_in_x
    }

    /// True when the jacobian does not depend on `x` (hessian vanishes).
    pub fn is_affine_in_x(&self) -> bool {
        self.affine_in_x
    }
}

impl std::fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientField")
            .field("has_hess", &self.has_hess())
            .field("constant_in_x", &self.constant_in_x)
            .field("affine_in_x", &self.affine_in_x)
            .finish()
    }
}

/// Bilinear application of a hessian tensor: `out[k][c] = v^T H_k M[:, c]`.
pub fn hess_bilinear(hess: &[DMatrix<f64>], v: &State, m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = hess.len();
    let cols = m.ncols();
    let mut out = DMatrix::zeros(n, cols);
    for (k, h) in hess.iter().enumerate() {
        let row = (h * m).transpose() * v; // cols-vector with entries v^T H m_c
        for c in 0..cols {
            out[(k, c)] = row[c];
        }
    }
    out
}

/// A switching SDE problem.
#[derive(Debug)]
pub struct SwitchingModel {
    n: usize,
    d: usize,
    drift: CoefficientField,
    diffusion_cols: Vec<CoefficientField>,
    generator: GeneratorMatrix,
}

impl SwitchingModel {
    pub fn new(
        n: usize,
        drift: CoefficientField,
        diffusion_cols: Vec<CoefficientField>,
        generator: GeneratorMatrix,
    ) -> Self {
        let d = diffusion_cols.len();
        Self {
            n,
            d,
            drift,
            diffusion_cols,
            generator,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m0(&self) -> usize {
        self.generator.m0()
    }

    pub fn drift(&self) -> &CoefficientField {
        &self.drift
    }

    pub fn diffusion_col(&self, i: usize) -> &CoefficientField {
        &self.diffusion_cols[i]
    }

    pub fn diffusion_cols(&self) -> &[CoefficientField] {
        &self.diffusion_cols
    }

    pub fn generator(&self) -> &GeneratorMatrix {
        &self.generator
    }

    /// Full diffusion matrix `s(x, a)` with columns `s_i(x, a)`.
    pub fn sigma_matrix(&self, x: &State, a: Regime) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.d);
        for (i, col) in self.diffusion_cols.iter().enumerate() {
            m.set_column(i, &col.eval(x, a));
        }
        m
    }

    /// True when the Skorohod trace of the Bismut weight vanishes
    /// identically: constant diffusion columns and affine drift make every
    /// second-derivative flow and every `D_k M` term zero.
    pub fn trace_free(&self) -> bool {
        self.drift.is_affine_in_x() && self.diffusion_cols.iter().all(|c| c.is_constant_in_x())
    }

    pub fn has_hessians(&self) -> bool {
        self.drift.has_hess() && self.diffusion_cols.iter().all(|c| c.has_hess())
    }
}

/// Checks every invariant of the generator matrix and the oracle dimensions.
/// Violations are data, not failures: an empty report means admissible.
pub fn validate_model(model: &SwitchingModel) -> Vec<ModelViolation> {
    let mut out = model.generator.violations();
    if model.diffusion_cols.len() != model.d {
        out.push(ModelViolation::DiffusionCount {
            got: model.diffusion_cols.len(),
            expected: model.d,
        });
    }
    let probe = DVector::zeros(model.n);
    for a in 0..model.m0() {
        let got = model.drift.eval(&probe, a).len();
        if got != model.n {
            out.push(ModelViolation::BadOracleDim {
                oracle: "drift".into(),
                regime: a,
                got,
                expected: model.n,
            });
        }
        for (i, col) in model.diffusion_cols.iter().enumerate() {
            let got = col.eval(&probe, a).len();
            if got != model.n {
                out.push(ModelViolation::BadOracleDim {
                    oracle: format!("sigma_{i}"),
                    regime: a,
                    got,
                    expected: model.n,
                });
            }
        }
    }
    out
}

/// Result of checking one analytic derivative oracle against central finite
/// differences.
#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub oracle: String,
    pub max_rel_error: f64,
    /// Probe realizing the maximum, if any probes were supplied.
    pub worst_probe: Option<(State, Regime)>,
}

fn rel_err(analytic: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
    let diff = (analytic - fd).norm();
    diff / fd.norm().max(1.0)
}

/// Compares each analytic jacobian (and hessian, when present) against
/// central finite differences of the level below, reporting the max relative
/// error over the probes.
pub fn check_derivative_oracles(
    model: &SwitchingModel,
    probes: &[(State, Regime)],
    fd_step: f64,
) -> Vec<OracleCheck> {
    assert!(fd_step > 0.0, "fd_step must be positive");
    let mut out = Vec::new();
    let mut fields: Vec<(String, &CoefficientField)> = vec![("drift".into(), &model.drift)];
    for (i, c) in model.diffusion_cols.iter().enumerate() {
        fields.push((format!("sigma_{i}"), c));
    }
    for (name, field) in fields {
        let mut jac_worst = (0.0f64, None);
        let mut hess_worst = (0.0f64, None);
        for (x, a) in probes {
            let n = x.len();
            // FD jacobian of value
            let mut fd_jac = DMatrix::zeros(n, n);
            for j in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += fd_step;
                xm[j] -= fd_step;
                let col = (field.eval(&xp, *a) - field.eval(&xm, *a)) / (2.0 * fd_step);
                fd_jac.set_column(j, &col);
            }
            let e = rel_err(&field.jac(x, *a), &fd_jac);
            if e >= jac_worst.0 {
                jac_worst = (e, Some((x.clone(), *a)));
            }
            if let Some(h) = field.hess(x, *a) {
                // FD of the jacobian, component-wise
                let mut max_e = 0.0f64;
                for k in 0..n {
                    let mut fd_h = DMatrix::zeros(n, n);
                    for j in 0..n {
                        let mut xp = x.clone();
                        let mut xm = x.clone();
                        xp[j] += fd_step;
                        xm[j] -= fd_step;
                        let dj = (field.jac(&xp, *a) - field.jac(&xm, *a)) / (2.0 * fd_step);
                        // row k of d(jac)/dx_j gives H_k[:, j]
                        for i in 0..n {
                            fd_h[(i, j)] = dj[(k, i)];
                        }
                    }
                    max_e = max_e.max(rel_err(&h[k], &fd_h));
                }
                if max_e >= hess_worst.0 {
                    hess_worst = (max_e, Some((x.clone(), *a)));
                }
            }
        }
        out.push(OracleCheck {
            oracle: format!("{name}.jac"),
            max_rel_error: jac_worst.0,
            worst_probe: jac_worst.1,
        });
        if field.has_hess() {
            out.push(OracleCheck {
                oracle: format!("{name}.hess"),
                max_rel_error: hess_worst.0,
                worst_probe: hess_worst.1,
            });
        }
    }
    out
}

pub mod zoo;
