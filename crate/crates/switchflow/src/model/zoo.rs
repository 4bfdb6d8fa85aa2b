//! Built-in model zoo.
//!
//! Each fixture has closed-form reference quantities used by the oracle
//! tests:
//!
//! - `switching-ou`: `dX = -a(alpha) X dt + s(alpha) dW`, n = d = 1.
//! - `switching-gbm`: `dX = mu(alpha) X dt + s(alpha) X dW`, n = d = 1.
//!   Note: the multiplicative volatility has unbounded derivatives of order
//!   zero (sigma itself grows linearly), so this fixture sits outside the
//!   globally-bounded-coefficient hypotheses; it is kept because its closed
//!   forms (`J_{0,t} = X_t / x_0`, `D_r X_t = s X_t`) are valuable.
//! - `hypoelliptic-2d`: n = 2, d = 1, constant `sigma = (1, 0)^T`,
//!   `b(x, alpha) = (-theta(alpha) x_1, x_1)^T`. Rank-one noise, but the
//!   bracket `[sigma_0, sigma_1]` restores the missing direction.
//! - `degenerate-2d`: n = 2, d = 1, `sigma = (1, 0)^T`, `b = 0`. All bracket
//!   levels >= 1 vanish; the second coordinate is never reached.
//! - `elliptic-nd`: `sigma` = identity columns, `b = -a(alpha) x`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{CoefficientField, GeneratorMatrix, ModelError, SwitchingModel};

/// Parameter map for [`builtin_model`], deserializable from the runner's
/// config file. Unset fields fall back to documented defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuiltinParams {
    /// Mean-reversion rates per regime (`switching-ou`, `elliptic-nd`).
    pub a: Option<Vec<f64>>,
    /// Volatilities per regime (`switching-ou`, `switching-gbm`).
    pub s: Option<Vec<f64>>,
    /// Drift rates per regime (`switching-gbm`).
    pub mu: Option<Vec<f64>>,
    /// Rotation rates per regime (`hypoelliptic-2d`).
    pub theta: Option<Vec<f64>>,
    /// Generator matrix rows.
    pub q: Option<Vec<Vec<f64>>>,
    /// State dimension (`elliptic-nd`).
    pub dim: Option<usize>,
}

fn default_generator() -> GeneratorMatrix {
    GeneratorMatrix::from_rows(&[vec![-1.0, 1.0], vec![2.0, -2.0]]).expect("valid default Q")
}

impl BuiltinParams {
    fn generator(&self) -> Result<GeneratorMatrix, ModelError> {
        match &self.q {
            Some(rows) => GeneratorMatrix::from_rows(rows),
            None => Ok(default_generator()),
        }
    }

    fn per_regime(
        values: &Option<Vec<f64>>,
        default: &[f64],
        m0: usize,
        name: &str,
    ) -> Result<Vec<f64>, ModelError> {
        let v = values.clone().unwrap_or_else(|| default.to_vec());
        if v.len() != m0 {
            return Err(ModelError::BadParam(format!(
                "`{name}` has {} entries but Q has {m0} regimes",
                v.len()
            )));
        }
        Ok(v)
    }
}

/// Constructs a built-in model by name.
///
/// Known names: `switching-ou`, `switching-gbm`, `hypoelliptic-2d`,
/// `degenerate-2d`, `elliptic-nd`.
pub fn builtin_model(name: &str, params: &BuiltinParams) -> Result<SwitchingModel, ModelError> {
    let generator = params.generator()?;
    let m0 = generator.m0();
    match name {
        "switching-ou" => {
            let a = BuiltinParams::per_regime(&params.a, &[1.0, 2.0], m0, "a")?;
            let s = BuiltinParams::per_regime(&params.s, &[0.5, 1.0], m0, "s")?;
            switching_ou(&a, &s, generator)
        }
        "switching-gbm" => {
            let mu = BuiltinParams::per_regime(&params.mu, &[0.1, 0.2], m0, "mu")?;
            let s = BuiltinParams::per_regime(&params.s, &[0.3, 0.5], m0, "s")?;
            switching_gbm(&mu, &s, generator)
        }
        "hypoelliptic-2d" => {
            let theta = BuiltinParams::per_regime(&params.theta, &[1.0, 2.0], m0, "theta")?;
            hypoelliptic_2d(&theta, generator)
        }
        "degenerate-2d" => degenerate_2d(generator),
        "elliptic-nd" => {
            let dim = params.dim.unwrap_or(2);
            let a = BuiltinParams::per_regime(&params.a, &[0.5, 1.0], m0, "a")?;
            elliptic_nd(dim, &a, generator)
        }
        other => Err(ModelError::UnknownBuiltin(other.to_string())),
    }
}

/// `dX = -a(alpha) X dt + s(alpha) dW`.
pub fn switching_ou(
    a: &[f64],
    s: &[f64],
    generator: GeneratorMatrix,
) -> Result<SwitchingModel, ModelError> {
    check_len(a, generator.m0(), "a")?;
    check_len(s, generator.m0(), "s")?;
    let drift = CoefficientField::linear(
        a.iter().map(|&ai| DMatrix::from_element(1, 1, -ai)).collect(),
    );
    let sigma = CoefficientField::constant(
        s.iter().map(|&si| DVector::from_element(1, si)).collect(),
    );
    Ok(SwitchingModel::new(1, drift, vec![sigma], generator))
}

/// `dX = mu(alpha) X dt + s(alpha) X dW`.
pub fn switching_gbm(
    mu: &[f64],
    s: &[f64],
    generator: GeneratorMatrix,
) -> Result<SwitchingModel, ModelError> {
    check_len(mu, generator.m0(), "mu")?;
    check_len(s, generator.m0(), "s")?;
    let drift = CoefficientField::linear(
        mu.iter().map(|&m| DMatrix::from_element(1, 1, m)).collect(),
    );
    let sigma = CoefficientField::linear(
        s.iter().map(|&si| DMatrix::from_element(1, 1, si)).collect(),
    );
    Ok(SwitchingModel::new(1, drift, vec![sigma], generator))
}

/// `b(x, alpha) = (-theta(alpha) x_1, x_1)^T`, `sigma = (1, 0)^T`.
pub fn hypoelliptic_2d(
    theta: &[f64],
    generator: GeneratorMatrix,
) -> Result<SwitchingModel, ModelError> {
    check_len(theta, generator.m0(), "theta")?;
    let mats: Vec<DMatrix<f64>> = theta
        .iter()
        .map(|&t| DMatrix::from_row_slice(2, 2, &[-t, 0.0, 1.0, 0.0]))
        .collect();
    let drift = CoefficientField::linear(mats);
    let sigma = CoefficientField::constant(vec![
        DVector::from_vec(vec![1.0, 0.0]);
        generator.m0()
    ]);
    Ok(SwitchingModel::new(2, drift, vec![sigma], generator))
}

/// `b = 0`, `sigma = (1, 0)^T`: the second coordinate is unreachable.
pub fn degenerate_2d(generator: GeneratorMatrix) -> Result<SwitchingModel, ModelError> {
    let m0 = generator.m0();
    let drift = CoefficientField::constant(vec![DVector::zeros(2); m0]);
    let sigma = CoefficientField::constant(vec![DVector::from_vec(vec![1.0, 0.0]); m0]);
    Ok(SwitchingModel::new(2, drift, vec![sigma], generator))
}

/// `b = -a(alpha) x`, `sigma_i = e_i`: uniformly elliptic in any dimension.
pub fn elliptic_nd(
    dim: usize,
    a: &[f64],
    generator: GeneratorMatrix,
) -> Result<SwitchingModel, ModelError> {
    check_len(a, generator.m0(), "a")?;
    let m0 = generator.m0();
    let drift = CoefficientField::linear(
        a.iter().map(|&ai| DMatrix::identity(dim, dim) * -ai).collect(),
    );
    let cols = (0..dim)
        .map(|i| {
            let mut e = DVector::zeros(dim);
            e[i] = 1.0;
            CoefficientField::constant(vec![e; m0])
        })
        .collect();
    Ok(SwitchingModel::new(dim, drift, cols, generator))
}

fn check_len(v: &[f64], m0: usize, name: &str) -> Result<(), ModelError> {
    if v.len() != m0 {
        return Err(ModelError::BadParam(format!(
            "`{name}` has {} entries but Q has {m0} regimes",
            v.len()
        )));
    }
    Ok(())
}

/// Names of every built-in fixture, in a stable order.
pub const ALL_BUILTINS: [&str; 5] = [
    "switching-ou",
    "switching-gbm",
    "hypoelliptic-2d",
    "degenerate-2d",
    "elliptic-nd",
];
