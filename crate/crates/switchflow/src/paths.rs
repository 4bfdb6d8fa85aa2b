//! Euler-Maruyama path engine on jump-aligned grids.
//!
//! The grid inserts every chain jump time as a node, so the regime is
//! exactly constant on each cell and the switching adds no discretization
//! error beyond the diffusion's. Brownian increments are recorded so that
//! perturbed paths, derivative flows, and finite-difference bumps all reuse
//! identical noise.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::chain::ChainPath;
use crate::model::{Regime, State, SwitchingModel};

#[derive(Debug, Error)]
pub enum PathError {
    #[error("dt must satisfy 0 < dt <= t_end, got dt = {dt}, t_end = {t_end}")]
    BadStep { dt: f64, t_end: f64 },
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error("grids do not match")]
    GridMismatch,
}

/// Duplicate-node merge tolerance for grid construction.
const MERGE_TOL: f64 = 1e-14;

/// Time grid `0 = t_0 < .. < t_K = t_end` with the regime on each cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub nodes: Vec<f64>,
    /// Regime on `[t_k, t_{k+1})`; length `K`.
    pub regime_per_cell: Vec<Regime>,
}

impl TimeGrid {
    /// Number of cells `K`.
    pub fn cells(&self) -> usize {
        self.regime_per_cell.len()
    }

    pub fn t_end(&self) -> f64 {
        *self.nodes.last().expect("nonempty grid")
    }

    pub fn delta(&self, k: usize) -> f64 {
        self.nodes[k + 1] - self.nodes[k]
    }
}

/// Uniform nodes at multiples of `dt` with all chain jump times inserted;
/// nodes closer than 1e-14 are merged.
pub fn make_grid(t_end: f64, dt: f64, chain: &ChainPath) -> Result<TimeGrid, PathError> {
    if dt <= 0.0 || dt > t_end {
        return Err(PathError::BadStep { dt, t_end });
    }
    let k_uniform = (t_end / dt).ceil() as usize;
    let mut nodes: Vec<f64> = (0..k_uniform).map(|k| k as f64 * dt).collect();
    nodes.push(t_end);
    for &tau in &chain.jump_times {
        if tau < t_end {
            nodes.push(tau);
        }
    }
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut merged: Vec<f64> = Vec::with_capacity(nodes.len());
    for t in nodes {
        match merged.last() {
            Some(&last) if t - last <= MERGE_TOL => {}
            _ => merged.push(t),
        }
    }
    // keep the endpoint exact
    if let Some(last) = merged.last_mut() {
        *last = t_end;
    }
    let regimes = merged[..merged.len() - 1]
        .iter()
        .map(|&t| chain.regime_at(t))
        .collect();
    Ok(TimeGrid {
        nodes: merged,
        regime_per_cell: regimes,
    })
}

/// A simulated state path with its recorded Brownian increments.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    pub grid: TimeGrid,
    /// States at nodes; length `K + 1`.
    pub x: Vec<State>,
    /// Brownian increments per cell; length `K`, each of dimension `d`.
    pub dw: Vec<DVector<f64>>,
}

impl StatePath {
    pub fn terminal(&self) -> &State {
        self.x.last().expect("nonempty path")
    }

    /// CSV rows `(t, regime, x_1 .. x_n)`. The terminal row repeats the last
    /// cell's regime.
    pub fn to_csv(&self) -> String {
        let n = self.x[0].len();
        let mut out = String::from("t,regime");
        for i in 1..=n {
            out.push_str(&format!(",x{i}"));
        }
        out.push('\n');
        for (k, t) in self.grid.nodes.iter().enumerate() {
            let regime = self
                .grid
                .regime_per_cell
                .get(k)
                .or(self.grid.regime_per_cell.last())
                .copied()
                .unwrap_or(0);
            out.push_str(&format!("{t},{regime}"));
            for v in self.x[k].iter() {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Piecewise-constant direction `h` (one `d`-vector per cell); the drift
/// perturbation of one cell is `eps * sigma(x, a) h_k * delta_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionField {
    pub h: Vec<DVector<f64>>,
}

impl DirectionField {
    pub fn constant(grid: &TimeGrid, value: DVector<f64>) -> Self {
        Self {
            h: vec![value; grid.cells()],
        }
    }
}

/// Explicit Euler with left-point regime evaluation:
/// `x_{k+1} = x_k + b(x_k, a_k) delta_k + sigma(x_k, a_k) dw_k`.
///
/// Increments are drawn Gaussian with variance `delta_k` per component and
/// recorded in the result.
pub fn simulate_path<R: Rng>(
    model: &SwitchingModel,
    grid: &TimeGrid,
    x0: &State,
    rng: &mut R,
) -> Result<StatePath, PathError> {
    let k_cells = grid.cells();
    let mut dw = Vec::with_capacity(k_cells);
    for k in 0..k_cells {
        let sd = grid.delta(k).sqrt();
        dw.push(DVector::from_fn(model.d(), |_, _| {
            sd * rng.sample::<f64, _>(StandardNormal)
        }));
    }
    evolve(model, grid, x0, &dw, None, 0.0)
}

/// Re-runs the Euler recursion with the increments of `base` plus the extra
/// drift `eps * sigma(x, a) h_k` per cell. With `eps = 0` or `h = 0` the
/// extra term is an exact zero vector and the output equals `base`
/// bit-for-bit.
pub fn simulate_perturbed_path(
    model: &SwitchingModel,
    base: &StatePath,
    h: &DirectionField,
    eps: f64,
) -> Result<StatePath, PathError> {
    if h.h.len() != base.grid.cells() {
        return Err(PathError::GridMismatch);
    }
    evolve(model, &base.grid, &base.x[0], &base.dw, Some(h), eps)
}

/// Re-runs the Euler recursion with externally supplied increments (e.g. a
/// bumped copy of a recorded path). The result is the exact discrete path the
/// scheme would have produced for those increments.
pub fn replay_path(
    model: &SwitchingModel,
    grid: &TimeGrid,
    x0: &State,
    dw: &[DVector<f64>],
) -> Result<StatePath, PathError> {
    if dw.len() != grid.cells() {
        return Err(PathError::GridMismatch);
    }
    evolve(model, grid, x0, dw, None, 0.0)
}

fn evolve(
    model: &SwitchingModel,
    grid: &TimeGrid,
    x0: &State,
    dw: &[DVector<f64>],
    h: Option<&DirectionField>,
    eps: f64,
) -> Result<StatePath, PathError> {
    let k_cells = grid.cells();
    let mut x = Vec::with_capacity(k_cells + 1);
    x.push(x0.clone());
    for k in 0..k_cells {
        let a = grid.regime_per_cell[k];
        let delta = grid.delta(k);
        let xk = &x[k];
        let sigma = model.sigma_matrix(xk, a);
        let mut next = xk + model.drift().eval(xk, a) * delta + &sigma * &dw[k];
        if let Some(field) = h {
            next += sigma * &field.h[k] * (eps * delta);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(PathError::NonFinite { step: k });
        }
        x.push(next);
    }
    Ok(StatePath {
        grid: grid.clone(),
        x,
        dw: dw.to_vec(),
    })
}
