//! Regime-chain simulation and exact transition oracles.
//!
//! The chain is simulated two equivalent ways: embedded exponential holding
//! times from `Q`, and the Poisson-random-measure construction where a
//! unit-intensity measure on `[0, t] x [0, m0 (m0 - 1) K]` drops marks into
//! the interval partition `Delta_ij` and `g(i, z)` decides the jump. Both
//! laws are cross-checked against the matrix exponential `exp(tQ)`.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use nalgebra::DMatrix;

use crate::model::{GeneratorMatrix, Regime};

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("invalid generator matrix: {0}")]
    InvalidGenerator(String),
    #[error("t_end must be positive, got {0}")]
    BadHorizon(f64),
}

/// Simulation method for the regime chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainMethod {
    /// Embedded chain with exponential holding times.
    HoldingTimes,
    /// Poisson-random-measure interval-partition construction.
    Prm,
}

/// One left-closed right-open interval `Delta_ij = [left, right)` of the
/// mark axis, owned by the ordered pair `(source, target)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionInterval {
    pub source: Regime,
    pub target: Regime,
    pub left: f64,
    pub right: f64,
}

/// Interval partition of the mark axis, lexicographic in `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionTable {
    pub intervals: Vec<PartitionInterval>,
    pub total_length: f64,
}

/// Builds the partition: consecutive intervals of length `q_ij` for each
/// ordered pair `i != j` in lexicographic order, starting at 0. Pairs with
/// `q_ij = 0` contribute empty intervals.
pub fn build_partition(q: &GeneratorMatrix) -> Result<PartitionTable, ChainError> {
    let violations = q.violations();
    if !violations.is_empty() {
        return Err(ChainError::InvalidGenerator(
            violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }
    let mut intervals = Vec::new();
    let mut cursor = 0.0;
    for i in 0..q.m0() {
        for j in 0..q.m0() {
            if i == j {
                continue;
            }
            let len = q.rate(i, j);
            intervals.push(PartitionInterval {
                source: i,
                target: j,
                left: cursor,
                right: cursor + len,
            });
            cursor += len;
        }
    }
    Ok(PartitionTable {
        intervals,
        total_length: cursor,
    })
}

/// `g(i, z)`: displacement `j - i` if `z` falls in some `Delta_ij` with
/// source `i`, else 0.
pub fn eval_g(table: &PartitionTable, i: Regime, z: f64) -> i64 {
    debug_assert!(z >= 0.0);
    for iv in &table.intervals {
        if iv.source == i && z >= iv.left && z < iv.right {
            return iv.target as i64 - i as i64;
        }
    }
    0
}

/// A realized regime path on `[0, t_end]`, right-continuous.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPath {
    pub t_end: f64,
    pub initial: Regime,
    /// Strictly increasing jump times in `(0, t_end]`.
    pub jump_times: Vec<f64>,
    /// Regime entered at each jump time.
    pub jump_targets: Vec<Regime>,
    /// `(time, mark)` events of the driving Poisson measure, when the PRM
    /// construction was used. Jump times are the events with `g != 0`.
    pub poisson_events: Option<Vec<(f64, f64)>>,
}

impl ChainPath {
    /// Chain that never leaves `initial`.
    pub fn constant(initial: Regime, t_end: f64) -> Self {
        Self {
            t_end,
            initial,
            jump_times: Vec::new(),
            jump_targets: Vec::new(),
            poisson_events: None,
        }
    }

    /// Regime at time `t` (right-continuous).
    pub fn regime_at(&self, t: f64) -> Regime {
        let mut current = self.initial;
        for (&tau, &target) in self.jump_times.iter().zip(&self.jump_targets) {
            if tau <= t {
                current = target;
            } else {
                break;
            }
        }
        current
    }

    /// Exact integral of a per-regime scalar over `[0, t]`.
    pub fn integrate_piecewise(&self, per_regime: &[f64], t: f64) -> f64 {
        let mut acc = 0.0;
        let mut prev = 0.0;
        let mut current = self.initial;
        for (&tau, &target) in self.jump_times.iter().zip(&self.jump_targets) {
            if tau >= t {
                break;
            }
            acc += per_regime[current] * (tau - prev);
            prev = tau;
            current = target;
        }
        acc + per_regime[current] * (t - prev)
    }

    /// Event-clock times in `(0, t)`: Poisson events when present, else the
    /// jump times themselves.
    fn clock_times(&self, t: f64) -> Vec<f64> {
        match &self.poisson_events {
            Some(ev) => ev.iter().map(|&(s, _)| s).filter(|&s| s < t).collect(),
            None => self.jump_times.iter().copied().filter(|&s| s < t).collect(),
        }
    }

    /// CSV rows `(time, regime)`, first row `(0, initial)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,regime\n");
        out.push_str(&format!("0,{}\n", self.initial));
        for (&t, &a) in self.jump_times.iter().zip(&self.jump_targets) {
            out.push_str(&format!("{t},{a}\n"));
        }
        out
    }
}

/// Simulates the chain with generator `Q` started at `initial`.
///
/// Both methods realize the same law; `Prm` additionally records the events
/// of the driving Poisson measure. The result is a deterministic function of
/// the RNG state.
pub fn simulate_chain<R: Rng>(
    q: &GeneratorMatrix,
    initial: Regime,
    t_end: f64,
    rng: &mut R,
    method: ChainMethod,
) -> Result<ChainPath, ChainError> {
    if t_end <= 0.0 {
        return Err(ChainError::BadHorizon(t_end));
    }
    let table = build_partition(q)?;
    let mut path = ChainPath::constant(initial, t_end);
    match method {
        ChainMethod::HoldingTimes => {
            let mut t = 0.0;
            let mut current = initial;
            loop {
                let rate = -q.rate(current, current);
                if rate <= 0.0 {
                    break; // absorbing regime: no further jumps
                }
                t += Exp::new(rate).expect("positive rate").sample(rng);
                if t > t_end {
                    break;
                }
                // target j with probability q_ij / rate
                let mut u = rng.random::<f64>() * rate;
                let mut target = current;
                for j in 0..q.m0() {
                    if j == current {
                        continue;
                    }
                    u -= q.rate(current, j);
                    if u < 0.0 {
                        target = j;
                        break;
                    }
                }
                if target == current {
                    // numerical edge: assign the last positive-rate target
                    target = (0..q.m0())
                        .filter(|&j| j != current && q.rate(current, j) > 0.0)
                        .next_back()
                        .unwrap_or(current);
                }
                if target != current {
                    path.jump_times.push(t);
                    path.jump_targets.push(target);
                    current = target;
                }
            }
        }
        ChainMethod::Prm => {
            let domain = q.m0() as f64 * (q.m0() as f64 - 1.0) * q.k_max();
            let mut events = Vec::new();
            if domain > 0.0 {
                let exp = Exp::new(domain).expect("positive intensity");
                let mut t = 0.0;
                let mut current = initial;
                loop {
                    t += exp.sample(rng);
                    if t > t_end {
                        break;
                    }
                    let z = rng.random::<f64>() * domain;
                    events.push((t, z));
                    let disp = eval_g(&table, current, z);
                    if disp != 0 {
                        let target = (current as i64 + disp) as Regime;
                        path.jump_times.push(t);
                        path.jump_targets.push(target);
                        current = target;
                    }
                }
            }
            path.poisson_events = Some(events);
        }
    }
    Ok(path)
}

/// Transition matrix `exp(tQ)` by scaling-and-squaring with a truncated
/// Taylor series.
pub fn transition_matrix(q: &GeneratorMatrix, t: f64) -> DMatrix<f64> {
    assert!(t >= 0.0, "t must be nonnegative");
    let m0 = q.m0();
    let a = q.matrix() * t;
    let norm = a.abs().row_sum().max();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = &a / 2f64.powi(squarings as i32);
    let mut result = DMatrix::identity(m0, m0);
    let mut term = DMatrix::identity(m0, m0);
    for k in 1..=30 {
        term = &term * &scaled / k as f64;
        result += &term;
        if term.abs().max() < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Longest interval `[T1, T2]` of `[0, t]` free of event-clock points, ties
/// broken by earliest `T1`. Uses the Poisson events when present (their
/// count is the `N_t = k` of the small-ball conditioning), else the jump
/// times.
pub fn longest_constant_interval(path: &ChainPath, t: f64) -> (f64, f64) {
    assert!(t > 0.0 && t <= path.t_end);
    let mut cuts = path.clock_times(t);
    cuts.push(t);
    let mut best = (0.0, 0.0);
    let mut prev = 0.0;
    for &c in &cuts {
        if c - prev > best.1 - best.0 {
            best = (prev, c);
        }
        prev = c;
    }
    best
}
