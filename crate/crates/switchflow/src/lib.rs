//! Numerical toolkit for stochastic differential equations with Markovian
//! switching:
//!
//! ```text
//! dX_t = b(X_t, a_t) dt + s(X_t, a_t) dW_t,   a_t in {0, .., m0-1},
//! ```
//!
//! where the regime `a_t` is a continuous-time Markov chain with generator
//! matrix `Q`, independent of the Brownian motion `W`.
//!
//! The crate simulates the coupled chain/diffusion system, computes Malliavin
//! derivative flows and Malliavin matrices along each path, checks a uniform
//! Hormander condition by Lie-bracket evaluation, and estimates semigroup
//! gradients `grad P_t f` by a Bismut-type formula with a discrete Skorohod
//! integral, cross-validated against pathwise and finite-difference
//! estimators.
//!
//! Modules mirror the pipeline:
//! - [`model`]: switching SDE problems with analytic derivative oracles and a
//!   zoo of built-in fixtures with closed-form reference quantities.
//! - [`chain`]: regime simulation (exponential holding times and the
//!   Poisson-random-measure interval partition) plus exact transition-matrix
//!   oracles.
//! - [`paths`]: Euler-Maruyama on jump-aligned grids, with recorded
//!   increments and the epsilon-perturbed system.
//! - [`malliavin`]: Jacobian flow, inverse flow, derivative kernels
//!   `D_s X_t`, second-derivative flows, Malliavin and reduced matrices.
//! - [`hormander`]: bracket hierarchies and the uniform Hormander check.
//! - [`bismut`]: Bismut weight, discrete Skorohod integral, and the three
//!   cross-validating gradient estimators.
//! - [`density`]: nondegeneracy diagnostics and kernel density estimates.
//! - [`runner`]: config-driven experiment orchestration with deterministic
//!   parallel execution and CSV/manifest output.
//!
//! All discrete objects share one convention: the Malliavin derivative of a
//! grid functional is its sensitivity to the Brownian increment `dW_k`. Every
//! flow equation is discretized with the same explicit Euler scheme and the
//! same stored increments as the state path, so the structural identities
//! (`M = J C J^T`, Riemann-sum consistency, duality of the discrete Skorohod
//! integral) hold near machine precision instead of only in the limit.

pub mod bismut;
pub mod chain;
pub mod density;
pub mod hormander;
pub mod malliavin;
pub mod model;
pub mod paths;
pub mod rng;
pub mod runner;
pub mod stats;
