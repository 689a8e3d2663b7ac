//! Numerical tolerances used across the crate.
//!
//! Every tolerance is centralized here so that tests and production code
//! agree on what "equal" means at each precision tier. The tiers reflect how
//! much floating-point work separates a value from exact arithmetic: raw
//! inputs are checked tightly, quantities produced by long recursions get
//! proportionally more slack.

/// Probability rows supplied by callers must sum to 1 within this bound.
/// Inputs are one rounding step away from their mathematical definition.
pub const INPUT_SIMPLEX: f64 = 1e-12;

/// Probability rows produced by our own recursions (occupancy layers,
/// aggregated kernels) must sum to 1 within this bound. A horizon of
/// products and sums accumulates a few hundred ulps at most.
pub const DERIVED_SIMPLEX: f64 = 1e-10;

/// Bellman flow conservation residual allowed on derived occupancies.
/// Each layer compounds a matrix-vector product on top of the simplex error.
pub const FLOW: f64 = 1e-8;

/// Relative error allowed between analytic gradients and central finite
/// differences at interior points.
pub const GRAD_CHECK_REL: f64 = 1e-5;

/// Slack for convexity probes `f(ax + (1-a)y) <= a f(x) + (1-a) f(y)`.
pub const CONVEXITY_SLACK: f64 = 1e-9;

/// Additive floor inside logarithms of entropy-style objectives, keeping
/// gradients finite on the simplex boundary.
pub const ENTROPY_FLOOR: f64 = 1e-9;

/// The mirror-descent step must return an occupancy whose composite
/// objective value is within this bound of every probed feasible point.
pub const MIRROR_CONTRACT: f64 = 1e-7;

/// Allowed objective gap between the closed-form mirror-descent step and an
/// independent convex solver run to convergence on the same instance.
pub const MIRROR_ORACLE_GAP: f64 = 1e-6;

/// The sleeping-experts reduction must reproduce ordinary regret exactly;
/// this bound only absorbs summation round-off.
pub const SLEEPING_IDENTITY: f64 = 1e-10;

/// Frank-Wolfe duality gap at which comparator solves are declared optimal.
pub const FW_GAP: f64 = 1e-6;

/// Iteration cap for Frank-Wolfe comparator solves; exceeding it with a gap
/// above [`FW_GAP`] is a numeric error that reports the achieved gap. The
/// sublinear gap decay of the method needs generous room on strongly curved
/// objectives.
pub const FW_MAX_ITERS: usize = 200_000;
