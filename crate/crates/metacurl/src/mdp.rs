//! Tabular episodic MDP primitives: occupancy measures, layered kernels,
//! policies, noise-driven dynamics, and the non-stationarity measures built
//! on them.
//!
//! # Layer convention
//!
//! An episode visits layers `0..=N` of a loop-free MDP with horizon `N`.
//! The state-action pair at layer 0 is drawn jointly from the initial
//! distribution; no policy acts there. For `n in 1..=N`:
//!
//! * `TransitionKernel` slice `n` is `p_n(x' | x, a)`, the law of the layer-n
//!   state given the layer-(n-1) pair,
//! * `Policy` slice `n` is `pi_n(a | x)`, the action rule at layer n,
//! * `Occupancy` layer `n` is `mu_n(x, a)`, the joint law of the layer-n pair.
//!
//! The occupancy induced by a policy under a kernel follows the forward
//! recursion
//!
//! ```text
//! mu_n(x, a) = pi_n(a | x) * sum_{x', a'} mu_{n-1}(x', a') * p_n(x | x', a')
//! ```
//!
//! Dynamics are generated by a known deterministic map `g` driven by an
//! unknown noise distribution over a finite alphabet: the state entering
//! layer n is `g_n(x, a, eps_n)`, which realizes the kernel
//! `p_n(x' | x, a) = P(g_n(x, a, eps) = x')` exactly.

use std::sync::Arc;

use rand::Rng;

use crate::{tol, CurlError, Result};

/// Validate that `row` is a probability vector within `tol_sum`.
fn check_simplex(row: &[f64], tol_sum: f64, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &v in row {
        if !v.is_finite() {
            return Err(CurlError::Argument(format!("{what}: non-finite entry {v}")));
        }
        if v < -tol_sum {
            return Err(CurlError::Argument(format!("{what}: negative entry {v}")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > tol_sum {
        return Err(CurlError::Argument(format!(
            "{what}: row sums to {sum}, expected 1 within {tol_sum}"
        )));
    }
    Ok(())
}

/// L1 distance between two equally long slices.
pub(crate) fn l1_distance(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

/// Draw an index from a categorical distribution via inverse CDF.
///
/// Rounding dust in the row is absorbed by returning the last index with
/// positive mass when the cumulative walk exhausts the row.
pub(crate) fn sample_index(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        cum += p;
        if u < cum {
            return i;
        }
    }
    last_positive
}

/// Static description of a problem instance: sizes and the fixed joint
/// initial distribution over layer-0 state-action pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct MdpShape {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    /// Joint distribution over `(x, a)` at layer 0, laid out `x * A + a`.
    initial_dist: Vec<f64>,
}

impl MdpShape {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || horizon == 0 {
            return Err(CurlError::Argument(format!(
                "shape must be positive, got |X|={num_states}, |A|={num_actions}, N={horizon}"
            )));
        }
        if initial_dist.len() != num_states * num_actions {
            return Err(CurlError::Dimension(format!(
                "initial distribution has {} entries, expected {}",
                initial_dist.len(),
                num_states * num_actions
            )));
        }
        check_simplex(&initial_dist, tol::INPUT_SIMPLEX, "initial distribution")?;
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            initial_dist,
        })
    }

    /// Shape whose initial pair is uniform over all `(x, a)`.
    pub fn with_uniform_start(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        let k = num_states * num_actions;
        Self::new(num_states, num_actions, horizon, vec![1.0 / k as f64; k])
            .expect("uniform start is a valid simplex")
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Joint initial distribution over `(x, a)`, laid out `x * A + a`.
    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }
}

/// Layered transition kernel `p_n(x' | x, a)` for `n in 1..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionKernel {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    /// Row-major `[(n-1), x, a, x']`.
    probs: Vec<f64>,
}

impl TransitionKernel {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        probs: Vec<f64>,
    ) -> Result<Self> {
        let expected = horizon * num_states * num_actions * num_states;
        if probs.len() != expected {
            return Err(CurlError::Dimension(format!(
                "kernel has {} entries, expected {expected}",
                probs.len()
            )));
        }
        let kernel = Self {
            num_states,
            num_actions,
            horizon,
            probs,
        };
        for n in 1..=horizon {
            for x in 0..num_states {
                for a in 0..num_actions {
                    check_simplex(
                        kernel.row(n, x, a),
                        tol::INPUT_SIMPLEX,
                        &format!("kernel row (n={n}, x={x}, a={a})"),
                    )?;
                }
            }
        }
        Ok(kernel)
    }

    /// Kernel with every row uniform over next states.
    pub fn uniform(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        let len = horizon * num_states * num_actions * num_states;
        Self {
            num_states,
            num_actions,
            horizon,
            probs: vec![1.0 / num_states as f64; len],
        }
    }

    /// Build from a closure `(n, x, a, x') -> p` without row validation.
    pub(crate) fn from_fn_unchecked(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut probs = Vec::with_capacity(horizon * num_states * num_actions * num_states);
        for n in 1..=horizon {
            for x in 0..num_states {
                for a in 0..num_actions {
                    for xn in 0..num_states {
                        probs.push(f(n, x, a, xn));
                    }
                }
            }
        }
        Self {
            num_states,
            num_actions,
            horizon,
            probs,
        }
    }

    #[inline]
    fn row_start(&self, n: usize, x: usize, a: usize) -> usize {
        debug_assert!((1..=self.horizon).contains(&n));
        (((n - 1) * self.num_states + x) * self.num_actions + a) * self.num_states
    }

    /// Row `p_n(. | x, a)` over next states.
    #[inline]
    pub fn row(&self, n: usize, x: usize, a: usize) -> &[f64] {
        let s = self.row_start(n, x, a);
        &self.probs[s..s + self.num_states]
    }

    #[inline]
    pub fn at(&self, n: usize, x: usize, a: usize, next: usize) -> f64 {
        self.probs[self.row_start(n, x, a) + next]
    }

    pub(crate) fn row_mut(&mut self, n: usize, x: usize, a: usize) -> &mut [f64] {
        let s = self.row_start(n, x, a);
        &mut self.probs[s..s + self.num_states]
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Largest L1 row distance to another kernel: `max_{n,x,a} ||p_n - q_n||_1`.
    pub fn max_row_l1(&self, other: &TransitionKernel) -> Result<f64> {
        if self.probs.len() != other.probs.len()
            || self.num_states != other.num_states
            || self.num_actions != other.num_actions
        {
            return Err(CurlError::Dimension(
                "kernels have different shapes".into(),
            ));
        }
        let rows = self.horizon * self.num_states * self.num_actions;
        let mut worst: f64 = 0.0;
        for r in 0..rows {
            let s = r * self.num_states;
            let d = l1_distance(
                &self.probs[s..s + self.num_states],
                &other.probs[s..s + self.num_states],
            );
            worst = worst.max(d);
        }
        Ok(worst)
    }
}

/// Layered stochastic policy `pi_n(a | x)` for `n in 1..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    /// Row-major `[(n-1), x, a]`.
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        probs: Vec<f64>,
    ) -> Result<Self> {
        let expected = horizon * num_states * num_actions;
        if probs.len() != expected {
            return Err(CurlError::Dimension(format!(
                "policy has {} entries, expected {expected}",
                probs.len()
            )));
        }
        let policy = Self {
            num_states,
            num_actions,
            horizon,
            probs,
        };
        for n in 1..=horizon {
            for x in 0..num_states {
                check_simplex(
                    policy.row(n, x),
                    tol::INPUT_SIMPLEX,
                    &format!("policy row (n={n}, x={x})"),
                )?;
            }
        }
        Ok(policy)
    }

    /// Policy that plays uniformly at random everywhere.
    pub fn uniform(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        Self {
            num_states,
            num_actions,
            horizon,
            probs: vec![1.0 / num_actions as f64; horizon * num_states * num_actions],
        }
    }

    pub(crate) fn zeros_like(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        Self {
            num_states,
            num_actions,
            horizon,
            probs: vec![0.0; horizon * num_states * num_actions],
        }
    }

    #[inline]
    fn row_start(&self, n: usize, x: usize) -> usize {
        debug_assert!((1..=self.horizon).contains(&n));
        ((n - 1) * self.num_states + x) * self.num_actions
    }

    /// Row `pi_n(. | x)` over actions.
    #[inline]
    pub fn row(&self, n: usize, x: usize) -> &[f64] {
        let s = self.row_start(n, x);
        &self.probs[s..s + self.num_actions]
    }

    #[inline]
    pub fn at(&self, n: usize, x: usize, a: usize) -> f64 {
        self.probs[self.row_start(n, x) + a]
    }

    pub(crate) fn row_mut(&mut self, n: usize, x: usize) -> &mut [f64] {
        let s = self.row_start(n, x);
        &mut self.probs[s..s + self.num_actions]
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Convex mixture `(1 - alpha) * self + alpha * uniform`, entrywise.
    ///
    /// Every entry of the result is at least `alpha / |A|`, which keeps
    /// logarithms of the mixed policy finite.
    pub fn mixed_with_uniform(&self, alpha: f64) -> Result<Policy> {
        let mut out = self.clone();
        self.mix_with_uniform_into(alpha, &mut out)?;
        Ok(out)
    }

    /// In-place variant of [`Policy::mixed_with_uniform`].
    pub(crate) fn mix_with_uniform_into(&self, alpha: f64, out: &mut Policy) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CurlError::Argument(format!(
                "mixture weight must lie in [0, 1], got {alpha}"
            )));
        }
        let u = alpha / self.num_actions as f64;
        for (o, p) in out.probs.iter_mut().zip(&self.probs) {
            *o = (1.0 - alpha) * p + u;
        }
        Ok(())
    }
}

/// State-action occupancy `mu_n(x, a)` for layers `0..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Occupancy {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    /// Row-major `[n, x, a]` with `n in 0..=N`.
    mu: Vec<f64>,
}

impl Occupancy {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        mu: Vec<f64>,
    ) -> Result<Self> {
        let expected = (horizon + 1) * num_states * num_actions;
        if mu.len() != expected {
            return Err(CurlError::Dimension(format!(
                "occupancy has {} entries, expected {expected}",
                mu.len()
            )));
        }
        let occ = Self {
            num_states,
            num_actions,
            horizon,
            mu,
        };
        for n in 0..=horizon {
            check_simplex(
                occ.layer(n),
                tol::DERIVED_SIMPLEX,
                &format!("occupancy layer {n}"),
            )?;
        }
        Ok(occ)
    }

    pub(crate) fn zeros(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        Self {
            num_states,
            num_actions,
            horizon,
            mu: vec![0.0; (horizon + 1) * num_states * num_actions],
        }
    }

    #[inline]
    fn layer_start(&self, n: usize) -> usize {
        debug_assert!(n <= self.horizon);
        n * self.num_states * self.num_actions
    }

    /// Layer `mu_n` as a flat `(x, a)` slice, laid out `x * A + a`.
    #[inline]
    pub fn layer(&self, n: usize) -> &[f64] {
        let s = self.layer_start(n);
        &self.mu[s..s + self.num_states * self.num_actions]
    }

    pub(crate) fn layer_mut(&mut self, n: usize) -> &mut [f64] {
        let s = self.layer_start(n);
        &mut self.mu[s..s + self.num_states * self.num_actions]
    }

    #[inline]
    pub fn at(&self, n: usize, x: usize, a: usize) -> f64 {
        self.mu[self.layer_start(n) + x * self.num_actions + a]
    }

    /// State marginal `rho_n(x) = sum_a mu_n(x, a)`.
    pub fn state_marginal(&self, n: usize, x: usize) -> f64 {
        let s = self.layer_start(n) + x * self.num_actions;
        self.mu[s..s + self.num_actions].iter().sum()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Check that every layer is a probability vector within `tol_sum`.
    pub fn check_layers(&self, tol_sum: f64) -> Result<()> {
        for n in 0..=self.horizon {
            check_simplex(self.layer(n), tol_sum, &format!("occupancy layer {n}"))?;
        }
        Ok(())
    }

    /// Check Bellman flow conservation against a kernel:
    /// `sum_a mu_n(x, a) = sum_{x', a'} mu_{n-1}(x', a') p_n(x | x', a')`
    /// must hold within `tol_flow` for every layer and state.
    pub fn check_flow(&self, kernel: &TransitionKernel, tol_flow: f64) -> Result<()> {
        if kernel.num_states != self.num_states
            || kernel.num_actions != self.num_actions
            || kernel.horizon != self.horizon
        {
            return Err(CurlError::Dimension(
                "occupancy and kernel shapes disagree".into(),
            ));
        }
        for n in 1..=self.horizon {
            for x in 0..self.num_states {
                let mut inflow = 0.0;
                for xp in 0..self.num_states {
                    for ap in 0..self.num_actions {
                        inflow += self.at(n - 1, xp, ap) * kernel.at(n, xp, ap, x);
                    }
                }
                let mass = self.state_marginal(n, x);
                if (mass - inflow).abs() > tol_flow {
                    return Err(CurlError::Numeric(format!(
                        "flow violated at layer {n}, state {x}: mass {mass} vs inflow {inflow}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `max_n ||mu_n - other_n||_1` across layers `0..=N`.
    pub fn max_layer_l1(&self, other: &Occupancy) -> f64 {
        (0..=self.horizon)
            .map(|n| l1_distance(self.layer(n), other.layer(n)))
            .fold(0.0, f64::max)
    }
}

/// Per-step state-action table for `n in 1..=N`; the shape of loss tensors
/// and objective gradients. Layer 0 carries no loss because its pair is
/// fixed by the initial distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct SaTensor {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    /// Row-major `[(n-1), x, a]`.
    vals: Vec<f64>,
}

impl SaTensor {
    pub fn zeros(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        Self {
            num_states,
            num_actions,
            horizon,
            vals: vec![0.0; horizon * num_states * num_actions],
        }
    }

    pub fn from_vec(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        vals: Vec<f64>,
    ) -> Result<Self> {
        if vals.len() != horizon * num_states * num_actions {
            return Err(CurlError::Dimension(format!(
                "tensor has {} entries, expected {}",
                vals.len(),
                horizon * num_states * num_actions
            )));
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            vals,
        })
    }

    pub fn from_fn(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut vals = Vec::with_capacity(horizon * num_states * num_actions);
        for n in 1..=horizon {
            for x in 0..num_states {
                for a in 0..num_actions {
                    vals.push(f(n, x, a));
                }
            }
        }
        Self {
            num_states,
            num_actions,
            horizon,
            vals,
        }
    }

    #[inline]
    fn idx(&self, n: usize, x: usize, a: usize) -> usize {
        debug_assert!((1..=self.horizon).contains(&n));
        ((n - 1) * self.num_states + x) * self.num_actions + a
    }

    #[inline]
    pub fn at(&self, n: usize, x: usize, a: usize) -> f64 {
        self.vals[self.idx(n, x, a)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, x: usize, a: usize) -> &mut f64 {
        let i = self.idx(n, x, a);
        &mut self.vals[i]
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    /// `sum_{n=1..N} <self_n, mu_n>`.
    pub fn dot_occupancy(&self, occ: &Occupancy) -> f64 {
        let mut acc = 0.0;
        for n in 1..=self.horizon {
            let layer = occ.layer(n);
            let s = (n - 1) * self.num_states * self.num_actions;
            for (v, m) in self.vals[s..s + layer.len()].iter().zip(layer) {
                acc += v * m;
            }
        }
        acc
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Known deterministic transition map `g_n(x, a, e)` over a finite noise
/// alphabet `E`, shared across episodes. Slice `n in 1..=N` produces the
/// state entering layer n.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsMap {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    noise_card: usize,
    /// Row-major `[(n-1), x, a, e] -> x'`.
    next: Vec<usize>,
}

impl DynamicsMap {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        noise_card: usize,
        next: Vec<usize>,
    ) -> Result<Self> {
        let expected = horizon * num_states * num_actions * noise_card;
        if next.len() != expected {
            return Err(CurlError::Dimension(format!(
                "dynamics map has {} entries, expected {expected}",
                next.len()
            )));
        }
        if let Some(bad) = next.iter().find(|&&x| x >= num_states) {
            return Err(CurlError::Argument(format!(
                "dynamics map targets state {bad}, but |X| = {num_states}"
            )));
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            noise_card,
            next,
        })
    }

    pub fn from_fn(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        noise_card: usize,
        mut g: impl FnMut(usize, usize, usize, usize) -> usize,
    ) -> Result<Self> {
        let mut next = Vec::with_capacity(horizon * num_states * num_actions * noise_card);
        for n in 1..=horizon {
            for x in 0..num_states {
                for a in 0..num_actions {
                    for e in 0..noise_card {
                        next.push(g(n, x, a, e));
                    }
                }
            }
        }
        Self::new(num_states, num_actions, horizon, noise_card, next)
    }

    #[inline]
    pub fn next_state(&self, n: usize, x: usize, a: usize, e: usize) -> usize {
        debug_assert!((1..=self.horizon).contains(&n));
        self.next[(((n - 1) * self.num_states + x) * self.num_actions + a) * self.noise_card + e]
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn noise_card(&self) -> usize {
        self.noise_card
    }
}

/// Per-episode, per-step noise distribution `h_n` over the alphabet `E`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    horizon: usize,
    noise_card: usize,
    /// Row-major `[(n-1), e]`.
    probs: Vec<f64>,
}

impl NoiseModel {
    pub fn new(horizon: usize, noise_card: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != horizon * noise_card {
            return Err(CurlError::Dimension(format!(
                "noise model has {} entries, expected {}",
                probs.len(),
                horizon * noise_card
            )));
        }
        let model = Self {
            horizon,
            noise_card,
            probs,
        };
        for n in 1..=horizon {
            check_simplex(
                model.step(n),
                tol::INPUT_SIMPLEX,
                &format!("noise row (n={n})"),
            )?;
        }
        Ok(model)
    }

    pub fn uniform(horizon: usize, noise_card: usize) -> Self {
        Self {
            horizon,
            noise_card,
            probs: vec![1.0 / noise_card as f64; horizon * noise_card],
        }
    }

    /// Distribution of the noise driving the transition into layer `n`.
    #[inline]
    pub fn step(&self, n: usize) -> &[f64] {
        debug_assert!((1..=self.horizon).contains(&n));
        let s = (n - 1) * self.noise_card;
        &self.probs[s..s + self.noise_card]
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn noise_card(&self) -> usize {
        self.noise_card
    }
}

/// One episode's dynamics: the shared deterministic map together with that
/// episode's noise distributions. Realizes an exact transition kernel.
#[derive(Clone, Debug)]
pub struct NoiseDynamics {
    map: Arc<DynamicsMap>,
    noise: NoiseModel,
}

impl NoiseDynamics {
    pub fn new(map: Arc<DynamicsMap>, noise: NoiseModel) -> Result<Self> {
        if map.horizon() != noise.horizon() || map.noise_card() != noise.noise_card() {
            return Err(CurlError::Dimension(format!(
                "map (N={}, |E|={}) and noise model (N={}, |E|={}) disagree",
                map.horizon(),
                map.noise_card(),
                noise.horizon(),
                noise.noise_card()
            )));
        }
        Ok(Self { map, noise })
    }

    pub fn map(&self) -> &Arc<DynamicsMap> {
        &self.map
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    /// The transition kernel this episode's noise induces through the map:
    /// `p_n(x' | x, a) = sum_{e : g_n(x,a,e) = x'} h_n(e)`, computed exactly.
    pub fn kernel(&self) -> TransitionKernel {
        let m = &*self.map;
        let mut kernel = TransitionKernel::from_fn_unchecked(
            m.num_states(),
            m.num_actions(),
            m.horizon(),
            |_, _, _, _| 0.0,
        );
        for n in 1..=m.horizon() {
            let h = self.noise.step(n).to_vec();
            for x in 0..m.num_states() {
                for a in 0..m.num_actions() {
                    let row = kernel.row_mut(n, x, a);
                    for (e, &he) in h.iter().enumerate() {
                        row[m.next_state(n, x, a, e)] += he;
                    }
                }
            }
        }
        kernel
    }
}

/// A realized episode: visited states and actions for layers `0..=N` and the
/// noise symbols that drove each transition (`noises[n-1]` produced the state
/// entering layer n).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub noises: Vec<usize>,
    /// 1-based episode index within a run.
    pub episode: usize,
}

impl Trajectory {
    /// Horizon implied by the stored layers.
    pub fn horizon(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    /// Validate internal lengths: `N+1` states and actions, `N` noises.
    pub fn check_lengths(&self, horizon: usize) -> Result<()> {
        if self.states.len() != horizon + 1 || self.actions.len() != horizon + 1 {
            return Err(CurlError::State(format!(
                "trajectory stores {} states / {} actions, expected {}",
                self.states.len(),
                self.actions.len(),
                horizon + 1
            )));
        }
        if self.noises.len() != horizon {
            return Err(CurlError::State(format!(
                "trajectory stores {} noise records, expected {horizon}",
                self.noises.len()
            )));
        }
        Ok(())
    }
}

/// Occupancy of `policy` under `kernel` from the shape's initial
/// distribution, via the forward recursion. Exact up to floating point.
pub fn induce_occupancy(
    shape: &MdpShape,
    kernel: &TransitionKernel,
    policy: &Policy,
) -> Result<Occupancy> {
    let mut occ = Occupancy::zeros(shape.num_states, shape.num_actions, shape.horizon);
    induce_occupancy_into(shape, kernel, policy, &mut occ)?;
    Ok(occ)
}

/// In-place variant of [`induce_occupancy`] for callers that reuse buffers.
pub fn induce_occupancy_into(
    shape: &MdpShape,
    kernel: &TransitionKernel,
    policy: &Policy,
    occ: &mut Occupancy,
) -> Result<()> {
    let (xs, acts, n_max) = (shape.num_states, shape.num_actions, shape.horizon);
    if kernel.num_states != xs || kernel.num_actions != acts || kernel.horizon != n_max {
        return Err(CurlError::Dimension("kernel does not match shape".into()));
    }
    if policy.num_states != xs || policy.num_actions != acts || policy.horizon != n_max {
        return Err(CurlError::Dimension("policy does not match shape".into()));
    }
    if occ.num_states != xs || occ.num_actions != acts || occ.horizon != n_max {
        return Err(CurlError::Dimension("occupancy buffer does not match shape".into()));
    }
    occ.layer_mut(0).copy_from_slice(&shape.initial_dist);
    let layer_len = xs * acts;
    for n in 1..=n_max {
        let (head, tail) = occ.mu.split_at_mut(n * layer_len);
        let prev = &head[(n - 1) * layer_len..];
        let layer = &mut tail[..layer_len];
        // State marginals accumulate in each state's action-0 slot, which
        // keeps this allocation-free; the slot is overwritten last below.
        for x in 0..xs {
            layer[x * acts] = 0.0;
        }
        for xp in 0..xs {
            for ap in 0..acts {
                let mass = prev[xp * acts + ap];
                if mass == 0.0 {
                    continue;
                }
                let row = kernel.row(n, xp, ap);
                for (x, &p) in row.iter().enumerate() {
                    layer[x * acts] += mass * p;
                }
            }
        }
        for x in 0..xs {
            let pi_row = policy.row(n, x);
            let m = layer[x * acts];
            for a in (0..acts).rev() {
                layer[x * acts + a] = m * pi_row[a];
            }
        }
    }
    Ok(())
}

/// Extract the policy carried by an occupancy:
/// `pi_n(a | x) = mu_n(x, a) / rho_n(x)`, uniform where `rho_n(x) = 0`.
pub fn policy_from_occupancy(occ: &Occupancy) -> Policy {
    let (xs, acts, n_max) = (occ.num_states, occ.num_actions, occ.horizon);
    let mut policy = Policy::zeros_like(xs, acts, n_max);
    let uniform = 1.0 / acts as f64;
    for n in 1..=n_max {
        let layer = occ.layer(n);
        for x in 0..xs {
            let row = &layer[x * acts..(x + 1) * acts];
            let rho: f64 = row.iter().sum();
            let out = policy.row_mut(n, x);
            if rho > 0.0 {
                for a in 0..acts {
                    out[a] = row[a] / rho;
                }
            } else {
                out.iter_mut().for_each(|v| *v = uniform);
            }
        }
    }
    policy
}

/// Roll out one episode: the layer-0 pair is drawn jointly from the initial
/// distribution, then each transition draws a noise symbol, applies the map,
/// and draws the next action from the policy.
pub fn sample_episode(
    shape: &MdpShape,
    policy: &Policy,
    dynamics: &NoiseDynamics,
    episode: usize,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    let map = dynamics.map();
    if map.num_states() != shape.num_states
        || map.num_actions() != shape.num_actions
        || map.horizon() != shape.horizon
    {
        return Err(CurlError::Dimension("dynamics do not match shape".into()));
    }
    if policy.num_states != shape.num_states
        || policy.num_actions != shape.num_actions
        || policy.horizon != shape.horizon
    {
        return Err(CurlError::Dimension("policy does not match shape".into()));
    }
    let n_max = shape.horizon;
    let mut states = Vec::with_capacity(n_max + 1);
    let mut actions = Vec::with_capacity(n_max + 1);
    let mut noises = Vec::with_capacity(n_max);
    let joint = sample_index(rng, &shape.initial_dist);
    states.push(joint / shape.num_actions);
    actions.push(joint % shape.num_actions);
    for n in 1..=n_max {
        let e = sample_index(rng, dynamics.noise().step(n));
        let x = map.next_state(n, states[n - 1], actions[n - 1], e);
        let a = sample_index(rng, policy.row(n, x));
        noises.push(e);
        states.push(x);
        actions.push(a);
    }
    Ok(Trajectory {
        states,
        actions,
        noises,
        episode,
    })
}

/// Non-stationarity summary of a sequence: `total` is `1 + sum_t d_t` where
/// `d_t` is the largest per-row L1 change between consecutive elements, and
/// `hard` is `1 + #{t : element t differs from t+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Variation {
    pub total: f64,
    pub hard: f64,
    pub per_step: Vec<f64>,
}

impl Variation {
    fn from_steps(per_step: Vec<f64>) -> Self {
        let total = 1.0 + per_step.iter().sum::<f64>();
        let hard = 1.0 + per_step.iter().filter(|&&d| d > 0.0).count() as f64;
        Self {
            total,
            hard,
            per_step,
        }
    }
}

/// Kernel drift along an episode sequence:
/// `d_t = max_{n,x,a} ||p^t_n(.|x,a) - p^{t+1}_n(.|x,a)||_1`.
pub fn kernel_variation(kernels: &[TransitionKernel]) -> Result<Variation> {
    if kernels.is_empty() {
        return Err(CurlError::Argument("empty kernel sequence".into()));
    }
    let mut per_step = Vec::with_capacity(kernels.len().saturating_sub(1));
    for w in kernels.windows(2) {
        per_step.push(w[0].max_row_l1(&w[1])?);
    }
    Ok(Variation::from_steps(per_step))
}

/// Policy drift along an episode sequence:
/// `d_t = max_{n,x} ||pi^t_n(.|x) - pi^{t+1}_n(.|x)||_1`.
pub fn policy_variation(policies: &[Policy]) -> Result<Variation> {
    if policies.is_empty() {
        return Err(CurlError::Argument("empty policy sequence".into()));
    }
    let mut per_step = Vec::with_capacity(policies.len().saturating_sub(1));
    for w in policies.windows(2) {
        let (p, q) = (&w[0], &w[1]);
        if p.probs.len() != q.probs.len()
            || p.num_actions != q.num_actions
            || p.num_states != q.num_states
        {
            return Err(CurlError::Dimension(
                "policies have different shapes".into(),
            ));
        }
        let mut worst: f64 = 0.0;
        for n in 1..=p.horizon {
            for x in 0..p.num_states {
                worst = worst.max(l1_distance(p.row(n, x), q.row(n, x)));
            }
        }
        per_step.push(worst);
    }
    Ok(Variation::from_steps(per_step))
}

/// One layer's left- and right-hand side of an L1 perturbation bound.
#[derive(Clone, Copy, Debug)]
pub struct BoundPair {
    pub lhs: f64,
    pub rhs: f64,
}

/// Evaluation of the two occupancy perturbation bounds on a concrete
/// instance; see [`occupancy_l1_bound_check`].
#[derive(Clone, Debug)]
pub struct L1BoundReport {
    /// Kernel-perturbation bound, indexed by layer `n in 1..=N`.
    pub kernel_bound: Vec<BoundPair>,
    /// Policy-perturbation bound, indexed by layer `n in 1..=N`.
    pub policy_bound: Vec<BoundPair>,
}

impl L1BoundReport {
    /// True when every layer satisfies `lhs <= rhs + slack`.
    pub fn holds(&self, slack: f64) -> bool {
        self.kernel_bound
            .iter()
            .chain(&self.policy_bound)
            .all(|b| b.lhs <= b.rhs + slack)
    }
}

/// Evaluate both occupancy L1 perturbation bounds on one instance.
///
/// Kernel side, for each layer n:
/// `||mu^{pi,p}_n - mu^{pi,q}_n||_1
///   <= sum_{i=0}^{n-1} sum_{x,a} mu^{pi,p}_i(x,a) ||p_{i+1}(.|x,a) - q_{i+1}(.|x,a)||_1`.
///
/// Policy side, for each layer n:
/// `||mu^{pi,p}_n - mu^{pi',p}_n||_1
///   <= sum_{i=1}^{n} sum_x rho^{pi,p}_i(x) ||pi_i(.|x) - pi'_i(.|x)||_1`.
pub fn occupancy_l1_bound_check(
    shape: &MdpShape,
    policy: &Policy,
    alt_policy: &Policy,
    kernel_p: &TransitionKernel,
    kernel_q: &TransitionKernel,
) -> Result<L1BoundReport> {
    let mu_pp = induce_occupancy(shape, kernel_p, policy)?;
    let mu_pq = induce_occupancy(shape, kernel_q, policy)?;
    let mu_ap = induce_occupancy(shape, kernel_p, alt_policy)?;

    let mut kernel_bound = Vec::with_capacity(shape.horizon);
    let mut acc = 0.0;
    for n in 1..=shape.horizon {
        // Accumulate the i = n-1 term before reading layer n.
        for x in 0..shape.num_states {
            for a in 0..shape.num_actions {
                acc += mu_pp.at(n - 1, x, a)
                    * l1_distance(kernel_p.row(n, x, a), kernel_q.row(n, x, a));
            }
        }
        kernel_bound.push(BoundPair {
            lhs: l1_distance(mu_pp.layer(n), mu_pq.layer(n)),
            rhs: acc,
        });
    }

    let mut policy_bound = Vec::with_capacity(shape.horizon);
    let mut acc = 0.0;
    for n in 1..=shape.horizon {
        for x in 0..shape.num_states {
            acc += (0..shape.num_actions)
                .map(|a| mu_pp.at(n, x, a))
                .sum::<f64>()
                * l1_distance(policy.row(n, x), alt_policy.row(n, x));
        }
        policy_bound.push(BoundPair {
            lhs: l1_distance(mu_pp.layer(n), mu_ap.layer(n)),
            rhs: acc,
        });
    }

    Ok(L1BoundReport {
        kernel_bound,
        policy_bound,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain_shape() -> MdpShape {
        // Two states, two actions, layer-0 pair fixed at (0, 0).
        MdpShape::new(2, 2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap()
    }

    /// Deterministic 2-state chain: action 0 stays, action 1 moves to the
    /// other state, at every layer.
    fn chain_kernel(horizon: usize) -> TransitionKernel {
        TransitionKernel::from_fn_unchecked(2, 2, horizon, |_, x, a, xn| {
            let target = if a == 0 { x } else { 1 - x };
            if xn == target {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn induced_occupancy_on_deterministic_chain_matches_hand_computation() {
        let shape = chain_shape();
        let kernel = chain_kernel(2);
        let policy = Policy::uniform(2, 2, 2);
        let occ = induce_occupancy(&shape, &kernel, &policy).unwrap();
        // Layer 0 pair is (0,0); action 0 keeps the chain in state 0, so the
        // uniform policy splits layer 1 mass as (1/2, 1/2) on state 0.
        assert_eq!(occ.layer(0), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(occ.layer(1), &[0.5, 0.5, 0.0, 0.0]);
        // Half the mass stayed (from a=0), half moved to state 1.
        assert_eq!(occ.layer(2), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn occupancy_layers_stay_on_simplex_and_conserve_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (xs, acts, n) = (3, 2, 4);
            let shape = random_shape(xs, acts, n, &mut rng);
            let kernel = random_kernel(xs, acts, n, &mut rng);
            let policy = random_policy(xs, acts, n, &mut rng);
            let occ = induce_occupancy(&shape, &kernel, &policy).unwrap();
            occ.check_layers(tol::DERIVED_SIMPLEX).unwrap();
            occ.check_flow(&kernel, tol::FLOW).unwrap();
        }
    }

    #[test]
    fn policy_extraction_normalizes_rows_and_defaults_to_uniform() {
        // Layer 1: state 0 holds mass (0.3, 0.1), state 1 holds (0.6, 0.0).
        let mu = vec![
            0.5, 0.5, 0.0, 0.0, // layer 0
            0.3, 0.1, 0.6, 0.0, // layer 1
        ];
        let occ = Occupancy::new(2, 2, 1, mu).unwrap();
        let policy = policy_from_occupancy(&occ);
        assert!((policy.at(1, 0, 0) - 0.75).abs() < 1e-15);
        assert!((policy.at(1, 0, 1) - 0.25).abs() < 1e-15);

        // Zero state marginal: uniform fallback.
        let mu2 = vec![
            0.5, 0.5, 0.0, 0.0, // layer 0
            0.4, 0.6, 0.0, 0.0, // layer 1: state 1 unreachable
        ];
        let occ2 = Occupancy::new(2, 2, 1, mu2).unwrap();
        let policy2 = policy_from_occupancy(&occ2);
        assert_eq!(policy2.row(1, 1), &[0.5, 0.5]);
    }

    #[test]
    fn extraction_then_induction_is_a_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (xs, acts, n) = (3, 3, 3);
            let shape = random_shape(xs, acts, n, &mut rng);
            let kernel = random_kernel(xs, acts, n, &mut rng);
            let policy = random_policy(xs, acts, n, &mut rng);
            let occ = induce_occupancy(&shape, &kernel, &policy).unwrap();
            let extracted = policy_from_occupancy(&occ);
            let occ2 = induce_occupancy(&shape, &kernel, &extracted).unwrap();
            assert!(occ.max_layer_l1(&occ2) < 1e-12);
        }
    }

    #[test]
    fn realized_kernel_rows_are_exact_noise_pushforwards() {
        // g collapses for (x=1, a=0): both noise symbols lead to state 0.
        let map = Arc::new(
            DynamicsMap::from_fn(2, 1, 1, 2, |_, x, _, e| if x == 1 { 0 } else { e }).unwrap(),
        );
        let noise = NoiseModel::uniform(1, 2);
        let dyn_ = NoiseDynamics::new(map, noise).unwrap();
        let kernel = dyn_.kernel();
        assert_eq!(kernel.row(1, 0, 0), &[0.5, 0.5]);
        assert_eq!(kernel.row(1, 1, 0), &[1.0, 0.0]);
    }

    #[test]
    fn kernel_variation_counts_a_single_swap() {
        // Two kernels whose only differing row has total-variation 0.6,
        // i.e. L1 distance 1.2, in the sequence (p, q, q).
        let p = TransitionKernel::new(2, 1, 1, vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        let q = TransitionKernel::new(2, 1, 1, vec![0.4, 0.6, 0.5, 0.5]).unwrap();
        let var = kernel_variation(&[p.clone(), q.clone(), q.clone()]).unwrap();
        assert!((var.total - 2.2).abs() < 1e-12);
        assert_eq!(var.hard, 2.0);
        assert_eq!(var.per_step.len(), 2);
        assert!((var.per_step[0] - 1.2).abs() < 1e-12);
        assert_eq!(var.per_step[1], 0.0);

        let constant = kernel_variation(&[p.clone(), p.clone(), p]).unwrap();
        assert_eq!(constant.total, 1.0);
        assert_eq!(constant.hard, 1.0);
    }

    #[test]
    fn policy_variation_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq: Vec<Policy> = (0..5).map(|_| random_policy(2, 3, 3, &mut rng)).collect();
        let var = policy_variation(&seq).unwrap();
        let mut expected = 1.0;
        for w in seq.windows(2) {
            let mut worst: f64 = 0.0;
            for n in 1..=3 {
                for x in 0..2 {
                    let d: f64 = (0..3)
                        .map(|a| (w[0].at(n, x, a) - w[1].at(n, x, a)).abs())
                        .sum();
                    worst = worst.max(d);
                }
            }
            expected += worst;
        }
        assert!((var.total - expected).abs() < 1e-12);
    }

    #[test]
    fn sampled_episodes_are_deterministic_given_a_seed() {
        let (shape, dynamics, policy) = random_instance(17);
        let t1 = sample_episode(
            &shape,
            &policy,
            &dynamics,
            1,
            &mut ChaCha8Rng::seed_from_u64(99),
        )
        .unwrap();
        let t2 = sample_episode(
            &shape,
            &policy,
            &dynamics,
            1,
            &mut ChaCha8Rng::seed_from_u64(99),
        )
        .unwrap();
        assert_eq!(t1, t2);
        t1.check_lengths(shape.horizon()).unwrap();
    }

    #[test]
    fn episode_frequencies_approach_the_induced_occupancy() {
        let (shape, dynamics, policy) = random_instance(23);
        let kernel = dynamics.kernel();
        let occ = induce_occupancy(&shape, &kernel, &policy).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = 20_000;
        let mut counts =
            vec![0u32; (shape.horizon() + 1) * shape.num_states() * shape.num_actions()];
        for t in 0..samples {
            let traj = sample_episode(&shape, &policy, &dynamics, t + 1, &mut rng).unwrap();
            for n in 0..=shape.horizon() {
                counts[(n * shape.num_states() + traj.states[n]) * shape.num_actions()
                    + traj.actions[n]] += 1;
            }
        }
        for n in 0..=shape.horizon() {
            let mut l1 = 0.0;
            for x in 0..shape.num_states() {
                for a in 0..shape.num_actions() {
                    let freq = counts
                        [(n * shape.num_states() + x) * shape.num_actions() + a]
                        as f64
                        / samples as f64;
                    l1 += (freq - occ.at(n, x, a)).abs();
                }
            }
            assert!(l1 < 0.05, "layer {n} Monte Carlo L1 error {l1}");
        }
    }

    #[test]
    fn perturbation_bounds_hold_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let (xs, acts, n) = (3, 2, 4);
            let shape = random_shape(xs, acts, n, &mut rng);
            let p = random_kernel(xs, acts, n, &mut rng);
            let q = random_kernel(xs, acts, n, &mut rng);
            let pi = random_policy(xs, acts, n, &mut rng);
            let pi2 = random_policy(xs, acts, n, &mut rng);
            let report = occupancy_l1_bound_check(&shape, &pi, &pi2, &p, &q).unwrap();
            assert!(report.holds(1e-12));
        }
    }

    #[test]
    fn identical_inputs_give_zero_perturbation_gap() {
        let (shape, dynamics, policy) = random_instance(2);
        let kernel = dynamics.kernel();
        let report =
            occupancy_l1_bound_check(&shape, &policy, &policy, &kernel, &kernel).unwrap();
        for pair in report.kernel_bound.iter().chain(&report.policy_bound) {
            assert_eq!(pair.lhs, 0.0);
        }
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(MdpShape::new(2, 2, 2, vec![0.6, 0.6, 0.0, 0.0]).is_err());
        assert!(MdpShape::new(0, 2, 2, vec![]).is_err());
        assert!(Policy::new(2, 2, 1, vec![0.9, 0.2, 0.5, 0.5]).is_err());
        assert!(TransitionKernel::new(2, 1, 1, vec![0.9, 0.0, 0.5, 0.5]).is_err());
        assert!(DynamicsMap::new(2, 1, 1, 2, vec![0, 5, 1, 1]).is_err());
        let map = Arc::new(DynamicsMap::from_fn(2, 1, 1, 2, |_, _, _, e| e).unwrap());
        assert!(NoiseDynamics::new(map, NoiseModel::uniform(2, 2)).is_err());
    }

    // Seeded random instance helpers shared by the tests above.

    pub(crate) fn random_simplex(len: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mut v: Vec<f64> = (0..len).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    }

    pub(crate) fn random_shape(
        xs: usize,
        acts: usize,
        horizon: usize,
        rng: &mut impl Rng,
    ) -> MdpShape {
        MdpShape::new(xs, acts, horizon, random_simplex(xs * acts, rng)).unwrap()
    }

    pub(crate) fn random_kernel(
        xs: usize,
        acts: usize,
        horizon: usize,
        rng: &mut impl Rng,
    ) -> TransitionKernel {
        let mut probs = Vec::with_capacity(horizon * xs * acts * xs);
        for _ in 0..horizon * xs * acts {
            probs.extend(random_simplex(xs, rng));
        }
        TransitionKernel::new(xs, acts, horizon, probs).unwrap()
    }

    pub(crate) fn random_policy(
        xs: usize,
        acts: usize,
        horizon: usize,
        rng: &mut impl Rng,
    ) -> Policy {
        let mut probs = Vec::with_capacity(horizon * xs * acts);
        for _ in 0..horizon * xs {
            probs.extend(random_simplex(acts, rng));
        }
        Policy::new(xs, acts, horizon, probs).unwrap()
    }

    fn random_instance(seed: u64) -> (MdpShape, NoiseDynamics, Policy) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (xs, acts, n, es) = (3, 2, 3, 4);
        let shape = random_shape(xs, acts, n, &mut rng);
        let map = Arc::new(
            DynamicsMap::from_fn(xs, acts, n, es, |_, _, _, _| rng.random_range(0..xs)).unwrap(),
        );
        let mut noise = Vec::new();
        for _ in 0..n {
            noise.extend(random_simplex(es, &mut rng));
        }
        let dynamics = NoiseDynamics::new(map, NoiseModel::new(n, es, noise).unwrap()).unwrap();
        let policy = random_policy(xs, acts, n, &mut rng);
        (shape, dynamics, policy)
    }
}
