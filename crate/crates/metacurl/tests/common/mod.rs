//! Shared generators and independent oracles for the integration suites.
//!
//! Everything here recomputes quantities from first principles (path
//! enumeration, explicit conditional ratios, linear-minimization
//! certificates) so the main crate's recursions are checked against a
//! second, structurally different implementation.

use metacurl::harness::dp_minimize_linear;
use metacurl::objectives::linear_objective;
use metacurl::{
    induce_occupancy, sample_episode, BlackboxKernelMode, CurlObjective, DynamicsMap,
    GreedyMdCurl, LearningRateGrid, MdpShape, MetaCurl, NoiseDynamics, NoiseModel, Occupancy,
    Policy, SaTensor, TransitionKernel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Random probability vector with every entry at least `floor / k`.
pub fn random_simplex(k: usize, floor: f64, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-4).collect();
    let sum: f64 = raw.iter().sum();
    let uniform = 1.0 / k as f64;
    raw.iter()
        .map(|r| (1.0 - floor) * r / sum + floor * uniform)
        .collect()
}

pub fn random_shape(xs: usize, acts: usize, horizon: usize, rng: &mut impl Rng) -> MdpShape {
    let start = random_simplex(xs * acts, 0.05, rng);
    MdpShape::new(xs, acts, horizon, start).expect("generated start distribution is valid")
}

pub fn random_kernel(xs: usize, acts: usize, horizon: usize, rng: &mut impl Rng) -> TransitionKernel {
    let mut probs = Vec::with_capacity(horizon * xs * acts * xs);
    for _ in 0..horizon * xs * acts {
        probs.extend(random_simplex(xs, 0.05, rng));
    }
    TransitionKernel::new(xs, acts, horizon, probs).expect("generated kernel rows are valid")
}

pub fn random_policy(xs: usize, acts: usize, horizon: usize, rng: &mut impl Rng) -> Policy {
    let mut probs = Vec::with_capacity(horizon * xs * acts);
    for _ in 0..horizon * xs {
        probs.extend(random_simplex(acts, 0.05, rng));
    }
    Policy::new(xs, acts, horizon, probs).expect("generated policy rows are valid")
}

/// Policy whose rows are multiples of 1/8, so each row sums to exactly 1.0
/// in floating point.
pub fn random_dyadic_policy(xs: usize, acts: usize, horizon: usize, rng: &mut impl Rng) -> Policy {
    let mut probs = Vec::with_capacity(horizon * xs * acts);
    for _ in 0..horizon * xs {
        let mut eighths = vec![1u32; acts];
        let mut left = 8 - acts as u32;
        for w in eighths.iter_mut().take(acts - 1) {
            let extra = rng.random_range(0..=left);
            *w += extra;
            left -= extra;
        }
        eighths[acts - 1] += left;
        probs.extend(eighths.iter().map(|&w| w as f64 / 8.0));
    }
    Policy::new(xs, acts, horizon, probs).expect("dyadic rows are valid")
}

/// Occupancy of `policy` under `kernel` by exhaustive enumeration of every
/// state-action path, layer by layer. Exponential in the horizon; only for
/// small instances.
pub fn enumerate_occupancy(
    shape: &MdpShape,
    kernel: &TransitionKernel,
    policy: &Policy,
) -> Vec<Vec<f64>> {
    let (xs, acts, n_max) = (shape.num_states(), shape.num_actions(), shape.horizon());
    let mut layers = vec![vec![0.0; xs * acts]; n_max + 1];
    fn recurse(
        n: usize,
        x: usize,
        a: usize,
        weight: f64,
        n_max: usize,
        xs: usize,
        acts: usize,
        kernel: &TransitionKernel,
        policy: &Policy,
        layers: &mut [Vec<f64>],
    ) {
        layers[n][x * acts + a] += weight;
        if n == n_max || weight == 0.0 {
            return;
        }
        for xp in 0..xs {
            let pk = kernel.at(n + 1, x, a, xp);
            for ap in 0..acts {
                let w = weight * pk * policy.at(n + 1, xp, ap);
                recurse(n + 1, xp, ap, w, n_max, xs, acts, kernel, policy, layers);
            }
        }
    }
    for x in 0..xs {
        for a in 0..acts {
            let w = shape.initial_dist()[x * acts + a];
            recurse(0, x, a, w, n_max, xs, acts, kernel, policy, &mut layers);
        }
    }
    layers
}

/// Empirical per-layer state-action frequencies over sampled episodes.
pub fn monte_carlo_occupancy(
    shape: &MdpShape,
    policy: &Policy,
    dynamics: &NoiseDynamics,
    episodes: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    let (acts, n_max) = (shape.num_actions(), shape.horizon());
    let mut layers = vec![vec![0.0; shape.num_states() * acts]; n_max + 1];
    let weight = 1.0 / episodes as f64;
    for episode in 1..=episodes {
        let traj = sample_episode(shape, policy, dynamics, episode, rng)
            .expect("sampling a valid instance succeeds");
        for n in 0..=n_max {
            layers[n][traj.states[n] * acts + traj.actions[n]] += weight;
        }
    }
    layers
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// A stationary random instance bundled for simulation-based checks.
pub struct RandomProcess {
    pub shape: MdpShape,
    pub dynamics: NoiseDynamics,
    pub policy: Policy,
}

pub fn random_process(
    xs: usize,
    acts: usize,
    horizon: usize,
    noise_card: usize,
    rng: &mut impl Rng,
) -> RandomProcess {
    let shape = random_shape(xs, acts, horizon, rng);
    let map = DynamicsMap::from_fn(xs, acts, horizon, noise_card, |_, _, _, _| {
        rng.random_range(0..xs)
    })
    .expect("generated map dimensions are valid");
    let mut noise = Vec::with_capacity(horizon * noise_card);
    for _ in 0..horizon {
        noise.extend(random_simplex(noise_card, 0.1, rng));
    }
    let model = NoiseModel::new(horizon, noise_card, noise).expect("generated noise rows are valid");
    let dynamics = NoiseDynamics::new(Arc::new(map), model).expect("map and model agree");
    let policy = random_policy(xs, acts, horizon, rng);
    RandomProcess {
        shape,
        dynamics,
        policy,
    }
}

/// Value of the mirror-step composite objective
/// `h(mu) = lambda <g, mu> + sum_n sum_{x,a} mu_n(x,a)
///          ln(pi^mu_n(a|x) / reference_n(a|x))`
/// at a strictly positive occupancy.
pub fn mirror_objective(
    mu: &Occupancy,
    reference: &Policy,
    gradient: &SaTensor,
    lambda: f64,
) -> f64 {
    let (xs, acts, n_max) = (
        reference.num_states(),
        reference.num_actions(),
        reference.horizon(),
    );
    let mut total = lambda * gradient.dot_occupancy(mu);
    for n in 1..=n_max {
        for x in 0..xs {
            let mass = mu.state_marginal(n, x);
            if mass <= 0.0 {
                continue;
            }
            for a in 0..acts {
                let m = mu.at(n, x, a);
                if m > 0.0 {
                    total += m * (m / mass / reference.at(n, x, a)).ln();
                }
            }
        }
    }
    total
}

/// Gradient of [`mirror_objective`] at a strictly positive occupancy:
/// `lambda g_n(x,a) + ln(pi^mu_n(a|x) / reference_n(a|x))`.
pub fn mirror_gradient(
    mu: &Occupancy,
    reference: &Policy,
    gradient: &SaTensor,
    lambda: f64,
) -> SaTensor {
    let (xs, acts, n_max) = (
        reference.num_states(),
        reference.num_actions(),
        reference.horizon(),
    );
    SaTensor::from_fn(xs, acts, n_max, |n, x, a| {
        let mass = mu.state_marginal(n, x);
        let pi = mu.at(n, x, a) / mass;
        lambda * gradient.at(n, x, a) + (pi / reference.at(n, x, a)).ln()
    })
}

/// Convexity certificate for the suboptimality of `mu` on the composite
/// objective: `h(mu) - min h <= <grad h(mu), mu> - min_nu <grad h(mu), nu>`,
/// with the inner minimum solved exactly by backward induction.
pub fn mirror_suboptimality_bound(
    shape: &MdpShape,
    kernel: &TransitionKernel,
    mu: &Occupancy,
    reference: &Policy,
    gradient: &SaTensor,
    lambda: f64,
) -> f64 {
    let g = mirror_gradient(mu, reference, gradient, lambda);
    let (_, best) = dp_minimize_linear(shape, kernel, &g).expect("certificate solve succeeds");
    g.dot_occupancy(mu) - best
}

pub const FLIP_PHASES: usize = 5;

/// Piecewise-stationary benchmark with four kernel switches and losses
/// whose sign flips at every switch.
///
/// Action 0 moves to the state named by the noise symbol, action 1 to the
/// next symbol cyclically. The noise law alternates between concentrating
/// on symbol 0 and on symbol 1, so the state each action reaches swaps
/// across phases; the flipped losses keep the per-phase optimal action
/// constant while any learner relying on a cross-phase average kernel
/// prefers the wrong action throughout the even phases.
pub struct ModeFlipEnv {
    pub shape: Arc<MdpShape>,
    pub map: Arc<DynamicsMap>,
    /// Per-phase dynamics, one entry per phase.
    pub dynamics: Vec<NoiseDynamics>,
    /// Per-phase loss tensors.
    pub losses: Vec<SaTensor>,
    /// Per-phase loss objectives wrapping `losses`.
    pub objectives: Vec<CurlObjective>,
}

pub fn mode_flip_env() -> ModeFlipEnv {
    let (xs, acts, horizon) = (3, 2, 3);
    let shape = Arc::new(MdpShape::with_uniform_start(xs, acts, horizon));
    let map = Arc::new(
        DynamicsMap::from_fn(xs, acts, horizon, 3, |_, _, a, e| {
            if a == 0 {
                e
            } else {
                (e + 1) % 3
            }
        })
        .expect("carousel map dimensions are valid"),
    );
    let mode_a = NoiseModel::new(horizon, 3, [0.8, 0.1, 0.1].repeat(horizon))
        .expect("concentrated rows are valid");
    let mode_b = NoiseModel::new(horizon, 3, [0.1, 0.8, 0.1].repeat(horizon))
        .expect("concentrated rows are valid");
    let dynamics = (0..FLIP_PHASES)
        .map(|k| {
            let model = if k % 2 == 0 { mode_a.clone() } else { mode_b.clone() };
            NoiseDynamics::new(Arc::clone(&map), model).expect("map and model agree")
        })
        .collect();
    let cost = [0.0, 1.0, 0.5];
    let losses: Vec<SaTensor> = (0..FLIP_PHASES)
        .map(|k| {
            SaTensor::from_fn(xs, acts, horizon, |_, x, _| {
                if k % 2 == 0 {
                    cost[x]
                } else {
                    1.0 - cost[x]
                }
            })
        })
        .collect();
    let objectives = losses
        .iter()
        .map(|l| linear_objective(l.clone()).expect("losses lie in [0, 1]"))
        .collect();
    ModeFlipEnv {
        shape,
        map,
        dynamics,
        losses,
        objectives,
    }
}

/// Zero-based phase of 1-based episode `t` under the even five-way split.
pub fn flip_phase_of(t: usize, episodes: usize) -> usize {
    FLIP_PHASES * (t - 1) / episodes
}

/// Total loss of the per-phase optimal policies over a full run.
pub fn flip_comparator_total(env: &ModeFlipEnv, episodes: usize) -> f64 {
    (0..FLIP_PHASES)
        .map(|k| {
            let kernel = env.dynamics[k].kernel();
            let (_, value) = dp_minimize_linear(&env.shape, &kernel, &env.losses[k])
                .expect("comparator solve succeeds");
            value * (episodes / FLIP_PHASES) as f64
        })
        .sum()
}

/// Drive the meta-learner through the benchmark; returns the final learner
/// state together with its true dynamic regret.
pub fn run_meta_on_flip(
    env: &ModeFlipEnv,
    episodes: usize,
    seed: u64,
    kernel_mode: BlackboxKernelMode,
) -> (MetaCurl, f64) {
    let grid = LearningRateGrid::for_horizon(episodes).expect("positive episode count");
    let mut meta = MetaCurl::new(
        Arc::clone(&env.shape),
        Arc::clone(&env.map),
        episodes,
        grid,
        kernel_mode,
        false,
    )
    .expect("benchmark dimensions are valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for t in 1..=episodes {
        let k = flip_phase_of(t, episodes);
        let policy = meta.begin_episode().expect("episode starts").clone();
        let occ = induce_occupancy(&env.shape, &env.dynamics[k].kernel(), &policy)
            .expect("played policy induces a valid occupancy");
        total += env.losses[k].dot_occupancy(&occ);
        let traj = sample_episode(&env.shape, &policy, &env.dynamics[k], t, &mut rng)
            .expect("sampling succeeds");
        meta.end_episode(&env.objectives[k], &traj, &mut rng)
            .expect("episode folds in");
    }
    let regret = total - flip_comparator_total(env, episodes);
    (meta, regret)
}

/// Drive a lone restart-free learner through the benchmark at rate
/// `lambda`; returns its true dynamic regret.
pub fn run_single_on_flip(env: &ModeFlipEnv, episodes: usize, seed: u64, lambda: f64) -> f64 {
    let mut learner = GreedyMdCurl::new(Arc::clone(&env.shape), Arc::clone(&env.map), lambda, 1)
        .expect("benchmark dimensions are valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for t in 1..=episodes {
        let k = flip_phase_of(t, episodes);
        let policy = learner.policy().clone();
        let occ = induce_occupancy(&env.shape, &env.dynamics[k].kernel(), &policy)
            .expect("played policy induces a valid occupancy");
        total += env.losses[k].dot_occupancy(&occ);
        let traj = sample_episode(&env.shape, &policy, &env.dynamics[k], t, &mut rng)
            .expect("sampling succeeds");
        learner
            .blackbox_episode(&env.losses[k], &traj, None)
            .expect("episode folds in");
    }
    total - flip_comparator_total(env, episodes)
}
