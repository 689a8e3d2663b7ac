//! Exact occupancy induction versus Monte Carlo rollouts.
//!
//! Builds a four-state conveyor MDP whose transitions apply a known map to
//! (state, action, noise), induces the occupancy of a fixed policy by the
//! forward recursion, verifies the per-layer and flow constraints, then
//! re-estimates the same occupancy from sampled episodes and reports the
//! worst per-layer L1 gap.
//!
//! Run with `cargo run --example occupancy_flow`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use metacurl::{
    induce_occupancy, sample_episode, DynamicsMap, MdpShape, NoiseDynamics, NoiseModel, Occupancy,
    Policy,
};

const STATES: usize = 4;
const ACTIONS: usize = 2;
const HORIZON: usize = 5;
const NOISE: usize = 3;
const EPISODES: usize = 200_000;

fn main() -> metacurl::Result<()> {
    let shape = MdpShape::with_uniform_start(STATES, ACTIONS, HORIZON);

    // Action 1 tries to advance along the chain, action 0 stays; noise
    // symbol 2 knocks the agent back one state regardless of the action.
    let map = Arc::new(DynamicsMap::from_fn(
        STATES,
        ACTIONS,
        HORIZON,
        NOISE,
        |_n, x, a, e| {
            if e == 2 {
                x.saturating_sub(1)
            } else {
                (x + a).min(STATES - 1)
            }
        },
    )?);
    let noise = NoiseModel::new(
        HORIZON,
        NOISE,
        (0..HORIZON).flat_map(|_| [0.5, 0.3, 0.2]).collect(),
    )?;
    let dynamics = NoiseDynamics::new(Arc::clone(&map), noise)?;
    let kernel = dynamics.kernel();

    // Advance with probability 0.8 in every state and layer.
    let policy = Policy::new(
        STATES,
        ACTIONS,
        HORIZON,
        (0..HORIZON * STATES).flat_map(|_| [0.2, 0.8]).collect(),
    )?;

    let exact = induce_occupancy(&shape, &kernel, &policy)?;
    exact.check_layers(1e-12)?;
    exact.check_flow(&kernel, 1e-10)?;
    println!("exact occupancy passes layer-sum and flow checks");
    for n in 0..=HORIZON {
        let marginal: Vec<f64> = (0..STATES).map(|x| exact.state_marginal(n, x)).collect();
        println!(
            "  layer {n}: state marginal [{}]",
            marginal
                .iter()
                .map(|p| format!("{p:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut counts = vec![0u64; (HORIZON + 1) * STATES * ACTIONS];
    for episode in 1..=EPISODES {
        let traj = sample_episode(&shape, &policy, &dynamics, episode, &mut rng)?;
        for n in 0..=HORIZON {
            counts[(n * STATES + traj.states[n]) * ACTIONS + traj.actions[n]] += 1;
        }
    }
    let empirical = Occupancy::new(
        STATES,
        ACTIONS,
        HORIZON,
        counts.iter().map(|&c| c as f64 / EPISODES as f64).collect(),
    )?;

    let gap = exact.max_layer_l1(&empirical);
    println!("worst per-layer L1 gap after {EPISODES} episodes: {gap:.5}");
    println!("(expected scale: roughly sqrt(|X||A| / episodes) = {:.5})", ((STATES * ACTIONS) as f64 / EPISODES as f64).sqrt());
    Ok(())
}
