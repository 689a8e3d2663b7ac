//! The greedy mirror-descent CURL learner on a stationary task.
//!
//! Runs the single restartable learner on entropy maximization under fixed
//! unknown dynamics. Each episode it plays its current policy, updates its
//! empirical kernel from the observed noise, and takes one mirror step.
//! The occupancy entropy climbs toward the optimum computed independently
//! by the conditional-gradient solver.
//!
//! Run with `cargo run --example greedy_mdcurl`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use metacurl::harness::frank_wolfe_minimize;
use metacurl::objectives::entropy_objective;
use metacurl::{
    induce_occupancy, sample_episode, DynamicsMap, GreedyMdCurl, MdpShape, NoiseDynamics,
    NoiseModel, Policy,
};

const STATES: usize = 3;
const ACTIONS: usize = 2;
const HORIZON: usize = 4;
const NOISE: usize = 3;
const EPISODES: usize = 500;

fn main() -> metacurl::Result<()> {
    let shape = Arc::new(MdpShape::with_uniform_start(STATES, ACTIONS, HORIZON));
    let map = Arc::new(DynamicsMap::from_fn(
        STATES,
        ACTIONS,
        HORIZON,
        NOISE,
        |n, x, a, e| (x * a + e + n) % STATES,
    )?);
    let noise = NoiseModel::new(
        HORIZON,
        NOISE,
        (0..HORIZON).flat_map(|_| [0.6, 0.3, 0.1]).collect(),
    )?;
    let dynamics = NoiseDynamics::new(Arc::clone(&map), noise)?;
    let truth = dynamics.kernel();
    let objective = entropy_objective(STATES, ACTIONS, HORIZON);

    // Independent target: minimize the objective over the true occupancy
    // polytope with the conditional-gradient solver.
    let (_, _, optimum) = frank_wolfe_minimize(
        &shape,
        &truth,
        &|occ| objective.eval(occ),
        &|occ, out| objective.grad_into(occ, out),
    )?;
    let uniform_occ = induce_occupancy(&shape, &truth, &Policy::uniform(STATES, ACTIONS, HORIZON))?;
    println!(
        "objective value: uniform policy {:.4}, polytope optimum {:.4}",
        objective.eval(&uniform_occ)?,
        optimum
    );

    let lambda = 1.0 / (EPISODES as f64).sqrt();
    let mut learner = GreedyMdCurl::new(Arc::clone(&shape), Arc::clone(&map), lambda, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    println!("\nepisode | objective of the played policy under the true kernel");
    for t in 1..=EPISODES {
        let traj = sample_episode(&shape, learner.policy(), &dynamics, t, &mut rng)?;
        let gradient = objective.grad(learner.model_occupancy())?;
        learner.blackbox_episode(&gradient, &traj, None)?;
        if [1, 10, 50, 100, 250, 500].contains(&t) {
            let occ = induce_occupancy(&shape, &truth, learner.policy())?;
            println!("  {t:5} | {:.4}", objective.eval(&occ)?);
        }
    }
    let final_occ = induce_occupancy(&shape, &truth, learner.policy())?;
    println!(
        "\nfinal gap to the optimum: {:.4} (mirror-descent rate {lambda:.4})",
        objective.eval(&final_occ)? - optimum
    );
    Ok(())
}
