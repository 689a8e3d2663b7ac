//! The full meta-learner on a non-stationary task, against a single learner.
//!
//! Halfway through the run both the transition law and the loss sign flip.
//! The meta-learner spawns a pool of restarted mirror-descent instances on
//! a learning-rate grid every episode and tracks whichever instance was
//! born at the right time; the single learner drags its whole history
//! along. Regret is measured against the per-episode optimal policy under
//! the true kernel, computed by dynamic programming.
//!
//! Run with `cargo run --example metacurl_demo`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use metacurl::harness::dp_minimize_linear;
use metacurl::objectives::adversarial_sequence;
use metacurl::{
    induce_occupancy, sample_episode, AdversaryKind, BlackboxKernelMode, DynamicsMap, GreedyMdCurl,
    LearningRateGrid, MdpShape, MetaCurl, NoiseDynamics, NoiseModel, Policy,
};

const STATES: usize = 3;
const ACTIONS: usize = 2;
const HORIZON: usize = 3;
const NOISE: usize = 3;
const EPISODES: usize = 300;
const SWITCH_AT: usize = 150;

fn main() -> metacurl::Result<()> {
    let shape = Arc::new(MdpShape::with_uniform_start(STATES, ACTIONS, HORIZON));
    let map = Arc::new(DynamicsMap::from_fn(
        STATES,
        ACTIONS,
        HORIZON,
        NOISE,
        |_n, x, a, e| (x + a + e) % STATES,
    )?);
    let skewed = |front: f64| {
        let rest = (1.0 - front) / 2.0;
        NoiseModel::new(
            HORIZON,
            NOISE,
            (0..HORIZON).flat_map(|_| [front, rest, rest]).collect(),
        )
    };
    let before = NoiseDynamics::new(Arc::clone(&map), skewed(0.8)?)?;
    let after = NoiseDynamics::new(Arc::clone(&map), skewed(0.1)?)?;
    let objectives = adversarial_sequence(
        AdversaryKind::SignFlippingLinear { period: SWITCH_AT },
        &shape,
        EPISODES,
        11,
    )?;

    let grid = LearningRateGrid::for_horizon(EPISODES)?;
    println!(
        "learning-rate grid: {:?}, meta rate {:.4}",
        grid.rates(),
        MetaCurl::new(
            Arc::clone(&shape),
            Arc::clone(&map),
            EPISODES,
            grid.clone(),
            BlackboxKernelMode::OwnSinceBirth,
            false,
        )?
        .eta()
    );

    let mut meta = MetaCurl::new(
        Arc::clone(&shape),
        Arc::clone(&map),
        EPISODES,
        grid,
        BlackboxKernelMode::OwnSinceBirth,
        false,
    )?;
    let mut single = GreedyMdCurl::new(
        Arc::clone(&shape),
        Arc::clone(&map),
        1.0 / (EPISODES as f64).sqrt(),
        1,
    )?;

    let mut rng_meta = ChaCha8Rng::seed_from_u64(1);
    let mut rng_single = ChaCha8Rng::seed_from_u64(1);
    let (mut regret_meta, mut regret_single) = (0.0, 0.0);
    println!("\nepisode | cumulative regret: meta | single learner | instances");
    for t in 1..=EPISODES {
        let dynamics = if t <= SWITCH_AT { &before } else { &after };
        let truth = dynamics.kernel();
        let objective = &objectives[t - 1];
        let loss = objective
            .linear_loss()
            .expect("sign-flipping schedules are linear");
        let (_, comparator_loss) = dp_minimize_linear(&shape, &truth, loss)?;

        let policy: Policy = meta.begin_episode()?.clone();
        let occ = induce_occupancy(&shape, &truth, &policy)?;
        regret_meta += objective.eval(&occ)? - comparator_loss;
        let traj = sample_episode(&shape, &policy, dynamics, t, &mut rng_meta)?;
        meta.end_episode(objective, &traj, &mut rng_meta)?;

        let occ = induce_occupancy(&shape, &truth, single.policy())?;
        regret_single += objective.eval(&occ)? - comparator_loss;
        let traj = sample_episode(&shape, single.policy(), dynamics, t, &mut rng_single)?;
        let gradient = objective.grad(single.model_occupancy())?;
        single.blackbox_episode(&gradient, &traj, None)?;

        if [50, 150, 160, 200, 300].contains(&t) {
            let note = if t == SWITCH_AT { "  <- switch after this episode" } else { "" };
            println!(
                "  {t:5} | {regret_meta:19.3} | {regret_single:14.3} | {:9}{note}",
                meta.num_instances()
            );
        }
    }

    let worst = meta
        .audit_regrets()
        .into_iter()
        .map(|r| r.regret)
        .fold(f64::NEG_INFINITY, f64::max);
    println!(
        "\naudit: worst normalized regret against any pooled instance {:.3}, tuned bound {:.3}",
        worst,
        meta.regret_bound()
    );
    Ok(())
}
