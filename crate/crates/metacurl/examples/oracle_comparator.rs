//! Oracle solvers over the occupancy polytope.
//!
//! Two independent routes to the comparator: dynamic programming for linear
//! objectives, and a conditional-gradient (Frank-Wolfe) loop with an exact
//! line search for general convex ones. On a linear objective both must
//! agree; on an imitation objective with a reachable target the optimum is
//! zero and the solver certifies it with a duality gap.
//!
//! Run with `cargo run --example oracle_comparator`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metacurl::harness::{dp_minimize_linear, frank_wolfe_minimize};
use metacurl::objectives::imitation_objective;
use metacurl::{induce_occupancy, MdpShape, Policy, SaTensor, TransitionKernel};

const STATES: usize = 4;
const ACTIONS: usize = 3;
const HORIZON: usize = 5;

fn main() -> metacurl::Result<()> {
    let shape = MdpShape::with_uniform_start(STATES, ACTIONS, HORIZON);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let kernel = {
        let mut probs = Vec::new();
        for _ in 0..HORIZON * STATES * ACTIONS {
            let row: Vec<f64> = (0..STATES).map(|_| rng.random::<f64>() + 0.1).collect();
            let sum: f64 = row.iter().sum();
            probs.extend(row.into_iter().map(|v| v / sum));
        }
        TransitionKernel::new(STATES, ACTIONS, HORIZON, probs)?
    };

    // Linear objective: backward induction gives the exact optimum.
    let loss = SaTensor::from_fn(STATES, ACTIONS, HORIZON, |_, _, _| rng.random::<f64>());
    let (_dp_policy, dp_value) = dp_minimize_linear(&shape, &kernel, &loss)?;
    let (_, _, fw_value) = frank_wolfe_minimize(
        &shape,
        &kernel,
        &|occ| Ok(loss.dot_occupancy(occ)),
        &|_occ, out| {
            for n in 1..=HORIZON {
                for x in 0..STATES {
                    for a in 0..ACTIONS {
                        *out.at_mut(n, x, a) = loss.at(n, x, a);
                    }
                }
            }
            Ok(())
        },
    )?;
    println!("linear objective: dynamic programming {dp_value:.8}, conditional gradient {fw_value:.8}");
    println!("  agreement gap {:.2e}", (dp_value - fw_value).abs());

    // Imitation of a reachable target: some policy attains value zero.
    let mut probs = Vec::new();
    for _ in 0..HORIZON * STATES {
        let row: Vec<f64> = (0..ACTIONS).map(|_| rng.random::<f64>() + 0.05).collect();
        let sum: f64 = row.iter().sum();
        probs.extend(row.into_iter().map(|v| v / sum));
    }
    let target_policy = Policy::new(STATES, ACTIONS, HORIZON, probs)?;
    let target = induce_occupancy(&shape, &kernel, &target_policy)?;
    let objective = imitation_objective(target)?;
    let (occ, _policy, value) = frank_wolfe_minimize(
        &shape,
        &kernel,
        &|occ| objective.eval(occ),
        &|occ, out| objective.grad_into(occ, out),
    )?;
    println!("\nreachable imitation target: optimal value {value:.3e} (true optimum 0)");
    println!(
        "  L1 distance of the solver's occupancy to the target: {:.3e}",
        occ.max_layer_l1(objective.imitation_target().expect("imitation objective has a target"))
    );

    // The DP tie-break is deterministic: under an all-zero loss every
    // action is optimal and the solver picks action 0 everywhere.
    let zero = SaTensor::zeros(STATES, ACTIONS, HORIZON);
    let (tie_policy, tie_value) = dp_minimize_linear(&shape, &kernel, &zero)?;
    let all_first_action = (1..=HORIZON)
        .all(|n| (0..STATES).all(|x| tie_policy.at(n, x, 0) == 1.0));
    println!("\nzero loss: value {tie_value}, ties resolved to the first action: {all_first_action}");
    Ok(())
}
