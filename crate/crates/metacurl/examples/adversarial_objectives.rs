//! The three convex objective families and their adversarial schedules.
//!
//! Evaluates linear, entropy and imitation objectives on the occupancy of a
//! uniform policy, checks a directional derivative against finite
//! differences, and prints how each adversarial schedule moves over time.
//!
//! Run with `cargo run --example adversarial_objectives`.

use metacurl::objectives::{adversarial_sequence, entropy_objective, imitation_objective};
use metacurl::{induce_occupancy, AdversaryKind, MdpShape, Occupancy, Policy, TransitionKernel};

const STATES: usize = 3;
const ACTIONS: usize = 2;
const HORIZON: usize = 4;
const EPISODES: usize = 12;
const FD_STEP: f64 = 1e-6;

/// Copy `occ` with `step` of mass moved from `(n, x_from, a_from)` to
/// `(n, x_to, a_to)`; layer sums are untouched, so the result is a valid
/// occupancy.
fn shift_mass(
    occ: &Occupancy,
    n: usize,
    from: (usize, usize),
    to: (usize, usize),
    step: f64,
) -> metacurl::Result<Occupancy> {
    let (xs, acts, n_max) = (occ.num_states(), occ.num_actions(), occ.horizon());
    let mut flat = Vec::with_capacity((n_max + 1) * xs * acts);
    for layer in 0..=n_max {
        flat.extend_from_slice(occ.layer(layer));
    }
    let base = n * xs * acts;
    flat[base + from.0 * acts + from.1] -= step;
    flat[base + to.0 * acts + to.1] += step;
    Occupancy::new(xs, acts, n_max, flat)
}

fn main() -> metacurl::Result<()> {
    let shape = MdpShape::with_uniform_start(STATES, ACTIONS, HORIZON);
    let kernel = TransitionKernel::uniform(STATES, ACTIONS, HORIZON);
    let policy = Policy::uniform(STATES, ACTIONS, HORIZON);
    let occ = induce_occupancy(&shape, &kernel, &policy)?;

    // Entropy: the uniform occupancy already maximizes it, so the
    // normalized objective value sits at its minimum of 0.
    let entropy = entropy_objective(STATES, ACTIONS, HORIZON);
    println!(
        "entropy objective at the uniform occupancy: {:.6} (minimum 0)",
        entropy.eval(&occ)?
    );

    // Imitation: distance to a target occupancy; zero at the target itself.
    let imitation = imitation_objective(occ.clone())?;
    println!(
        "imitation objective at its own target:     {:.6}",
        imitation.eval(&occ)?
    );

    // Directional derivative of the imitation objective along a feasible
    // mass shift, against central differences. The derivative is the
    // gradient difference between the receiving and the donating cell.
    let off_target = shift_mass(&occ, 2, (1, 0), (0, 1), 0.05)?;
    let grad = imitation.grad(&off_target)?;
    let analytic = grad.at(2, 0, 1) - grad.at(2, 1, 0);
    let up = shift_mass(&off_target, 2, (1, 0), (0, 1), FD_STEP)?;
    let down = shift_mass(&off_target, 2, (0, 1), (1, 0), FD_STEP)?;
    let fd = (imitation.eval(&up)? - imitation.eval(&down)?) / (2.0 * FD_STEP);
    println!("directional derivative: analytic {analytic:.6}, finite-difference {fd:.6}");

    for kind in [
        AdversaryKind::IidRandomLinear,
        AdversaryKind::SignFlippingLinear { period: 4 },
        AdversaryKind::DriftingTargetImitation { total_drift: 1.5 },
    ] {
        let seq = adversarial_sequence(kind, &shape, EPISODES, 7)?;
        let values: Vec<String> = seq
            .iter()
            .map(|obj| obj.eval(&occ).map(|v| format!("{v:.3}")))
            .collect::<metacurl::Result<_>>()?;
        println!("{kind:?}\n  value at the uniform occupancy per episode: [{}]", values.join(", "));
    }
    Ok(())
}
