//! Oracle comparator sequences over the flow polytope.
//!
//! Linear objectives are minimized exactly by backward dynamic
//! programming with a lowest-action-index tie-break; everything else runs
//! Frank-Wolfe, whose linear minimization oracle is that same backward
//! pass, until the duality gap certifies the objective value to
//! [`tol::FW_GAP`].

use crate::harness::config::ComparatorMode;
use crate::harness::environment::GeneratedEnvironment;
use crate::mdp::{
    induce_occupancy, policy_from_occupancy, policy_variation, MdpShape, Occupancy, Policy,
    SaTensor, TransitionKernel, Variation,
};
use crate::objectives::{CurlObjective, ObjectiveKind};
use crate::tol;
use crate::{CurlError, Result};

/// Comparator policies, their per-episode losses under the true kernels,
/// and the drift of the policy sequence.
#[derive(Clone, Debug)]
pub struct ComparatorResult {
    pub policies: Vec<Policy>,
    pub losses: Vec<f64>,
    pub variation: Variation,
}

/// Minimize a linear objective over the flow polytope by backward
/// induction. Ties break toward the lowest action index, so the result is
/// deterministic. Returns the (deterministic) optimal policy and value.
pub fn dp_minimize_linear(
    shape: &MdpShape,
    kernel: &TransitionKernel,
    loss: &SaTensor,
) -> Result<(Policy, f64)> {
    let (xs, acts, n_max) = (shape.num_states(), shape.num_actions(), shape.horizon());
    if kernel.num_states() != xs || kernel.num_actions() != acts || kernel.horizon() != n_max {
        return Err(CurlError::Dimension("kernel does not match shape".into()));
    }
    if loss.num_states() != xs || loss.num_actions() != acts || loss.horizon() != n_max {
        return Err(CurlError::Dimension("loss does not match shape".into()));
    }
    let mut policy = Policy::uniform(xs, acts, n_max);
    let mut values = vec![0.0; xs];
    let mut next_values = vec![0.0; xs];
    for n in (1..=n_max).rev() {
        for x in 0..xs {
            let mut best = f64::INFINITY;
            let mut best_a = 0;
            for a in 0..acts {
                let mut q = loss.at(n, x, a);
                if n < n_max {
                    for (xp, &v) in next_values.iter().enumerate() {
                        q += kernel.at(n + 1, x, a, xp) * v;
                    }
                }
                if q < best {
                    best = q;
                    best_a = a;
                }
            }
            values[x] = best;
            let row = policy.row_mut(n, x);
            row.iter_mut().for_each(|p| *p = 0.0);
            row[best_a] = 1.0;
        }
        std::mem::swap(&mut values, &mut next_values);
    }
    let mut value = 0.0;
    for x in 0..xs {
        for a in 0..acts {
            let mass = shape.initial_dist()[x * acts + a];
            if mass == 0.0 {
                continue;
            }
            let cont: f64 = kernel
                .row(1, x, a)
                .iter()
                .zip(&next_values)
                .map(|(p, v)| p * v)
                .sum();
            value += mass * cont;
        }
    }
    Ok((policy, value))
}

/// Frank-Wolfe over the flow polytope with the backward pass as linear
/// minimization oracle. Returns the final iterate, its extracted policy,
/// and its objective value once the duality gap drops below
/// [`tol::FW_GAP`]; running out of iterations reports the achieved gap.
pub fn frank_wolfe_minimize(
    shape: &MdpShape,
    kernel: &TransitionKernel,
    eval: &dyn Fn(&Occupancy) -> Result<f64>,
    grad: &dyn Fn(&Occupancy, &mut SaTensor) -> Result<()>,
) -> Result<(Occupancy, Policy, f64)> {
    let (xs, acts, n_max) = (shape.num_states(), shape.num_actions(), shape.horizon());
    let mut current = induce_occupancy(shape, kernel, &Policy::uniform(xs, acts, n_max))?;
    let mut trial = current.clone();
    let mut g = SaTensor::zeros(xs, acts, n_max);
    let mut gap = f64::INFINITY;
    for k in 0..tol::FW_MAX_ITERS {
        grad(&current, &mut g)?;
        let (vertex_policy, _) = dp_minimize_linear(shape, kernel, &g)?;
        let vertex = induce_occupancy(shape, kernel, &vertex_policy)?;
        gap = g.dot_occupancy(&current) - g.dot_occupancy(&vertex);
        if !gap.is_finite() {
            return Err(CurlError::Numeric(format!(
                "frank-wolfe produced a non-finite gap at iteration {k}"
            )));
        }
        if gap <= tol::FW_GAP {
            let value = eval(&current)?;
            let policy = policy_from_occupancy(&current);
            return Ok((current, policy, value));
        }
        let step = line_search(&current, &vertex, &mut trial, n_max, eval)?;
        for n in 0..=n_max {
            for (c, v) in current.layer_mut(n).iter_mut().zip(vertex.layer(n)) {
                *c = (1.0 - step) * *c + step * v;
            }
        }
    }
    Err(CurlError::Numeric(format!(
        "frank-wolfe exhausted {} iterations with gap {gap}",
        tol::FW_MAX_ITERS
    )))
}

/// Exact line search along a Frank-Wolfe direction: ternary search on the
/// convex restriction `step -> F((1 - step) current + step vertex)`.
fn line_search(
    current: &Occupancy,
    vertex: &Occupancy,
    trial: &mut Occupancy,
    n_max: usize,
    eval: &dyn Fn(&Occupancy) -> Result<f64>,
) -> Result<f64> {
    let probe = |step: f64, trial: &mut Occupancy| -> Result<f64> {
        for n in 0..=n_max {
            for ((t, c), v) in trial
                .layer_mut(n)
                .iter_mut()
                .zip(current.layer(n))
                .zip(vertex.layer(n))
            {
                *t = (1.0 - step) * c + step * v;
            }
        }
        eval(trial)
    };
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..90 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if probe(m1, trial)? <= probe(m2, trial)? {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Minimize one objective over the flow polytope of `kernel`.
pub fn solve_occupancy_min(
    shape: &MdpShape,
    kernel: &TransitionKernel,
    objective: &CurlObjective,
) -> Result<(Policy, f64)> {
    if let Some(loss) = objective.linear_loss() {
        return dp_minimize_linear(shape, kernel, loss);
    }
    let eval = |occ: &Occupancy| objective.eval(occ);
    let grad = |occ: &Occupancy, out: &mut SaTensor| objective.grad_into(occ, out);
    let (_, policy, value) = frank_wolfe_minimize(shape, kernel, &eval, &grad)?;
    Ok((policy, value))
}

/// Minimize the per-episode average of `objectives` over the flow
/// polytope of `kernel`. The averaged problem keeps the duality-gap
/// tolerance on the same scale as a single episode.
fn solve_mean(
    shape: &MdpShape,
    kernel: &TransitionKernel,
    objectives: &[CurlObjective],
) -> Result<Policy> {
    if objectives.is_empty() {
        return Err(CurlError::Argument("no objectives to average".into()));
    }
    let (xs, acts, n_max) = (shape.num_states(), shape.num_actions(), shape.horizon());
    let count = objectives.len() as f64;
    if objectives.iter().all(|o| o.kind() == ObjectiveKind::Linear) {
        let mut mean = SaTensor::zeros(xs, acts, n_max);
        for obj in objectives {
            let loss = obj.linear_loss().expect("checked linear");
            for n in 1..=n_max {
                for x in 0..xs {
                    for a in 0..acts {
                        *mean.at_mut(n, x, a) += loss.at(n, x, a) / count;
                    }
                }
            }
        }
        let (policy, _) = dp_minimize_linear(shape, kernel, &mean)?;
        return Ok(policy);
    }
    let eval = |occ: &Occupancy| -> Result<f64> {
        let mut total = 0.0;
        for obj in objectives {
            total += obj.eval(occ)?;
        }
        Ok(total / count)
    };
    let grad = |occ: &Occupancy, out: &mut SaTensor| -> Result<()> {
        let mut acc = SaTensor::zeros(xs, acts, n_max);
        let mut tmp = SaTensor::zeros(xs, acts, n_max);
        for obj in objectives {
            obj.grad_into(occ, &mut tmp)?;
            for n in 1..=n_max {
                for x in 0..xs {
                    for a in 0..acts {
                        *acc.at_mut(n, x, a) += tmp.at(n, x, a) / count;
                    }
                }
            }
        }
        for n in 1..=n_max {
            for x in 0..xs {
                for a in 0..acts {
                    *out.at_mut(n, x, a) = acc.at(n, x, a);
                }
            }
        }
        Ok(())
    };
    let (_, policy, _) = frank_wolfe_minimize(shape, kernel, &eval, &grad)?;
    Ok(policy)
}

fn objectives_equal(a: &CurlObjective, b: &CurlObjective) -> bool {
    a.kind() == b.kind()
        && a.linear_loss() == b.linear_loss()
        && a.imitation_target() == b.imitation_target()
}

/// Comparator policy sequence for a whole run.
///
/// `PerEpisodeOptimal` solves every episode separately (reusing the
/// previous solution when neither the kernel nor the objective changed),
/// `BestFixed` requires a stationary environment and solves the average
/// problem once, and `PiecewiseOptimal` solves one average problem per
/// kernel phase.
pub fn oracle_comparators(
    shape: &MdpShape,
    env: &GeneratedEnvironment,
    objectives: &[CurlObjective],
    mode: ComparatorMode,
) -> Result<ComparatorResult> {
    let episodes = env.episodes();
    if objectives.len() != episodes {
        return Err(CurlError::Dimension(format!(
            "{} objectives for {episodes} episodes",
            objectives.len()
        )));
    }
    let mut policies: Vec<Policy> = Vec::with_capacity(episodes);
    let mut losses: Vec<f64> = Vec::with_capacity(episodes);
    match mode {
        ComparatorMode::PerEpisodeOptimal => {
            let mut previous: Option<(usize, usize)> = None;
            for t in 1..=episodes {
                let model = env.model_index_at(t);
                if let Some((prev_model, prev_t)) = previous {
                    if prev_model == model
                        && objectives_equal(&objectives[t - 1], &objectives[prev_t - 1])
                    {
                        policies.push(policies[prev_t - 1].clone());
                        losses.push(losses[prev_t - 1]);
                        previous = Some((model, prev_t));
                        continue;
                    }
                }
                let (policy, value) =
                    solve_occupancy_min(shape, env.kernel_at(t), &objectives[t - 1])?;
                policies.push(policy);
                losses.push(value);
                previous = Some((model, t));
            }
        }
        ComparatorMode::BestFixed => {
            if env.num_models() != 1 {
                return Err(CurlError::Argument(
                    "best-fixed comparators need a stationary environment".into(),
                ));
            }
            let kernel = env.kernel_at(1);
            let policy = solve_mean(shape, kernel, objectives)?;
            let occ = induce_occupancy(shape, kernel, &policy)?;
            for obj in objectives {
                losses.push(obj.eval(&occ)?);
            }
            policies = vec![policy; episodes];
        }
        ComparatorMode::PiecewiseOptimal => {
            let starts = env.phase_starts();
            for (i, &start) in starts.iter().enumerate() {
                let end = starts.get(i + 1).map_or(episodes, |next| next - 1);
                let kernel = env.kernel_at(start);
                let phase_objs = &objectives[start - 1..end];
                let policy = solve_mean(shape, kernel, phase_objs)?;
                let occ = induce_occupancy(shape, kernel, &policy)?;
                for obj in phase_objs {
                    losses.push(obj.eval(&occ)?);
                }
                policies.extend(std::iter::repeat_with(|| policy.clone()).take(end - start + 1));
            }
        }
    }
    let variation = policy_variation(&policies)?;
    Ok(ComparatorResult {
        policies,
        losses,
        variation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{EnvironmentKind, EnvironmentSpec};
    use crate::harness::environment::{generate_environment, generate_map};
    use crate::mdp::MdpShape;
    use crate::objectives::{
        adversarial_sequence, imitation_objective, linear_objective, AdversaryKind,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn tiny_world(seed: u64) -> (MdpShape, TransitionKernel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = MdpShape::with_uniform_start(2, 2, 2);
        let map = Arc::new(generate_map(2, 2, 2, 3, &mut rng).unwrap());
        let spec = EnvironmentSpec {
            kind: EnvironmentKind::PiecewiseStationary,
            phases: Some(1),
            budget: None,
        };
        let env = generate_environment(&map, &spec, 1, &mut rng).unwrap();
        (shape, env.kernel_at(1).clone())
    }

    /// All deterministic policies over a tiny shape, enumerated as mixed
    /// one-hot assignments.
    fn deterministic_policies(shape: &MdpShape) -> Vec<Policy> {
        let (xs, acts, n_max) = (shape.num_states(), shape.num_actions(), shape.horizon());
        let slots = n_max * xs;
        let mut out = Vec::new();
        for code in 0..acts.pow(slots as u32) {
            let mut policy = Policy::uniform(xs, acts, n_max);
            let mut rest = code;
            for n in 1..=n_max {
                for x in 0..xs {
                    let choice = rest % acts;
                    rest /= acts;
                    let row = policy.row_mut(n, x);
                    row.iter_mut().for_each(|p| *p = 0.0);
                    row[choice] = 1.0;
                }
            }
            out.push(policy);
        }
        out
    }

    #[test]
    fn backward_pass_matches_exhaustive_policy_enumeration() {
        for seed in 0..20 {
            let (shape, kernel) = tiny_world(100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let loss = SaTensor::from_fn(2, 2, 2, |_, _, _| rng.random::<f64>());
            let objective = linear_objective(loss.clone()).unwrap();
            let (policy, value) = dp_minimize_linear(&shape, &kernel, &loss).unwrap();

            let brute = deterministic_policies(&shape)
                .iter()
                .map(|p| {
                    let occ = induce_occupancy(&shape, &kernel, p).unwrap();
                    objective.eval(&occ).unwrap()
                })
                .fold(f64::INFINITY, f64::min);
            assert!(
                (value - brute).abs() <= 1e-12,
                "dp value {value} vs brute force {brute}"
            );
            let occ = induce_occupancy(&shape, &kernel, &policy).unwrap();
            let replay = objective.eval(&occ).unwrap();
            assert!((replay - value).abs() <= 1e-12);
        }
    }

    #[test]
    fn ties_break_toward_the_lowest_action_index() {
        let (shape, kernel) = tiny_world(7);
        let loss = SaTensor::zeros(2, 2, 2);
        let (policy, value) = dp_minimize_linear(&shape, &kernel, &loss).unwrap();
        assert_eq!(value, 0.0);
        for n in 1..=2 {
            for x in 0..2 {
                assert_eq!(policy.row(n, x), &[1.0, 0.0]);
            }
        }
    }

    #[test]
    fn frank_wolfe_recovers_a_reachable_imitation_target() {
        let (shape, kernel) = tiny_world(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let reference = crate::mdp::tests::random_policy(2, 2, 2, &mut rng);
        let target = induce_occupancy(&shape, &kernel, &reference).unwrap();
        let objective = imitation_objective(target.clone()).unwrap();
        let (policy, value) = solve_occupancy_min(&shape, &kernel, &objective).unwrap();
        assert!(
            value.abs() <= 1e-5,
            "reachable target should give a near-zero optimum, got {value}"
        );
        let occ = induce_occupancy(&shape, &kernel, &policy).unwrap();
        assert!(occ.max_layer_l1(&target) <= 1e-2);
    }

    #[test]
    fn stationary_fixed_losses_give_a_constant_comparator() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let shape = MdpShape::with_uniform_start(3, 2, 3);
        let map = Arc::new(generate_map(3, 2, 3, 3, &mut rng).unwrap());
        let spec = EnvironmentSpec {
            kind: EnvironmentKind::PiecewiseStationary,
            phases: Some(1),
            budget: None,
        };
        let env = generate_environment(&map, &spec, 25, &mut rng).unwrap();
        let objectives = adversarial_sequence(
            AdversaryKind::SignFlippingLinear { period: 25 },
            &shape,
            25,
            31,
        )
        .unwrap();
        let result =
            oracle_comparators(&shape, &env, &objectives, ComparatorMode::PerEpisodeOptimal)
                .unwrap();
        assert_eq!(result.variation.hard, 1.0);
        assert_eq!(result.variation.total, 1.0);

        let fixed =
            oracle_comparators(&shape, &env, &objectives, ComparatorMode::BestFixed).unwrap();
        let per_episode_total: f64 = result.losses.iter().sum();
        let fixed_total: f64 = fixed.losses.iter().sum();
        assert!(
            per_episode_total <= fixed_total + 1e-9,
            "per-episode optimal {per_episode_total} beaten by best fixed {fixed_total}"
        );
        assert!((per_episode_total - fixed_total).abs() <= 1e-9);
    }

    #[test]
    fn best_fixed_rejects_moving_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let shape = MdpShape::with_uniform_start(2, 2, 2);
        let map = Arc::new(generate_map(2, 2, 2, 3, &mut rng).unwrap());
        let spec = EnvironmentSpec {
            kind: EnvironmentKind::PiecewiseStationary,
            phases: Some(2),
            budget: None,
        };
        let env = generate_environment(&map, &spec, 10, &mut rng).unwrap();
        let objectives =
            adversarial_sequence(AdversaryKind::IidRandomLinear, &shape, 10, 42).unwrap();
        assert!(matches!(
            oracle_comparators(&shape, &env, &objectives, ComparatorMode::BestFixed),
            Err(CurlError::Argument(_))
        ));
    }

    #[test]
    fn piecewise_matches_per_episode_on_phase_constant_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let shape = MdpShape::with_uniform_start(3, 2, 3);
        let map = Arc::new(generate_map(3, 2, 3, 3, &mut rng).unwrap());
        let spec = EnvironmentSpec {
            kind: EnvironmentKind::PiecewiseStationary,
            phases: Some(4),
            budget: None,
        };
        let env = generate_environment(&map, &spec, 40, &mut rng).unwrap();
        // Flip period 10 aligns with the phase length, so each phase sees
        // one constant loss and both modes solve the same problems.
        let objectives = adversarial_sequence(
            AdversaryKind::SignFlippingLinear { period: 10 },
            &shape,
            40,
            52,
        )
        .unwrap();
        let piecewise =
            oracle_comparators(&shape, &env, &objectives, ComparatorMode::PiecewiseOptimal)
                .unwrap();
        let per_episode =
            oracle_comparators(&shape, &env, &objectives, ComparatorMode::PerEpisodeOptimal)
                .unwrap();
        let a: f64 = piecewise.losses.iter().sum();
        let b: f64 = per_episode.losses.iter().sum();
        assert!((a - b).abs() <= 1e-9, "piecewise {a} vs per-episode {b}");
        assert!(piecewise.variation.hard <= 4.0);
    }
}
