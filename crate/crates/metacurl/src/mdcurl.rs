//! Mirror descent on occupancy measures with a policy-space Bregman
//! divergence, uniform policy mixing, and a running empirical kernel.
//!
//! Each episode the learner solves
//! `min { lambda <grad, mu> + Gamma(mu, mu_ref) }` over the flow polytope
//! of its current kernel estimate, where `Gamma` compares the policies
//! carried by the two occupancies as a KL divergence between trajectory
//! laws. The minimizer has a closed form: a backward recursion that
//! tilts the reference policy by the exponentiated cost-to-go, followed
//! by the forward occupancy recursion. The reference policy is mixed
//! with the uniform policy at rate `1/t`, which keeps it strictly
//! positive and the divergence finite.
//!
//! An instance is restartable: it may be born at any global episode and
//! counts time from its own birth, both for the mixing rate and for its
//! own kernel estimate (a plain empirical average of the counterfactual
//! samples observed since birth, uniform before any data).

use std::sync::Arc;

use crate::estimator::extract_samples_into;
use crate::mdp::{
    induce_occupancy, induce_occupancy_into, DynamicsMap, MdpShape, Occupancy, Policy, SaTensor,
    Trajectory, TransitionKernel,
};
use crate::{CurlError, Result};

/// Policy-space Bregman divergence between two occupancies sharing a
/// kernel and initial distribution:
/// `sum_n E_{(x,a) ~ mu_n}[log(pi_n(a|x) / pi_ref_n(a|x))]`,
/// where each policy is read off its occupancy (uniform on zero-mass
/// states). Equals the KL divergence of the trajectory laws, hence
/// nonnegative, and zero exactly when the policies agree wherever `mu`
/// has mass.
pub fn bregman_gamma(mu: &Occupancy, mu_ref: &Occupancy) -> Result<f64> {
    let (xs, acts, n_max) = (mu.num_states(), mu.num_actions(), mu.horizon());
    if mu_ref.num_states() != xs || mu_ref.num_actions() != acts || mu_ref.horizon() != n_max {
        return Err(CurlError::Dimension(
            "occupancies have different shapes".into(),
        ));
    }
    let uniform = 1.0 / acts as f64;
    let mut total = 0.0;
    for n in 1..=n_max {
        for x in 0..xs {
            let rho = mu.state_marginal(n, x);
            if rho == 0.0 {
                continue;
            }
            let rho_ref = mu_ref.state_marginal(n, x);
            for a in 0..acts {
                let mass = mu.at(n, x, a);
                if mass == 0.0 {
                    continue;
                }
                let pi = mass / rho;
                let pi_ref = if rho_ref > 0.0 {
                    mu_ref.at(n, x, a) / rho_ref
                } else {
                    uniform
                };
                if pi_ref <= 0.0 {
                    return Err(CurlError::Domain(format!(
                        "reference policy is zero at layer {n}, state {x}, action {a}, \
                         where the occupancy has mass {mass}"
                    )));
                }
                total += mass * (pi / pi_ref).ln();
            }
        }
    }
    Ok(total)
}

/// Closed-form minimizer of
/// `lambda <gradient, mu> + Gamma(mu, mu_ref)` over the flow polytope of
/// `kernel`, where `mu_ref` is the occupancy induced by `reference`
/// (which must be strictly positive).
///
/// Backward pass: with terminal values `V_{N+1} = 0`, each layer sets
/// `pi_n(a|x) proportional to reference_n(a|x) *
/// exp(-lambda grad_n(x,a) - sum_x' kernel_{n+1}(x'|x,a) V_{n+1}(x'))`
/// and `V_n(x) = -log` of that row's normalizer. Forward pass: induce
/// the occupancy of the resulting policy under `kernel`.
pub fn mirror_descent_step(
    shape: &MdpShape,
    kernel: &TransitionKernel,
    reference: &Policy,
    gradient: &SaTensor,
    lambda: f64,
) -> Result<(Occupancy, Policy)> {
    let mut policy = Policy::uniform(shape.num_states(), shape.num_actions(), shape.horizon());
    let mut values = vec![0.0; shape.num_states()];
    let mut next_values = vec![0.0; shape.num_states()];
    mirror_step_into(
        shape,
        kernel,
        reference,
        gradient,
        lambda,
        &mut policy,
        &mut values,
        &mut next_values,
    )?;
    let occ = induce_occupancy(shape, kernel, &policy)?;
    Ok((occ, policy))
}

#[allow(clippy::too_many_arguments)]
fn mirror_step_into(
    shape: &MdpShape,
    kernel: &TransitionKernel,
    reference: &Policy,
    gradient: &SaTensor,
    lambda: f64,
    out: &mut Policy,
    values: &mut [f64],
    next_values: &mut [f64],
) -> Result<()> {
    let (xs, acts, n_max) = (shape.num_states(), shape.num_actions(), shape.horizon());
    if reference.num_states() != xs || reference.num_actions() != acts || reference.horizon() != n_max
    {
        return Err(CurlError::Dimension("reference does not match shape".into()));
    }
    if gradient.num_states() != xs || gradient.num_actions() != acts || gradient.horizon() != n_max
    {
        return Err(CurlError::Dimension("gradient does not match shape".into()));
    }
    if kernel.num_states() != xs || kernel.num_actions() != acts || kernel.horizon() != n_max {
        return Err(CurlError::Dimension("kernel does not match shape".into()));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(CurlError::Argument(format!(
            "learning rate must be finite and nonnegative, got {lambda}"
        )));
    }
    if !gradient.max_abs().is_finite() {
        return Err(CurlError::Numeric("gradient has non-finite entries".into()));
    }
    values.iter_mut().for_each(|v| *v = 0.0);
    for n in (1..=n_max).rev() {
        for x in 0..xs {
            let ref_row = reference.row(n, x);
            let out_row = out.row_mut(n, x);
            let mut best = f64::NEG_INFINITY;
            for a in 0..acts {
                let mut q = lambda * gradient.at(n, x, a);
                if n < n_max {
                    for (p, v) in kernel.row(n + 1, x, a).iter().zip(values.iter()) {
                        q += p * v;
                    }
                }
                let score = -q;
                out_row[a] = score;
                if score > best {
                    best = score;
                }
            }
            let mut z = 0.0;
            for (o, r) in out_row.iter_mut().zip(ref_row) {
                if *r <= 0.0 {
                    return Err(CurlError::Domain(format!(
                        "reference policy must be strictly positive, found {r} at \
                         layer {n}, state {x}"
                    )));
                }
                *o = r * (*o - best).exp();
                z += *o;
            }
            if !(z > 0.0 && z.is_finite()) {
                return Err(CurlError::Numeric(format!(
                    "mirror step normalizer degenerated to {z} at layer {n}, state {x}"
                )));
            }
            for o in out_row.iter_mut() {
                *o /= z;
            }
            next_values[x] = -(best + z.ln());
        }
        values.copy_from_slice(next_values);
    }
    Ok(())
}

/// One restartable mirror-descent learner.
///
/// Call [`GreedyMdCurl::policy`] for the policy to play, then feed the
/// played trajectory and the objective gradient at
/// [`GreedyMdCurl::model_occupancy`] back through
/// [`GreedyMdCurl::blackbox_episode`].
#[derive(Clone, Debug)]
pub struct GreedyMdCurl {
    shape: Arc<MdpShape>,
    map: Arc<DynamicsMap>,
    lambda: f64,
    birth: usize,
    tau: usize,
    policy: Policy,
    mixed: Policy,
    model_occupancy: Occupancy,
    counts: Vec<u32>,
    own_kernel: TransitionKernel,
    scratch_policy: Policy,
    scratch_occupancy: Occupancy,
    values: Vec<f64>,
    next_values: Vec<f64>,
    sample_buf: Vec<usize>,
}

impl GreedyMdCurl {
    /// Fresh instance born at global episode `birth` (1-based): uniform
    /// policy, uniform kernel estimate, and the matching occupancies.
    pub fn new(
        shape: Arc<MdpShape>,
        map: Arc<DynamicsMap>,
        lambda: f64,
        birth: usize,
    ) -> Result<Self> {
        let (xs, acts, n_max) = (shape.num_states(), shape.num_actions(), shape.horizon());
        if map.num_states() != xs || map.num_actions() != acts || map.horizon() != n_max {
            return Err(CurlError::Dimension("dynamics do not match shape".into()));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(CurlError::Argument(format!(
                "learning rate must be finite and nonnegative, got {lambda}"
            )));
        }
        if birth == 0 {
            return Err(CurlError::Argument("birth episode is 1-based".into()));
        }
        let policy = Policy::uniform(xs, acts, n_max);
        let own_kernel = TransitionKernel::uniform(xs, acts, n_max);
        let occ = induce_occupancy(&shape, &own_kernel, &policy)?;
        Ok(Self {
            shape,
            map,
            lambda,
            birth,
            tau: 0,
            mixed: policy.clone(),
            model_occupancy: occ.clone(),
            counts: vec![0; n_max * xs * acts * xs],
            scratch_policy: policy.clone(),
            scratch_occupancy: occ,
            policy,
            own_kernel,
            values: vec![0.0; xs],
            next_values: vec![0.0; xs],
            sample_buf: Vec::new(),
        })
    }

    /// Policy for the upcoming episode.
    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    /// Uniform-mixed policy serving as the next mirror-step reference.
    pub fn mixed_policy(&self) -> &Policy {
        &self.mixed
    }

    /// Occupancy of [`GreedyMdCurl::policy`] under the kernel used at the
    /// last update; the objective gradient should be evaluated here.
    pub fn model_occupancy(&self) -> &Occupancy {
        &self.model_occupancy
    }

    /// Empirical kernel from the samples observed since birth (uniform
    /// before any data). Refreshed from the counterfactual counts on
    /// every update that consumes it; updates driven by an external
    /// kernel leave it untouched, since the counts stay authoritative.
    pub fn own_kernel(&self) -> &TransitionKernel {
        &self.own_kernel
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn birth(&self) -> usize {
        self.birth
    }

    /// Episodes folded in since birth.
    pub fn episodes_since_birth(&self) -> usize {
        self.tau
    }

    /// Mixing weight applied at the most recent update, `1 / (tau + 1)`.
    pub fn mixing_weight(&self) -> f64 {
        1.0 / (self.tau as f64 + 1.0)
    }

    /// Fold one played episode into the learner: update the empirical
    /// kernel with the trajectory's counterfactual samples, take a mirror
    /// step against the mixed reference, then refresh the mixed policy
    /// and the model occupancy.
    ///
    /// `gradient` must be the objective gradient at
    /// [`GreedyMdCurl::model_occupancy`]. When `kernel_override` is given
    /// (a shared external estimate), it replaces the learner's own kernel
    /// in the mirror step and the induced occupancy; the internal counts
    /// still accumulate, and the own-kernel refresh is skipped.
    pub fn blackbox_episode(
        &mut self,
        gradient: &SaTensor,
        traj: &Trajectory,
        kernel_override: Option<&TransitionKernel>,
    ) -> Result<()> {
        let mut samples = std::mem::take(&mut self.sample_buf);
        extract_samples_into(traj, &self.map, &mut samples)?;
        let xs = self.shape.num_states();
        self.tau += 1;
        for (cell, &s) in samples.iter().enumerate() {
            self.counts[cell * xs + s] += 1;
        }
        self.sample_buf = samples;
        if kernel_override.is_none() {
            let total = self.tau as f64;
            let (acts, n_max) = (self.shape.num_actions(), self.shape.horizon());
            for n in 1..=n_max {
                for x in 0..xs {
                    for a in 0..acts {
                        let cell = ((n - 1) * xs + x) * acts + a;
                        let row = self.own_kernel.row_mut(n, x, a);
                        for (v, &c) in
                            row.iter_mut().zip(&self.counts[cell * xs..(cell + 1) * xs])
                        {
                            *v = c as f64 / total;
                        }
                    }
                }
            }
        }

        let kernel = kernel_override.unwrap_or(&self.own_kernel);
        mirror_step_into(
            &self.shape,
            kernel,
            &self.mixed,
            gradient,
            self.lambda,
            &mut self.scratch_policy,
            &mut self.values,
            &mut self.next_values,
        )?;
        induce_occupancy_into(&self.shape, kernel, &self.scratch_policy, &mut self.scratch_occupancy)?;
        std::mem::swap(&mut self.policy, &mut self.scratch_policy);
        std::mem::swap(&mut self.model_occupancy, &mut self.scratch_occupancy);

        let alpha = 1.0 / (self.tau as f64 + 1.0);
        self.policy.mix_with_uniform_into(alpha, &mut self.mixed)?;
        Ok(())
    }
}
