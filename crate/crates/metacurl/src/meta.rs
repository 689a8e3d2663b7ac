//! Meta-aggregation of restarted black-box learners.
//!
//! Every episode the meta-learner starts one fresh black-box instance per
//! grid learning rate, so an instance born at episode `s` with rate
//! `lambda` tracks the environment from `s` onward. Each episode:
//!
//! 1. newcomers join the weight vector (newborns get `1/(|grid| t)`, old
//!    weights are scaled by `(t - 1)/t`),
//! 2. every instance's policy is pushed through the current kernel
//!    estimate to get its occupancy, and the occupancies (not the
//!    policies) are mixed under the weights, which keeps the learner's
//!    loss convex in the weights,
//! 3. the mixed occupancy's policy is played,
//! 4. once the objective is revealed, every instance is charged the
//!    objective value of its occupancy and the weights take a
//!    multiplicative update, then the kernel estimator and all instances
//!    absorb the episode.
//!
//! Weight updates use losses scaled to `[0, 1]` (objective value divided
//! by the horizon) and the rate `sqrt(8 log(T |grid|) / T)`, so the
//! forecaster's regret against every instance over its lifetime is at
//! most `sqrt((T / 2) log(T |grid|))`, which the state tracks exactly.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::estimator::KernelEstimator;
use crate::lea::{ewa_update, WeightVector};
use crate::mdcurl::GreedyMdCurl;
use crate::mdp::{
    induce_occupancy_into, policy_from_occupancy, DynamicsMap, MdpShape, Occupancy, Policy,
    SaTensor, Trajectory, TransitionKernel,
};
use crate::objectives::{CurlObjective, ObjectiveKind};
use crate::{CurlError, Result};

/// Dyadic learning-rate grid `{2^-j : j = 0..ceil(log2(T)/2)}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LearningRateGrid {
    rates: Vec<f64>,
}

impl LearningRateGrid {
    /// Grid tuned for a run of `episodes` episodes: largest rate 1,
    /// halving down to at most `2 / sqrt(T)`.
    pub fn for_horizon(episodes: usize) -> Result<Self> {
        if episodes == 0 {
            return Err(CurlError::Argument("need at least one episode".into()));
        }
        let j_max = ((episodes as f64).log2() / 2.0).ceil() as i32;
        Ok(Self {
            rates: (0..=j_max).map(|j| 2.0_f64.powi(-j)).collect(),
        })
    }

    /// Custom grid; rates must be positive, finite and strictly
    /// decreasing.
    pub fn from_rates(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() {
            return Err(CurlError::Argument("grid needs at least one rate".into()));
        }
        for pair in rates.windows(2) {
            if pair[1] >= pair[0] {
                return Err(CurlError::Argument(
                    "grid rates must be strictly decreasing".into(),
                ));
            }
        }
        if rates.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(CurlError::Argument(
                "grid rates must be positive and finite".into(),
            ));
        }
        Ok(Self { rates })
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }
}

/// Weight bookkeeping for one episode's cohort: scale the prior by
/// `(t - 1)/t` and append `cohort_size` newborns at `1/(cohort_size t)`
/// each. `prior` must be `None` exactly at `t = 1`.
pub fn spawn_and_renormalize(
    prior: Option<&WeightVector>,
    t: usize,
    cohort_size: usize,
) -> Result<WeightVector> {
    if cohort_size == 0 {
        return Err(CurlError::Argument("cohort must not be empty".into()));
    }
    let newborn = 1.0 / (cohort_size * t) as f64;
    match prior {
        None if t == 1 => WeightVector::from_probs(&vec![newborn; cohort_size]),
        None => Err(CurlError::State(format!(
            "no prior weights at episode {t}; priors are only absent at episode 1"
        ))),
        Some(w) => {
            let mut w = w.clone();
            w.rescale_and_extend((t as f64 - 1.0) / t as f64, &vec![newborn; cohort_size])?;
            Ok(w)
        }
    }
}

/// Convex combination of occupancies under the given weights. All inputs
/// must share dimensions; the result inherits any flow constraints the
/// inputs share, since those are linear.
pub fn aggregate_occupancies(weights: &[f64], occupancies: &[Occupancy]) -> Result<Occupancy> {
    if weights.len() != occupancies.len() {
        return Err(CurlError::State(format!(
            "{} weights for {} occupancies",
            weights.len(),
            occupancies.len()
        )));
    }
    let first = occupancies
        .first()
        .ok_or_else(|| CurlError::Argument("nothing to aggregate".into()))?;
    let mut out = Occupancy::zeros(first.num_states(), first.num_actions(), first.horizon());
    for (w, occ) in weights.iter().zip(occupancies) {
        if occ.num_states() != first.num_states()
            || occ.num_actions() != first.num_actions()
            || occ.horizon() != first.horizon()
        {
            return Err(CurlError::Dimension(
                "occupancies have different shapes".into(),
            ));
        }
        for n in 0..=first.horizon() {
            for (o, v) in out.layer_mut(n).iter_mut().zip(occ.layer(n)) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// Which kernel estimate a black-box instance consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlackboxKernelMode {
    /// Each instance averages the samples seen since its own birth.
    OwnSinceBirth,
    /// All instances share the meta-learner's sleeping-expert estimate.
    SharedEstimate,
}

/// One pooled black-box instance plus its audit counters.
#[derive(Clone, Debug)]
pub(crate) struct Instance {
    pub(crate) learner: GreedyMdCurl,
    /// This instance's occupancy under the meta kernel estimate, refreshed
    /// at the start of each episode.
    pub(crate) meta_occupancy: Occupancy,
    grad_buf: SaTensor,
    /// Cumulative normalized loss since birth.
    pub(crate) cum_loss: f64,
    /// The forecaster's cumulative normalized loss at this instance's
    /// birth; the difference to now is the shared span both lived through.
    pub(crate) learner_cum_at_birth: f64,
}

impl Instance {
    /// Occupancy under the meta kernel estimate for the upcoming episode.
    ///
    /// When the pool shares the meta estimate, an advanced instance's
    /// model occupancy was already induced from exactly that kernel and
    /// the current policy, so it is reused instead of re-induced;
    /// newborns and own-kernel instances read the refreshed buffer.
    fn occupancy(&self, shared: bool) -> &Occupancy {
        if shared && self.learner.episodes_since_birth() > 0 {
            self.learner.model_occupancy()
        } else {
            &self.meta_occupancy
        }
    }
}

/// Lifetime regret of the forecaster against one instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceRegret {
    pub birth: usize,
    pub rate: f64,
    /// `sum_{t >= birth} (learner_loss_t - instance_loss_t)` on the
    /// normalized estimated losses.
    pub regret: f64,
}

/// Per-episode summary emitted by [`MetaCurl::end_episode`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeReport {
    /// Objective value of the played aggregate under the kernel estimate
    /// (unnormalized scale).
    pub estimated_loss: f64,
    pub num_instances: usize,
    /// Birth episode of the instance carrying the largest weight.
    pub best_birth: usize,
    /// Learning rate of that instance.
    pub best_rate: f64,
}

/// The meta-learner: instance pool, weights, kernel estimator and audit
/// counters.
///
/// Drive it with [`MetaCurl::begin_episode`] (returns the policy to
/// play), then [`MetaCurl::end_episode`] with the revealed objective and
/// the played trajectory.
#[derive(Clone, Debug)]
pub struct MetaCurl {
    shape: Arc<MdpShape>,
    map: Arc<DynamicsMap>,
    grid: LearningRateGrid,
    planned_episodes: usize,
    eta: f64,
    kernel_mode: BlackboxKernelMode,
    spawn_every_episode: bool,
    parallel: bool,
    t: usize,
    awaiting_outcome: bool,
    instances: Vec<Instance>,
    weights: Option<WeightVector>,
    estimator: KernelEstimator,
    aggregate: Occupancy,
    played_policy: Policy,
    cum_learner_loss: f64,
    shared_grad: SaTensor,
    loss_buf: Vec<f64>,
}

impl MetaCurl {
    pub fn new(
        shape: Arc<MdpShape>,
        map: Arc<DynamicsMap>,
        planned_episodes: usize,
        grid: LearningRateGrid,
        kernel_mode: BlackboxKernelMode,
        parallel: bool,
    ) -> Result<Self> {
        let (xs, acts, n_max) = (shape.num_states(), shape.num_actions(), shape.horizon());
        if map.num_states() != xs || map.num_actions() != acts || map.horizon() != n_max {
            return Err(CurlError::Dimension("dynamics do not match shape".into()));
        }
        if planned_episodes == 0 {
            return Err(CurlError::Argument("need at least one episode".into()));
        }
        let experts = (planned_episodes * grid.len()) as f64;
        let eta = (8.0 * experts.ln() / planned_episodes as f64).sqrt();
        Ok(Self {
            estimator: KernelEstimator::new(Arc::clone(&map)),
            aggregate: Occupancy::zeros(xs, acts, n_max),
            played_policy: Policy::uniform(xs, acts, n_max),
            shared_grad: SaTensor::zeros(xs, acts, n_max),
            shape,
            map,
            grid,
            planned_episodes,
            eta,
            kernel_mode,
            spawn_every_episode: true,
            parallel,
            t: 0,
            awaiting_outcome: false,
            instances: Vec::new(),
            weights: None,
            cum_learner_loss: 0.0,
            loss_buf: Vec::new(),
        })
    }

    /// Restrict the pool to the cohort born at episode 1 (no restarts);
    /// useful as a degenerate baseline.
    pub fn without_restarts(mut self) -> Self {
        self.spawn_every_episode = false;
        self
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn grid(&self) -> &LearningRateGrid {
        &self.grid
    }

    pub fn episodes_completed(&self) -> usize {
        self.t
    }

    pub fn num_instances(&self) -> usize {
        self.instances.len()
    }

    pub fn estimator(&self) -> &KernelEstimator {
        &self.estimator
    }

    /// Kernel estimate in force for the upcoming episode.
    pub fn kernel_estimate(&self) -> &TransitionKernel {
        self.estimator.current()
    }

    /// The aggregated occupancy of the current episode.
    pub fn aggregate_occupancy(&self) -> &Occupancy {
        &self.aggregate
    }

    /// Policy extracted from the aggregate for the current episode.
    pub fn played_policy(&self) -> &Policy {
        &self.played_policy
    }

    pub fn weights(&self) -> Option<&WeightVector> {
        self.weights.as_ref()
    }

    #[cfg(test)]
    pub(crate) fn instances(&self) -> &[Instance] {
        &self.instances
    }

    /// Policy of the pooled instance born at `birth` with the given grid
    /// index, if that instance exists.
    pub fn instance_policy(&self, birth: usize, rate_index: usize) -> Option<&Policy> {
        if rate_index >= self.grid.len() || birth == 0 {
            return None;
        }
        let idx = if self.spawn_every_episode {
            (birth - 1) * self.grid.len() + rate_index
        } else if birth == 1 {
            rate_index
        } else {
            return None;
        };
        let inst = self.instances.get(idx)?;
        (inst.learner.birth() == birth).then(|| inst.learner.policy())
    }

    /// The guarantee the weight update is tuned for:
    /// `sqrt((T / 2) log(T |grid|))` on normalized losses.
    pub fn regret_bound(&self) -> f64 {
        let experts = (self.planned_episodes * self.grid.len()) as f64;
        (self.planned_episodes as f64 / 2.0 * experts.ln()).sqrt()
    }

    /// Lifetime regret against every instance, from the audit counters.
    pub fn audit_regrets(&self) -> Vec<InstanceRegret> {
        self.instances
            .iter()
            .map(|inst| InstanceRegret {
                birth: inst.learner.birth(),
                rate: inst.learner.lambda(),
                regret: (self.cum_learner_loss - inst.learner_cum_at_birth) - inst.cum_loss,
            })
            .collect()
    }

    /// Open episode `t`: admit the new cohort, refresh every instance's
    /// occupancy under the current kernel estimate, aggregate, and
    /// extract the policy to play.
    pub fn begin_episode(&mut self) -> Result<&Policy> {
        if self.awaiting_outcome {
            return Err(CurlError::State(
                "previous episode still awaits its outcome".into(),
            ));
        }
        let t = self.t + 1;
        if t > 1 && !self.spawn_every_episode {
            let probs = self.weights.as_ref().map(|w| w.probs()).unwrap_or_default();
            self.refresh_and_aggregate(&probs)?;
            self.awaiting_outcome = true;
            return Ok(&self.played_policy);
        }
        self.weights = Some(spawn_and_renormalize(
            self.weights.as_ref(),
            t,
            self.grid.len(),
        )?);
        for &rate in self.grid.rates() {
            let learner =
                GreedyMdCurl::new(Arc::clone(&self.shape), Arc::clone(&self.map), rate, t)?;
            self.instances.push(Instance {
                learner,
                meta_occupancy: Occupancy::zeros(
                    self.shape.num_states(),
                    self.shape.num_actions(),
                    self.shape.horizon(),
                ),
                grad_buf: SaTensor::zeros(
                    self.shape.num_states(),
                    self.shape.num_actions(),
                    self.shape.horizon(),
                ),
                cum_loss: 0.0,
                learner_cum_at_birth: self.cum_learner_loss,
            });
        }
        let probs = self.weights.as_ref().map(|w| w.probs()).unwrap_or_default();
        self.refresh_and_aggregate(&probs)?;
        self.awaiting_outcome = true;
        Ok(&self.played_policy)
    }

    fn refresh_and_aggregate(&mut self, probs: &[f64]) -> Result<()> {
        if probs.len() != self.instances.len() {
            return Err(CurlError::State(format!(
                "{} weights for {} instances",
                probs.len(),
                self.instances.len()
            )));
        }
        let shape = &self.shape;
        let phat = self.estimator.current();
        let shared = self.kernel_mode == BlackboxKernelMode::SharedEstimate;
        let refresh = |inst: &mut Instance| -> Result<()> {
            if shared && inst.learner.episodes_since_birth() > 0 {
                return Ok(());
            }
            induce_occupancy_into(shape, phat, inst.learner.policy(), &mut inst.meta_occupancy)
        };
        if self.parallel {
            self.instances.par_iter_mut().try_for_each(refresh)?;
        } else {
            self.instances.iter_mut().try_for_each(refresh)?;
        }
        for n in 0..=self.shape.horizon() {
            self.aggregate.layer_mut(n).iter_mut().for_each(|v| *v = 0.0);
        }
        for (w, inst) in probs.iter().zip(&self.instances) {
            let occ = inst.occupancy(shared);
            for n in 0..=self.shape.horizon() {
                for (o, v) in self.aggregate.layer_mut(n).iter_mut().zip(occ.layer(n)) {
                    *o += w * v;
                }
            }
        }
        self.played_policy = policy_from_occupancy(&self.aggregate);
        Ok(())
    }

    /// Close the episode: charge every instance the objective value of
    /// its occupancy (normalized to `[0, 1]`), update the weights, fold
    /// the trajectory into the kernel estimator, and advance every
    /// instance with the gradient at its own model occupancy.
    pub fn end_episode(
        &mut self,
        objective: &CurlObjective,
        traj: &Trajectory,
        rng: &mut impl Rng,
    ) -> Result<EpisodeReport> {
        if !self.awaiting_outcome {
            return Err(CurlError::State(
                "no open episode; call begin_episode first".into(),
            ));
        }
        let t = self.t + 1;
        let horizon = self.shape.horizon() as f64;
        let estimated_loss = objective.eval(&self.aggregate)?;
        let learner_loss = estimated_loss / horizon;

        let shared = self.kernel_mode == BlackboxKernelMode::SharedEstimate;
        self.loss_buf.clear();
        for inst in &mut self.instances {
            let loss = objective.eval(inst.occupancy(shared))? / horizon;
            inst.cum_loss += loss;
            self.loss_buf.push(loss);
        }
        self.cum_learner_loss += learner_loss;
        let weights = self
            .weights
            .as_ref()
            .ok_or_else(|| CurlError::State("weights missing for open episode".into()))?;
        let updated = ewa_update(weights, &self.loss_buf, self.eta)?;
        let probs = updated.probs();
        self.weights = Some(updated);

        self.estimator.step(traj, rng)?;
        self.advance_instances(objective, traj)?;

        self.t = t;
        self.awaiting_outcome = false;

        let best = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        Ok(EpisodeReport {
            estimated_loss,
            num_instances: self.instances.len(),
            best_birth: self.instances[best].learner.birth(),
            best_rate: self.instances[best].learner.lambda(),
        })
    }

    fn advance_instances(&mut self, objective: &CurlObjective, traj: &Trajectory) -> Result<()> {
        let override_kernel = match self.kernel_mode {
            BlackboxKernelMode::OwnSinceBirth => None,
            BlackboxKernelMode::SharedEstimate => Some(self.estimator.current()),
        };
        if objective.kind() == ObjectiveKind::Linear {
            // A linear objective has one gradient everywhere; compute it
            // once and share it across the pool.
            objective.grad_into(&self.aggregate, &mut self.shared_grad)?;
            let grad = &self.shared_grad;
            let advance = |inst: &mut Instance| -> Result<()> {
                inst.learner.blackbox_episode(grad, traj, override_kernel)
            };
            if self.parallel {
                self.instances.par_iter_mut().try_for_each(advance)
            } else {
                self.instances.iter_mut().try_for_each(advance)
            }
        } else {
            let advance = |inst: &mut Instance| -> Result<()> {
                let Instance {
                    learner, grad_buf, ..
                } = inst;
                objective.grad_into(learner.model_occupancy(), grad_buf)?;
                learner.blackbox_episode(grad_buf, traj, override_kernel)
            };
            if self.parallel {
                self.instances.par_iter_mut().try_for_each(advance)
            } else {
                self.instances.iter_mut().try_for_each(advance)
            }
        }
    }
}
