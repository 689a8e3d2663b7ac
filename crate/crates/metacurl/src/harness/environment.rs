//! Synthetic non-stationary environments with exact drift accounting.
//!
//! Non-stationarity lives entirely in the noise distributions: the
//! transition map stays fixed for a run, and either the noise law jumps
//! between independently drawn models (piecewise) or walks between two
//! anchors at a calibrated speed (drifting), so the realized kernel drift
//! matches the requested budget by construction.

use std::sync::Arc;

use rand::Rng;

use crate::harness::config::{EnvironmentKind, EnvironmentSpec};
use crate::mdp::{DynamicsMap, NoiseDynamics, NoiseModel, TransitionKernel, Variation};
use crate::{CurlError, Result};

/// A run's environment: unique noise models plus the episode schedule
/// selecting among them.
#[derive(Clone, Debug)]
pub struct GeneratedEnvironment {
    map: Arc<DynamicsMap>,
    models: Vec<NoiseDynamics>,
    kernels: Vec<TransitionKernel>,
    /// Model index per episode, zero-based over episodes.
    episode_model: Vec<usize>,
    /// 1-based first episodes of each stationary phase; `[1]` when the
    /// kernel moves every episode.
    phase_starts: Vec<usize>,
    variation: Variation,
}

impl GeneratedEnvironment {
    pub fn map(&self) -> &Arc<DynamicsMap> {
        &self.map
    }

    pub fn episodes(&self) -> usize {
        self.episode_model.len()
    }

    pub fn num_models(&self) -> usize {
        self.models.len()
    }

    /// Dynamics for 1-based episode `t`.
    pub fn dynamics_at(&self, t: usize) -> &NoiseDynamics {
        &self.models[self.episode_model[t - 1]]
    }

    /// True transition kernel for 1-based episode `t`.
    pub fn kernel_at(&self, t: usize) -> &TransitionKernel {
        &self.kernels[self.episode_model[t - 1]]
    }

    /// Model index for 1-based episode `t`.
    pub fn model_index_at(&self, t: usize) -> usize {
        self.episode_model[t - 1]
    }

    pub fn phase_starts(&self) -> &[usize] {
        &self.phase_starts
    }

    /// Realized kernel drift of the episode sequence, measured with the
    /// same per-step `max_row_l1` rule as `kernel_variation`.
    pub fn variation(&self) -> &Variation {
        &self.variation
    }

    fn measure(mut self) -> Self {
        let mut per_step = Vec::with_capacity(self.episode_model.len().saturating_sub(1));
        for w in self.episode_model.windows(2) {
            if w[0] == w[1] {
                per_step.push(0.0);
            } else {
                per_step.push(
                    self.kernels[w[0]]
                        .max_row_l1(&self.kernels[w[1]])
                        .expect("kernels in one environment share a shape"),
                );
            }
        }
        let total = 1.0 + per_step.iter().sum::<f64>();
        let hard = 1.0 + per_step.iter().filter(|&&d| d > 0.0).count() as f64;
        self.variation = Variation {
            total,
            hard,
            per_step,
        };
        self
    }
}

/// Random transition map: each `(n, x, a, e)` jumps to a uniformly drawn
/// state.
pub fn generate_map(
    states: usize,
    actions: usize,
    horizon: usize,
    noise_card: usize,
    rng: &mut impl Rng,
) -> Result<DynamicsMap> {
    DynamicsMap::from_fn(states, actions, horizon, noise_card, |_, _, _, _| {
        rng.random_range(0..states)
    })
}

/// One random noise law: per step, 0.8 of a random simplex point plus 0.2
/// of the uniform distribution, so every symbol keeps positive mass.
fn random_noise_model(horizon: usize, noise_card: usize, rng: &mut impl Rng) -> NoiseModel {
    let uniform = 1.0 / noise_card as f64;
    let mut probs = Vec::with_capacity(horizon * noise_card);
    for _ in 0..horizon {
        let raw: Vec<f64> = (0..noise_card).map(|_| rng.random::<f64>() + 1e-3).collect();
        let sum: f64 = raw.iter().sum();
        probs.extend(raw.iter().map(|r| 0.8 * r / sum + 0.2 * uniform));
    }
    NoiseModel::new(horizon, noise_card, probs).expect("mixed rows are valid distributions")
}

/// Blend two noise models: `(1 - w) a + w b` entrywise.
fn blend_models(a: &NoiseModel, b: &NoiseModel, w: f64) -> NoiseModel {
    let horizon = a.horizon();
    let card = a.noise_card();
    let mut probs = Vec::with_capacity(horizon * card);
    for n in 1..=horizon {
        for (pa, pb) in a.step(n).iter().zip(b.step(n)) {
            probs.push((1.0 - w) * pa + w * pb);
        }
    }
    NoiseModel::new(horizon, card, probs).expect("a blend of distributions is a distribution")
}

/// Build the kernel sequence for `episodes` episodes according to `spec`.
///
/// Piecewise environments draw one noise model per phase; the realized
/// switch count equals the phase count. Drifting environments walk
/// between two anchor models with reflecting steps sized so the realized
/// drift equals the budget up to floating-point error.
pub fn generate_environment(
    map: &Arc<DynamicsMap>,
    spec: &EnvironmentSpec,
    episodes: usize,
    rng: &mut impl Rng,
) -> Result<GeneratedEnvironment> {
    if episodes == 0 {
        return Err(CurlError::Argument("need at least one episode".into()));
    }
    let horizon = map.horizon();
    let card = map.noise_card();
    match spec.kind {
        EnvironmentKind::PiecewiseStationary => {
            let phases = spec
                .phases
                .ok_or_else(|| CurlError::Argument("piecewise environments need phases".into()))?;
            if phases == 0 || phases > episodes {
                return Err(CurlError::Argument(format!(
                    "{phases} phases do not fit into {episodes} episodes"
                )));
            }
            let mut models = Vec::with_capacity(phases);
            let mut kernels = Vec::with_capacity(phases);
            for _ in 0..phases {
                let dynamics = NoiseDynamics::new(
                    Arc::clone(map),
                    random_noise_model(horizon, card, rng),
                )?;
                kernels.push(dynamics.kernel());
                models.push(dynamics);
            }
            let mut episode_model = vec![0; episodes];
            let mut phase_starts = Vec::with_capacity(phases);
            for i in 0..phases {
                let start = i * episodes / phases;
                let end = (i + 1) * episodes / phases;
                phase_starts.push(start + 1);
                episode_model[start..end].iter_mut().for_each(|m| *m = i);
            }
            Ok(GeneratedEnvironment {
                map: Arc::clone(map),
                models,
                kernels,
                episode_model,
                phase_starts,
                variation: Variation {
                    total: 0.0,
                    hard: 0.0,
                    per_step: vec![],
                },
            }
            .measure())
        }
        EnvironmentKind::Drifting => {
            let budget = spec
                .budget
                .ok_or_else(|| CurlError::Argument("drifting environments need a budget".into()))?;
            if !budget.is_finite() || budget < 1.0 {
                return Err(CurlError::Argument(format!(
                    "drift budget must be finite and at least 1, got {budget}"
                )));
            }
            if episodes == 1 && budget > 1.0 {
                return Err(CurlError::Argument(
                    "a single episode cannot carry positive drift".into(),
                ));
            }
            let anchor_a = random_noise_model(horizon, card, rng);
            let anchor_b = random_noise_model(horizon, card, rng);
            let kernel_a = NoiseDynamics::new(Arc::clone(map), anchor_a.clone())?.kernel();
            let kernel_b = NoiseDynamics::new(Arc::clone(map), anchor_b.clone())?.kernel();
            // Kernels are linear in the blend weight, so one unit of weight
            // movement changes the kernel by exactly `span`.
            let span = kernel_a.max_row_l1(&kernel_b)?;
            if span <= 0.0 {
                return Err(CurlError::Numeric(
                    "anchor kernels coincide; drift cannot be realized".into(),
                ));
            }
            let steps = episodes.saturating_sub(1).max(1) as f64;
            let delta = (budget - 1.0) / (span * steps);
            // Reflection keeps each step's net movement at `delta` only if
            // one direction always stays inside [0, 1].
            if delta > 0.5 {
                let max_budget = 1.0 + span * steps * 0.5;
                return Err(CurlError::Argument(format!(
                    "budget {budget} is infeasible over {episodes} episodes; \
                     at most {max_budget} is reachable with these anchors"
                )));
            }
            let mut models = Vec::with_capacity(episodes);
            let mut kernels = Vec::with_capacity(episodes);
            let mut w = 0.0_f64;
            let mut dir = 1.0_f64;
            for t in 0..episodes {
                if t > 0 {
                    if w + dir * delta > 1.0 || w + dir * delta < 0.0 {
                        dir = -dir;
                    }
                    w += dir * delta;
                }
                let dynamics =
                    NoiseDynamics::new(Arc::clone(map), blend_models(&anchor_a, &anchor_b, w))?;
                kernels.push(dynamics.kernel());
                models.push(dynamics);
            }
            Ok(GeneratedEnvironment {
                map: Arc::clone(map),
                models,
                kernels,
                episode_model: (0..episodes).collect(),
                phase_starts: vec![1],
                variation: Variation {
                    total: 0.0,
                    hard: 0.0,
                    per_step: vec![],
                },
            }
            .measure())
        }
    }
}
