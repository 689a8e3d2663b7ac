//! Convex per-episode objectives over occupancy measures.
//!
//! An objective has the separable form `F(mu) = sum_{n=1..N} f_n(mu_n)` with
//! each `f_n` convex and normalized into `[0, 1]` on the simplex, so `F` maps
//! occupancy stacks into `[0, N]`. Three families are provided:
//!
//! * **linear**: `f_n(mu_n) = <loss_n, mu_n>` with loss entries in `[0, 1]`,
//!   the classical reward setting;
//! * **entropy**: normalized negative entropy,
//!   `f_n(mu_n) = 1 + sum mu ln(mu) / ln(|X||A|)`, which is 0 at the uniform
//!   layer and 1 at a point mass, so minimizing it spreads state visits;
//! * **imitation**: `f_n(mu_n) = KL(mu_n | target_n) / cap`, pulling the
//!   occupancy toward a demonstrated target.
//!
//! Logarithms are floored at [`tol::ENTROPY_FLOOR`] so gradients stay finite
//! on the simplex boundary; the floor keeps both smoothed families convex
//! (the flooring replaces `x ln x` by a tangent-compatible linear piece below
//! the floor).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mdp::{l1_distance, MdpShape, Occupancy, SaTensor};
use crate::{tol, CurlError, Result};

/// Which convex family an objective belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    Linear,
    Entropy,
    Imitation,
}

impl ObjectiveKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectiveKind::Linear => "linear",
            ObjectiveKind::Entropy => "entropy",
            ObjectiveKind::Imitation => "imitation",
        }
    }
}

#[derive(Clone, Debug)]
enum Repr {
    Linear {
        loss: SaTensor,
    },
    Entropy {
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        /// `ln(|X||A|)`; zero collapses the objective to a constant.
        log_cells: f64,
    },
    Imitation {
        target: Occupancy,
        /// Per-step KL values are divided (and capped) by this constant,
        /// `-ln(ENTROPY_FLOOR)`, the largest value the smoothed KL can take.
        cap: f64,
    },
}

/// One episode's convex objective `F` over occupancy stacks.
#[derive(Clone, Debug)]
pub struct CurlObjective {
    repr: Repr,
}

/// Smoothed Kullback-Leibler divergence between two nonnegative rows:
/// `sum_i p_i (ln(max(p_i, eps)) - ln(max(q_i, eps)))`.
///
/// Matches the exact KL whenever every entry of both rows is at least `eps`.
pub fn smoothed_kl(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * (pi.max(eps).ln() - qi.max(eps).ln()))
        .sum()
}

impl CurlObjective {
    fn dims(&self) -> (usize, usize, usize) {
        match &self.repr {
            Repr::Linear { loss } => (loss.num_states(), loss.num_actions(), loss.horizon()),
            Repr::Entropy {
                num_states,
                num_actions,
                horizon,
                ..
            } => (*num_states, *num_actions, *horizon),
            Repr::Imitation { target, .. } => (
                target.num_states(),
                target.num_actions(),
                target.horizon(),
            ),
        }
    }

    pub fn kind(&self) -> ObjectiveKind {
        match &self.repr {
            Repr::Linear { .. } => ObjectiveKind::Linear,
            Repr::Entropy { .. } => ObjectiveKind::Entropy,
            Repr::Imitation { .. } => ObjectiveKind::Imitation,
        }
    }

    /// The loss tensor of a linear objective, if this is one.
    pub fn linear_loss(&self) -> Option<&SaTensor> {
        match &self.repr {
            Repr::Linear { loss } => Some(loss),
            _ => None,
        }
    }

    /// The target stack of an imitation objective, if this is one.
    pub fn imitation_target(&self) -> Option<&Occupancy> {
        match &self.repr {
            Repr::Imitation { target, .. } => Some(target),
            _ => None,
        }
    }

    fn check_occ(&self, occ: &Occupancy) -> Result<()> {
        let (xs, acts, n) = self.dims();
        if occ.num_states() != xs || occ.num_actions() != acts || occ.horizon() != n {
            return Err(CurlError::Dimension(format!(
                "objective over (|X|={xs}, |A|={acts}, N={n}) evaluated on occupancy (|X|={}, |A|={}, N={})",
                occ.num_states(),
                occ.num_actions(),
                occ.horizon()
            )));
        }
        Ok(())
    }

    /// Per-layer values `f_n(mu_n)` for `n in 1..=N`.
    pub fn eval_per_layer(&self, occ: &Occupancy) -> Result<Vec<f64>> {
        self.check_occ(occ)?;
        let (_, _, horizon) = self.dims();
        let eps = tol::ENTROPY_FLOOR;
        let mut out = Vec::with_capacity(horizon);
        for n in 1..=horizon {
            let layer = occ.layer(n);
            let v = match &self.repr {
                Repr::Linear { loss } => {
                    let s = (n - 1) * layer.len();
                    loss.values()[s..s + layer.len()]
                        .iter()
                        .zip(layer)
                        .map(|(l, m)| l * m)
                        .sum()
                }
                Repr::Entropy { log_cells, .. } => {
                    if *log_cells == 0.0 {
                        0.0
                    } else {
                        let neg_ent: f64 =
                            layer.iter().map(|&m| m * m.max(eps).ln()).sum();
                        1.0 + neg_ent / log_cells
                    }
                }
                Repr::Imitation { target, cap } => {
                    smoothed_kl(layer, target.layer(n), eps).min(*cap) / cap
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    /// `F(mu) = sum_n f_n(mu_n)`; lands in `[0, N]` on occupancy stacks.
    pub fn eval(&self, occ: &Occupancy) -> Result<f64> {
        self.check_occ(occ)?;
        match &self.repr {
            // Fast path: the hot loops evaluate linear objectives per expert.
            Repr::Linear { loss } => Ok(loss.dot_occupancy(occ)),
            _ => Ok(self.eval_per_layer(occ)?.iter().sum()),
        }
    }

    /// Gradient of `F` at `occ`, written into `out`.
    pub fn grad_into(&self, occ: &Occupancy, out: &mut SaTensor) -> Result<()> {
        self.check_occ(occ)?;
        let (xs, acts, horizon) = self.dims();
        if out.num_states() != xs || out.num_actions() != acts || out.horizon() != horizon {
            return Err(CurlError::Dimension(
                "gradient buffer does not match objective shape".into(),
            ));
        }
        let eps = tol::ENTROPY_FLOOR;
        for n in 1..=horizon {
            for x in 0..xs {
                for a in 0..acts {
                    let g = match &self.repr {
                        Repr::Linear { loss } => loss.at(n, x, a),
                        Repr::Entropy { log_cells, .. } => {
                            if *log_cells == 0.0 {
                                0.0
                            } else {
                                let m = occ.at(n, x, a);
                                let kink = if m >= eps { 1.0 } else { 0.0 };
                                (m.max(eps).ln() + kink) / log_cells
                            }
                        }
                        Repr::Imitation { target, cap } => {
                            let m = occ.at(n, x, a);
                            let t = target.at(n, x, a);
                            let kink = if m >= eps { 1.0 } else { 0.0 };
                            (m.max(eps).ln() + kink - t.max(eps).ln()) / cap
                        }
                    };
                    *out.at_mut(n, x, a) = g;
                }
            }
        }
        Ok(())
    }

    /// Gradient of `F` at `occ` as a fresh tensor.
    pub fn grad(&self, occ: &Occupancy) -> Result<SaTensor> {
        let (xs, acts, horizon) = self.dims();
        let mut out = SaTensor::zeros(xs, acts, horizon);
        self.grad_into(occ, &mut out)?;
        Ok(out)
    }

    /// Lipschitz constant of `F` with respect to the `(sup over layers,
    /// L1 within a layer)` norm on occupancy stacks: an upper bound on
    /// `|F(mu) - F(mu')| / max_n ||mu_n - mu'_n||_1`.
    pub fn lipschitz(&self) -> f64 {
        let (_, _, horizon) = self.dims();
        let eps = tol::ENTROPY_FLOOR;
        match &self.repr {
            Repr::Linear { loss } => {
                let mut total = 0.0;
                for n in 1..=horizon {
                    let mut worst: f64 = 0.0;
                    for x in 0..loss.num_states() {
                        for a in 0..loss.num_actions() {
                            worst = worst.max(loss.at(n, x, a).abs());
                        }
                    }
                    total += worst;
                }
                total
            }
            Repr::Entropy { log_cells, .. } => {
                if *log_cells == 0.0 {
                    0.0
                } else {
                    horizon as f64 * (1.0 - eps.ln()) / log_cells
                }
            }
            Repr::Imitation { cap, .. } => horizon as f64 * (1.0 - 2.0 * eps.ln()) / cap,
        }
    }
}

/// Linear objective from a loss tensor with entries in `[0, 1]`.
pub fn linear_objective(loss: SaTensor) -> Result<CurlObjective> {
    if let Some(bad) = loss
        .values()
        .iter()
        .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
    {
        return Err(CurlError::Argument(format!(
            "linear loss entries must lie in [0, 1], found {bad}"
        )));
    }
    Ok(CurlObjective {
        repr: Repr::Linear { loss },
    })
}

/// Normalized negative-entropy objective: minimizing it favors uniform
/// occupancy layers. Each `f_n` is 0 at the uniform layer, 1 at point mass.
pub fn entropy_objective(num_states: usize, num_actions: usize, horizon: usize) -> CurlObjective {
    CurlObjective {
        repr: Repr::Entropy {
            num_states,
            num_actions,
            horizon,
            log_cells: ((num_states * num_actions) as f64).ln(),
        },
    }
}

/// Imitation objective: per-layer smoothed KL divergence to a target stack,
/// rescaled into `[0, 1]` by capping at `-ln(ENTROPY_FLOOR)`.
pub fn imitation_objective(target: Occupancy) -> Result<CurlObjective> {
    target.check_layers(tol::DERIVED_SIMPLEX)?;
    Ok(CurlObjective {
        repr: Repr::Imitation {
            target,
            cap: -tol::ENTROPY_FLOOR.ln(),
        },
    })
}

/// Shapes of adversarial objective schedules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AdversaryKind {
    /// Fresh uniform-random linear loss tensor every episode.
    IidRandomLinear,
    /// A fixed random linear loss `l` that alternates with `1 - l` every
    /// `period` episodes.
    SignFlippingLinear { period: usize },
    /// Imitation objectives whose target drifts between two anchors,
    /// consuming exactly `total_drift` of cumulative per-episode movement
    /// measured as `sum_t max_n ||target^t_n - target^{t+1}_n||_1`.
    DriftingTargetImitation { total_drift: f64 },
}

/// Generate a reproducible adversarial objective schedule of length
/// `episodes` for the given shape.
pub fn adversarial_sequence(
    kind: AdversaryKind,
    shape: &MdpShape,
    episodes: usize,
    seed: u64,
) -> Result<Vec<CurlObjective>> {
    if episodes == 0 {
        return Err(CurlError::Argument("episode count must be positive".into()));
    }
    let (xs, acts, horizon) = (shape.num_states(), shape.num_actions(), shape.horizon());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        AdversaryKind::IidRandomLinear => (0..episodes)
            .map(|_| {
                linear_objective(SaTensor::from_fn(xs, acts, horizon, |_, _, _| {
                    rng.random::<f64>()
                }))
            })
            .collect(),
        AdversaryKind::SignFlippingLinear { period } => {
            if period == 0 {
                return Err(CurlError::Argument("flip period must be positive".into()));
            }
            let base = SaTensor::from_fn(xs, acts, horizon, |_, _, _| rng.random::<f64>());
            let flipped = SaTensor::from_fn(xs, acts, horizon, |n, x, a| 1.0 - base.at(n, x, a));
            (0..episodes)
                .map(|t| {
                    let segment = t / period;
                    let tensor = if segment % 2 == 0 { &base } else { &flipped };
                    linear_objective(tensor.clone())
                })
                .collect()
        }
        AdversaryKind::DriftingTargetImitation { total_drift } => {
            if !total_drift.is_finite() || total_drift < 0.0 {
                return Err(CurlError::Argument(format!(
                    "drift budget must be nonnegative, got {total_drift}"
                )));
            }
            if episodes == 1 {
                if total_drift > 0.0 {
                    return Err(CurlError::Argument(
                        "a single episode cannot carry positive drift".into(),
                    ));
                }
                let anchor = random_target(xs, acts, horizon, &mut rng);
                return Ok(vec![imitation_objective(anchor)?]);
            }
            let anchor_a = random_target(xs, acts, horizon, &mut rng);
            let anchor_b = random_target(xs, acts, horizon, &mut rng);
            // Layers interpolate linearly between the anchors, so one unit of
            // interpolation weight moves the target by exactly `span`.
            let span = (1..=horizon)
                .map(|n| l1_distance(anchor_a.layer(n), anchor_b.layer(n)))
                .fold(0.0, f64::max);
            let step = if total_drift == 0.0 {
                0.0
            } else {
                total_drift / ((episodes - 1) as f64 * span)
            };
            // The triangle wave below needs room to reverse without leaving
            // [0, 1], which caps the per-episode step at 1/2.
            if !(0.0..=0.5).contains(&step) {
                return Err(CurlError::Argument(format!(
                    "drift budget {total_drift} is infeasible: anchors span {span} per unit \
                     weight over {} transitions",
                    episodes - 1
                )));
            }
            let cells = xs * acts;
            let mut out = Vec::with_capacity(episodes);
            let mut w = 0.0;
            let mut direction = 1.0;
            for t in 0..episodes {
                if t > 0 {
                    // Triangle wave over [0, 1] consuming `step` per episode.
                    if (direction > 0.0 && w + step > 1.0) || (direction < 0.0 && w - step < 0.0) {
                        direction = -direction;
                    }
                    w += direction * step;
                }
                let mut mu = Vec::with_capacity((horizon + 1) * cells);
                for n in 0..=horizon {
                    let (la, lb) = (anchor_a.layer(n), anchor_b.layer(n));
                    for i in 0..cells {
                        mu.push((1.0 - w) * la[i] + w * lb[i]);
                    }
                }
                out.push(imitation_objective(Occupancy::new(
                    xs, acts, horizon, mu,
                )?)?);
            }
            Ok(out)
        }
    }
}

fn random_target(xs: usize, acts: usize, horizon: usize, rng: &mut impl Rng) -> Occupancy {
    let cells = xs * acts;
    let mut mu = Vec::with_capacity((horizon + 1) * cells);
    for _ in 0..=horizon {
        // Full-support layer bounded away from zero for stable KL values.
        let mut layer: Vec<f64> = (0..cells).map(|_| rng.random::<f64>() + 0.05).collect();
        let s: f64 = layer.iter().sum();
        layer.iter_mut().for_each(|v| *v /= s);
        mu.extend(layer);
    }
    Occupancy::new(xs, acts, horizon, mu).expect("normalized layers form an occupancy")
}
