//! Exponentially weighted averaging over experts, the sleeping-experts
//! reduction, and regret accounting.
//!
//! The forecaster keeps a probability vector `v` over K experts and updates
//! `v_k <- v_k exp(-eta * loss_k)` followed by normalization. With convex
//! losses in `[0, 1]` and `eta = sqrt(8 ln K / T)` its regret is at most
//! `sqrt((T / 2) ln K)`; with eta-exp-concave losses and that eta it is at
//! most `ln K / eta`.
//!
//! Experts that are asleep at a round are handled by the standard reduction:
//! the forecaster's effective prediction mixes the awake experts with
//! renormalized weights, and a sleeping expert is charged the forecaster's
//! own loss, so it accumulates regret only while awake. Weights live in the
//! log domain throughout; exponentials are only taken after subtracting the
//! running maximum.

use crate::{tol, CurlError, Result};

/// Log-sum-exp with max subtraction; `-inf` entries contribute nothing.
fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Probability weights over experts, stored as normalized log-weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    log_weights: Vec<f64>,
}

impl WeightVector {
    /// Uniform weights over `k` experts.
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(CurlError::Argument("need at least one expert".into()));
        }
        Ok(Self {
            log_weights: vec![-(k as f64).ln(); k],
        })
    }

    /// Weights from an explicit probability vector. Zero entries are legal
    /// and stay zero under every subsequent update.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() {
            return Err(CurlError::Argument("need at least one expert".into()));
        }
        let mut sum = 0.0;
        for &p in probs {
            if !p.is_finite() || p < 0.0 {
                return Err(CurlError::Argument(format!(
                    "weights must be nonnegative and finite, found {p}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > tol::INPUT_SIMPLEX {
            return Err(CurlError::Argument(format!(
                "weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self {
            log_weights: probs.iter().map(|p| p.ln()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Materialize the weights as probabilities summing to 1.
    pub fn probs(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.log_weights.iter().map(|w| w.exp()).collect();
        let sum: f64 = out.iter().sum();
        out.iter_mut().for_each(|w| *w /= sum);
        out
    }

    /// Single weight as a probability.
    pub fn prob(&self, k: usize) -> f64 {
        // Normalization keeps log-weights exact up to round-off, so a direct
        // exponential is adequate for reporting.
        self.log_weights[k].exp()
    }

    /// Scale every existing weight by `keep_fraction` and append newcomers
    /// with the given probabilities, which must sum to `1 - keep_fraction`.
    ///
    /// This is the weight-birth step shared by the kernel estimator (one new
    /// window per episode) and the meta-learner (one new instance per grid
    /// point per episode).
    pub fn rescale_and_extend(&mut self, keep_fraction: f64, newcomers: &[f64]) -> Result<()> {
        if !(0.0..=1.0).contains(&keep_fraction) {
            return Err(CurlError::Argument(format!(
                "keep fraction must lie in [0, 1], got {keep_fraction}"
            )));
        }
        let newcomer_sum: f64 = newcomers.iter().sum();
        if (keep_fraction + newcomer_sum - 1.0).abs() > tol::INPUT_SIMPLEX {
            return Err(CurlError::Argument(format!(
                "keep fraction {keep_fraction} plus newcomer mass {newcomer_sum} must equal 1"
            )));
        }
        if newcomers.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CurlError::Argument(
                "newcomer weights must be nonnegative and finite".into(),
            ));
        }
        let log_keep = keep_fraction.ln();
        for w in &mut self.log_weights {
            *w += log_keep;
        }
        self.log_weights.extend(newcomers.iter().map(|p| p.ln()));
        Ok(())
    }
}

/// One multiplicative-weights step: `v_k proportional to v_k exp(-eta l_k)`.
///
/// The smallest loss is subtracted before exponentiation, which leaves the
/// result mathematically unchanged but keeps exponents bounded; a common
/// additive shift of all losses therefore does not change the output at all.
pub fn ewa_update(weights: &WeightVector, losses: &[f64], eta: f64) -> Result<WeightVector> {
    if losses.len() != weights.len() {
        return Err(CurlError::Dimension(format!(
            "{} losses for {} experts",
            losses.len(),
            weights.len()
        )));
    }
    if !eta.is_finite() || eta <= 0.0 {
        return Err(CurlError::Argument(format!(
            "learning rate must be positive and finite, got {eta}"
        )));
    }
    let min_loss = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    if !min_loss.is_finite() {
        return Err(CurlError::Numeric(
            "losses must be finite in the weight update".into(),
        ));
    }
    if let Some(bad) = losses.iter().find(|l| !l.is_finite()) {
        return Err(CurlError::Numeric(format!(
            "losses must be finite in the weight update, found {bad}"
        )));
    }
    let mut log_weights: Vec<f64> = weights
        .log_weights
        .iter()
        .zip(losses)
        .map(|(w, l)| w - eta * (l - min_loss))
        .collect();
    let norm = log_sum_exp(&log_weights);
    if !norm.is_finite() {
        return Err(CurlError::Numeric(
            "all weights collapsed to zero in the update".into(),
        ));
    }
    log_weights.iter_mut().for_each(|w| *w -= norm);
    Ok(WeightVector { log_weights })
}

/// Per-expert activity indicators for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct SleepingSignal {
    active: Vec<bool>,
}

impl SleepingSignal {
    pub fn new(active: Vec<bool>) -> Self {
        Self { active }
    }

    /// Signal for experts with the given birth rounds at round `t`: expert k
    /// is awake once `t >= birth[k]`.
    pub fn from_birth_times(birth: &[usize], t: usize) -> Self {
        Self {
            active: birth.iter().map(|&b| t >= b).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.active[k]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.active
    }
}

/// Decision objects that can be mixed by expert weights.
pub trait Mixable: Clone {
    /// `sum_i w_i * item_i` over the given weighted items.
    fn weighted_sum(items: &[(f64, &Self)]) -> Self;
}

impl Mixable for Vec<f64> {
    fn weighted_sum(items: &[(f64, &Self)]) -> Self {
        let len = items.first().map_or(0, |(_, v)| v.len());
        let mut out = vec![0.0; len];
        for (w, v) in items {
            for (o, x) in out.iter_mut().zip(v.iter()) {
                *o += w * x;
            }
        }
        out
    }
}

impl Mixable for f64 {
    fn weighted_sum(items: &[(f64, &Self)]) -> Self {
        items.iter().map(|(w, v)| w * **v).sum()
    }
}

/// Apply the sleeping-experts reduction for one round: mix the awake
/// experts' predictions under renormalized weights.
///
/// Returns the effective prediction together with the full-length
/// renormalized weight vector (zero on sleeping experts). A sleeping
/// expert's modified prediction is exactly the effective prediction, so it
/// incurs the forecaster's own loss; see [`modified_losses`].
pub fn sleeping_wrap<D: Mixable>(
    weights: &WeightVector,
    signal: &SleepingSignal,
    predictions: &[D],
) -> Result<(D, Vec<f64>)> {
    if signal.len() != weights.len() || predictions.len() != weights.len() {
        return Err(CurlError::Dimension(format!(
            "signal ({}), predictions ({}) and weights ({}) disagree",
            signal.len(),
            predictions.len(),
            weights.len()
        )));
    }
    let probs = weights.probs();
    let active_mass: f64 = probs
        .iter()
        .zip(signal.as_slice())
        .filter(|(_, &a)| a)
        .map(|(p, _)| p)
        .sum();
    if active_mass <= 0.0 {
        return Err(CurlError::State(
            "no active expert carries weight this round".into(),
        ));
    }
    let mut renorm = vec![0.0; probs.len()];
    let mut items = Vec::new();
    for k in 0..probs.len() {
        if signal.is_active(k) {
            renorm[k] = probs[k] / active_mass;
            items.push((renorm[k], &predictions[k]));
        }
    }
    Ok((D::weighted_sum(&items), renorm))
}

/// Losses after the sleeping reduction: an awake expert keeps its own loss,
/// a sleeping expert is charged the forecaster's loss.
pub fn modified_losses(losses: &[f64], learner_loss: f64, signal: &SleepingSignal) -> Vec<f64> {
    losses
        .iter()
        .zip(signal.as_slice())
        .map(|(&l, &a)| if a { l } else { learner_loss })
        .collect()
}

/// Cumulative sleeping regret of the forecaster against each expert:
/// `R_k = sum_t active[k][t] * (learner_loss[t] - expert_loss[k][t])`.
///
/// `expert_losses` and `signal` are expert-major: one row per expert, each
/// of the same length as `learner_losses`.
pub fn regret_accounting(
    learner_losses: &[f64],
    expert_losses: &[Vec<f64>],
    signal: &[Vec<bool>],
) -> Result<Vec<f64>> {
    if expert_losses.len() != signal.len() {
        return Err(CurlError::Dimension(format!(
            "{} expert loss rows but {} signal rows",
            expert_losses.len(),
            signal.len()
        )));
    }
    let rounds = learner_losses.len();
    let mut out = Vec::with_capacity(expert_losses.len());
    for (k, (row, act)) in expert_losses.iter().zip(signal).enumerate() {
        if row.len() != rounds || act.len() != rounds {
            return Err(CurlError::Dimension(format!(
                "expert {k} has {} losses / {} signals for {rounds} rounds",
                row.len(),
                act.len()
            )));
        }
        let mut acc = 0.0;
        for t in 0..rounds {
            if act[t] {
                acc += learner_losses[t] - row[t];
            }
        }
        out.push(acc);
    }
    Ok(out)
}

/// Tuned learning rate for convex losses in `[0, 1]` over `rounds` rounds
/// with `experts` experts: `sqrt(8 ln K / T)`.
pub fn convex_eta(experts: usize, rounds: usize) -> f64 {
    (8.0 * (experts as f64).ln() / rounds as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_expert_update_matches_hand_computation() {
        // Losses (0, 1) at eta = ln 2 turn a uniform prior into (2/3, 1/3).
        let prior = WeightVector::uniform(2).unwrap();
        let posterior = ewa_update(&prior, &[0.0, 1.0], 2.0_f64.ln()).unwrap();
        let probs = posterior.probs();
        assert!((probs[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((probs[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_loss_shift_leaves_weights_bitwise_unchanged() {
        // Dyadic losses and shift make the min-subtraction exact in binary
        // floating point, so the two updates agree bit for bit.
        let prior = WeightVector::from_probs(&[0.125, 0.5, 0.375]).unwrap();
        let losses = [0.25, 0.75, 0.5];
        let shifted: Vec<f64> = losses.iter().map(|l| l + 3.5).collect();
        let a = ewa_update(&prior, &losses, 0.7).unwrap();
        let b = ewa_update(&prior, &shifted, 0.7).unwrap();
        assert_eq!(a.log_weights(), b.log_weights());
    }

    #[test]
    fn update_rejects_bad_inputs() {
        let prior = WeightVector::uniform(2).unwrap();
        assert!(ewa_update(&prior, &[0.0], 1.0).is_err());
        assert!(ewa_update(&prior, &[0.0, f64::NAN], 1.0).is_err());
        assert!(ewa_update(&prior, &[0.0, 1.0], 0.0).is_err());
        assert!(ewa_update(&prior, &[0.0, 1.0], -1.0).is_err());
        assert!(WeightVector::from_probs(&[0.7, 0.7]).is_err());
        assert!(WeightVector::uniform(0).is_err());
    }

    #[test]
    fn weights_stay_normalized_under_long_update_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut w = WeightVector::uniform(16).unwrap();
        for _ in 0..3000 {
            let losses: Vec<f64> = (0..w.len()).map(|_| rng.random::<f64>()).collect();
            w = ewa_update(&w, &losses, 0.3).unwrap();
            if rng.random::<f64>() < 0.02 {
                w.rescale_and_extend(0.9, &[0.1]).unwrap();
            }
        }
        let sum: f64 = w.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(w.log_weights().iter().all(|v| v.is_finite() || *v == f64::NEG_INFINITY));
    }

    #[test]
    fn convex_regret_respects_the_tuned_bound() {
        // Linear losses over the weight simplex: the forecaster's loss is
        // the weighted mean of expert losses, convex in the weights.
        let (experts, rounds) = (8, 200);
        let eta = convex_eta(experts, rounds);
        let bound = ((rounds as f64 / 2.0) * (experts as f64).ln()).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _trial in 0..20 {
            let mut w = WeightVector::uniform(experts).unwrap();
            let mut learner = 0.0;
            let mut expert_tot = vec![0.0; experts];
            for _ in 0..rounds {
                let losses: Vec<f64> = (0..experts).map(|_| rng.random::<f64>()).collect();
                let probs = w.probs();
                learner += probs.iter().zip(&losses).map(|(p, l)| p * l).sum::<f64>();
                for (tot, l) in expert_tot.iter_mut().zip(&losses) {
                    *tot += l;
                }
                w = ewa_update(&w, &losses, eta).unwrap();
            }
            let best = expert_tot.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(
                learner - best <= bound + 1e-9,
                "regret {} exceeds bound {bound}",
                learner - best
            );
        }
    }

    #[test]
    fn exp_concave_regret_respects_log_k() {
        // Log-type losses l(q) = -ln(q[x] + 1/d) are 1-exp-concave because
        // exp(-l) is linear in q; eta = 1 gives regret at most ln K.
        let (experts, rounds, d) = (6, 300, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _trial in 0..20 {
            let qs: Vec<Vec<f64>> = (0..experts)
                .map(|_| crate::mdp::tests::random_simplex(d, &mut rng))
                .collect();
            let mut w = WeightVector::uniform(experts).unwrap();
            let mut learner = 0.0;
            let mut expert_tot = vec![0.0; experts];
            for _ in 0..rounds {
                let x = rng.random_range(0..d);
                let probs = w.probs();
                let mixture: Vec<f64> = (0..d)
                    .map(|i| probs.iter().zip(&qs).map(|(p, q)| p * q[i]).sum())
                    .collect();
                learner += -(mixture[x] + 1.0 / d as f64).ln();
                let losses: Vec<f64> = qs
                    .iter()
                    .map(|q| -(q[x] + 1.0 / d as f64).ln())
                    .collect();
                for (tot, l) in expert_tot.iter_mut().zip(&losses) {
                    *tot += l;
                }
                w = ewa_update(&w, &losses, 1.0).unwrap();
            }
            let best = expert_tot.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(
                learner - best <= (experts as f64).ln() + 1e-9,
                "regret {} exceeds ln K",
                learner - best
            );
        }
    }

    #[test]
    fn sleeping_regret_equals_ordinary_regret_on_modified_losses() {
        // Run a sleeping forecaster over scalar predictions with squared
        // loss and check the reduction identity expert by expert.
        let (experts, rounds) = (5, 120);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut birth: Vec<usize> = (0..experts).map(|_| rng.random_range(1..40)).collect();
        birth[0] = 1;
        let preds: Vec<f64> = (0..experts).map(|_| rng.random::<f64>()).collect();

        let mut w = WeightVector::uniform(experts).unwrap();
        let mut learner_losses = Vec::new();
        let mut expert_losses: Vec<Vec<f64>> = vec![Vec::new(); experts];
        let mut modified: Vec<Vec<f64>> = vec![Vec::new(); experts];
        let mut signals: Vec<Vec<bool>> = vec![Vec::new(); experts];
        for t in 1..=rounds {
            let signal = SleepingSignal::from_birth_times(&birth, t);
            let target: f64 = rng.random();
            let (effective, _) = sleeping_wrap(&w, &signal, &preds).unwrap();
            let learner_loss = (effective - target).powi(2);
            let losses: Vec<f64> = preds.iter().map(|p| (p - target).powi(2)).collect();
            let mods = modified_losses(&losses, learner_loss, &signal);
            learner_losses.push(learner_loss);
            for k in 0..experts {
                expert_losses[k].push(losses[k]);
                modified[k].push(mods[k]);
                signals[k].push(signal.is_active(k));
            }
            w = ewa_update(&w, &mods, 0.8).unwrap();
        }

        let sleeping =
            regret_accounting(&learner_losses, &expert_losses, &signals).unwrap();
        let always: Vec<Vec<bool>> = vec![vec![true; rounds]; experts];
        let ordinary = regret_accounting(&learner_losses, &modified, &always).unwrap();
        for k in 0..experts {
            assert!(
                (sleeping[k] - ordinary[k]).abs() <= crate::tol::SLEEPING_IDENTITY,
                "expert {k}: sleeping {} vs ordinary {}",
                sleeping[k],
                ordinary[k]
            );
        }
    }

    #[test]
    fn sleeping_wrap_needs_active_mass() {
        let w = WeightVector::uniform(3).unwrap();
        let signal = SleepingSignal::new(vec![false, false, false]);
        let preds = vec![0.1, 0.2, 0.3];
        assert!(matches!(
            sleeping_wrap(&w, &signal, &preds),
            Err(CurlError::State(_))
        ));
    }

    #[test]
    fn rescale_and_extend_preserves_the_simplex() {
        let mut w = WeightVector::uniform(4).unwrap();
        // Episode t = 5 birth: keep 4/5 of the old mass, newcomer gets 1/5.
        w.rescale_and_extend(0.8, &[0.2]).unwrap();
        let probs = w.probs();
        assert_eq!(probs.len(), 5);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((probs[4] - 0.2).abs() < 1e-12);
        for p in &probs[..4] {
            assert!((p - 0.2).abs() < 1e-12);
        }
        assert!(w.rescale_and_extend(0.5, &[0.2]).is_err());
    }
}
