//! Sleeping experts over restart intervals.
//!
//! Eight experts each predict a scalar in [0, 1]; expert k only wakes up at
//! round 10k + 1, mimicking learners restarted at staggered times. The
//! environment shifts its target mid-run, so late-born experts win the
//! second half. The forecaster mixes awake experts with renormalized
//! weights, charges sleeping experts its own loss, and its regret against
//! every expert on that expert's waking rounds stays under the tuned bound.
//!
//! Run with `cargo run --example sleeping_experts`.

use metacurl::lea::{
    convex_eta, ewa_update, modified_losses, regret_accounting, sleeping_wrap, SleepingSignal,
    WeightVector,
};

const EXPERTS: usize = 8;
const ROUNDS: usize = 80;

fn main() -> metacurl::Result<()> {
    let eta = convex_eta(EXPERTS, ROUNDS);
    let births: Vec<usize> = (0..EXPERTS).map(|k| 10 * k + 1).collect();
    // Expert k stubbornly predicts k / (EXPERTS - 1).
    let predictions: Vec<f64> = (0..EXPERTS)
        .map(|k| k as f64 / (EXPERTS - 1) as f64)
        .collect();

    let mut weights = WeightVector::uniform(EXPERTS)?;
    let mut learner_losses = Vec::with_capacity(ROUNDS);
    let mut expert_losses = vec![Vec::with_capacity(ROUNDS); EXPERTS];
    let mut activity = vec![Vec::with_capacity(ROUNDS); EXPERTS];

    for t in 1..=ROUNDS {
        let signal = SleepingSignal::from_birth_times(&births, t);
        let (prediction, _renorm) = sleeping_wrap(&weights, &signal, &predictions)?;

        // The target jumps from 0.2 to 0.9 mid-run; losses are absolute
        // errors, clipped into [0, 1] by construction.
        let target = if t <= ROUNDS / 2 { 0.2 } else { 0.9 };
        let losses: Vec<f64> = predictions.iter().map(|p| (p - target).abs()).collect();
        let learner_loss = (prediction - target).abs();

        let charged = modified_losses(&losses, learner_loss, &signal);
        weights = ewa_update(&weights, &charged, eta)?;

        learner_losses.push(learner_loss);
        for k in 0..EXPERTS {
            expert_losses[k].push(losses[k]);
            activity[k].push(signal.is_active(k));
        }
        if t % 20 == 0 {
            println!("round {t:3}: target {target:.1}, forecaster predicts {prediction:.3}");
        }
    }

    let regrets = regret_accounting(&learner_losses, &expert_losses, &activity)?;
    let bound = (ROUNDS as f64 / 2.0 * (EXPERTS as f64).ln()).sqrt();
    println!("\nper-expert sleeping regret (bound {bound:.2}):");
    for (k, r) in regrets.iter().enumerate() {
        let status = if *r <= bound { "ok" } else { "VIOLATION" };
        println!(
            "  expert {k} (born round {:2}, predicts {:.2}): regret {r:7.3}  {status}",
            births[k], predictions[k]
        );
    }
    Ok(())
}
