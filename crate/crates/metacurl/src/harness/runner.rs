//! The experiment driver: seeded episode loops, exact regret accounting,
//! CSV emission, and regret-versus-horizon slope fits.
//!
//! Every per-episode row carries the played policy's expected loss under
//! the true kernel, under the learner's kernel estimate, and under the
//! comparator, plus a two-term split of the regret increment: the gap to
//! a reference pooled instance (born at the current kernel phase start,
//! largest grid rate) and that instance's gap to the comparator. The two
//! terms recombine to the total increment by construction, which the
//! tests check row by row.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::estimator::KernelEstimator;
use crate::harness::comparator::{oracle_comparators, ComparatorResult};
use crate::harness::config::{ExperimentConfig, KernelModeSpec, LearnerKind, ObjectiveKindSpec};
use crate::harness::environment::{generate_environment, generate_map, GeneratedEnvironment};
use crate::mdcurl::GreedyMdCurl;
use crate::mdp::{
    induce_occupancy_into, sample_episode, MdpShape, Occupancy, Policy, SaTensor, Trajectory,
};
use crate::meta::{BlackboxKernelMode, LearningRateGrid, MetaCurl};
use crate::objectives::{adversarial_sequence, entropy_objective, AdversaryKind, CurlObjective};
use crate::{CurlError, Result};

/// One episode of a finished run.
#[derive(Clone, Debug)]
pub struct EpisodeRow {
    pub t: usize,
    /// Expected loss of the played policy under the true kernel.
    pub true_loss: f64,
    /// Expected loss of the played policy under the learner's kernel
    /// estimate.
    pub est_loss: f64,
    /// Expected loss of the comparator policy under the true kernel.
    pub comparator_loss: f64,
    /// Running sum of `true_loss - comparator_loss`.
    pub cum_regret: f64,
    pub n_instances: usize,
    /// Birth episode of the heaviest pooled instance after the update.
    pub active_best_s: usize,
    /// Learning rate of that instance.
    pub active_best_lambda: f64,
    /// `true_loss` minus the reference instance's true loss.
    pub meta_component: f64,
    /// Reference instance's true loss minus the comparator's.
    pub blackbox_component: f64,
}

/// Whole-run aggregates for one seed.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub seed: u64,
    pub episodes: usize,
    /// Realized kernel drift `1 + sum_t d_t`.
    pub kernel_drift: f64,
    /// Number of stationary kernel segments (switch count plus one).
    pub kernel_phases: f64,
    /// Comparator policy drift.
    pub comparator_drift: f64,
    pub comparator_phases: f64,
    pub total_true_loss: f64,
    pub total_comparator_loss: f64,
    pub total_regret: f64,
    /// `sum_t |true_loss - est_loss|`, the realized estimation gap.
    pub estimation_gap: f64,
    /// With probability `1 - confidence`, sampled episode losses deviate
    /// from their expectations by at most this much over the run.
    pub deviation_bound: f64,
}

/// Full per-seed record: one row per episode plus the summary.
#[derive(Clone, Debug)]
pub struct RegretTrace {
    pub rows: Vec<EpisodeRow>,
    pub summary: RunSummary,
}

/// All seeds of one configuration.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub traces: Vec<RegretTrace>,
}

/// One point of a horizon sweep.
#[derive(Clone, Copy, Debug)]
pub struct SweepPoint {
    pub episodes: usize,
    pub median_regret: f64,
}

/// Median regret per horizon and the fitted log-log exponent.
#[derive(Clone, Debug)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub slope: f64,
}

/// Objective schedule described by the config, materialized per seed.
pub fn build_objectives(
    config: &ExperimentConfig,
    shape: &MdpShape,
    episodes: usize,
    seed: u64,
) -> Result<Vec<CurlObjective>> {
    let spec = &config.objective;
    match spec.kind {
        ObjectiveKindSpec::FixedLinear => adversarial_sequence(
            AdversaryKind::SignFlippingLinear { period: episodes },
            shape,
            episodes,
            seed,
        ),
        ObjectiveKindSpec::IidRandomLinear => {
            adversarial_sequence(AdversaryKind::IidRandomLinear, shape, episodes, seed)
        }
        ObjectiveKindSpec::SignFlippingLinear => {
            let period = spec
                .period
                .ok_or_else(|| CurlError::Config("sign-flipping losses need a period".into()))?;
            adversarial_sequence(
                AdversaryKind::SignFlippingLinear { period },
                shape,
                episodes,
                seed,
            )
        }
        ObjectiveKindSpec::DriftingImitation => {
            let drift = spec.drift.ok_or_else(|| {
                CurlError::Config("drifting-imitation objectives need a drift".into())
            })?;
            adversarial_sequence(
                AdversaryKind::DriftingTargetImitation { total_drift: drift },
                shape,
                episodes,
                seed,
            )
        }
        ObjectiveKindSpec::Entropy => {
            let one =
                entropy_objective(shape.num_states(), shape.num_actions(), shape.horizon());
            Ok(vec![one; episodes])
        }
    }
}

enum Learner {
    Meta(MetaCurl),
    Single {
        learner: GreedyMdCurl,
        grad: SaTensor,
        est_occ: Occupancy,
    },
    Random {
        policy: Policy,
        estimator: KernelEstimator,
        est_occ: Occupancy,
    },
}

impl Learner {
    fn build(
        config: &ExperimentConfig,
        shape: &Arc<MdpShape>,
        env: &GeneratedEnvironment,
        episodes: usize,
    ) -> Result<Self> {
        let (xs, acts, n_max) = (shape.num_states(), shape.num_actions(), shape.horizon());
        match config.learner.kind {
            LearnerKind::Metacurl => {
                let grid = match &config.learner.grid {
                    Some(rates) => LearningRateGrid::from_rates(rates.clone())?,
                    None => LearningRateGrid::for_horizon(episodes)?,
                };
                let mode = match config.learner.kernel_mode {
                    Some(KernelModeSpec::OwnSinceBirth) => BlackboxKernelMode::OwnSinceBirth,
                    _ => BlackboxKernelMode::SharedEstimate,
                };
                Ok(Learner::Meta(MetaCurl::new(
                    Arc::clone(shape),
                    Arc::clone(env.map()),
                    episodes,
                    grid,
                    mode,
                    config.run.parallel,
                )?))
            }
            LearnerKind::GreedySingle => {
                let lambda = config
                    .learner
                    .lambda
                    .unwrap_or_else(|| 1.0 / (episodes as f64).sqrt());
                Ok(Learner::Single {
                    learner: GreedyMdCurl::new(Arc::clone(shape), Arc::clone(env.map()), lambda, 1)?,
                    grad: SaTensor::zeros(xs, acts, n_max),
                    est_occ: Occupancy::zeros(xs, acts, n_max),
                })
            }
            LearnerKind::RandomPolicy => Ok(Learner::Random {
                policy: Policy::uniform(xs, acts, n_max),
                estimator: KernelEstimator::new(Arc::clone(env.map())),
                est_occ: Occupancy::zeros(xs, acts, n_max),
            }),
        }
    }

    fn begin(&mut self) -> Result<Policy> {
        match self {
            Learner::Meta(meta) => Ok(meta.begin_episode()?.clone()),
            Learner::Single { learner, .. } => Ok(learner.policy().clone()),
            Learner::Random { policy, .. } => Ok(policy.clone()),
        }
    }

    /// Expected loss of the policy about to be played, under the
    /// learner's own kernel estimate. Call between `begin` and `end`.
    fn estimated_loss(&mut self, shape: &MdpShape, objective: &CurlObjective) -> Result<f64> {
        match self {
            Learner::Meta(meta) => objective.eval(meta.aggregate_occupancy()),
            Learner::Single {
                learner, est_occ, ..
            } => {
                induce_occupancy_into(shape, learner.own_kernel(), learner.policy(), est_occ)?;
                objective.eval(est_occ)
            }
            Learner::Random {
                policy,
                estimator,
                est_occ,
            } => {
                induce_occupancy_into(shape, estimator.current(), policy, est_occ)?;
                objective.eval(est_occ)
            }
        }
    }

    fn reference_policy(&self, birth: usize) -> Option<&Policy> {
        match self {
            Learner::Meta(meta) => meta.instance_policy(birth, 0),
            _ => None,
        }
    }

    /// Absorb the episode; returns `(instances, best_birth, best_rate)`.
    fn end(
        &mut self,
        objective: &CurlObjective,
        traj: &Trajectory,
        rng: &mut ChaCha8Rng,
    ) -> Result<(usize, usize, f64)> {
        match self {
            Learner::Meta(meta) => {
                let report = meta.end_episode(objective, traj, rng)?;
                Ok((report.num_instances, report.best_birth, report.best_rate))
            }
            Learner::Single { learner, grad, .. } => {
                objective.grad_into(learner.model_occupancy(), grad)?;
                let lambda = learner.lambda();
                learner.blackbox_episode(grad, traj, None)?;
                Ok((1, 1, lambda))
            }
            Learner::Random { estimator, .. } => {
                estimator.step(traj, rng)?;
                Ok((0, 0, 0.0))
            }
        }
    }
}

/// Everything a run derives from `(config, seed)` before the episode
/// loop starts; the returned generator continues the same stream, so
/// trajectory draws follow deterministically.
pub struct SeededInputs {
    pub shape: Arc<MdpShape>,
    pub env: GeneratedEnvironment,
    pub objectives: Vec<CurlObjective>,
    pub rng: ChaCha8Rng,
}

/// Materialize the environment and objective schedule for one seed.
pub fn seeded_inputs(
    config: &ExperimentConfig,
    seed: u64,
    episodes: usize,
) -> Result<SeededInputs> {
    if episodes < 2 {
        return Err(CurlError::Config(format!(
            "need at least 2 episodes, got {episodes}"
        )));
    }
    let s = &config.shape;
    let shape = Arc::new(MdpShape::with_uniform_start(
        s.states, s.actions, s.horizon,
    ));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = Arc::new(generate_map(
        s.states,
        s.actions,
        s.horizon,
        s.noise_card,
        &mut rng,
    )?);
    let env = generate_environment(&map, &config.environment, episodes, &mut rng)?;
    let objective_seed = rng.random::<u64>();
    let objectives = build_objectives(config, &shape, episodes, objective_seed)?;
    Ok(SeededInputs {
        shape,
        env,
        objectives,
        rng,
    })
}

/// Run one seed of the configured experiment at its configured horizon.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<RegretTrace> {
    run_seed_at(config, seed, config.run.episodes)
}

/// Run one seed with an overridden episode count (used by sweeps).
pub fn run_seed_at(config: &ExperimentConfig, seed: u64, episodes: usize) -> Result<RegretTrace> {
    config.validate()?;
    let SeededInputs {
        shape,
        env,
        objectives,
        mut rng,
    } = seeded_inputs(config, seed, episodes)?;
    let s = &config.shape;
    let comparator: ComparatorResult =
        oracle_comparators(&shape, &env, &objectives, config.comparator.mode)?;
    let mut learner = Learner::build(config, &shape, &env, episodes)?;

    let mut rows = Vec::with_capacity(episodes);
    let mut true_occ = Occupancy::zeros(s.states, s.actions, s.horizon);
    let mut ref_occ = Occupancy::zeros(s.states, s.actions, s.horizon);
    let mut cum_regret = 0.0;
    let mut estimation_gap = 0.0;
    for t in 1..=episodes {
        let objective = &objectives[t - 1];
        let policy = learner.begin()?;
        let est_loss = learner.estimated_loss(&shape, objective)?;
        induce_occupancy_into(&shape, env.kernel_at(t), &policy, &mut true_occ)?;
        let true_loss = objective.eval(&true_occ)?;
        let comparator_loss = comparator.losses[t - 1];

        let ref_birth = *env
            .phase_starts()
            .iter()
            .rev()
            .find(|&&start| start <= t)
            .unwrap_or(&1);
        let (meta_component, blackbox_component) = match learner.reference_policy(ref_birth) {
            Some(reference) => {
                induce_occupancy_into(&shape, env.kernel_at(t), reference, &mut ref_occ)?;
                let reference_loss = objective.eval(&ref_occ)?;
                (true_loss - reference_loss, reference_loss - comparator_loss)
            }
            None => (0.0, true_loss - comparator_loss),
        };

        let traj = sample_episode(&shape, &policy, env.dynamics_at(t), t, &mut rng)?;
        let (n_instances, active_best_s, active_best_lambda) =
            learner.end(objective, &traj, &mut rng)?;

        cum_regret += true_loss - comparator_loss;
        estimation_gap += (true_loss - est_loss).abs();
        rows.push(EpisodeRow {
            t,
            true_loss,
            est_loss,
            comparator_loss,
            cum_regret,
            n_instances,
            active_best_s,
            active_best_lambda,
            meta_component,
            blackbox_component,
        });
    }

    let total_true_loss: f64 = rows.iter().map(|r| r.true_loss).sum();
    let total_comparator_loss: f64 = rows.iter().map(|r| r.comparator_loss).sum();
    let summary = RunSummary {
        seed,
        episodes,
        kernel_drift: env.variation().total,
        kernel_phases: env.variation().hard,
        comparator_drift: comparator.variation.total,
        comparator_phases: comparator.variation.hard,
        total_true_loss,
        total_comparator_loss,
        total_regret: cum_regret,
        estimation_gap,
        deviation_bound: s.horizon as f64
            * (episodes as f64 / 2.0 * (2.0 / config.run.confidence).ln()).sqrt(),
    };
    log::info!(
        "seed {seed}: {episodes} episodes, total regret {:.4}",
        summary.total_regret
    );
    Ok(RegretTrace { rows, summary })
}

/// Run every configured seed; writes CSV files when the config names an
/// output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let seeds = &config.run.seeds;
    let traces: Vec<RegretTrace> = if config.run.parallel && seeds.len() > 1 {
        seeds
            .par_iter()
            .map(|&seed| run_seed(config, seed))
            .collect::<Result<_>>()?
    } else {
        seeds
            .iter()
            .map(|&seed| run_seed(config, seed))
            .collect::<Result<_>>()?
    };
    let report = ExperimentReport { traces };
    if let Some(dir) = &config.run.out_dir {
        write_experiment(&report, dir)?;
    }
    Ok(report)
}

/// Re-run the configured seeds at each sweep horizon and fit the slope of
/// median regret against horizon on log-log axes.
pub fn sweep_experiment(config: &ExperimentConfig) -> Result<SweepReport> {
    config.validate()?;
    if config.run.sweep_episodes.len() < 2 {
        return Err(CurlError::Config(
            "sweeps need at least two entries in sweep_episodes".into(),
        ));
    }
    let mut points = Vec::with_capacity(config.run.sweep_episodes.len());
    for &episodes in &config.run.sweep_episodes {
        let seeds = &config.run.seeds;
        let regrets: Vec<f64> = if config.run.parallel && seeds.len() > 1 {
            seeds
                .par_iter()
                .map(|&seed| run_seed_at(config, seed, episodes).map(|t| t.summary.total_regret))
                .collect::<Result<_>>()?
        } else {
            seeds
                .iter()
                .map(|&seed| run_seed_at(config, seed, episodes).map(|t| t.summary.total_regret))
                .collect::<Result<_>>()?
        };
        points.push(SweepPoint {
            episodes,
            median_regret: median(regrets),
        });
    }
    let fit: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.episodes as f64, p.median_regret.max(1e-9)))
        .collect();
    let slope = fit_loglog_slope(&fit);
    let report = SweepReport { points, slope };
    if let Some(dir) = &config.run.out_dir {
        write_sweep(&report, dir)?;
    }
    Ok(report)
}

/// Sample median; the mean of the middle pair on even lengths.
pub fn median(mut values: Vec<f64>) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let mean_x: f64 = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y: f64 = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = logs
        .iter()
        .map(|p| (p.0 - mean_x) * (p.1 - mean_y))
        .sum();
    let var: f64 = logs.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    cov / var
}

/// The fixed eight-column per-episode schema.
pub const TRACE_HEADER: &str =
    "t,true_loss,est_loss,comparator_loss,cum_regret,n_instances,active_best_s,active_best_lambda";

/// Render one trace as CSV text; identical runs produce identical bytes.
pub fn trace_csv(trace: &RegretTrace) -> String {
    let mut out = String::with_capacity(64 * (trace.rows.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in &trace.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.t,
            r.true_loss,
            r.est_loss,
            r.comparator_loss,
            r.cum_regret,
            r.n_instances,
            r.active_best_s,
            r.active_best_lambda
        ));
    }
    out
}

pub const SUMMARY_HEADER: &str = "seed,episodes,kernel_drift,kernel_phases,comparator_drift,\
comparator_phases,total_true_loss,total_comparator_loss,total_regret,estimation_gap,\
deviation_bound";

/// Render the per-seed summary table as CSV text.
pub fn summary_csv(report: &ExperimentReport) -> String {
    let mut out = String::new();
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    for trace in &report.traces {
        let s = &trace.summary;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            s.seed,
            s.episodes,
            s.kernel_drift,
            s.kernel_phases,
            s.comparator_drift,
            s.comparator_phases,
            s.total_true_loss,
            s.total_comparator_loss,
            s.total_regret,
            s.estimation_gap,
            s.deviation_bound
        ));
    }
    out
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CurlError::io(parent, e))?;
    }
    std::fs::write(path, content).map_err(|e| CurlError::io(path, e))
}

/// Write one `trace_seed_<seed>.csv` per seed plus `summary.csv`; returns
/// the written paths.
pub fn write_experiment(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for trace in &report.traces {
        let path = dir.join(format!("trace_seed_{}.csv", trace.summary.seed));
        write_file(&path, &trace_csv(trace))?;
        written.push(path);
    }
    let summary_path = dir.join("summary.csv");
    write_file(&summary_path, &summary_csv(report))?;
    written.push(summary_path);
    Ok(written)
}

/// Write `sweep.csv` with one row per horizon.
pub fn write_sweep(report: &SweepReport, dir: &Path) -> Result<PathBuf> {
    let mut out = String::from("episodes,median_regret,fitted_slope\n");
    for p in &report.points {
        out.push_str(&format!(
            "{},{},{}\n",
            p.episodes, p.median_regret, report.slope
        ));
    }
    let path = dir.join("sweep.csv");
    write_file(&path, &out)?;
    Ok(path)
}
