//! Versioned experiment configuration with strict TOML parsing.
//!
//! Unknown keys are rejected, the `version` field is mandatory, and every
//! cross-field rule is enforced by [`ExperimentConfig::validate`] before a
//! run starts, so a config that loads is a config that runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::meta::LearningRateGrid;
use crate::{CurlError, Result};

/// Schema version accepted by this build.
pub const CONFIG_VERSION: u32 = 1;

/// Top-level experiment description, normally loaded from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub shape: ShapeSpec,
    pub run: RunSpec,
    pub environment: EnvironmentSpec,
    pub objective: ObjectiveSpec,
    pub learner: LearnerSpec,
    #[serde(default)]
    pub comparator: ComparatorSpec,
}

/// Problem sizes: layered state-action space plus noise alphabet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub noise_card: usize,
}

/// Episode counts, seeds and output destination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    /// Episode counts visited by the `sweep` subcommand.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep_episodes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Enables the per-episode parallel maps inside the meta-learner and
    /// runs independent seeds on the thread pool.
    #[serde(default)]
    pub parallel: bool,
    /// Failure probability used for the diagnostic deviation bound printed
    /// in summaries.
    #[serde(default = "default_confidence")]
    pub confidence: f64,
}

fn default_confidence() -> f64 {
    0.05
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvironmentKind {
    /// `phases` stationary segments of (near) equal length.
    PiecewiseStationary,
    /// Kernel interpolates between two anchors, spending exactly the
    /// requested drift budget.
    Drifting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub kind: EnvironmentKind,
    /// Number of stationary phases (piecewise environments only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phases: Option<usize>,
    /// Target kernel drift `1 + sum_t d_t` (drifting environments only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKindSpec {
    /// One random linear loss tensor held fixed for the whole run.
    FixedLinear,
    /// Fresh random linear loss every episode.
    IidRandomLinear,
    /// A linear loss alternating with its complement every `period`
    /// episodes.
    SignFlippingLinear,
    /// Imitation objective whose target drifts with a fixed budget.
    DriftingImitation,
    /// Stationary entropy maximization.
    Entropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKindSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    Metacurl,
    GreedySingle,
    RandomPolicy,
}

impl LearnerKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "metacurl" => Ok(LearnerKind::Metacurl),
            "greedy-single" => Ok(LearnerKind::GreedySingle),
            "random-policy" => Ok(LearnerKind::RandomPolicy),
            other => Err(CurlError::Config(format!(
                "unknown learner {other:?}; expected metacurl, greedy-single or random-policy"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelModeSpec {
    OwnSinceBirth,
    SharedEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    /// Mirror-descent rate for `greedy-single`; defaults to `1/sqrt(T)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Learning-rate grid override for `metacurl`; defaults to the dyadic
    /// grid tuned to `episodes`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
    /// Kernel feed for the pooled instances (`metacurl` only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_mode: Option<KernelModeSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComparatorMode {
    /// Solve each episode's problem separately.
    PerEpisodeOptimal,
    /// One policy for the whole run; needs a stationary environment.
    BestFixed,
    /// One policy per detected kernel phase.
    PiecewiseOptimal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparatorSpec {
    pub mode: ComparatorMode,
}

impl Default for ComparatorSpec {
    fn default() -> Self {
        ComparatorSpec {
            mode: ComparatorMode::PerEpisodeOptimal,
        }
    }
}

impl ExperimentConfig {
    /// Parse and validate a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| CurlError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Load and validate a TOML file. Unreadable paths count as config
    /// errors: the `--config` input itself is unusable.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CurlError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CurlError::Config(msg) => CurlError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CurlError::Config(e.to_string()))
    }

    /// A small, valid piecewise-stationary MetaCURL run; handy as a
    /// starting point and exercised by the round-trip tests.
    pub fn example() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            shape: ShapeSpec {
                states: 3,
                actions: 2,
                horizon: 3,
                noise_card: 3,
            },
            run: RunSpec {
                episodes: 200,
                seeds: vec![1, 2, 3],
                sweep_episodes: vec![],
                out_dir: None,
                parallel: false,
                confidence: 0.05,
            },
            environment: EnvironmentSpec {
                kind: EnvironmentKind::PiecewiseStationary,
                phases: Some(2),
                budget: None,
            },
            objective: ObjectiveSpec {
                kind: ObjectiveKindSpec::SignFlippingLinear,
                period: Some(100),
                drift: None,
            },
            learner: LearnerSpec {
                kind: LearnerKind::Metacurl,
                lambda: None,
                grid: None,
                kernel_mode: Some(KernelModeSpec::SharedEstimate),
            },
            comparator: ComparatorSpec {
                mode: ComparatorMode::PiecewiseOptimal,
            },
        }
    }

    /// Enforce every cross-field rule; all violations map to
    /// [`CurlError::Config`].
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CurlError::Config(msg));
        if self.version != CONFIG_VERSION {
            return fail(format!(
                "unsupported config version {}; this build reads version {CONFIG_VERSION}",
                self.version
            ));
        }
        let s = &self.shape;
        if s.states == 0 || s.actions == 0 || s.horizon == 0 || s.noise_card == 0 {
            return fail("shape sizes must all be positive".into());
        }
        if self.run.episodes < 2 {
            return fail(format!(
                "need at least 2 episodes, got {}",
                self.run.episodes
            ));
        }
        if self.run.seeds.is_empty() {
            return fail("need at least one seed".into());
        }
        if !(self.run.confidence > 0.0 && self.run.confidence < 1.0) {
            return fail(format!(
                "confidence must lie in (0, 1), got {}",
                self.run.confidence
            ));
        }
        if let Some(&t) = self.run.sweep_episodes.iter().find(|&&t| t < 2) {
            return fail(format!("sweep episode count {t} is below 2"));
        }

        match self.environment.kind {
            EnvironmentKind::PiecewiseStationary => {
                let phases = self
                    .environment
                    .phases
                    .ok_or_else(|| CurlError::Config("piecewise environments need phases".into()))?;
                if phases == 0 {
                    return fail("phases must be positive".into());
                }
                let min_episodes = self
                    .run
                    .sweep_episodes
                    .iter()
                    .copied()
                    .chain([self.run.episodes])
                    .min()
                    .unwrap_or(self.run.episodes);
                if phases > min_episodes {
                    return fail(format!(
                        "{phases} phases do not fit into {min_episodes} episodes"
                    ));
                }
                if self.environment.budget.is_some() {
                    return fail("budget only applies to drifting environments".into());
                }
            }
            EnvironmentKind::Drifting => {
                let budget = self
                    .environment
                    .budget
                    .ok_or_else(|| CurlError::Config("drifting environments need a budget".into()))?;
                if !budget.is_finite() || budget < 1.0 {
                    return fail(format!(
                        "drift budget must be finite and at least 1, got {budget}"
                    ));
                }
                if self.environment.phases.is_some() {
                    return fail("phases only apply to piecewise environments".into());
                }
            }
        }

        match self.objective.kind {
            ObjectiveKindSpec::SignFlippingLinear => {
                let period = self
                    .objective
                    .period
                    .ok_or_else(|| CurlError::Config("sign-flipping losses need a period".into()))?;
                if period == 0 {
                    return fail("flip period must be positive".into());
                }
                if self.objective.drift.is_some() {
                    return fail("drift only applies to drifting-imitation objectives".into());
                }
            }
            ObjectiveKindSpec::DriftingImitation => {
                let drift = self.objective.drift.ok_or_else(|| {
                    CurlError::Config("drifting-imitation objectives need a drift".into())
                })?;
                if !drift.is_finite() || drift < 0.0 {
                    return fail(format!("objective drift must be nonnegative, got {drift}"));
                }
                if self.objective.period.is_some() {
                    return fail("period only applies to sign-flipping objectives".into());
                }
            }
            _ => {
                if self.objective.period.is_some() || self.objective.drift.is_some() {
                    return fail(format!(
                        "{:?} objectives take neither period nor drift",
                        self.objective.kind
                    ));
                }
            }
        }

        match self.learner.kind {
            LearnerKind::Metacurl => {
                if self.learner.lambda.is_some() {
                    return fail("lambda only applies to greedy-single".into());
                }
                if let Some(grid) = &self.learner.grid {
                    LearningRateGrid::from_rates(grid.clone())
                        .map_err(|e| CurlError::Config(format!("bad grid: {e}")))?;
                }
            }
            LearnerKind::GreedySingle => {
                if let Some(l) = self.learner.lambda {
                    if !l.is_finite() || l <= 0.0 {
                        return fail(format!("lambda must be positive and finite, got {l}"));
                    }
                }
                if self.learner.grid.is_some() || self.learner.kernel_mode.is_some() {
                    return fail("grid and kernel_mode only apply to metacurl".into());
                }
            }
            LearnerKind::RandomPolicy => {
                if self.learner.lambda.is_some()
                    || self.learner.grid.is_some()
                    || self.learner.kernel_mode.is_some()
                {
                    return fail("random-policy takes no learner options".into());
                }
            }
        }
        Ok(())
    }
}
