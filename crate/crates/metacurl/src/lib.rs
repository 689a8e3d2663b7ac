//! Online learning for concave utility reinforcement learning (CURL) in
//! episodic loop-free MDPs whose losses and dynamics both change over time.
//!
//! The objective each episode is a convex function of the state-action
//! occupancy measure rather than a linear reward, which covers entropy
//! maximization and imitation alongside ordinary losses. The learner only
//! observes the noise that drove each transition, never the transition law
//! itself, and competes against a drifting comparator sequence (dynamic
//! regret).
//!
//! The crate is organized bottom-up:
//!
//! * [`mdp`]: occupancy algebra, layered kernels and policies, noise-driven
//!   dynamics, non-stationarity measures;
//! * [`objectives`]: the three convex objective families and adversarial
//!   schedule generators;
//! * [`lea`]: exponentially weighted averaging, the sleeping-experts
//!   reduction, and regret accounting;
//! * [`estimator`]: an online kernel estimator that aggregates windowed
//!   empirical estimates with one window opening per episode;
//! * [`mdcurl`]: the greedy mirror-descent CURL learner used as the
//!   restartable black box;
//! * [`meta`]: the meta-learner that spawns black-box instances on a
//!   learning-rate grid every episode and aggregates their occupancies;
//! * [`harness`]: experiment configuration, environment generation, oracle
//!   comparators, and regret traces.
//!
//! Start with the runnable programs under `examples/` for end-to-end usage.

pub mod error;
pub mod estimator;
pub mod harness;
pub mod lea;
pub mod mdcurl;
pub mod mdp;
pub mod meta;
pub mod objectives;
pub mod tol;

pub use error::{CurlError, Result};
pub use estimator::KernelEstimator;
pub use lea::WeightVector;
pub use mdcurl::GreedyMdCurl;
pub use mdp::{
    induce_occupancy, kernel_variation, occupancy_l1_bound_check, policy_from_occupancy,
    policy_variation, sample_episode, DynamicsMap, MdpShape, NoiseDynamics, NoiseModel, Occupancy,
    Policy, SaTensor, TransitionKernel, Trajectory, Variation,
};
pub use meta::{BlackboxKernelMode, LearningRateGrid, MetaCurl};
pub use objectives::{AdversaryKind, CurlObjective};
