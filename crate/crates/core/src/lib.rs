//! Calibrated latent rewards for offline reinforcement learning.
//!
//! A conditional VAE embeds `(s, a)` pairs; a calibration penalty pulls expert
//! embeddings to a single point, and the distance to that point becomes an
//! intrinsic reward `exp(−c‖z − z_e‖²)`. Relabeled data then trains an
//! implicit Q-learning agent. The same machinery drives sparse-reward
//! relabeling, offline imitation, and unsupervised skill discovery on small
//! continuous point mazes.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cvae;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod numerics;
pub mod offline_rl;
pub mod parallel;
pub mod pipeline;
pub mod reward;
pub mod rng;
pub mod skills;

pub use cvae::{CvaeConfig, CvaeModel, GaussianLatent};
pub use dataset::{Dataset, Trajectory, Transition};
pub use envs::{BehaviorPolicy, PointMaze};
pub use error::{ClueError, Result};
pub use offline_rl::{IqlAgent, IqlConfig, RewardScaler};
pub use reward::{RewardLabeler, SamplingMode};
pub use skills::{ClusterModel, SkillLibrary};
