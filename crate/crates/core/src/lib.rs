//! Continual reinforcement-learning laboratory.
//!
//! The crate trains PPO and Double-DQN agents on chained classic-control
//! tasks (CartPole, Acrobot, MountainCar with per-task observation-noise
//! offsets) and studies loss of plasticity through the lens of churn:
//! the change a mini-batch update induces in network outputs on data
//! outside the training batch.
//!
//! The main pieces:
//!
//! - [`nn`]: small dense networks in f64 with analytic reverse-mode
//!   gradients (finite-difference checked).
//! - [`optim`]: SGD / Adam, including relative-timestep and full resets
//!   at task switches.
//! - [`envs`]: deterministic re-implementations of the classic-control
//!   dynamics plus the continual task scheduler.
//! - [`agents`]: PPO (discrete) and Double DQN base agents.
//! - [`churn`]: churn measurement, the churn-reduction update step with
//!   auto-adjusted coefficient, NTK-based churn prediction, and the
//!   projective/orthogonal gradient split.
//! - [`baselines`]: L2-Init, weight clipping, dormant-neuron recycling,
//!   oracle resets.
//! - [`ntk`]: empirical NTK collection, approximate rank and off-diagonal
//!   statistics, and a regression sandbox for the error-dynamics law.
//! - [`sl`]: continual supervised learning (random-label / permuted
//!   pixels) over IDX-format image data.
//! - [`harness`]: experiment orchestration, metrics, CSV/JSON outputs,
//!   and score aggregation.

pub mod agents;
pub mod baselines;
pub mod churn;
pub mod envs;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod ntk;
pub mod optim;
pub mod rng;
pub mod sl;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use nn::{Activation, InitScheme, MlpConfig, Network, ParamVector};
