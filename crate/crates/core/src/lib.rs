//! Personalized federated actor-critic on finite MDPs.
//!
//! A federation of `K` agents, each living in its own finite MDP, jointly
//! learns a shared `d x r` orthonormal critic subspace `B` together with
//! per-agent critic heads `omega^k` and per-agent softmax policies. Every
//! stationary quantity the round loop tracks (stationary distributions,
//! discounted visitations, exact values and policy gradients, TD(L) fixed
//! points) is also computable exactly by the [`oracle`] module, which is what
//! makes the tracked error metrics testable rather than merely plausible.
//!
//! Module map:
//! - [`env`]: finite MDPs, feature maps, federation generators, companion
//!   kernels, JSON serialization.
//! - [`oracle`]: dense linear-algebra solvers for every stationary quantity.
//! - [`critic`]: Markovian critic sampling, TD(L) errors, head and subspace
//!   updates, per-sample decomposition identities.
//! - [`actor`]: tabular softmax policies, reset-chain sampling, one-step
//!   actor TD errors, minibatch policy-gradient estimates.
//! - [`server`]: the federated round loop, QR aggregation, metrics, and
//!   comparison baselines.
//! - [`config`]: flat key-value run configuration with hard validation.
//! - [`verify`]: the seeded self-check suite behind `pfedac verify`.

pub mod actor;
pub mod config;
pub mod critic;
pub mod env;
pub mod oracle;
pub mod seeding;
pub mod server;
pub mod verify;

pub use actor::{ActorChain, ActorTrajectory, SoftmaxPolicy};
pub use config::{Mode, RunConfig};
pub use critic::{CriticChain, CriticParams, TdSample, Trajectory};
pub use env::{FeatureMap, Federation, FiniteMdp};
pub use oracle::{StationaryQuantities, TdSystem};
pub use server::{RoundMetrics, RunOptions, RunOutput, ServerState};
