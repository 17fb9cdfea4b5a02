//! Simulator for stale-activation expert parallelism in MoE diffusion
//! sampling: a toy MoE denoiser, an alpha-beta device timeline, the
//! synchronous / displaced / interweaved schedules, staleness policies, a
//! brute-force reference oracle and report emission.

#[cfg(feature = "cli")]
pub mod cli;
pub mod calibration;
pub mod cluster;
pub mod error;
pub mod experiment;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod schedule;

pub use cluster::{ClusterConfig, SimTimeline};
pub use error::{Result, SimError};
pub use model::{ActivationBlock, ModelConfig, ToyModel};
pub use policy::{CondStrategy, Period, PolicyConfig, SyncStrategy};
pub use schedule::{run_sampling, RunConfig, RunResult, Strategy};
