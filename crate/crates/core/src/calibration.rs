//! Cost-model calibration against measured all-to-all time shares.
//!
//! Synchronous expert parallelism of a DiT-MoE-XL class model on four
//! devices spends 61.7%, 69.8% and 73.3% of its time in all-to-all at
//! batch 4, 8 and 16. [`ClusterConfig::calibrated`] reproduces that curve
//! on the XL-toy preset.
//!
//! With the per-layer sync cost split as
//!
//! ```text
//! comm    = 2 · (alpha + beta · payload)          payload ∝ batch
//! compute = 4 · overhead + macs(batch) / rate     macs ∝ batch
//! ```
//!
//! the share rises with batch only if a fixed per-kernel overhead is
//! present; without it the ratio is batch independent. `compute_rate` is
//! pinned to 1e9, and `alpha`, `beta` and `compute_overhead` were chosen by
//! grid search minimising the worst absolute share error over the three
//! batch points, measured with [`sync_comm_share`]. A pure least-squares
//! solution wants a slightly negative `alpha`; the search was restricted to
//! `alpha ≥ 0`.

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterConfig;
use crate::error::Result;
use crate::metrics::comm_share;
use crate::model::{ModelConfig, ToyModel};
use crate::policy::PolicyConfig;
use crate::schedule::{run_sampling, RunConfig, Strategy};

pub const TARGET_BATCHES: [usize; 3] = [4, 8, 16];
pub const TARGET_SHARES: [f64; 3] = [0.617, 0.698, 0.733];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub batch: usize,
    pub share: f64,
    pub target: f64,
}

impl CalibrationPoint {
    pub fn error_pp(&self) -> f64 {
        100.0 * (self.share - self.target)
    }
}

/// Fraction of a synchronous run's makespan spent waiting on all-to-all.
pub fn sync_comm_share(model: &ModelConfig, cluster: &ClusterConfig, seed: u64) -> Result<f64> {
    let m = ToyModel::init(model.clone(), seed)?;
    let x0 = m.initial_noise(seed);
    let cfg = RunConfig::new(Strategy::Synchronous, PolicyConfig::neutral(), cluster.clone()).without_events();
    Ok(comm_share(&run_sampling(&m, &x0, &cfg)?))
}

/// Shares at the three calibration batch sizes on `base` (batch replaced).
pub fn calibration_table(base: &ModelConfig, cluster: &ClusterConfig, seed: u64) -> Result<Vec<CalibrationPoint>> {
    TARGET_BATCHES
        .iter()
        .zip(TARGET_SHARES)
        .map(|(&batch, target)| {
            let model = ModelConfig { batch, ..base.clone() };
            Ok(CalibrationPoint {
                batch,
                share: sync_comm_share(&model, cluster, seed)?,
                target,
            })
        })
        .collect()
}
