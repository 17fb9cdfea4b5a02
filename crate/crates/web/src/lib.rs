//! Browser bindings for the simulator. Each export takes and returns JSON
//! strings; `www/index.html` drives them.
//!
//! The JSON-level functions (`simulate_json`, `compare_json`,
//! `calibrate_json`) are plain Rust so they can be tested natively.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use dice_sim::calibration::calibration_table;
use dice_sim::cluster::ClusterConfig;
use dice_sim::experiment::{execute, execute_with_baseline, RunSpec};
use dice_sim::metrics::MetricsReport;
use dice_sim::model::ModelConfig;
use dice_sim::policy::{Period, PolicyConfig};
use dice_sim::schedule::Strategy;

/// Longest run the page may request.
pub const MAX_STEPS: usize = 100;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Request {
    pub strategy: Strategy,
    pub preset: String,
    pub batch: usize,
    pub num_steps: usize,
    pub seed: u64,
    pub policy: PolicyConfig,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

impl Default for Request {
    fn default() -> Self {
        Self {
            strategy: Strategy::Interweaved,
            preset: "xl-toy".into(),
            batch: 4,
            num_steps: 20,
            seed: 0,
            policy: PolicyConfig::periodic(6, Period::every(10)),
            alpha: None,
            beta: None,
        }
    }
}

impl Request {
    fn model(&self) -> Result<ModelConfig, String> {
        if self.num_steps == 0 || self.num_steps > MAX_STEPS {
            return Err(format!("num_steps must be in 1..={MAX_STEPS}"));
        }
        let base = ModelConfig::preset(&self.preset).ok_or_else(|| format!("unknown preset {:?}", self.preset))?;
        Ok(ModelConfig {
            batch: self.batch,
            num_steps: self.num_steps,
            ..base
        })
    }

    fn cluster(&self) -> ClusterConfig {
        let c = ClusterConfig::calibrated();
        ClusterConfig {
            alpha: self.alpha.unwrap_or(c.alpha),
            beta: self.beta.unwrap_or(c.beta),
            ..c
        }
    }

    fn spec(&self, label: &str, strategy: Strategy, policy: PolicyConfig) -> Result<RunSpec, String> {
        let spec = RunSpec {
            label: label.into(),
            model: self.model()?,
            cluster: self.cluster(),
            strategy,
            policy,
            seed: self.seed,
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

#[derive(Debug, Serialize)]
pub struct SimulateResponse {
    pub report: MetricsReport,
    /// `staleness[step][layer]`.
    pub staleness: Vec<Vec<usize>>,
    pub timeline: serde_json::Value,
}

fn parse(request: &str) -> Result<Request, String> {
    if request.trim().is_empty() {
        return Ok(Request::default());
    }
    serde_json::from_str(request).map_err(|e| format!("bad request: {e}"))
}

/// One run against its synchronous baseline, with the per-(step, layer)
/// staleness grid and the full timeline.
pub fn simulate_json(request: &str) -> Result<String, String> {
    let req = parse(request)?;
    let spec = req.spec(&req.strategy.to_string(), req.strategy, req.policy.clone())?;
    let baseline = execute(&spec.baseline(), false).map_err(|e| e.to_string())?;
    let run = execute(&spec, true).map_err(|e| e.to_string())?;
    let report = dice_sim::metrics::build_report(&spec.label, &run, &baseline).map_err(|e| e.to_string())?;
    let staleness = (0..spec.model.num_steps).map(|s| run.staleness_at(s)).collect();
    let timeline = serde_json::from_str(&run.timeline.to_json().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    serde_json::to_string(&SimulateResponse {
        report,
        staleness,
        timeline,
    })
    .map_err(|e| e.to_string())
}

/// Synchronous, displaced, interweaved and the full DICE preset on the
/// same model and noise.
pub fn compare_json(request: &str) -> Result<String, String> {
    let req = parse(request)?;
    let dice = PolicyConfig {
        warmup: req.policy.warmup,
        period: req.policy.period,
        ..PolicyConfig::dice()
    };
    let specs = [
        req.spec("synchronous", Strategy::Synchronous, PolicyConfig::neutral())?,
        req.spec("displaced", Strategy::Displaced, req.policy.clone())?,
        req.spec("interweaved", Strategy::Interweaved, req.policy.clone())?,
        req.spec("dice", Strategy::Interweaved, dice)?,
    ];
    let baseline = execute(&specs[0].baseline(), false).map_err(|e| e.to_string())?;
    let reports = specs
        .iter()
        .map(|s| execute_with_baseline(s, &baseline, false).map(|(r, _)| r))
        .collect::<dice_sim::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    serde_json::to_string(&reports).map_err(|e| e.to_string())
}

/// Synchronous all-to-all share of the makespan at batch 4, 8 and 16 under
/// the request's `alpha` and `beta`.
pub fn calibrate_json(request: &str) -> Result<String, String> {
    let req = parse(request)?;
    let table = calibration_table(&req.model()?, &req.cluster(), req.seed).map_err(|e| e.to_string())?;
    serde_json::to_string(&table).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn simulate(request: &str) -> Result<String, JsValue> {
    simulate_json(request).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn compare(request: &str) -> Result<String, JsValue> {
    compare_json(request).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn calibrate(request: &str) -> Result<String, JsValue> {
    calibrate_json(request).map_err(|e| JsValue::from_str(&e))
}
