//! Declarative experiments: a single run, the four-way comparison and
//! parameter sweeps, each reported against a synchronous baseline on the
//! same model, seed and initial noise.
//!
//! Config schema (TOML, `schema_version = 1`):
//!
//! ```toml
//! schema_version = 1
//! seed = 0                  # falls back to $DICE_SIM_SEED, then 0
//! strategy = "interweaved"  # synchronous | displaced | interweaved
//! label = "my-run"          # optional
//!
//! [model]                   # preset first, then explicit fields on top
//! preset = "xl-toy"         # xl-toy | g-toy
//! batch = 8
//!
//! [cluster]                 # missing fields use the calibrated defaults
//! num_devices = 4
//!
//! [policy]
//! sync = "deep"             # none | deep | shallow | staggered | { explicit = [0, 3] }
//! conditional = "low-score" # off | low-score | high-score | { random = { seed = 7 } }
//! refresh_interval = 5
//! warmup = 6
//! period = 10               # or "inf"
//! strict = false
//!
//! [sweep]                   # every axis optional; cross product
//! batch = [4, 8, 16]
//! num_tokens = [16, 32]
//! refresh_interval = [1, 5]
//! period = [10, "inf"]
//! warmup = [0, 6]
//! strategy = ["displaced", "interweaved"]
//!
//! [output]
//! dir = "out"
//! format = "csv"            # csv | json
//! timeline = false
//! ```
//!
//! Sweep points are ordered with `batch` outermost, then `num_tokens`,
//! `refresh_interval`, `period`, `warmup` and `strategy` innermost.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterConfig;
use crate::error::{Result, SimError};
use crate::metrics::{build_report, MetricsReport, ReportFormat};
use crate::model::{ModelConfig, ToyModel};
use crate::policy::{Period, PolicyConfig};
use crate::schedule::{run_sampling, RunConfig, RunResult, Strategy};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "DICE_SIM_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub num_layers: Option<usize>,
    pub num_experts: Option<usize>,
    pub num_shared: Option<usize>,
    pub top_k: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub expert_dim: Option<usize>,
    pub num_tokens: Option<usize>,
    pub batch: Option<usize>,
    pub num_steps: Option<usize>,
    pub step_size: Option<f64>,
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let name = self.preset.as_deref().unwrap_or("xl-toy");
        let mut m = ModelConfig::preset(name)
            .ok_or_else(|| SimError::Config(format!("model.preset: unknown preset {name:?} (xl-toy or g-toy)")))?;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { m.$f = v; } )* };
        }
        set!(num_layers, num_experts, num_shared, top_k, hidden_dim, expert_dim, num_tokens, batch, num_steps, step_size);
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub num_devices: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub bytes_per_element: Option<usize>,
    pub compute_rate: Option<f64>,
    pub compute_overhead: Option<f64>,
}

impl ClusterSection {
    pub fn resolve(&self) -> ClusterConfig {
        let mut c = ClusterConfig::calibrated();
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(num_devices, alpha, beta, bytes_per_element, compute_rate, compute_overhead);
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub batch: Option<Vec<usize>>,
    pub num_tokens: Option<Vec<usize>>,
    pub refresh_interval: Option<Vec<usize>>,
    pub period: Option<Vec<Period>>,
    pub warmup: Option<Vec<usize>>,
    pub strategy: Option<Vec<Strategy>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub format: ReportFormat,
    pub timeline: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            format: ReportFormat::Csv,
            timeline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: Option<u64>,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    pub label: Option<String>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_strategy() -> Strategy {
    Strategy::Interweaved
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: None,
            strategy: default_strategy(),
            label: None,
            model: ModelSection::default(),
            cluster: ClusterSection::default(),
            policy: PolicyConfig::neutral(),
            sweep: SweepSection::default(),
            output: OutputSection::default(),
        }
    }
}

/// Everything one run needs, fully resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub model: ModelConfig,
    pub cluster: ClusterConfig,
    pub strategy: Strategy,
    pub policy: PolicyConfig,
    pub seed: u64,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.cluster.validate(self.model.num_experts, self.model.total_tokens())?;
        self.policy.validate(self.model.num_layers)
    }

    pub fn baseline(&self) -> RunSpec {
        RunSpec {
            label: "synchronous".into(),
            strategy: Strategy::Synchronous,
            policy: PolicyConfig::neutral(),
            ..self.clone()
        }
    }
}

impl ExperimentConfig {
    /// `seed` from the config, else `env_seed`, else 0.
    pub fn resolve_seed(&self, env_seed: Option<&str>) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match env_seed {
            Some(v) => v
                .trim()
                .parse()
                .map_err(|_| SimError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            None => Ok(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(SimError::Config(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let m = self.model.resolve()?;
        self.cluster.resolve().validate(m.num_experts, m.total_tokens())?;
        self.policy.validate(m.num_layers)
    }

    /// The single run described by the top level of the config.
    pub fn run_spec(&self, seed: u64) -> Result<RunSpec> {
        let spec = RunSpec {
            label: self.label.clone().unwrap_or_else(|| self.strategy.to_string()),
            model: self.model.resolve()?,
            cluster: self.cluster.resolve(),
            strategy: self.strategy,
            policy: self.policy.clone(),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Synchronous, displaced and interweaved under the configured policy,
    /// plus the DICE preset; all on the same model and input.
    pub fn compare_specs(&self, seed: u64) -> Result<Vec<RunSpec>> {
        let base = self.run_spec(seed)?;
        let mut specs: Vec<RunSpec> = [Strategy::Displaced, Strategy::Interweaved]
            .into_iter()
            .map(|strategy| RunSpec {
                label: strategy.to_string(),
                strategy,
                ..base.clone()
            })
            .collect();
        specs.insert(0, base.baseline());
        specs.push(RunSpec {
            label: "dice".into(),
            strategy: Strategy::Interweaved,
            policy: PolicyConfig::dice(),
            ..base
        });
        for s in &specs {
            s.validate()?;
        }
        Ok(specs)
    }

    /// Cross product of the sweep axes, in the documented order.
    pub fn sweep_specs(&self, seed: u64) -> Result<Vec<RunSpec>> {
        let base = RunSpec {
            label: String::new(),
            model: self.model.resolve()?,
            cluster: self.cluster.resolve(),
            strategy: self.strategy,
            policy: self.policy.clone(),
            seed,
        };
        let sw = &self.sweep;
        fn axis<T: Clone>(v: &Option<Vec<T>>, fallback: T) -> Result<Vec<(bool, T)>> {
            match v {
                None => Ok(vec![(false, fallback)]),
                Some(v) if v.is_empty() => Err(SimError::Config("sweep axes must not be empty lists".into())),
                Some(v) => Ok(v.iter().cloned().map(|x| (true, x)).collect()),
            }
        }
        let mut specs = Vec::new();
        for (sb, batch) in axis(&sw.batch, base.model.batch)? {
            for (st, tokens) in axis(&sw.num_tokens, base.model.num_tokens)? {
                for (sr, r) in axis(&sw.refresh_interval, base.policy.refresh_interval)? {
                    for (sp, p) in axis(&sw.period, base.policy.period)? {
                        for (sw_, w) in axis(&sw.warmup, base.policy.warmup)? {
                            for (ss, strategy) in axis(&sw.strategy, base.strategy)? {
                                let mut parts = Vec::new();
                                if sb {
                                    parts.push(format!("batch={batch}"));
                                }
                                if st {
                                    parts.push(format!("tokens={tokens}"));
                                }
                                if sr {
                                    parts.push(format!("R={r}"));
                                }
                                if sp {
                                    parts.push(format!("P={p}"));
                                }
                                if sw_ {
                                    parts.push(format!("W={w}"));
                                }
                                if ss {
                                    parts.push(format!("strategy={strategy}"));
                                }
                                let mut spec = base.clone();
                                spec.label = if parts.is_empty() {
                                    strategy.to_string()
                                } else {
                                    parts.join(" ")
                                };
                                spec.model.batch = batch;
                                spec.model.num_tokens = tokens;
                                spec.policy.refresh_interval = r;
                                spec.policy.period = p;
                                spec.policy.warmup = w;
                                spec.strategy = strategy;
                                spec.validate()?;
                                specs.push(spec);
                            }
                        }
                    }
                }
            }
        }
        Ok(specs)
    }
}

#[cfg(feature = "cli")]
mod load {
    use super::*;
    use std::path::Path;

    /// Parses `text` after applying `key=value` overrides (dotted keys;
    /// values are TOML literals, bare words are taken as strings).
    pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| SimError::Config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        ExperimentConfig::deserialize(toml::Value::Table(doc)).map_err(|e| SimError::Config(format!("config: {e}")))
    }

    pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        parse_config(&text, overrides).map_err(|e| match e {
            SimError::Config(msg) => SimError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn parse_value(raw: &str) -> toml::Value {
        let wrapped = format!("v = {raw}");
        match wrapped.parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(raw.to_string()),
        }
    }

    pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| SimError::Config(format!("--set {spec:?}: expected KEY=VALUE")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(SimError::Config(format!("--set {spec:?}: empty key segment")));
        }
        let mut table = doc;
        for seg in &path[..path.len() - 1] {
            let entry = table
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| SimError::Config(format!("--set {spec:?}: {seg} is not a table")))?;
        }
        table.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
        Ok(())
    }
}

#[cfg(feature = "cli")]
pub use load::{apply_override, load_config, parse_config};

/// Runs one spec. Timeline events are only kept when `keep_events` is set.
pub fn execute(spec: &RunSpec, keep_events: bool) -> Result<RunResult> {
    let model = ToyModel::init(spec.model.clone(), spec.seed)?;
    let x0 = model.initial_noise(spec.seed);
    let mut cfg = RunConfig::new(spec.strategy, spec.policy.clone(), spec.cluster.clone());
    if !keep_events {
        cfg = cfg.without_events();
    }
    run_sampling(&model, &x0, &cfg)
}

/// Runs a spec with its synchronous baseline and reports it. The timeline
/// JSON is returned when `keep_timeline` is set.
pub fn execute_with_baseline(spec: &RunSpec, baseline: &RunResult, keep_timeline: bool) -> Result<(MetricsReport, Option<String>)> {
    let run = execute(spec, keep_timeline)?;
    let report = build_report(&spec.label, &run, baseline)?;
    let timeline = if keep_timeline {
        Some(run.timeline.to_json()?)
    } else {
        None
    };
    Ok((report, timeline))
}

/// Maps `f` over `items` on `jobs` worker threads, keeping input order.
#[cfg(feature = "cli")]
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync + Send) -> Result<Vec<R>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| SimError::Config(format!("--jobs: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}

#[cfg(not(feature = "cli"))]
pub fn parallel_map<T: Sync, R: Send>(items: &[T], _jobs: usize, f: impl Fn(&T) -> R + Sync + Send) -> Result<Vec<R>> {
    Ok(items.iter().map(f).collect())
}

/// One report per spec plus its timeline JSON when requested. Baselines are
/// computed once per distinct model shape.
pub fn execute_all(specs: &[RunSpec], jobs: usize, keep_timeline: bool) -> Result<Vec<(MetricsReport, Option<String>)>> {
    let mut shapes: Vec<RunSpec> = Vec::new();
    for s in specs {
        let b = s.baseline();
        if !shapes.iter().any(|x| x.model == b.model && x.cluster == b.cluster && x.seed == b.seed) {
            shapes.push(b);
        }
    }
    let baselines: Vec<RunResult> = parallel_map(&shapes, jobs, |b| execute(b, false))?
        .into_iter()
        .collect::<Result<_>>()?;
    let results = parallel_map(specs, jobs, |s| {
        let i = shapes
            .iter()
            .position(|x| x.model == s.model && x.cluster == s.cluster && x.seed == s.seed)
            .expect("baseline computed");
        execute_with_baseline(s, &baselines[i], keep_timeline)
    })?;
    results.into_iter().collect()
}
