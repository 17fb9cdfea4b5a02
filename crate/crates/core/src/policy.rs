//! Staleness policies: selective layer synchronization, conditional
//! communication with a per-pair expert-output cache, and periodic
//! synchronization after a warmup.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, SimError};
use crate::model::RouteDecision;
use crate::rng::hash_counters;

/// Which layers always run synchronously.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyncStrategy {
    #[default]
    None,
    /// Deeper half: `ceil(L/2) .. L-1`.
    Deep,
    /// Shallower half: `0 .. ceil(L/2)-1`.
    Shallow,
    /// Odd layer indices.
    Staggered,
    Explicit(Vec<usize>),
}

impl fmt::Display for SyncStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyncStrategy::None => write!(f, "none"),
            SyncStrategy::Deep => write!(f, "deep"),
            SyncStrategy::Shallow => write!(f, "shallow"),
            SyncStrategy::Staggered => write!(f, "staggered"),
            SyncStrategy::Explicit(layers) => {
                let parts: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
                write!(f, "explicit[{}]", parts.join(" "))
            }
        }
    }
}

/// Which `(token, slot)` pairs get a reduced refresh cadence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CondStrategy {
    #[default]
    Off,
    /// Every slot except the top-scoring one.
    LowScore,
    /// Only the top-scoring slot.
    HighScore,
    /// Per token, all slots but one uniformly drawn slot.
    Random { seed: u64 },
}

impl fmt::Display for CondStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CondStrategy::Off => write!(f, "off"),
            CondStrategy::LowScore => write!(f, "low-score"),
            CondStrategy::HighScore => write!(f, "high-score"),
            CondStrategy::Random { seed } => write!(f, "random({seed})"),
        }
    }
}

/// Periodic synchronization interval; `None` means never.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Period(pub Option<usize>);

impl Period {
    pub const NEVER: Period = Period(None);

    pub fn every(steps: usize) -> Self {
        Period(Some(steps))
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(p) => write!(f, "{p}"),
            None => write!(f, "inf"),
        }
    }
}

impl Serialize for Period {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Some(p) => s.serialize_u64(p as u64),
            None => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Period {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Steps(u64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Steps(p) => Ok(Period(Some(p as usize))),
            Raw::Word(w) if matches!(w.as_str(), "inf" | "never" | "infinity") => Ok(Period(None)),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "period must be a positive integer or \"inf\", got {w:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub sync: SyncStrategy,
    /// Steps between refreshes of a reduced pair; 1 refreshes every step.
    pub refresh_interval: usize,
    pub conditional: CondStrategy,
    /// Leading fully synchronous steps.
    pub warmup: usize,
    pub period: Period,
    /// Refresh a reduced pair whenever the router picks a different expert
    /// for its slot than the cached one.
    pub strict: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self::neutral()
    }
}

impl fmt::Display for PolicyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "sync={} cond={} R={} W={} P={}",
            self.sync, self.conditional, self.refresh_interval, self.warmup, self.period
        )?;
        if self.strict {
            write!(f, " strict")?;
        }
        Ok(())
    }
}

impl PolicyConfig {
    /// Leaves every schedule behaving exactly like its bare strategy.
    pub fn neutral() -> Self {
        Self {
            sync: SyncStrategy::None,
            refresh_interval: 1,
            conditional: CondStrategy::Off,
            warmup: 0,
            period: Period::NEVER,
            strict: false,
        }
    }

    /// Warmup and periodic synchronization only.
    pub fn periodic(warmup: usize, period: Period) -> Self {
        Self {
            warmup,
            period,
            ..Self::neutral()
        }
    }

    /// Deep-layer sync, low-score conditional communication refreshed every
    /// 5 steps, 6 warmup steps, a full sync every 10 steps.
    pub fn dice() -> Self {
        Self {
            sync: SyncStrategy::Deep,
            refresh_interval: 5,
            conditional: CondStrategy::LowScore,
            warmup: 6,
            period: Period::every(10),
            strict: false,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.refresh_interval == 0 {
            return Err(SimError::Config("policy.refresh_interval must be >= 1".into()));
        }
        if self.period.0 == Some(0) {
            return Err(SimError::Config("policy.period must be >= 1 or \"inf\"".into()));
        }
        if let SyncStrategy::Explicit(layers) = &self.sync {
            if let Some(bad) = layers.iter().find(|&&l| l >= num_layers) {
                return Err(SimError::Config(format!(
                    "policy.sync names layer {bad} but the model has {num_layers} layers"
                )));
            }
        }
        Ok(())
    }
}

/// Layer mask (`true` = always synchronous) for a sync strategy.
pub fn select_sync_layers(strategy: &SyncStrategy, num_layers: usize) -> Vec<bool> {
    let half = num_layers.div_ceil(2);
    (0..num_layers)
        .map(|l| match strategy {
            SyncStrategy::None => false,
            SyncStrategy::Deep => l >= half,
            SyncStrategy::Shallow => l < half,
            SyncStrategy::Staggered => l % 2 == 1,
            SyncStrategy::Explicit(layers) => layers.contains(&l),
        })
        .collect()
}

/// Warmup steps, then every `period` steps counted from the end of warmup.
pub fn is_sync_step(step: usize, warmup: usize, period: Period) -> bool {
    if step < warmup {
        return true;
    }
    match period.0 {
        Some(p) => (step - warmup).is_multiple_of(p),
        None => false,
    }
}

/// Token-major `tokens × top_k` mask of pairs on the reduced cadence.
///
/// `Random` draws, per token and per refresh window (`step / refresh_interval`),
/// one slot that stays fresh; the draw is a counter hash so it does not
/// depend on evaluation order.
pub fn reduced_slots(route: &RouteDecision, cond: CondStrategy, layer: usize, step: usize, refresh_interval: usize) -> Vec<bool> {
    let k = route.top_k();
    let tokens = route.num_tokens();
    let mut mask = vec![false; tokens * k];
    match cond {
        CondStrategy::Off => {}
        CondStrategy::LowScore => {
            for t in 0..tokens {
                mask[t * k + 1..(t + 1) * k].fill(true);
            }
        }
        CondStrategy::HighScore => {
            for t in 0..tokens {
                mask[t * k] = true;
            }
        }
        CondStrategy::Random { seed } => {
            let window = (step / refresh_interval.max(1)) as u64;
            for t in 0..tokens {
                let keep = (hash_counters(seed, &[layer as u64, t as u64, window]) % k as u64) as usize;
                for slot in 0..k {
                    mask[t * k + slot] = slot != keep;
                }
            }
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    /// Expert output for the refresh step; `None` until the experts have run.
    pub row: Option<Vec<f64>>,
    pub gate: f64,
    pub expert_id: usize,
    pub refresh_step: usize,
}

/// What one generation actually sends, and what it borrows from the cache.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotPlan {
    pub generation: usize,
    /// Token-major `tokens × top_k`; `true` pairs travel this step.
    pub active: Vec<bool>,
    /// Gate that scales each pair's output: fresh for active pairs, cached
    /// otherwise.
    pub gates: Vec<f64>,
    pub expert_ids: Vec<usize>,
    /// Cached output rows for inactive pairs.
    pub cached_rows: Vec<Option<Vec<f64>>>,
}

impl SlotPlan {
    pub fn active_pairs(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Per `(layer, token, slot)` cache of expert contributions for pairs on the
/// reduced cadence. Entries only exist for pairs that were reduced when
/// last refreshed.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCache {
    top_k: usize,
    num_tokens: usize,
    layers: Vec<Vec<Option<CacheEntry>>>,
}

impl TokenCache {
    pub fn new(num_layers: usize, num_tokens: usize, top_k: usize) -> Self {
        Self {
            top_k,
            num_tokens,
            layers: vec![vec![None; num_tokens * top_k]; num_layers],
        }
    }

    pub fn entry(&self, layer: usize, token: usize, slot: usize) -> Option<&CacheEntry> {
        self.layers[layer][token * self.top_k + slot].as_ref()
    }

    /// Decides which pairs of generation `step` are sent.
    ///
    /// A reduced pair is refreshed when it has no entry, when at least
    /// `refresh_interval` steps have passed since its last refresh, or (in
    /// strict mode) when the router moved the slot to another expert.
    /// `force_all` refreshes everything, as a synchronous layer does.
    /// Refreshed reduced pairs get a new entry whose row is filled in by
    /// [`TokenCache::store_outputs`].
    pub fn plan_refresh(
        &mut self,
        layer: usize,
        route: &RouteDecision,
        step: usize,
        reduced: &[bool],
        policy: &PolicyConfig,
        force_all: bool,
    ) -> Result<SlotPlan> {
        let pairs = self.num_tokens * self.top_k;
        if route.num_tokens() != self.num_tokens || route.top_k() != self.top_k || reduced.len() != pairs {
            return Err(SimError::Contract("route does not match cache shape".into()));
        }
        let ids = route.all_expert_ids();
        let fresh_gates = route.all_gates();
        let mut plan = SlotPlan {
            generation: step,
            active: vec![true; pairs],
            gates: fresh_gates.to_vec(),
            expert_ids: ids.to_vec(),
            cached_rows: vec![None; pairs],
        };
        let entries = &mut self.layers[layer];
        for p in 0..pairs {
            if !reduced[p] {
                continue;
            }
            let refresh = force_all
                || match &entries[p] {
                    None => true,
                    Some(e) => {
                        step - e.refresh_step >= policy.refresh_interval
                            || (policy.strict && e.expert_id != ids[p])
                    }
                };
            if refresh {
                entries[p] = Some(CacheEntry {
                    row: None,
                    gate: fresh_gates[p],
                    expert_id: ids[p],
                    refresh_step: step,
                });
            } else {
                let e = entries[p].as_ref().expect("checked above");
                let row = e.row.clone().ok_or_else(|| {
                    SimError::Contract(format!(
                        "cached row for layer {layer} pair {p} (refreshed at step {}) was never computed",
                        e.refresh_step
                    ))
                })?;
                plan.active[p] = false;
                plan.gates[p] = e.gate;
                plan.expert_ids[p] = e.expert_id;
                plan.cached_rows[p] = Some(row);
            }
        }
        Ok(plan)
    }

    /// Records freshly computed expert outputs of generation `step`
    /// (`outputs[slot]` is `tokens × hidden`) into the entries refreshed at
    /// that step.
    pub fn store_outputs(&mut self, layer: usize, step: usize, outputs: &[crate::matrix::Matrix]) {
        let k = self.top_k;
        for (p, entry) in self.layers[layer].iter_mut().enumerate() {
            if let Some(e) = entry {
                if e.refresh_step == step {
                    e.row = Some(outputs[p % k].row(p / k).to_vec());
                }
            }
        }
    }
}
