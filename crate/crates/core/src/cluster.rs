//! Device group, expert placement and an alpha-beta all-to-all cost model.
//!
//! Simulated time is kept in integer picoseconds so that clock arithmetic is
//! associative: two schedules that charge the same work in a different order
//! end on exactly the same clock.
//!
//! Collectives on a device execute in issue order on a single communication
//! stream. A collective starts once every participant has issued it and
//! every participant's stream is free, and completes for all participants at
//! `start + alpha + beta · max_payload`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

pub type Ticks = u64;

pub const TICKS_PER_SECOND: f64 = 1e12;

pub fn to_ticks(seconds: f64) -> Ticks {
    (seconds * TICKS_PER_SECOND).round() as Ticks
}

pub fn to_seconds(ticks: Ticks) -> f64 {
    ticks as f64 / TICKS_PER_SECOND
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub num_devices: usize,
    /// Seconds per collective launch.
    pub alpha: f64,
    /// Seconds per byte.
    pub beta: f64,
    pub bytes_per_element: usize,
    /// Multiply-accumulates per second.
    pub compute_rate: f64,
    /// Fixed seconds per compute kernel (launch latency).
    pub compute_overhead: f64,
}

impl ClusterConfig {
    /// Four devices calibrated so that synchronous expert parallelism on the
    /// XL-toy preset spends about 62% / 69% / 74% of its time in all-to-all
    /// at batch 4 / 8 / 16. See `calibration` for how the constants were
    /// fitted.
    pub fn calibrated() -> Self {
        Self {
            num_devices: 4,
            alpha: 5.0e-7,
            beta: 1.05e-7,
            bytes_per_element: 2,
            compute_rate: 1.0e9,
            compute_overhead: 2.4e-5,
        }
    }

    /// Free communication; only compute advances the clocks.
    pub fn zero_cost_comm(num_devices: usize) -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            num_devices,
            ..Self::calibrated()
        }
    }

    pub fn validate(&self, num_experts: usize, total_tokens: usize) -> Result<()> {
        if self.num_devices == 0 {
            return Err(SimError::Config("cluster.num_devices must be >= 1".into()));
        }
        if !num_experts.is_multiple_of(self.num_devices) {
            return Err(SimError::Config(format!(
                "model.num_experts ({num_experts}) must be divisible by cluster.num_devices ({})",
                self.num_devices
            )));
        }
        if !total_tokens.is_multiple_of(self.num_devices) {
            return Err(SimError::Config(format!(
                "batch x num_tokens ({total_tokens}) must be divisible by cluster.num_devices ({})",
                self.num_devices
            )));
        }
        let non_negative = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("compute_overhead", self.compute_overhead),
        ];
        for (name, v) in non_negative {
            if !v.is_finite() || v < 0.0 {
                return Err(SimError::Config(format!(
                    "cluster.{name} must be finite and >= 0"
                )));
            }
        }
        if !self.compute_rate.is_finite() || self.compute_rate <= 0.0 {
            return Err(SimError::Config("cluster.compute_rate must be > 0".into()));
        }
        if self.bytes_per_element == 0 {
            return Err(SimError::Config(
                "cluster.bytes_per_element must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Duration of one collective whose largest per-device payload is `bytes`.
    pub fn comm_ticks(&self, bytes: u64) -> Ticks {
        to_ticks(self.alpha + self.beta * bytes as f64)
    }

    pub fn compute_ticks(&self, elements: f64) -> Ticks {
        if elements <= 0.0 {
            return 0;
        }
        to_ticks(elements / self.compute_rate + self.compute_overhead)
    }
}

/// Experts are assigned in contiguous blocks of `E / D`; token rows are
/// pre-sharded in contiguous blocks of `tokens / D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    num_devices: usize,
    expert_device: Vec<usize>,
    token_home: Vec<usize>,
}

impl Placement {
    pub fn uniform(num_experts: usize, num_tokens: usize, num_devices: usize) -> Result<Self> {
        if num_devices == 0 || !num_experts.is_multiple_of(num_devices) || !num_tokens.is_multiple_of(num_devices) {
            return Err(SimError::Config(format!(
                "cannot place {num_experts} experts and {num_tokens} tokens evenly on {num_devices} devices"
            )));
        }
        let per_dev_experts = num_experts / num_devices;
        let per_dev_tokens = num_tokens / num_devices;
        Ok(Self {
            num_devices,
            expert_device: (0..num_experts).map(|e| e / per_dev_experts).collect(),
            token_home: (0..num_tokens).map(|t| t / per_dev_tokens).collect(),
        })
    }

    pub fn num_devices(&self) -> usize {
        self.num_devices
    }

    pub fn expert_device(&self, expert: usize) -> usize {
        self.expert_device[expert]
    }

    pub fn token_home(&self, token: usize) -> usize {
        self.token_home[token]
    }

    pub fn tokens_on(&self, device: usize) -> usize {
        self.token_home.iter().filter(|&&d| d == device).count()
    }
}

/// Bytes each device sends in the dispatch and combine collectives of one
/// MoE layer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AllToAllPlan {
    /// Outgoing dispatch bytes per token home device.
    pub dispatch_bytes: Vec<u64>,
    /// Outgoing combine bytes per expert device.
    pub combine_bytes: Vec<u64>,
    pub active_pairs: usize,
    pub remote_pairs: usize,
}

impl AllToAllPlan {
    pub fn total_dispatch_bytes(&self) -> u64 {
        self.dispatch_bytes.iter().sum()
    }

    pub fn total_combine_bytes(&self) -> u64 {
        self.combine_bytes.iter().sum()
    }
}

/// Counts the active `(token, slot)` pairs whose expert lives off the
/// token's home device. Local pairs cost nothing. `active` is token-major
/// `tokens × top_k`.
pub fn plan_all_to_all(
    expert_ids: &[usize],
    active: &[bool],
    placement: &Placement,
    top_k: usize,
    hidden_dim: usize,
    bytes_per_element: usize,
) -> AllToAllPlan {
    let row_bytes = (hidden_dim * bytes_per_element) as u64;
    let mut plan = AllToAllPlan {
        dispatch_bytes: vec![0; placement.num_devices()],
        combine_bytes: vec![0; placement.num_devices()],
        ..Default::default()
    };
    for (pair, (&expert, &on)) in expert_ids.iter().zip(active).enumerate() {
        if !on {
            continue;
        }
        plan.active_pairs += 1;
        let home = placement.token_home(pair / top_k);
        let target = placement.expert_device(expert);
        if home != target {
            plan.remote_pairs += 1;
            plan.dispatch_bytes[home] += row_bytes;
            plan.combine_bytes[target] += row_bytes;
        }
    }
    plan
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommKind {
    Dispatch,
    Combine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommHandle {
    pub id: u64,
    pub kind: CommKind,
    /// Latest clock among participants when the collective was issued.
    pub issue_time: Ticks,
    /// When the collective started on the communication stream.
    pub launch_time: Ticks,
    pub ready_time: Ticks,
    /// Largest per-device payload; the one that sets `ready_time`.
    pub payload_bytes: u64,
    /// Sum over participants.
    pub total_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Compute,
    CommLaunch,
    CommWaitStall,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineEvent {
    pub device: usize,
    pub kind: EventKind,
    pub start: Ticks,
    pub end: Ticks,
    pub layer: Option<usize>,
    pub what: &'static str,
}

impl TimelineEvent {
    pub fn label(&self) -> String {
        match self.layer {
            Some(l) => format!("L{l} {}", self.what),
            None => self.what.to_string(),
        }
    }
}

#[derive(Serialize)]
struct EventRecord {
    device: usize,
    kind: EventKind,
    start: f64,
    end: f64,
    label: String,
}

#[derive(Serialize)]
struct CollectiveRecord {
    id: u64,
    kind: CommKind,
    issue: f64,
    start: f64,
    ready: f64,
    payload_bytes: u64,
    total_bytes: u64,
}

#[derive(Serialize)]
struct TimelineExport {
    schema_version: u32,
    num_devices: usize,
    makespan: f64,
    events: Vec<EventRecord>,
    collectives: Vec<CollectiveRecord>,
}

/// Per-device clocks and the event log they produced.
#[derive(Debug, Clone)]
pub struct SimTimeline {
    config: ClusterConfig,
    clocks: Vec<Ticks>,
    stream_free: Vec<Ticks>,
    compute: Vec<Ticks>,
    stall: Vec<Ticks>,
    events: Vec<TimelineEvent>,
    collectives: Vec<CommHandle>,
    next_id: u64,
    record_events: bool,
}

impl SimTimeline {
    pub fn new(config: ClusterConfig) -> Self {
        let d = config.num_devices;
        Self {
            config,
            clocks: vec![0; d],
            stream_free: vec![0; d],
            compute: vec![0; d],
            stall: vec![0; d],
            events: Vec::new(),
            collectives: Vec::new(),
            next_id: 0,
            record_events: true,
        }
    }

    /// Keep clocks and totals but drop the per-event log.
    pub fn without_event_log(mut self) -> Self {
        self.record_events = false;
        self
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn num_devices(&self) -> usize {
        self.clocks.len()
    }

    pub fn clock(&self, device: usize) -> Ticks {
        self.clocks[device]
    }

    pub fn events(&self) -> &[TimelineEvent] {
        &self.events
    }

    pub fn collectives(&self) -> &[CommHandle] {
        &self.collectives
    }

    fn push(&mut self, device: usize, kind: EventKind, start: Ticks, end: Ticks, layer: Option<usize>, what: &'static str) {
        if self.record_events {
            self.events.push(TimelineEvent {
                device,
                kind,
                start,
                end,
                layer,
                what,
            });
        }
    }

    /// Advances `device` by the cost of `elements` multiply-accumulates.
    pub fn charge_compute(&mut self, device: usize, elements: f64, layer: Option<usize>, what: &'static str) {
        let ticks = self.config.compute_ticks(elements);
        if ticks == 0 {
            return;
        }
        let start = self.clocks[device];
        self.clocks[device] += ticks;
        self.compute[device] += ticks;
        self.push(device, EventKind::Compute, start, start + ticks, layer, what);
    }

    pub fn charge_compute_all(&mut self, elements: f64, layer: Option<usize>, what: &'static str) {
        for d in 0..self.num_devices() {
            self.charge_compute(d, elements, layer, what);
        }
    }

    /// Non-blocking launch of a collective with a single participant.
    pub fn launch_comm(&mut self, device: usize, kind: CommKind, payload_bytes: u64, layer: Option<usize>) -> CommHandle {
        let mut bytes = vec![0; self.num_devices()];
        bytes[device] = payload_bytes;
        self.launch_among(&[device], kind, &bytes, layer)
    }

    /// Non-blocking launch of an all-to-all among every device.
    /// `bytes_per_device[d]` is what device `d` sends.
    pub fn launch_all_to_all(&mut self, kind: CommKind, bytes_per_device: &[u64], layer: Option<usize>) -> CommHandle {
        let all: Vec<usize> = (0..self.num_devices()).collect();
        self.launch_among(&all, kind, bytes_per_device, layer)
    }

    fn launch_among(&mut self, devices: &[usize], kind: CommKind, bytes: &[u64], layer: Option<usize>) -> CommHandle {
        let issue_time = devices.iter().map(|&d| self.clocks[d]).max().unwrap_or(0);
        let launch_time = devices
            .iter()
            .map(|&d| self.clocks[d].max(self.stream_free[d]))
            .max()
            .unwrap_or(0);
        let payload_bytes = devices.iter().map(|&d| bytes[d]).max().unwrap_or(0);
        let total_bytes = devices.iter().map(|&d| bytes[d]).sum();
        let ready_time = launch_time + self.config.comm_ticks(payload_bytes);
        let what = match kind {
            CommKind::Dispatch => "dispatch",
            CommKind::Combine => "combine",
        };
        for &d in devices {
            self.stream_free[d] = ready_time;
            let at = self.clocks[d];
            self.push(d, EventKind::CommLaunch, at, at, layer, what);
        }
        let handle = CommHandle {
            id: self.next_id,
            kind,
            issue_time,
            launch_time,
            ready_time,
            payload_bytes,
            total_bytes,
        };
        self.next_id += 1;
        self.collectives.push(handle.clone());
        handle
    }

    /// Blocks `device` until `handle` completes. Always logs a wait event,
    /// of zero length when the data was already there.
    pub fn wait_comm(&mut self, device: usize, handle: &CommHandle, layer: Option<usize>) {
        let start = self.clocks[device];
        let end = start.max(handle.ready_time);
        self.clocks[device] = end;
        self.stall[device] += end - start;
        let what = match handle.kind {
            CommKind::Dispatch => "wait dispatch",
            CommKind::Combine => "wait combine",
        };
        self.push(device, EventKind::CommWaitStall, start, end, layer, what);
    }

    pub fn wait_all(&mut self, handle: &CommHandle, layer: Option<usize>) {
        for d in 0..self.num_devices() {
            self.wait_comm(d, handle, layer);
        }
    }

    pub fn makespan_ticks(&self) -> Ticks {
        self.clocks.iter().copied().max().unwrap_or(0)
    }

    pub fn makespan(&self) -> f64 {
        to_seconds(self.makespan_ticks())
    }

    pub fn compute_seconds(&self, device: usize) -> f64 {
        to_seconds(self.compute[device])
    }

    pub fn stall_seconds(&self, device: usize) -> f64 {
        to_seconds(self.stall[device])
    }

    /// Mean over devices of time spent blocked on communication.
    pub fn mean_stall_seconds(&self) -> f64 {
        let n = self.num_devices().max(1) as f64;
        self.stall.iter().map(|&t| to_seconds(t)).sum::<f64>() / n
    }

    pub fn total_comm_bytes(&self) -> u64 {
        self.collectives.iter().map(|c| c.total_bytes).sum()
    }

    /// Ordered event list as JSON (`device, kind, start, end, label`, times
    /// in seconds) plus the collective log.
    pub fn to_json(&self) -> Result<String> {
        let export = TimelineExport {
            schema_version: 1,
            num_devices: self.num_devices(),
            makespan: self.makespan(),
            events: self
                .events
                .iter()
                .map(|e| EventRecord {
                    device: e.device,
                    kind: e.kind,
                    start: to_seconds(e.start),
                    end: to_seconds(e.end),
                    label: e.label(),
                })
                .collect(),
            collectives: self
                .collectives
                .iter()
                .map(|c| CollectiveRecord {
                    id: c.id,
                    kind: c.kind,
                    issue: to_seconds(c.issue_time),
                    start: to_seconds(c.launch_time),
                    ready: to_seconds(c.ready_time),
                    payload_bytes: c.payload_bytes,
                    total_bytes: c.total_bytes,
                })
                .collect(),
        };
        serde_json::to_string(&export).map_err(|e| SimError::Serialize(e.to_string()))
    }
}
