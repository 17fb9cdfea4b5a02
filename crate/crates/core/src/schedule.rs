//! Sampling under synchronous, displaced and interweaved expert parallelism.
//!
//! Values and timing are produced together: every matrix the model computes
//! is charged to the simulated devices, and every collective the schedule
//! launches carries the bytes of the pairs it actually moves.
//!
//! Per layer the three schedules differ in which generation of routed
//! expert output they consume:
//!
//! | schedule     | async layer consumes | slots held     |
//! |--------------|----------------------|----------------|
//! | synchronous  | this step            | none           |
//! | displaced    | two steps back       | dispatch+combine |
//! | interweaved  | one step back        | combine        |
//!
//! A synchronous layer (step 0, warmup, periodic sync, or a layer in the
//! selective-sync set) always evaluates fresh and overwrites the slots with
//! this step's payloads, which is how the async pipeline primes itself.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::{plan_all_to_all, ClusterConfig, CommHandle, CommKind, Placement, SimTimeline};
use crate::error::{Result, SimError};
use crate::matrix::Matrix;
use crate::model::{
    combine_outputs, denoise_update, matrix_fingerprint, ActivationBlock, ModelConfig, MoeTrace, RouteDecision, ToyModel,
};
use crate::policy::{is_sync_step, reduced_slots, select_sync_layers, PolicyConfig, SlotPlan, TokenCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Synchronous,
    Displaced,
    Interweaved,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Synchronous, Strategy::Displaced, Strategy::Interweaved];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Synchronous => "synchronous",
            Strategy::Displaced => "displaced",
            Strategy::Interweaved => "interweaved",
        }
    }

    /// Staleness of an async layer in steady state.
    pub fn max_staleness(self) -> usize {
        match self {
            Strategy::Synchronous => 0,
            Strategy::Displaced => 2,
            Strategy::Interweaved => 1,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "synchronous" | "sync" => Ok(Strategy::Synchronous),
            "displaced" => Ok(Strategy::Displaced),
            "interweaved" => Ok(Strategy::Interweaved),
            other => Err(SimError::Config(format!(
                "unknown strategy {other:?} (expected synchronous, displaced or interweaved)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalenessRecord {
    pub layer: usize,
    pub used_step: usize,
    pub generated_step: usize,
    pub staleness: usize,
}

/// Routed traffic of the generations planned in one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTraffic {
    pub step: usize,
    /// `(token, slot)` pairs sent to an expert.
    pub routed_pairs: usize,
    /// Pairs that would be sent with conditional communication off.
    pub total_pairs: usize,
    /// `routed_pairs` rows, local or not.
    pub routed_bytes: u64,
    /// Bytes that actually cross devices, dispatch plus combine.
    pub comm_bytes: u64,
}

/// Tokens dispatched to the experts and not yet processed.
#[derive(Debug, Clone)]
pub struct DispatchPayload {
    pub generation: usize,
    pub tokens: Matrix,
    pub plan: SlotPlan,
    pub combine_bytes: Vec<u64>,
    pub handle: CommHandle,
}

/// Per-slot expert outputs on their way back to the token home devices,
/// with the gates of the step that produced them.
#[derive(Debug, Clone)]
pub struct CombinePayload {
    pub generation: usize,
    pub outputs: Vec<Matrix>,
    pub gates: Vec<f64>,
    pub handle: CommHandle,
}

#[derive(Debug, Clone, Default)]
pub struct LayerBuffers {
    pub dispatch_slot: Option<DispatchPayload>,
    pub combine_slot: Option<CombinePayload>,
}

impl LayerBuffers {
    pub fn occupied(&self) -> usize {
        self.dispatch_slot.is_some() as usize + self.combine_slot.is_some() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub policy: PolicyConfig,
    pub cluster: ClusterConfig,
    /// Keep per-step MoE inputs and top-1 routes.
    pub record_trace: bool,
    /// Keep the per-event timeline log (totals are kept either way).
    pub record_events: bool,
}

impl RunConfig {
    pub fn new(strategy: Strategy, policy: PolicyConfig, cluster: ClusterConfig) -> Self {
        Self {
            strategy,
            policy,
            cluster,
            record_trace: false,
            record_events: true,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.record_trace = true;
        self
    }

    pub fn without_events(mut self) -> Self {
        self.record_events = false;
        self
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub strategy: Strategy,
    pub model: ModelConfig,
    pub policy: PolicyConfig,
    pub final_sample: ActivationBlock,
    pub timeline: SimTimeline,
    /// One record per `(step, layer)`, in execution order.
    pub staleness: Vec<StalenessRecord>,
    pub traffic: Vec<StepTraffic>,
    pub peak_buffer_slots: usize,
    pub peak_buffer_bytes: u64,
    pub model_fingerprint: String,
    pub input_fingerprint: String,
    pub trace: Option<MoeTrace>,
}

impl RunResult {
    pub fn staleness_histogram(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for r in &self.staleness {
            *hist.entry(r.staleness).or_insert(0) += 1;
        }
        hist
    }

    /// Staleness values recorded at `step`, in layer order.
    pub fn staleness_at(&self, step: usize) -> Vec<usize> {
        self.staleness
            .iter()
            .filter(|r| r.used_step == step)
            .map(|r| r.staleness)
            .collect()
    }

    pub fn total_routed_bytes(&self) -> u64 {
        self.traffic.iter().map(|t| t.routed_bytes).sum()
    }

    pub fn total_comm_bytes(&self) -> u64 {
        self.timeline.total_comm_bytes()
    }
}

/// Runs `num_steps` denoising steps from `x0`.
///
/// Fails with [`SimError::NumericalDivergence`] as soon as a layer output
/// or the updated sample stops being finite.
pub fn run_sampling(model: &ToyModel, x0: &ActivationBlock, config: &RunConfig) -> Result<RunResult> {
    let mc = model.config();
    mc.validate()?;
    config.cluster.validate(mc.num_experts, mc.total_tokens())?;
    config.policy.validate(mc.num_layers)?;
    if x0.generated_step != 0 {
        return Err(SimError::Contract(format!(
            "initial sample must be generated at step 0, not {}",
            x0.generated_step
        )));
    }
    if x0.values.rows() != mc.total_tokens() || x0.values.cols() != mc.hidden_dim {
        return Err(SimError::Contract(format!(
            "initial sample is {}x{}, model expects {}x{}",
            x0.values.rows(),
            x0.values.cols(),
            mc.total_tokens(),
            mc.hidden_dim
        )));
    }
    Runner::new(model, x0, config)?.run()
}

struct Runner<'a> {
    model: &'a ToyModel,
    cfg: &'a RunConfig,
    x0: &'a ActivationBlock,
    placement: Placement,
    timeline: SimTimeline,
    buffers: Vec<LayerBuffers>,
    cache: TokenCache,
    sync_layers: Vec<bool>,
    pending: Option<(usize, DispatchPayload)>,
    staleness: Vec<StalenessRecord>,
    traffic: Vec<StepTraffic>,
    peak_slots: usize,
    trace: Option<MoeTrace>,
    rows_per_device: f64,
}

impl<'a> Runner<'a> {
    fn new(model: &'a ToyModel, x0: &'a ActivationBlock, cfg: &'a RunConfig) -> Result<Self> {
        let mc = model.config();
        let tokens = mc.total_tokens();
        let d = cfg.cluster.num_devices;
        let mut timeline = SimTimeline::new(cfg.cluster.clone());
        if !cfg.record_events {
            timeline = timeline.without_event_log();
        }
        Ok(Self {
            model,
            cfg,
            x0,
            placement: Placement::uniform(mc.num_experts, tokens, d)?,
            timeline,
            buffers: vec![LayerBuffers::default(); mc.num_layers],
            cache: TokenCache::new(mc.num_layers, tokens, mc.top_k),
            sync_layers: select_sync_layers(&cfg.policy.sync, mc.num_layers),
            pending: None,
            staleness: Vec::with_capacity(mc.num_steps * mc.num_layers),
            traffic: Vec::with_capacity(mc.num_steps),
            peak_slots: 0,
            trace: cfg.record_trace.then(MoeTrace::default),
            rows_per_device: (tokens / d) as f64,
        })
    }

    fn run(mut self) -> Result<RunResult> {
        let mc = self.model.config().clone();
        let mut x = self.x0.clone();
        for step in 0..mc.num_steps {
            self.traffic.push(StepTraffic {
                step,
                ..Default::default()
            });
            if let Some(trace) = &mut self.trace {
                trace.inputs.push(Vec::with_capacity(mc.num_layers));
                trace.top1.push(Vec::with_capacity(mc.num_layers));
            }
            let step_sync = step == 0 || is_sync_step(step, self.cfg.policy.warmup, self.cfg.policy.period);
            let mut h = x.values.clone();
            for layer in 0..mc.num_layers {
                h = self.layer(step, layer, &h, step_sync)?;
            }
            self.flush_pending()?;
            self.timeline
                .charge_compute_all(self.rows_per_device * mc.hidden_dim as f64, None, "update");
            x = denoise_update(&x, &h, mc.step_size, step)?;
            if !x.values.is_finite() {
                return Err(SimError::NumericalDivergence {
                    step,
                    layer: mc.num_layers,
                });
            }
        }
        let slot_bytes = (mc.total_tokens() * mc.hidden_dim * self.cfg.cluster.bytes_per_element) as u64;
        Ok(RunResult {
            strategy: self.cfg.strategy,
            model: mc.clone(),
            policy: self.cfg.policy.clone(),
            final_sample: x,
            timeline: self.timeline,
            staleness: self.staleness,
            traffic: self.traffic,
            peak_buffer_slots: self.peak_slots,
            peak_buffer_bytes: self.peak_slots as u64 * slot_bytes,
            model_fingerprint: self.model.fingerprint(),
            input_fingerprint: matrix_fingerprint(&self.x0.values),
            trace: self.trace,
        })
    }

    fn layer(&mut self, step: usize, layer: usize, h: &Matrix, step_sync: bool) -> Result<Matrix> {
        let mc = self.model.config();
        let (hidden, experts) = (mc.hidden_dim as f64, mc.num_experts as f64);
        let block = ActivationBlock {
            values: h.clone(),
            generated_step: step,
            layer,
        };
        let u = self.model.local_block(layer, &block)?.values;
        self.timeline
            .charge_compute_all(self.rows_per_device * hidden * hidden, Some(layer), "local");
        if !u.is_finite() {
            return Err(SimError::NumericalDivergence { step, layer });
        }
        let route = self.model.gate(layer, &u)?;
        self.timeline
            .charge_compute_all(self.rows_per_device * hidden * experts, Some(layer), "gate");
        if let Some(trace) = &mut self.trace {
            trace.inputs[step].push(u.clone());
            trace.top1[step].push(route.top1());
        }
        let policy = &self.cfg.policy;
        let reduced = reduced_slots(&route, policy.conditional, layer, step, policy.refresh_interval);
        let sync = self.cfg.strategy == Strategy::Synchronous || step_sync || self.sync_layers[layer];

        let out = match self.cfg.strategy {
            _ if sync => self.sync_layer(step, layer, &u, &route, &reduced)?,
            Strategy::Displaced if self.buffers[layer].occupied() == 2 => {
                self.displaced_layer(step, layer, &u, &route, &reduced)?
            }
            Strategy::Interweaved if self.buffers[layer].combine_slot.is_some() => {
                self.interweaved_layer(step, layer, &u, &route, &reduced)?
            }
            // Nothing buffered yet: behave synchronously and prime the slots.
            _ => self.sync_layer(step, layer, &u, &route, &reduced)?,
        };
        if !out.is_finite() {
            return Err(SimError::NumericalDivergence { step, layer });
        }
        Ok(out)
    }

    fn sync_layer(&mut self, step: usize, layer: usize, u: &Matrix, route: &RouteDecision, reduced: &[bool]) -> Result<Matrix> {
        let plan = self
            .cache
            .plan_refresh(layer, route, step, reduced, &self.cfg.policy, true)?;
        let (dispatch_bytes, combine_bytes) = self.account(step, &plan);
        let dispatch = self
            .timeline
            .launch_all_to_all(CommKind::Dispatch, &dispatch_bytes, Some(layer));
        self.flush_pending()?;
        self.timeline.wait_all(&dispatch, Some(layer));
        let outputs = self.run_experts(layer, step, u, &plan)?;
        let combine = self
            .timeline
            .launch_all_to_all(CommKind::Combine, &combine_bytes, Some(layer));
        self.timeline.wait_all(&combine, Some(layer));
        let out = self.consume(layer, u, &outputs, &plan.gates)?;
        self.record(layer, step, step);

        if !self.sync_layers[layer] {
            let slot = &mut self.buffers[layer];
            match self.cfg.strategy {
                Strategy::Synchronous => {}
                Strategy::Displaced => {
                    slot.dispatch_slot = Some(DispatchPayload {
                        generation: step,
                        tokens: u.clone(),
                        plan: plan.clone(),
                        combine_bytes,
                        handle: dispatch,
                    });
                    slot.combine_slot = Some(CombinePayload {
                        generation: step,
                        outputs,
                        gates: plan.gates,
                        handle: combine,
                    });
                }
                Strategy::Interweaved => {
                    slot.combine_slot = Some(CombinePayload {
                        generation: step,
                        outputs,
                        gates: plan.gates,
                        handle: combine,
                    });
                }
            }
            self.note_occupancy();
        }
        Ok(out)
    }

    /// Experts run on last step's dispatch, the combine of the step before
    /// that is consumed, and this step's tokens are dispatched for next step.
    fn displaced_layer(&mut self, step: usize, layer: usize, u: &Matrix, route: &RouteDecision, reduced: &[bool]) -> Result<Matrix> {
        let buffers = &mut self.buffers[layer];
        let (Some(inbound), Some(consumed)) = (buffers.dispatch_slot.take(), buffers.combine_slot.take()) else {
            return Err(SimError::Contract(format!("layer {layer} buffers not primed")));
        };
        self.timeline.wait_all(&inbound.handle, Some(layer));
        let outputs = self.run_experts(layer, inbound.generation, &inbound.tokens, &inbound.plan)?;
        let combine = self
            .timeline
            .launch_all_to_all(CommKind::Combine, &inbound.combine_bytes, Some(layer));
        self.buffers[layer].combine_slot = Some(CombinePayload {
            generation: inbound.generation,
            outputs,
            gates: inbound.plan.gates,
            handle: combine,
        });

        let plan = self
            .cache
            .plan_refresh(layer, route, step, reduced, &self.cfg.policy, false)?;
        let (dispatch_bytes, combine_bytes) = self.account(step, &plan);
        let dispatch = self
            .timeline
            .launch_all_to_all(CommKind::Dispatch, &dispatch_bytes, Some(layer));
        self.buffers[layer].dispatch_slot = Some(DispatchPayload {
            generation: step,
            tokens: u.clone(),
            plan,
            combine_bytes,
            handle: dispatch,
        });
        self.note_occupancy();

        self.timeline.wait_all(&consumed.handle, Some(layer));
        let out = self.consume(layer, u, &consumed.outputs, &consumed.gates)?;
        self.record(layer, step, consumed.generation);
        Ok(out)
    }

    /// This step's tokens are dispatched now and processed while the next
    /// layer computes; the combine produced last step is consumed.
    fn interweaved_layer(&mut self, step: usize, layer: usize, u: &Matrix, route: &RouteDecision, reduced: &[bool]) -> Result<Matrix> {
        let Some(consumed) = self.buffers[layer].combine_slot.take() else {
            return Err(SimError::Contract(format!("layer {layer} combine slot not primed")));
        };
        let plan = self
            .cache
            .plan_refresh(layer, route, step, reduced, &self.cfg.policy, false)?;
        let (dispatch_bytes, combine_bytes) = self.account(step, &plan);
        let dispatch = self
            .timeline
            .launch_all_to_all(CommKind::Dispatch, &dispatch_bytes, Some(layer));
        self.flush_pending()?;

        self.timeline.wait_all(&consumed.handle, Some(layer));
        let out = self.consume(layer, u, &consumed.outputs, &consumed.gates)?;
        self.record(layer, step, consumed.generation);
        self.pending = Some((
            layer,
            DispatchPayload {
                generation: step,
                tokens: u.clone(),
                plan,
                combine_bytes,
                handle: dispatch,
            },
        ));
        Ok(out)
    }

    /// Finishes the interweaved dispatch left in flight by the previous layer.
    fn flush_pending(&mut self) -> Result<()> {
        let Some((layer, p)) = self.pending.take() else {
            return Ok(());
        };
        self.timeline.wait_all(&p.handle, Some(layer));
        let outputs = self.run_experts(layer, p.generation, &p.tokens, &p.plan)?;
        let combine = self
            .timeline
            .launch_all_to_all(CommKind::Combine, &p.combine_bytes, Some(layer));
        self.buffers[layer].combine_slot = Some(CombinePayload {
            generation: p.generation,
            outputs,
            gates: p.plan.gates,
            handle: combine,
        });
        self.note_occupancy();
        Ok(())
    }

    /// Per-slot `tokens × hidden` outputs: fresh rows for active pairs,
    /// cached rows for the rest. Each expert sees its tokens as one batch.
    fn run_experts(&mut self, layer: usize, generation: usize, tokens: &Matrix, plan: &SlotPlan) -> Result<Vec<Matrix>> {
        let mc = self.model.config();
        let k = mc.top_k;
        let mut outputs = vec![Matrix::zeros(tokens.rows(), tokens.cols()); k];
        let mut by_expert: Vec<Vec<usize>> = vec![Vec::new(); mc.num_experts];
        for (p, (&id, &active)) in plan.expert_ids.iter().zip(&plan.active).enumerate() {
            if active {
                by_expert[id].push(p);
            } else {
                let row = plan.cached_rows[p]
                    .as_ref()
                    .ok_or_else(|| SimError::Contract("inactive pair without cached row".into()))?;
                outputs[p % k].row_mut(p / k).copy_from_slice(row);
            }
        }
        for (expert, pairs) in by_expert.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let rows: Vec<usize> = pairs.iter().map(|p| p / k).collect();
            let y = self.model.expert_forward(layer, expert, &tokens.gather_rows(&rows))?;
            for (i, &p) in pairs.iter().enumerate() {
                outputs[p % k].row_mut(p / k).copy_from_slice(y.row(i));
            }
        }
        self.cache.store_outputs(layer, generation, &outputs);
        let pair_macs = (2 * mc.hidden_dim * mc.expert_dim) as f64;
        let per_device = (tokens.rows() * k) as f64 * pair_macs / self.cfg.cluster.num_devices as f64;
        self.timeline.charge_compute_all(per_device, Some(layer), "experts");
        Ok(outputs)
    }

    /// `u + shared(u) + Σ gate · routed`, with `u` always fresh.
    fn consume(&mut self, layer: usize, u: &Matrix, outputs: &[Matrix], gates: &[f64]) -> Result<Matrix> {
        let mc = self.model.config();
        let shared = self.model.shared_forward(layer, u)?;
        let combined = combine_outputs(&shared, outputs, gates)?;
        let macs = self.rows_per_device
            * (mc.num_shared * 2 * mc.hidden_dim * mc.expert_dim + mc.top_k * mc.hidden_dim) as f64;
        self.timeline.charge_compute_all(macs, Some(layer), "shared+combine");
        u.add(&combined)
    }

    fn account(&mut self, step: usize, plan: &SlotPlan) -> (Vec<u64>, Vec<u64>) {
        let mc = self.model.config();
        let bpe = self.cfg.cluster.bytes_per_element;
        let a2a = plan_all_to_all(&plan.expert_ids, &plan.active, &self.placement, mc.top_k, mc.hidden_dim, bpe);
        let t = self.traffic.last_mut().expect("step started");
        debug_assert_eq!(t.step, step);
        t.routed_pairs += a2a.active_pairs;
        t.total_pairs += plan.active.len();
        t.routed_bytes += (a2a.active_pairs * mc.hidden_dim * bpe) as u64;
        t.comm_bytes += a2a.total_dispatch_bytes() + a2a.total_combine_bytes();
        (a2a.dispatch_bytes, a2a.combine_bytes)
    }

    fn record(&mut self, layer: usize, used_step: usize, generated_step: usize) {
        self.staleness.push(StalenessRecord {
            layer,
            used_step,
            generated_step,
            staleness: used_step - generated_step,
        });
    }

    fn note_occupancy(&mut self) {
        let occupied: usize = self.buffers.iter().map(LayerBuffers::occupied).sum();
        self.peak_slots = self.peak_slots.max(occupied);
    }
}
