//! Brute-force reference for the stale recurrences.
//!
//! Keeps every MoE input of every step and indexes the history directly:
//! the routed term consumed at `(s, l)` is evaluated token by token from
//! `history[g][l]`, where `g` follows from the staleness law. Conditional
//! communication is replayed with explicit per-pair refresh bookkeeping.
//! No buffers, no timeline.

use serde::Serialize;

use crate::cluster::ClusterConfig;
use crate::error::{Result, SimError};
use crate::matrix::Matrix;
use crate::model::{denoise_update, ActivationBlock, ModelConfig, RouteDecision, ToyModel};
use crate::policy::{is_sync_step, reduced_slots, select_sync_layers, CondStrategy, Period, PolicyConfig, SyncStrategy};
use crate::rng::SplitMix64;
use crate::schedule::{run_sampling, RunConfig, Strategy};

pub const MAX_LAYERS: usize = 4;
pub const MAX_EXPERTS: usize = 8;
pub const MAX_ROWS: usize = 32;
pub const MAX_STEPS: usize = 16;

/// Test hook: consume `extra_staleness` steps further back than the law
/// allows on every stale layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OracleOptions {
    pub extra_staleness: usize,
}

#[derive(Debug, Clone)]
pub struct OracleLayer {
    pub moe_input: Matrix,
    pub route: RouteDecision,
    /// `Σ_slot gate · expert output`, without the shared experts.
    pub routed_output: Matrix,
    /// Step that generated the consumed routed output.
    pub provenance: usize,
}

#[derive(Debug, Clone)]
pub struct OracleTrace {
    /// `[step][layer]`
    pub steps: Vec<Vec<OracleLayer>>,
    pub final_sample: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PairSource {
    step: usize,
    expert: usize,
    gate: f64,
}

pub fn oracle_run(model: &ToyModel, x0: &ActivationBlock, strategy: Strategy, policy: &PolicyConfig) -> Result<OracleTrace> {
    oracle_run_with(model, x0, strategy, policy, OracleOptions::default())
}

pub fn oracle_run_with(
    model: &ToyModel,
    x0: &ActivationBlock,
    strategy: Strategy,
    policy: &PolicyConfig,
    options: OracleOptions,
) -> Result<OracleTrace> {
    let mc = model.config();
    let rows = mc.total_tokens();
    if mc.num_layers > MAX_LAYERS || mc.num_experts > MAX_EXPERTS || rows > MAX_ROWS || mc.num_steps > MAX_STEPS {
        return Err(SimError::OracleRefused(format!(
            "L={} E={} rows={} S={} (limits {MAX_LAYERS}/{MAX_EXPERTS}/{MAX_ROWS}/{MAX_STEPS})",
            mc.num_layers, mc.num_experts, rows, mc.num_steps
        )));
    }
    policy.validate(mc.num_layers)?;
    let (layers, k) = (mc.num_layers, mc.top_k);
    let always_sync = select_sync_layers(&policy.sync, layers);
    let sync = |s: usize, l: usize| {
        strategy == Strategy::Synchronous || s == 0 || always_sync[l] || is_sync_step(s, policy.warmup, policy.period)
    };

    let mut inputs: Vec<Vec<Matrix>> = Vec::new();
    let mut sources: Vec<Vec<Vec<PairSource>>> = Vec::new();
    let mut last_refresh: Vec<Vec<Option<PairSource>>> = vec![vec![None; rows * k]; layers];
    let mut steps = Vec::new();
    let mut x = x0.clone();

    for s in 0..mc.num_steps {
        let mut h = x.values.clone();
        inputs.push(Vec::new());
        sources.push(Vec::new());
        let mut step_layers = Vec::new();
        for l in 0..layers {
            let block = ActivationBlock {
                values: h,
                generated_step: s,
                layer: l,
            };
            let u = model.local_block(l, &block)?.values;
            if !u.is_finite() {
                return Err(SimError::NumericalDivergence { step: s, layer: l });
            }
            let route = model.gate(l, &u)?;

            // Which pairs of this generation travel, and where the others
            // take their contribution from.
            let reduced = reduced_slots(&route, policy.conditional, l, s, policy.refresh_interval);
            let mut src = Vec::with_capacity(rows * k);
            for t in 0..rows {
                for slot in 0..k {
                    let p = t * k + slot;
                    let fresh = PairSource {
                        step: s,
                        expert: route.expert_ids(t)[slot],
                        gate: route.gates(t)[slot],
                    };
                    if !reduced[p] {
                        src.push(fresh);
                        continue;
                    }
                    let reuse = match last_refresh[l][p] {
                        Some(prev) if !sync(s, l) => {
                            s - prev.step < policy.refresh_interval && !(policy.strict && prev.expert != fresh.expert)
                        }
                        _ => false,
                    };
                    if reuse {
                        src.push(last_refresh[l][p].unwrap());
                    } else {
                        last_refresh[l][p] = Some(fresh);
                        src.push(fresh);
                    }
                }
            }
            inputs[s].push(u.clone());
            sources[s].push(src);

            let mut g = if sync(s, l) {
                s
            } else {
                match strategy {
                    Strategy::Synchronous => s,
                    Strategy::Interweaved => s - 1,
                    Strategy::Displaced if sync(s - 1, l) => s - 1,
                    Strategy::Displaced => s - 2,
                }
            };
            if g < s {
                g = g.saturating_sub(options.extra_staleness);
            }

            let shared = model.shared_forward(l, &u)?;
            let mut out = Matrix::zeros(rows, mc.hidden_dim);
            let mut routed = Matrix::zeros(rows, mc.hidden_dim);
            for t in 0..rows {
                let mut acc = shared.row(t).to_vec();
                let mut routed_acc = vec![0.0; mc.hidden_dim];
                for slot in 0..k {
                    let pair = sources[g][l][t * k + slot];
                    let token = inputs[pair.step][l].gather_rows(&[t]);
                    let y = model.expert_forward(l, pair.expert, &token)?;
                    for c in 0..mc.hidden_dim {
                        acc[c] += pair.gate * y.get(0, c);
                        routed_acc[c] += pair.gate * y.get(0, c);
                    }
                }
                for c in 0..mc.hidden_dim {
                    out.set(t, c, u.get(t, c) + acc[c]);
                }
                routed.row_mut(t).copy_from_slice(&routed_acc);
            }
            if !out.is_finite() {
                return Err(SimError::NumericalDivergence { step: s, layer: l });
            }
            step_layers.push(OracleLayer {
                moe_input: u,
                route,
                routed_output: routed,
                provenance: g,
            });
            h = out;
        }
        steps.push(step_layers);
        x = denoise_update(&x, &h, mc.step_size, s)?;
        if !x.values.is_finite() {
            return Err(SimError::NumericalDivergence { step: s, layer: layers });
        }
    }
    Ok(OracleTrace {
        steps,
        final_sample: x.values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Coordinate {
    /// `None` for the final sample.
    pub step: Option<usize>,
    pub layer: Option<usize>,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceComparison {
    pub max_abs_diff: f64,
    /// First element whose bits differ, per-step MoE inputs first.
    pub first_divergence: Option<Coordinate>,
}

impl TraceComparison {
    pub fn identical(&self) -> bool {
        self.first_divergence.is_none()
    }
}

fn compare_into(a: &Matrix, b: &Matrix, at: (Option<usize>, Option<usize>), acc: &mut TraceComparison) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(SimError::Contract(format!(
            "cannot compare {}x{} with {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            let (x, y) = (a.get(r, c), b.get(r, c));
            if x.to_bits() != y.to_bits() {
                let d = (x - y).abs();
                if d > acc.max_abs_diff || d.is_nan() {
                    acc.max_abs_diff = if d.is_nan() { f64::INFINITY } else { d };
                }
                acc.first_divergence.get_or_insert(Coordinate {
                    step: at.0,
                    layer: at.1,
                    row: r,
                    col: c,
                });
            }
        }
    }
    Ok(())
}

pub fn compare_samples(a: &Matrix, b: &Matrix) -> Result<TraceComparison> {
    let mut acc = TraceComparison {
        max_abs_diff: 0.0,
        first_divergence: None,
    };
    compare_into(a, b, (None, None), &mut acc)?;
    Ok(acc)
}

/// Compares per-step MoE inputs (when both sides have them) and the final
/// samples.
pub fn compare_traces(a: &OracleTrace, b: &OracleTrace) -> Result<TraceComparison> {
    let mut acc = TraceComparison {
        max_abs_diff: 0.0,
        first_divergence: None,
    };
    for (s, (la, lb)) in a.steps.iter().zip(&b.steps).enumerate() {
        for (l, (x, y)) in la.iter().zip(lb).enumerate() {
            compare_into(&x.moe_input, &y.moe_input, (Some(s), Some(l)), &mut acc)?;
        }
    }
    compare_into(&a.final_sample, &b.final_sample, (None, None), &mut acc)?;
    Ok(acc)
}

/// Same as [`compare_traces`] against a simulator run recorded with a trace.
pub fn compare_with_run(oracle: &OracleTrace, run: &crate::schedule::RunResult) -> Result<TraceComparison> {
    let mut acc = TraceComparison {
        max_abs_diff: 0.0,
        first_divergence: None,
    };
    if let Some(trace) = &run.trace {
        for (s, (la, lb)) in oracle.steps.iter().zip(&trace.inputs).enumerate() {
            for (l, (x, y)) in la.iter().zip(lb).enumerate() {
                compare_into(&x.moe_input, y, (Some(s), Some(l)), &mut acc)?;
            }
        }
    }
    compare_into(&oracle.final_sample, &run.final_sample.values, (None, None), &mut acc)?;
    Ok(acc)
}

/// One small instance of the equivalence grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCase {
    pub index: usize,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub noise_seed: u64,
    pub num_devices: usize,
    pub strategy: Strategy,
    pub policy: PolicyConfig,
}

/// `n` small configurations. Strategy, sync strategy, conditional strategy
/// and refresh interval cycle through every combination (3·4·4·3 = 144)
/// before repeating; the remaining knobs are drawn from `seed`.
pub fn validation_grid(n: usize, seed: u64) -> Vec<GridCase> {
    let mut rng = SplitMix64::new(seed);
    let mut pick = |n: usize| (rng.next_u64() % n as u64) as usize;
    let syncs = [SyncStrategy::None, SyncStrategy::Deep, SyncStrategy::Shallow, SyncStrategy::Staggered];
    let refresh = [1, 2, 5];
    let warmups = [0, 1, 6];
    let periods = [Period::every(3), Period::every(10), Period::NEVER];
    (0..n)
        .map(|i| {
            let strategy = Strategy::ALL[i % 3];
            let sync = syncs[(i / 3) % 4].clone();
            let conditional = match (i / 12) % 4 {
                0 => CondStrategy::Off,
                1 => CondStrategy::LowScore,
                2 => CondStrategy::HighScore,
                _ => CondStrategy::Random { seed: i as u64 },
            };
            let refresh_interval = refresh[(i / 48) % 3];
            let num_experts = [2, 4, 8][pick(3)];
            let top_k = 1 + pick(num_experts.min(3));
            let num_devices = [1, 2, 4][pick(3)].min(num_experts);
            let batch = 1 + pick(2);
            let num_tokens = num_devices * (1 + pick(MAX_ROWS / (batch * num_devices)));
            let model = ModelConfig {
                num_layers: 1 + pick(MAX_LAYERS),
                num_experts,
                num_shared: pick(3),
                top_k,
                hidden_dim: [3, 4, 6, 8][pick(4)],
                expert_dim: [4, 8][pick(2)],
                num_tokens,
                batch,
                num_steps: 2 + pick(MAX_STEPS - 1),
                step_size: 0.01 + 0.01 * pick(10) as f64,
            };
            GridCase {
                index: i,
                model,
                model_seed: rng_u64(seed, i, 1),
                noise_seed: rng_u64(seed, i, 2),
                num_devices,
                strategy,
                policy: PolicyConfig {
                    sync,
                    refresh_interval,
                    conditional,
                    warmup: warmups[pick(3)],
                    period: periods[pick(3)],
                    strict: pick(4) == 0,
                },
            }
        })
        .collect()
}

fn rng_u64(seed: u64, index: usize, stream: u64) -> u64 {
    crate::rng::hash_counters(seed, &[index as u64, stream])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridFailure {
    pub case: GridCase,
    pub comparison: TraceComparison,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationOutcome {
    pub cases: usize,
    pub failures: Vec<GridFailure>,
}

impl ValidationOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs the simulator and the oracle on one grid case.
pub fn check_case(case: &GridCase, options: OracleOptions) -> Result<TraceComparison> {
    let model = ToyModel::init(case.model.clone(), case.model_seed)?;
    let x0 = model.initial_noise(case.noise_seed);
    let cluster = ClusterConfig {
        num_devices: case.num_devices,
        ..ClusterConfig::calibrated()
    };
    let cfg = RunConfig::new(case.strategy, case.policy.clone(), cluster)
        .with_trace()
        .without_events();
    let run = run_sampling(&model, &x0, &cfg)?;
    let oracle = oracle_run_with(&model, &x0, case.strategy, &case.policy, options)?;
    compare_with_run(&oracle, &run)
}

pub fn run_validation(n: usize, seed: u64, options: OracleOptions) -> Result<ValidationOutcome> {
    let mut failures = Vec::new();
    for case in validation_grid(n, seed) {
        let comparison = check_case(&case, options)?;
        if !comparison.identical() {
            failures.push(GridFailure { case, comparison });
        }
    }
    Ok(ValidationOutcome { cases: n, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(layers: usize, steps: usize) -> ToyModel {
        let cfg = ModelConfig {
            num_layers: layers,
            num_experts: 4,
            num_shared: 1,
            top_k: 2,
            hidden_dim: 4,
            expert_dim: 6,
            num_tokens: 4,
            batch: 2,
            num_steps: steps,
            step_size: 0.05,
        };
        ToyModel::init(cfg, 8).unwrap()
    }

    #[test]
    fn refuses_large_instances() {
        let model = ToyModel::init(ModelConfig::xl_toy(), 0).unwrap();
        let x0 = model.initial_noise(0);
        assert!(matches!(
            oracle_run(&model, &x0, Strategy::Synchronous, &PolicyConfig::neutral()),
            Err(SimError::OracleRefused(_))
        ));
    }

    #[test]
    fn synchronous_oracle_is_plain_forward_sampling() {
        let model = tiny(2, 5);
        let x0 = model.initial_noise(1);
        let trace = oracle_run(&model, &x0, Strategy::Synchronous, &PolicyConfig::neutral()).unwrap();
        // plain loop written out once more
        let mut x = x0.clone();
        for s in 0..5 {
            let mut h = x.values.clone();
            for l in 0..2 {
                let u = model
                    .local_block(l, &ActivationBlock { values: h, generated_step: s, layer: l })
                    .unwrap()
                    .values;
                let route = model.gate(l, &u).unwrap();
                let shared = model.shared_forward(l, &u).unwrap();
                let mut outs = Vec::new();
                for slot in 0..2 {
                    let mut m = Matrix::zeros(8, 4);
                    for t in 0..8 {
                        let y = model.expert_forward(l, route.expert_ids(t)[slot], &u.gather_rows(&[t])).unwrap();
                        m.row_mut(t).copy_from_slice(y.row(0));
                    }
                    outs.push(m);
                }
                let combined = crate::model::combine_outputs(&shared, &outs, route.all_gates()).unwrap();
                h = u.add(&combined).unwrap();
            }
            x = denoise_update(&x, &h, 0.05, s).unwrap();
        }
        assert_eq!(trace.final_sample, x.values);
        for (s, layers) in trace.steps.iter().enumerate() {
            assert!(layers.iter().all(|l| l.provenance == s));
        }
    }

    #[test]
    fn interweaved_provenance_is_previous_step() {
        let model = tiny(2, 6);
        let x0 = model.initial_noise(2);
        let policy = PolicyConfig::periodic(1, Period::NEVER);
        let trace = oracle_run(&model, &x0, Strategy::Interweaved, &policy).unwrap();
        for (s, layers) in trace.steps.iter().enumerate() {
            for l in layers {
                assert_eq!(l.provenance, s.saturating_sub(1));
            }
        }
    }

    #[test]
    fn displaced_provenance_law() {
        let model = tiny(2, 8);
        let x0 = model.initial_noise(2);
        let policy = PolicyConfig::periodic(2, Period::every(4));
        let trace = oracle_run(&model, &x0, Strategy::Displaced, &policy).unwrap();
        let expected = [0, 1, 2, 2, 2, 3, 6, 6];
        for (s, layers) in trace.steps.iter().enumerate() {
            for l in layers {
                assert_eq!(l.provenance, expected[s], "step {s}");
            }
        }
    }

    #[test]
    fn comparison_reports_coordinates() {
        let model = tiny(1, 3);
        let x0 = model.initial_noise(3);
        let a = oracle_run(&model, &x0, Strategy::Synchronous, &PolicyConfig::neutral()).unwrap();
        assert!(compare_traces(&a, &a).unwrap().identical());
        assert_eq!(compare_traces(&a, &a).unwrap().max_abs_diff, 0.0);

        let mut b = a.clone();
        let v = b.final_sample.get(2, 1);
        b.final_sample.set(2, 1, v + 0.25);
        let cmp = compare_traces(&a, &b).unwrap();
        assert_eq!(
            cmp.first_divergence,
            Some(Coordinate {
                step: None,
                layer: None,
                row: 2,
                col: 1
            })
        );
        assert!((cmp.max_abs_diff - 0.25).abs() < 1e-12);

        let stale = oracle_run(&model, &x0, Strategy::Interweaved, &PolicyConfig::neutral()).unwrap();
        assert!(compare_traces(&a, &stale).unwrap().max_abs_diff > 0.0);
    }

    #[test]
    fn grid_is_reproducible_and_within_limits() {
        let a = validation_grid(300, 5);
        assert_eq!(a, validation_grid(300, 5));
        for c in &a {
            assert!(c.model.num_layers <= MAX_LAYERS);
            assert!(c.model.total_tokens() <= MAX_ROWS);
            assert!(c.model.num_steps <= MAX_STEPS);
            assert_eq!(c.model.num_experts % c.num_devices, 0);
            assert_eq!(c.model.total_tokens() % c.num_devices, 0);
            c.model.validate().unwrap();
        }
        assert!(validation_grid(0, 5).is_empty());
    }

    #[test]
    fn small_grid_matches() {
        let out = run_validation(24, 11, OracleOptions::default()).unwrap();
        assert!(out.passed(), "{:?}", out.failures.first());
    }

    #[test]
    fn injected_staleness_is_caught() {
        let out = run_validation(24, 11, OracleOptions { extra_staleness: 1 }).unwrap();
        assert!(!out.passed());
        assert!(out.failures[0].comparison.first_divergence.is_some());
    }
}
