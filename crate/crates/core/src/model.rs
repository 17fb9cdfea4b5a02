//! A small deterministic MoE denoiser.
//!
//! Each layer is a residual gelu mixing block followed by an MoE stage made
//! of routed experts (top-k softmax gating) plus always-on shared experts:
//!
//! ```text
//! u      = gelu(h · W_mix) + h
//! moe(u) = Σ_shared expert(u) + Σ_slot gate · expert_slot(u)
//! h'     = u + moe(u)
//! ```
//!
//! Sampling repeats the layer stack for `num_steps` steps and applies
//! `x ← x − η · y` after each pass.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SimError};
use crate::matrix::Matrix;
use crate::rng::SplitMix64;

/// Seeds the initial-noise stream so it never coincides with the weight stream.
const NOISE_STREAM_TAG: u64 = 0x6E6F_6973_655F_7830;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_experts: usize,
    pub num_shared: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    pub expert_dim: usize,
    /// Tokens per sample.
    pub num_tokens: usize,
    pub batch: usize,
    pub num_steps: usize,
    pub step_size: f64,
}

impl ModelConfig {
    /// One pass through the 28-layer XL-toy stack amplifies its input about
    /// 1000x, so the update has to be small for the trajectory to stay
    /// bounded. At this value the synchronous run keeps adjacent-step MoE
    /// inputs at cosine ~0.996 and top-1 routing agreement ~0.98.
    pub const DEFAULT_STEP_SIZE: f64 = 1e-4;

    /// 28 layers, 8 routed experts, 2 shared experts.
    pub fn xl_toy() -> Self {
        Self {
            num_layers: 28,
            num_experts: 8,
            num_shared: 2,
            top_k: 2,
            hidden_dim: 16,
            expert_dim: 32,
            num_tokens: 16,
            batch: 4,
            num_steps: 50,
            step_size: Self::DEFAULT_STEP_SIZE,
        }
    }

    /// 40 layers, 16 routed experts, 2 shared experts.
    pub fn g_toy() -> Self {
        Self {
            num_layers: 40,
            num_experts: 16,
            ..Self::xl_toy()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "xl-toy" => Some(Self::xl_toy()),
            "g-toy" => Some(Self::g_toy()),
            _ => None,
        }
    }

    /// Token rows across the whole batch.
    pub fn total_tokens(&self) -> usize {
        self.batch * self.num_tokens
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_experts", self.num_experts),
            ("top_k", self.top_k),
            ("hidden_dim", self.hidden_dim),
            ("expert_dim", self.expert_dim),
            ("num_tokens", self.num_tokens),
            ("batch", self.batch),
            ("num_steps", self.num_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SimError::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.top_k > self.num_experts {
            return Err(SimError::Config(format!(
                "model.top_k ({}) exceeds model.num_experts ({})",
                self.top_k, self.num_experts
            )));
        }
        if !self.step_size.is_finite() || self.step_size < 0.0 {
            return Err(SimError::Config(
                "model.step_size must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    /// `hidden × expert_dim`
    pub w1: Matrix,
    /// `expert_dim × hidden`
    pub w2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub mix: Matrix,
    pub gate: Matrix,
    pub experts: Vec<ExpertWeights>,
    pub shared: Vec<ExpertWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    layers: Vec<LayerWeights>,
}

/// A token-activation matrix tagged with the step that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBlock {
    pub values: Matrix,
    pub generated_step: usize,
    pub layer: usize,
}

/// Per-token top-k assignment. Slot 0 always holds the highest raw score.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteDecision {
    top_k: usize,
    num_experts: usize,
    expert_ids: Vec<usize>,
    gates: Vec<f64>,
    scores: Vec<f64>,
}

impl RouteDecision {
    pub fn num_tokens(&self) -> usize {
        self.expert_ids.len() / self.top_k
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn expert_ids(&self, token: usize) -> &[usize] {
        &self.expert_ids[token * self.top_k..(token + 1) * self.top_k]
    }

    pub fn gates(&self, token: usize) -> &[f64] {
        &self.gates[token * self.top_k..(token + 1) * self.top_k]
    }

    /// Full softmax over all experts for one token.
    pub fn scores(&self, token: usize) -> &[f64] {
        &self.scores[token * self.num_experts..(token + 1) * self.num_experts]
    }

    /// Token-major `tokens × top_k` expert ids.
    pub fn all_expert_ids(&self) -> &[usize] {
        &self.expert_ids
    }

    /// Token-major `tokens × top_k` renormalized gates.
    pub fn all_gates(&self) -> &[f64] {
        &self.gates
    }

    pub fn top1(&self) -> Vec<usize> {
        (0..self.num_tokens()).map(|t| self.expert_ids(t)[0]).collect()
    }
}

/// Softmax each row of `logits`, keep the `top_k` largest (ties go to the
/// lower expert index) and renormalize the kept scores to sum to one.
pub fn route_from_logits(logits: &Matrix, top_k: usize) -> Result<RouteDecision> {
    let num_experts = logits.cols();
    if top_k == 0 || top_k > num_experts {
        return Err(SimError::Contract(format!(
            "top_k {top_k} outside [1, {num_experts}]"
        )));
    }
    if !logits.is_finite() {
        return Err(SimError::NonFinite("router logits"));
    }
    let tokens = logits.rows();
    let mut expert_ids = Vec::with_capacity(tokens * top_k);
    let mut gates = Vec::with_capacity(tokens * top_k);
    let mut scores = Vec::with_capacity(tokens * num_experts);
    let mut order: Vec<usize> = Vec::with_capacity(num_experts);
    for t in 0..tokens {
        let row = logits.row(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
        let mut sum = 0.0;
        for &e in &exps {
            sum += e;
        }
        let probs: Vec<f64> = exps.iter().map(|&e| e / sum).collect();

        order.clear();
        order.extend(0..num_experts);
        // Stable sort over ascending indices keeps equal scores in index order.
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));

        let mut selected_sum = 0.0;
        for &e in &order[..top_k] {
            selected_sum += probs[e];
        }
        for &e in &order[..top_k] {
            expert_ids.push(e);
            gates.push(probs[e] / selected_sum);
        }
        scores.extend_from_slice(&probs);
    }
    Ok(RouteDecision {
        top_k,
        num_experts,
        expert_ids,
        gates,
        scores,
    })
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

fn uniform_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
    let bound = (1.0 / rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.next_symmetric(bound))
}

fn expert_weights(rng: &mut SplitMix64, hidden: usize, inner: usize) -> ExpertWeights {
    let w1 = uniform_matrix(rng, hidden, inner);
    let w2 = uniform_matrix(rng, inner, hidden);
    ExpertWeights { w1, w2 }
}

fn mlp(weights: &ExpertWeights, tokens: &Matrix) -> Result<Matrix> {
    tokens.matmul(&weights.w1)?.map(gelu).matmul(&weights.w2)
}

impl ToyModel {
    /// Draws every weight from one splitmix64 stream. Traversal order is
    /// layer-major; within a layer `W_mix`, `W_gate`, then each routed expert
    /// (`W1`, `W2`), then each shared expert (`W1`, `W2`); each matrix
    /// row-major. Entries are uniform in `[-a, a]` with `a = sqrt(1/fan_in)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let h = config.hidden_dim;
        let f = config.expert_dim;
        let layers = (0..config.num_layers)
            .map(|_| {
                let mix = uniform_matrix(&mut rng, h, h);
                let gate = uniform_matrix(&mut rng, h, config.num_experts);
                let experts = (0..config.num_experts)
                    .map(|_| expert_weights(&mut rng, h, f))
                    .collect();
                let shared = (0..config.num_shared)
                    .map(|_| expert_weights(&mut rng, h, f))
                    .collect();
                LayerWeights {
                    mix,
                    gate,
                    experts,
                    shared,
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerWeights] {
        &mut self.layers
    }

    /// Same weights with a different sampling step size.
    pub fn with_step_size(mut self, step_size: f64) -> Self {
        self.config.step_size = step_size;
        self
    }

    /// Short hex digest of the configuration and every weight bit.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("{:?}", self.config).as_bytes());
        for layer in &self.layers {
            let mats = [&layer.mix, &layer.gate]
                .into_iter()
                .chain(layer.experts.iter().flat_map(|e| [&e.w1, &e.w2]))
                .chain(layer.shared.iter().flat_map(|e| [&e.w1, &e.w2]));
            for m in mats {
                for v in m.as_slice() {
                    hasher.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex_prefix(&hasher.finalize())
    }

    /// Initial noise `x_0`, uniform with unit variance, generated at step 0.
    pub fn initial_noise(&self, seed: u64) -> ActivationBlock {
        let mut rng = SplitMix64::new(seed ^ NOISE_STREAM_TAG);
        let bound = 3f64.sqrt();
        let values = Matrix::from_fn(self.config.total_tokens(), self.config.hidden_dim, |_, _| {
            rng.next_symmetric(bound)
        });
        ActivationBlock {
            values,
            generated_step: 0,
            layer: 0,
        }
    }

    fn layer(&self, layer: usize) -> Result<&LayerWeights> {
        self.layers.get(layer).ok_or_else(|| {
            SimError::Contract(format!(
                "layer {layer} outside [0, {})",
                self.config.num_layers
            ))
        })
    }

    fn check_hidden(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.config.hidden_dim {
            return Err(SimError::Contract(format!(
                "activation width {} != hidden_dim {}",
                x.cols(),
                self.config.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn gate(&self, layer: usize, x: &Matrix) -> Result<RouteDecision> {
        self.check_hidden(x)?;
        if !x.is_finite() {
            return Err(SimError::NonFinite("gate input"));
        }
        let logits = x.matmul(&self.layer(layer)?.gate)?;
        route_from_logits(&logits, self.config.top_k)
    }

    pub fn expert_forward(&self, layer: usize, expert_id: usize, tokens: &Matrix) -> Result<Matrix> {
        self.check_hidden(tokens)?;
        let weights = self.layer(layer)?.experts.get(expert_id).ok_or_else(|| {
            SimError::Contract(format!(
                "expert {expert_id} outside [0, {})",
                self.config.num_experts
            ))
        })?;
        mlp(weights, tokens)
    }

    /// Sum of every shared expert applied to all tokens, accumulated in
    /// shared-expert order starting from zero.
    pub fn shared_forward(&self, layer: usize, x: &Matrix) -> Result<Matrix> {
        self.check_hidden(x)?;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for weights in &self.layer(layer)?.shared {
            out.add_assign(&mlp(weights, x)?)?;
        }
        Ok(out)
    }

    /// `gelu(x · W_mix) + x`; provenance is carried over from `x`.
    pub fn local_block(&self, layer: usize, x: &ActivationBlock) -> Result<ActivationBlock> {
        self.check_hidden(&x.values)?;
        let mixed = x.values.matmul(&self.layer(layer)?.mix)?.map(gelu);
        Ok(ActivationBlock {
            values: mixed.add(&x.values)?,
            generated_step: x.generated_step,
            layer: x.layer,
        })
    }
}

/// `shared_out + Σ_slot scale[token, slot] · expert_outs[slot]`, token-wise,
/// accumulated in slot order. `scale` is token-major `tokens × slots`; pass
/// the gates that belong to the activations the expert outputs came from.
pub fn combine_outputs(shared_out: &Matrix, expert_outs: &[Matrix], scale: &[f64]) -> Result<Matrix> {
    let tokens = shared_out.rows();
    let slots = expert_outs.len();
    if slots == 0 || scale.len() != tokens * slots {
        return Err(SimError::Contract(format!(
            "combine expects {tokens} tokens x {slots} slots of gates, got {}",
            scale.len()
        )));
    }
    for out in expert_outs {
        if out.rows() != tokens || out.cols() != shared_out.cols() {
            return Err(SimError::Contract(
                "expert output shape differs from shared output".into(),
            ));
        }
    }
    let mut combined = shared_out.clone();
    for t in 0..tokens {
        let gates = &scale[t * slots..(t + 1) * slots];
        let row = combined.row_mut(t);
        for (slot, out) in expert_outs.iter().enumerate() {
            for (acc, &v) in row.iter_mut().zip(out.row(t)) {
                *acc += gates[slot] * v;
            }
        }
    }
    Ok(combined)
}

/// `x_{s+1} = x_s − η · y_s`.
pub fn denoise_update(x: &ActivationBlock, y: &Matrix, step_size: f64, step: usize) -> Result<ActivationBlock> {
    if x.values.rows() != y.rows() || x.values.cols() != y.cols() {
        return Err(SimError::Contract("denoise update shape mismatch".into()));
    }
    let values = x
        .values
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(&a, &b)| a - step_size * b)
        .collect();
    Ok(ActivationBlock {
        values: Matrix::from_vec(y.rows(), y.cols(), values)?,
        generated_step: step + 1,
        layer: x.layer,
    })
}

/// Per-step, per-layer MoE inputs and top-1 routing of a sampling run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MoeTrace {
    /// `[step][layer]`
    pub inputs: Vec<Vec<Matrix>>,
    /// `[step][layer][token]`
    pub top1: Vec<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSimilarity {
    pub per_layer_cosine: Vec<f64>,
    pub per_layer_top1_agreement: Vec<f64>,
    pub mean_cosine: f64,
    pub mean_top1_agreement: f64,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Mean cosine between the flattened MoE inputs of adjacent steps, and the
/// fraction of tokens whose top-1 expert is unchanged, per layer.
pub fn step_similarity(trace: &MoeTrace) -> StepSimilarity {
    let steps = trace.inputs.len();
    let layers = trace.inputs.first().map_or(0, Vec::len);
    let mut per_layer_cosine = vec![0.0; layers];
    let mut per_layer_top1_agreement = vec![0.0; layers];
    if steps >= 2 {
        let pairs = (steps - 1) as f64;
        for l in 0..layers {
            let mut cos = 0.0;
            let mut agree = 0.0;
            for s in 0..steps - 1 {
                cos += cosine_similarity(trace.inputs[s][l].as_slice(), trace.inputs[s + 1][l].as_slice());
                let (a, b) = (&trace.top1[s][l], &trace.top1[s + 1][l]);
                let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
                agree += same as f64 / a.len().max(1) as f64;
            }
            per_layer_cosine[l] = cos / pairs;
            per_layer_top1_agreement[l] = agree / pairs;
        }
    } else {
        per_layer_cosine.fill(1.0);
        per_layer_top1_agreement.fill(1.0);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    StepSimilarity {
        mean_cosine: mean(&per_layer_cosine),
        mean_top1_agreement: mean(&per_layer_top1_agreement),
        per_layer_cosine,
        per_layer_top1_agreement,
    }
}

/// Short hex digest of a matrix's shape and exact bits.
pub fn matrix_fingerprint(m: &Matrix) -> String {
    let mut hasher = Sha256::new();
    hasher.update((m.rows() as u64).to_le_bytes());
    hasher.update((m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        hasher.update(v.to_bits().to_le_bytes());
    }
    hex_prefix(&hasher.finalize())
}

pub(crate) fn hex_prefix(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}
