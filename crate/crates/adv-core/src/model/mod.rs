//! The trainable stack: a shared context encoder producing the conditioning
//! feature, a flow-matching action expert that drafts continuous chunks, and
//! a causal k-gram token scorer used for verification.
//!
//! Everything is double precision and hand-differentiated; `train` holds the
//! losses, optimizer and gradient checks, `checkpoint` the on-disk layout.

pub mod checkpoint;
pub mod train;

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{ActionChunk, NormStats, TokenSpace};
use crate::rng::Stream;
use crate::TokenSeq;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("token id {0} outside the scorer vocabulary")]
    OutOfVocab(u32),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(&'static str),
}

/// What the policy sees each step: gripper x/y then block x/y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [f64; 4]);

/// Which goal zone the block must reach.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub goal_id: u8,
}

pub const GOAL_COUNT: usize = 4;

/// Conditioning feature produced by the encoder.
pub type ContextFeature = Vec<f64>;

/// Fixed architecture sizes for one model instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub h: usize,
    pub d: usize,
    /// Conditioning feature width.
    pub feature_dim: usize,
    pub enc_hidden: usize,
    pub flow_hidden: usize,
    /// Causal context window of the scorer.
    pub window: usize,
    pub embed_dim: usize,
    pub scorer_hidden: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn with_dims(h: usize, d: usize, vocab_size: usize) -> Self {
        ModelConfig {
            h,
            d,
            feature_dim: 32,
            enc_hidden: 64,
            flow_hidden: 128,
            window: 8,
            embed_dim: 32,
            scorer_hidden: 128,
            vocab_size,
        }
    }

    pub fn obs_dim(&self) -> usize {
        4 + GOAL_COUNT
    }

    pub fn action_len(&self) -> usize {
        self.h * self.d
    }

    pub fn flow_in(&self) -> usize {
        self.action_len() + self.feature_dim + 1
    }

    pub fn scorer_in(&self) -> usize {
        self.feature_dim + self.window * self.embed_dim
    }
}

/// One fully-connected layer's slot in a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

impl Slot {
    fn next(offset: &mut usize, rows: usize, cols: usize) -> Slot {
        let w = *offset;
        *offset += rows * cols;
        let b = *offset;
        *offset += rows;
        Slot { w, b, rows, cols }
    }

    fn forward(&self, data: &[f64], x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for r in 0..self.rows {
            let row = &data[self.w + r * self.cols..self.w + (r + 1) * self.cols];
            let mut acc = data[self.b + r];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            out[r] = acc;
        }
    }

    /// Accumulates dW and db, and (when `dx` is given) the input gradient.
    fn backward(
        &self,
        data: &[f64],
        x: &[f64],
        dout: &[f64],
        grad: &mut [f64],
        dx: Option<&mut [f64]>,
    ) {
        for r in 0..self.rows {
            let g = dout[r];
            grad[self.b + r] += g;
            let row = &mut grad[self.w + r * self.cols..self.w + (r + 1) * self.cols];
            for (wi, xi) in row.iter_mut().zip(x) {
                *wi += g * xi;
            }
        }
        if let Some(dx) = dx {
            debug_assert_eq!(dx.len(), self.cols);
            for v in dx.iter_mut() {
                *v = 0.0;
            }
            for r in 0..self.rows {
                let g = dout[r];
                let row = &data[self.w + r * self.cols..self.w + (r + 1) * self.cols];
                for (di, wi) in dx.iter_mut().zip(row) {
                    *di += g * wi;
                }
            }
        }
    }
}

fn tanh_forward(z: &mut [f64]) {
    for v in z.iter_mut() {
        *v = libm::tanh(*v);
    }
}

/// dz = dy * (1 - y^2), written in place over dy.
fn tanh_backward(y: &[f64], dy: &mut [f64]) {
    for (d, &a) in dy.iter_mut().zip(y) {
        *d *= 1.0 - a * a;
    }
}

/// Context encoder: `[obs, one-hot goal] -> tanh hidden -> feature`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    l1: Slot,
    l2: Slot,
    pub data: Vec<f64>,
}

impl EncoderParams {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut offset = 0;
        let l1 = Slot::next(&mut offset, cfg.enc_hidden, cfg.obs_dim());
        let l2 = Slot::next(&mut offset, cfg.feature_dim, cfg.enc_hidden);
        EncoderParams {
            l1,
            l2,
            data: vec![0.0; offset],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }
}

/// Flow-matching velocity network: `[noisy action, feature, tau] -> velocity`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowParams {
    l1: Slot,
    l2: Slot,
    l3: Slot,
    pub data: Vec<f64>,
}

impl FlowParams {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut offset = 0;
        let l1 = Slot::next(&mut offset, cfg.flow_hidden, cfg.flow_in());
        let l2 = Slot::next(&mut offset, cfg.flow_hidden, cfg.flow_hidden);
        let l3 = Slot::next(&mut offset, cfg.action_len(), cfg.flow_hidden);
        FlowParams {
            l1,
            l2,
            l3,
            data: vec![0.0; offset],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }
}

/// Causal k-gram scorer: embeds the previous `window` tokens, concatenates
/// the context feature, and emits next-token logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    embed_len: usize,
    l1: Slot,
    l2: Slot,
    pub data: Vec<f64>,
}

impl ScorerParams {
    pub fn new(cfg: &ModelConfig) -> Self {
        let embed_len = cfg.vocab_size * cfg.embed_dim;
        let mut offset = embed_len;
        let l1 = Slot::next(&mut offset, cfg.scorer_hidden, cfg.scorer_in());
        let l2 = Slot::next(&mut offset, cfg.vocab_size, cfg.scorer_hidden);
        ScorerParams {
            embed_len,
            l1,
            l2,
            data: vec![0.0; offset],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// Offset of the output-layer bias inside `data`.
    #[cfg(test)]
    pub(crate) fn output_bias_offset(&self) -> usize {
        self.l2.b
    }

    fn embed_row(&self, id: u32, embed_dim: usize) -> &[f64] {
        let start = id as usize * embed_dim;
        &self.data[start..start + embed_dim]
    }
}

/// The whole trainable bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub encoder: EncoderParams,
    pub flow: FlowParams,
    pub scorer: ScorerParams,
}

impl ModelParams {
    /// Zero-initialized parameters (uniform scorer, bias-only encoder).
    pub fn zeros(cfg: ModelConfig) -> Self {
        ModelParams {
            encoder: EncoderParams::new(&cfg),
            flow: FlowParams::new(&cfg),
            scorer: ScorerParams::new(&cfg),
            cfg,
        }
    }

    /// Seeded random init, scaled by 1/sqrt(fan-in) per layer.
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        let mut params = ModelParams::zeros(cfg);
        let mut stream = Stream::substream(seed, "init", 0);
        let cfg = &params.cfg;
        let enc = [
            (params.encoder.l1, cfg.obs_dim()),
            (params.encoder.l2, cfg.enc_hidden),
        ];
        for (slot, fan_in) in enc {
            init_slot(&mut params.encoder.data, slot, fan_in, &mut stream);
        }
        let flow = [
            (params.flow.l1, cfg.flow_in()),
            (params.flow.l2, cfg.flow_hidden),
            (params.flow.l3, cfg.flow_hidden),
        ];
        for (slot, fan_in) in flow {
            init_slot(&mut params.flow.data, slot, fan_in, &mut stream);
        }
        let scale = 0.1;
        for i in 0..params.scorer.embed_len {
            params.scorer.data[i] = scale * stream.normal();
        }
        let sc = [
            (params.scorer.l1, cfg.scorer_in()),
            (params.scorer.l2, cfg.scorer_hidden),
        ];
        for (slot, fan_in) in sc {
            init_slot(&mut params.scorer.data, slot, fan_in, &mut stream);
        }
        params
    }

    pub fn total_len(&self) -> usize {
        self.encoder.len() + self.flow.len() + self.scorer.len()
    }

    pub fn flat_get(&self, index: usize) -> f64 {
        let (seg, i) = self.locate(index);
        match seg {
            0 => self.encoder.data[i],
            1 => self.flow.data[i],
            _ => self.scorer.data[i],
        }
    }

    pub fn flat_add(&mut self, index: usize, delta: f64) {
        let (seg, i) = self.locate(index);
        match seg {
            0 => self.encoder.data[i] += delta,
            1 => self.flow.data[i] += delta,
            _ => self.scorer.data[i] += delta,
        }
    }

    fn locate(&self, index: usize) -> (u8, usize) {
        let e = self.encoder.len();
        let f = self.flow.len();
        if index < e {
            (0, index)
        } else if index < e + f {
            (1, index - e)
        } else {
            (2, index - e - f)
        }
    }
}

fn init_slot(data: &mut [f64], slot: Slot, fan_in: usize, stream: &mut Stream) {
    let scale = 1.0 / libm::sqrt(fan_in as f64);
    for i in 0..slot.rows * slot.cols {
        data[slot.w + i] = scale * stream.normal();
    }
    // Biases stay zero.
}

/// Gradients mirroring [`ModelParams`], same flat layouts.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub encoder: Vec<f64>,
    pub flow: Vec<f64>,
    pub scorer: Vec<f64>,
}

impl ModelGrads {
    pub fn zeros(params: &ModelParams) -> Self {
        ModelGrads {
            encoder: vec![0.0; params.encoder.len()],
            flow: vec![0.0; params.flow.len()],
            scorer: vec![0.0; params.scorer.len()],
        }
    }

    pub fn add_scaled(&mut self, other: &ModelGrads, scale: f64) {
        for (a, b) in self.encoder.iter_mut().zip(&other.encoder) {
            *a += scale * b;
        }
        for (a, b) in self.flow.iter_mut().zip(&other.flow) {
            *a += scale * b;
        }
        for (a, b) in self.scorer.iter_mut().zip(&other.scorer) {
            *a += scale * b;
        }
    }

    pub fn flat_get(&self, index: usize) -> f64 {
        if index < self.encoder.len() {
            self.encoder[index]
        } else if index < self.encoder.len() + self.flow.len() {
            self.flow[index - self.encoder.len()]
        } else {
            self.scorer[index - self.encoder.len() - self.flow.len()]
        }
    }
}

/// Encoder input: observation followed by the one-hot goal.
pub fn encoder_input(obs: &Observation, instr: Instruction) -> Vec<f64> {
    let mut input = vec![0.0; 4 + GOAL_COUNT];
    input[..4].copy_from_slice(&obs.0);
    input[4 + instr.goal_id as usize] = 1.0;
    input
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct EncoderTrace {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub feature: Vec<f64>,
}

pub(crate) fn encode_context_trace(
    obs: &Observation,
    instr: Instruction,
    params: &ModelParams,
) -> EncoderTrace {
    let input = encoder_input(obs, instr);
    let enc = &params.encoder;
    let mut hidden = vec![0.0; enc.l1.rows];
    enc.l1.forward(&enc.data, &input, &mut hidden);
    tanh_forward(&mut hidden);
    let mut feature = vec![0.0; enc.l2.rows];
    enc.l2.forward(&enc.data, &hidden, &mut feature);
    EncoderTrace {
        input,
        hidden,
        feature,
    }
}

/// Deterministic conditioning feature for `(obs, instr)`.
pub fn encode_context(
    obs: &Observation,
    instr: Instruction,
    params: &ModelParams,
) -> ContextFeature {
    encode_context_trace(obs, instr, params).feature
}

pub(crate) fn encoder_backward(
    trace: &EncoderTrace,
    dfeature: &[f64],
    params: &ModelParams,
    grads: &mut ModelGrads,
) {
    let enc = &params.encoder;
    let mut dhidden = vec![0.0; trace.hidden.len()];
    enc.l2.backward(
        &enc.data,
        &trace.hidden,
        dfeature,
        &mut grads.encoder,
        Some(&mut dhidden),
    );
    tanh_backward(&trace.hidden, &mut dhidden);
    enc.l1
        .backward(&enc.data, &trace.input, &dhidden, &mut grads.encoder, None);
}

pub(crate) struct FlowTrace {
    pub input: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub velocity: Vec<f64>,
}

pub(crate) fn flow_forward_trace(
    x: &[f64],
    feature: &[f64],
    tau: f64,
    params: &ModelParams,
) -> FlowTrace {
    let flow = &params.flow;
    let mut input = Vec::with_capacity(params.cfg.flow_in());
    input.extend_from_slice(x);
    input.extend_from_slice(feature);
    input.push(tau);
    let mut h1 = vec![0.0; flow.l1.rows];
    flow.l1.forward(&flow.data, &input, &mut h1);
    tanh_forward(&mut h1);
    let mut h2 = vec![0.0; flow.l2.rows];
    flow.l2.forward(&flow.data, &h1, &mut h2);
    tanh_forward(&mut h2);
    let mut velocity = vec![0.0; flow.l3.rows];
    flow.l3.forward(&flow.data, &h2, &mut velocity);
    FlowTrace {
        input,
        h1,
        h2,
        velocity,
    }
}

/// Velocity prediction for the noisy action `x` at time `tau`.
pub fn flow_velocity(x: &[f64], feature: &[f64], tau: f64, params: &ModelParams) -> Vec<f64> {
    flow_forward_trace(x, feature, tau, params).velocity
}

/// Backward through the flow net; returns the feature gradient.
pub(crate) fn flow_backward(
    trace: &FlowTrace,
    dvelocity: &[f64],
    params: &ModelParams,
    grads: &mut ModelGrads,
) -> Vec<f64> {
    let flow = &params.flow;
    let mut dh2 = vec![0.0; trace.h2.len()];
    flow.l3.backward(
        &flow.data,
        &trace.h2,
        dvelocity,
        &mut grads.flow,
        Some(&mut dh2),
    );
    tanh_backward(&trace.h2, &mut dh2);
    let mut dh1 = vec![0.0; trace.h1.len()];
    flow.l2
        .backward(&flow.data, &trace.h1, &dh2, &mut grads.flow, Some(&mut dh1));
    tanh_backward(&trace.h1, &mut dh1);
    let mut dinput = vec![0.0; trace.input.len()];
    flow.l1.backward(
        &flow.data,
        &trace.input,
        &dh1,
        &mut grads.flow,
        Some(&mut dinput),
    );
    let action_len = params.cfg.action_len();
    dinput[action_len..action_len + params.cfg.feature_dim].to_vec()
}

/// Euler integration of a velocity field from tau = 0 to 1.
///
/// The field is evaluated at tau = i/steps; the final evaluation happens at
/// tau = 1 - 1/steps.
pub fn euler_integrate<F>(mut x: Vec<f64>, steps: usize, mut field: F) -> Vec<f64>
where
    F: FnMut(&[f64], f64) -> Vec<f64>,
{
    debug_assert!(steps >= 1);
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let tau = i as f64 * dt;
        let v = field(&x, tau);
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
    }
    x
}

/// Draws one action chunk: Gaussian init in normalized space, Euler steps
/// along the learned field, then denormalization.
pub fn flow_sample(
    feature: &[f64],
    params: &ModelParams,
    steps: usize,
    seed: u64,
    stats: &NormStats,
) -> ActionChunk {
    let mut stream = Stream::from_seed(seed);
    let n = params.cfg.action_len();
    let x0: Vec<f64> = (0..n).map(|_| stream.normal()).collect();
    let x1 = euler_integrate(x0, steps, |x, tau| flow_velocity(x, feature, tau, params));
    let normalized = ActionChunk::new(params.cfg.h, params.cfg.d, x1)
        .expect("finite parameters produce finite samples");
    crate::codec::denormalize(&normalized, stats).expect("stats dims match model dims")
}

/// The drafted candidate set: `M` chunks sampled from per-candidate seeds
/// under one shared context feature.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub chunks: Vec<ActionChunk>,
    pub feature: ContextFeature,
    pub seeds: Vec<u64>,
}

/// Drafts `m` candidate chunks with seeds `base_seed .. base_seed + m`.
pub fn draft(
    obs: &Observation,
    instr: Instruction,
    params: &ModelParams,
    m: usize,
    steps: usize,
    base_seed: u64,
    stats: &NormStats,
) -> CandidateSet {
    debug_assert!(m >= 1);
    let feature = encode_context(obs, instr, params);
    let seeds: Vec<u64> = (0..m as u64).map(|i| base_seed.wrapping_add(i)).collect();
    let chunks = seeds
        .iter()
        .map(|&s| flow_sample(&feature, params, steps, s, stats))
        .collect();
    CandidateSet {
        chunks,
        feature,
        seeds,
    }
}

/// Scorer logits for one position given the BOS-padded context window.
pub(crate) fn scorer_logits_trace(
    feature: &[f64],
    window_ids: &[u32],
    params: &ModelParams,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cfg = &params.cfg;
    debug_assert_eq!(window_ids.len(), cfg.window);
    let mut input = Vec::with_capacity(cfg.scorer_in());
    input.extend_from_slice(feature);
    for &id in window_ids {
        input.extend_from_slice(params.scorer.embed_row(id, cfg.embed_dim));
    }
    let sc = &params.scorer;
    let mut hidden = vec![0.0; sc.l1.rows];
    sc.l1.forward(&sc.data, &input, &mut hidden);
    tanh_forward(&mut hidden);
    let mut logits = vec![0.0; sc.l2.rows];
    sc.l2.forward(&sc.data, &hidden, &mut logits);
    (input, hidden, logits)
}

/// Log-softmax of `logits` evaluated so that every entry is <= 0.
pub(crate) fn log_softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter() {
        sum += libm::exp(v - max);
    }
    let lse = max + libm::log(sum);
    for v in logits.iter_mut() {
        *v -= lse;
    }
}

/// Teacher-forced per-position log-probabilities of `tokens` under the
/// scorer, conditioned on `feature`. The context window is BOS-padded.
pub fn ar_logprobs(
    feature: &[f64],
    tokens: &[u32],
    params: &ModelParams,
    space: &TokenSpace,
) -> Result<Vec<f64>, ModelError> {
    for &t in tokens {
        if t as usize >= params.cfg.vocab_size {
            return Err(ModelError::OutOfVocab(t));
        }
    }
    let k = params.cfg.window;
    let mut window = vec![space.bos; k];
    let mut out = Vec::with_capacity(tokens.len());
    for (i, &target) in tokens.iter().enumerate() {
        let (_, _, mut logits) = scorer_logits_trace(feature, &window, params);
        log_softmax_in_place(&mut logits);
        out.push(logits[target as usize]);
        window.remove(0);
        window.push(tokens[i]);
    }
    Ok(out)
}

/// Result of greedy decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeResult {
    pub tokens: TokenSeq,
    /// False when decoding stopped at `max_len` without emitting EOS.
    pub hit_eos: bool,
}

/// Greedy argmax decoding from BOS until EOS or `max_len` tokens.
/// Ties break to the lowest token id.
pub fn ar_decode(
    feature: &[f64],
    params: &ModelParams,
    space: &TokenSpace,
    max_len: usize,
) -> DecodeResult {
    debug_assert!(max_len >= 1);
    let k = params.cfg.window;
    let mut window = vec![space.bos; k];
    let mut tokens = Vec::new();
    for _ in 0..max_len {
        let (_, _, logits) = scorer_logits_trace(feature, &window, params);
        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        let id = best as u32;
        if id == space.eos {
            return DecodeResult {
                tokens,
                hit_eos: true,
            };
        }
        tokens.push(id);
        window.remove(0);
        window.push(id);
    }
    DecodeResult {
        tokens,
        hit_eos: false,
    }
}
