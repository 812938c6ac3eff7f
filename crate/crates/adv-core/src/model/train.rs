//! Losses, optimizer, training steps, and the finite-difference gradient
//! check.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{
    encode_context_trace, encoder_backward, flow_backward, flow_forward_trace, log_softmax_in_place,
    scorer_logits_trace, Instruction, ModelError, ModelGrads, ModelParams, Observation,
};
use crate::codec::TokenSpace;
use crate::rng::Stream;
use crate::TokenSeq;

/// Training hyperparameters. `beta` weights the flow loss in co-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 3.0,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 20,
            seed: 42,
        }
    }
}

/// One training triple: context inputs, the normalized action chunk, and the
/// matching token sequence (EOS already appended).
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub obs: Observation,
    pub instr: Instruction,
    /// Normalized chunk values, row-major `h*d`.
    pub chunk: Vec<f64>,
    pub tokens: TokenSeq,
}

/// Flow-matching loss: mean over the batch of the squared velocity residual
/// at a uniformly drawn time with Gaussian path noise.
///
/// Noise comes from per-sample substreams of `noise_seed` (tau first, then
/// the noise row-major), so the loss is reproducible and batch elements are
/// independent.
pub fn flow_loss(
    batch: &[TrainSample],
    params: &ModelParams,
    noise_seed: u64,
) -> Result<f64, ModelError> {
    flow_loss_impl(batch, params, noise_seed, None)
}

/// As [`flow_loss`] but also accumulating encoder and flow gradients.
pub fn flow_loss_grad(
    batch: &[TrainSample],
    params: &ModelParams,
    noise_seed: u64,
    grads: &mut ModelGrads,
) -> Result<f64, ModelError> {
    flow_loss_impl(batch, params, noise_seed, Some(grads))
}

fn flow_loss_impl(
    batch: &[TrainSample],
    params: &ModelParams,
    noise_seed: u64,
    grads: Option<&mut ModelGrads>,
) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    match grads {
        Some(grads) => flow_loss_sum_grad(batch, params, noise_seed, grads, scale)
            .map(|sum| sum * scale),
        None => {
            let mut unused = ModelGrads::zeros(params);
            flow_loss_sum_grad(batch, params, noise_seed, &mut unused, 0.0)
                .map(|sum| sum * scale)
        }
    }
}

/// Accumulates `scale * grad(sum of squared residuals over the batch)` into
/// `grads` and returns the unscaled sum. With `scale == 0` the backward
/// pass is skipped. This is the primitive batch trainers build on: summing
/// per-sample calls with appropriate scales reproduces any batch mean.
pub fn flow_loss_sum_grad(
    batch: &[TrainSample],
    params: &ModelParams,
    noise_seed: u64,
    grads: &mut ModelGrads,
    scale: f64,
) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let n = params.cfg.action_len();
    let mut sum = 0.0;
    for (i, sample) in batch.iter().enumerate() {
        if sample.chunk.len() != n {
            return Err(ModelError::ShapeMismatch("chunk length"));
        }
        let mut noise = Stream::substream(noise_seed, "flow", i as u64);
        let tau = noise.uniform();
        let eps: Vec<f64> = (0..n).map(|_| noise.normal()).collect();
        let noisy: Vec<f64> = sample
            .chunk
            .iter()
            .zip(&eps)
            .map(|(a, e)| tau * a + (1.0 - tau) * e)
            .collect();
        let enc = encode_context_trace(&sample.obs, sample.instr, params);
        let trace = flow_forward_trace(&noisy, &enc.feature, tau, params);
        let mut residual = vec![0.0; n];
        let mut sample_loss = 0.0;
        for j in 0..n {
            let r = trace.velocity[j] - (sample.chunk[j] - eps[j]);
            residual[j] = r;
            sample_loss += r * r;
        }
        sum += sample_loss;
        if scale != 0.0 {
            let dvel: Vec<f64> = residual.iter().map(|r| 2.0 * scale * r).collect();
            let dfeature = flow_backward(&trace, &dvel, params, grads);
            encoder_backward(&enc, &dfeature, params, grads);
        }
    }
    Ok(sum)
}

/// Mean token negative log-likelihood over the batch, teacher-forced.
/// PAD targets are excluded from both the sum and the token count.
pub fn ar_nll(
    batch: &[TrainSample],
    params: &ModelParams,
    space: &TokenSpace,
) -> Result<f64, ModelError> {
    ar_nll_impl(batch, params, space, None)
}

pub fn ar_nll_grad(
    batch: &[TrainSample],
    params: &ModelParams,
    space: &TokenSpace,
    grads: &mut ModelGrads,
) -> Result<f64, ModelError> {
    ar_nll_impl(batch, params, space, Some(grads))
}

fn ar_nll_impl(
    batch: &[TrainSample],
    params: &ModelParams,
    space: &TokenSpace,
    grads: Option<&mut ModelGrads>,
) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let token_count = count_scored_tokens(batch, params, space)?;
    if token_count == 0 {
        // Pad-only batches contribute no tokens.
        return Ok(0.0);
    }
    let weight = 1.0 / token_count as f64;
    match grads {
        Some(grads) => {
            ar_nll_sum_grad(batch, params, space, grads, weight).map(|(sum, _)| sum * weight)
        }
        None => {
            let mut unused = ModelGrads::zeros(params);
            ar_nll_sum_grad(batch, params, space, &mut unused, 0.0).map(|(sum, _)| sum * weight)
        }
    }
}

/// Number of loss-bearing (non-PAD) tokens in the batch.
pub fn count_scored_tokens(
    batch: &[TrainSample],
    params: &ModelParams,
    space: &TokenSpace,
) -> Result<usize, ModelError> {
    let mut token_count = 0usize;
    for sample in batch {
        for &t in &sample.tokens {
            if t as usize >= params.cfg.vocab_size {
                return Err(ModelError::OutOfVocab(t));
            }
            if t != space.pad {
                token_count += 1;
            }
        }
    }
    Ok(token_count)
}

/// Accumulates `scale * grad(sum of per-token NLL)` into `grads` and
/// returns the unscaled sum with the token count. With `scale == 0` the
/// backward pass is skipped.
pub fn ar_nll_sum_grad(
    batch: &[TrainSample],
    params: &ModelParams,
    space: &TokenSpace,
    grads: &mut ModelGrads,
    scale: f64,
) -> Result<(f64, usize), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let k = params.cfg.window;
    let mut sum = 0.0;
    let mut count = 0usize;
    for sample in batch {
        for &t in &sample.tokens {
            if t as usize >= params.cfg.vocab_size {
                return Err(ModelError::OutOfVocab(t));
            }
        }
        let enc = encode_context_trace(&sample.obs, sample.instr, params);
        let mut window = vec![space.bos; k];
        let mut dfeature = vec![0.0; params.cfg.feature_dim];
        for &target in &sample.tokens {
            if target == space.pad {
                continue;
            }
            let (input, hidden, mut logits) = scorer_logits_trace(&enc.feature, &window, params);
            log_softmax_in_place(&mut logits);
            sum -= logits[target as usize];
            count += 1;
            if scale != 0.0 {
                // d(nll)/d(logit_i) = softmax_i - 1[i == target].
                let mut dlogits: Vec<f64> =
                    logits.iter().map(|&lp| scale * libm::exp(lp)).collect();
                dlogits[target as usize] -= scale;
                scorer_backward(params, &input, &hidden, &dlogits, &window, grads, &mut dfeature);
            }
            window.remove(0);
            window.push(target);
        }
        if scale != 0.0 {
            encoder_backward(&enc, &dfeature, params, grads);
        }
    }
    Ok((sum, count))
}

/// Backward through the scorer; accumulates the feature gradient into
/// `dfeature` and embedding gradients for the window's token ids.
fn scorer_backward(
    params: &ModelParams,
    input: &[f64],
    hidden: &[f64],
    dlogits: &[f64],
    window: &[u32],
    grads: &mut ModelGrads,
    dfeature: &mut [f64],
) {
    let sc = &params.scorer;
    let cfg = &params.cfg;
    let mut dhidden = vec![0.0; hidden.len()];
    sc.l2
        .backward(&sc.data, hidden, dlogits, &mut grads.scorer, Some(&mut dhidden));
    super::tanh_backward(hidden, &mut dhidden);
    let mut dinput = vec![0.0; input.len()];
    sc.l1
        .backward(&sc.data, input, &dhidden, &mut grads.scorer, Some(&mut dinput));
    for (df, di) in dfeature.iter_mut().zip(&dinput[..cfg.feature_dim]) {
        *df += di;
    }
    for (j, &id) in window.iter().enumerate() {
        let src = cfg.feature_dim + j * cfg.embed_dim;
        let dst = id as usize * cfg.embed_dim;
        for e in 0..cfg.embed_dim {
            grads.scorer[dst + e] += dinput[src + e];
        }
    }
}

/// Adam optimizer state over the flattened parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: vec![0.0; params.total_len()],
            v: vec![0.0; params.total_len()],
            step: 0,
        }
    }

    /// One bias-corrected Adam update over all three parameter bundles.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &ModelGrads, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = cfg.adam_beta1;
        let b2 = cfg.adam_beta2;
        let c1 = 1.0 - libm::pow(b1, t as f64);
        let c2 = 1.0 - libm::pow(b2, t as f64);
        let mut offset = 0;
        let segments: [(&mut Vec<f64>, &Vec<f64>); 3] = [
            (&mut params.encoder.data, &grads.encoder),
            (&mut params.flow.data, &grads.flow),
            (&mut params.scorer.data, &grads.scorer),
        ];
        for (data, grad) in segments {
            for (i, (p, &g)) in data.iter_mut().zip(grad.iter()).enumerate() {
                let j = offset + i;
                self.m[j] = b1 * self.m[j] + (1.0 - b1) * g;
                self.v[j] = b2 * self.v[j] + (1.0 - b2) * g * g;
                let m_hat = self.m[j] / c1;
                let v_hat = self.v[j] / c2;
                *p -= cfg.learning_rate * m_hat / (libm::sqrt(v_hat) + cfg.adam_eps);
            }
            offset += grad.len();
        }
    }
}

/// Losses reported by one co-training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CotrainLosses {
    pub vlm: f64,
    pub dif: f64,
    pub total: f64,
}

/// One optimizer step on the combined objective: token NLL plus
/// `beta`-weighted flow loss, with the encoder receiving both gradients.
pub fn cotrain_step(
    batch: &[TrainSample],
    params: &mut ModelParams,
    opt: &mut AdamState,
    cfg: &TrainConfig,
    space: &TokenSpace,
    noise_seed: u64,
) -> Result<CotrainLosses, ModelError> {
    let mut grads = ModelGrads::zeros(params);
    let vlm = ar_nll_grad(batch, params, space, &mut grads)?;
    let mut flow_grads = ModelGrads::zeros(params);
    let dif = flow_loss_grad(batch, params, noise_seed, &mut flow_grads)?;
    grads.add_scaled(&flow_grads, cfg.beta);
    opt.apply(params, &grads, cfg);
    Ok(CotrainLosses {
        vlm,
        dif,
        total: vlm + cfg.beta * dif,
    })
}

/// One Adam step on the token NLL alone (encoder and scorer).
pub fn ar_train_step(
    batch: &[TrainSample],
    params: &mut ModelParams,
    opt: &mut AdamState,
    cfg: &TrainConfig,
    space: &TokenSpace,
) -> Result<f64, ModelError> {
    let mut grads = ModelGrads::zeros(params);
    let loss = ar_nll_grad(batch, params, space, &mut grads)?;
    opt.apply(params, &grads, cfg);
    Ok(loss)
}

/// As [`ar_train_step`] but with the encoder frozen: only scorer parameters
/// move. Used to fit per-scheme verifier heads against a fixed backbone.
pub fn ar_scorer_step(
    batch: &[TrainSample],
    params: &mut ModelParams,
    opt: &mut AdamState,
    cfg: &TrainConfig,
    space: &TokenSpace,
) -> Result<f64, ModelError> {
    let mut grads = ModelGrads::zeros(params);
    let loss = ar_nll_grad(batch, params, space, &mut grads)?;
    grads.encoder.iter_mut().for_each(|g| *g = 0.0);
    opt.apply(params, &grads, cfg);
    Ok(loss)
}

/// One Adam step on the flow loss alone (encoder and flow expert).
pub fn flow_train_step(
    batch: &[TrainSample],
    params: &mut ModelParams,
    opt: &mut AdamState,
    cfg: &TrainConfig,
    noise_seed: u64,
) -> Result<f64, ModelError> {
    let mut grads = ModelGrads::zeros(params);
    let loss = flow_loss_grad(batch, params, noise_seed, &mut grads)?;
    opt.apply(params, &grads, cfg);
    Ok(loss)
}

/// Which loss a gradient check exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedLoss {
    Flow,
    ArNll,
}

/// Central finite-difference check of the analytic gradients.
///
/// Probes `n_probes` uniformly chosen parameters with fixed noise seeds and
/// returns `max |analytic - numeric| / max(1, |numeric|)`.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    loss: CheckedLoss,
    params: &ModelParams,
    batch: &[TrainSample],
    space: &TokenSpace,
    noise_seed: u64,
    eps: f64,
    n_probes: usize,
    probe_seed: u64,
) -> Result<f64, ModelError> {
    debug_assert!(eps > 0.0);
    let mut grads = ModelGrads::zeros(params);
    match loss {
        CheckedLoss::Flow => flow_loss_grad(batch, params, noise_seed, &mut grads)?,
        CheckedLoss::ArNll => ar_nll_grad(batch, params, space, &mut grads)?,
    };
    let eval = |p: &ModelParams| -> Result<f64, ModelError> {
        match loss {
            CheckedLoss::Flow => flow_loss(batch, p, noise_seed),
            CheckedLoss::ArNll => ar_nll(batch, p, space),
        }
    };
    let mut stream = Stream::substream(probe_seed, "grad_probe", 0);
    let total = params.total_len();
    let mut worst = 0.0f64;
    let mut scratch = params.clone();
    for _ in 0..n_probes {
        let idx = stream.uniform_index(total);
        let original = params.flat_get(idx);
        scratch.flat_add(idx, eps);
        let up = eval(&scratch)?;
        scratch.flat_add(idx, -2.0 * eps);
        let down = eval(&scratch)?;
        // Restore exactly rather than accumulating float drift.
        let drifted = scratch.flat_get(idx);
        scratch.flat_add(idx, original - drifted);
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads.flat_get(idx);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::TokenSpace;

    fn small_cfg() -> super::super::ModelConfig {
        super::super::ModelConfig {
            h: 2,
            d: 2,
            feature_dim: 5,
            enc_hidden: 6,
            flow_hidden: 7,
            window: 3,
            embed_dim: 4,
            scorer_hidden: 6,
            vocab_size: 10,
        }
    }

    fn space() -> TokenSpace {
        TokenSpace {
            vocab_size: 10,
            bos: 0,
            eos: 1,
            pad: 2,
        }
    }

    fn sample_batch(n: usize, seed: u64) -> Vec<TrainSample> {
        let mut stream = Stream::from_seed(seed);
        (0..n)
            .map(|_| TrainSample {
                obs: Observation([
                    stream.uniform_in(-1.0, 1.0),
                    stream.uniform_in(-1.0, 1.0),
                    stream.uniform_in(-1.0, 1.0),
                    stream.uniform_in(-1.0, 1.0),
                ]),
                instr: Instruction {
                    goal_id: stream.uniform_index(4) as u8,
                },
                chunk: (0..4).map(|_| stream.uniform_in(-1.0, 1.0)).collect(),
                tokens: (0..6).map(|_| 3 + stream.uniform_index(7) as u32).collect(),
            })
            .collect()
    }

    #[test]
    fn flow_loss_is_nonneg_and_matches_direct_recomputation() {
        let params = ModelParams::init(small_cfg(), 11);
        let batch = sample_batch(8, 1);
        let loss = flow_loss(&batch, &params, 77).unwrap();
        assert!(loss >= 0.0);

        // With a zero network the loss is the mean squared target norm,
        // recomputed here straight from the same substreams.
        let zero = ModelParams::zeros(small_cfg());
        let got = flow_loss(&batch, &zero, 77).unwrap();
        let mut want = 0.0;
        for (i, s) in batch.iter().enumerate() {
            let mut noise = Stream::substream(77, "flow", i as u64);
            let _tau = noise.uniform();
            let eps: Vec<f64> = (0..4).map(|_| noise.normal()).collect();
            want += s
                .chunk
                .iter()
                .zip(&eps)
                .map(|(a, e)| (a - e) * (a - e))
                .sum::<f64>();
        }
        want /= batch.len() as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let params = ModelParams::init(small_cfg(), 11);
        assert_eq!(flow_loss(&[], &params, 0), Err(ModelError::EmptyBatch));
        assert_eq!(ar_nll(&[], &params, &space()), Err(ModelError::EmptyBatch));
    }

    #[test]
    fn initial_ar_loss_is_log_vocab_for_uniform_params() {
        let params = ModelParams::zeros(small_cfg());
        let batch = sample_batch(4, 2);
        let loss = ar_nll(&batch, &params, &space()).unwrap();
        assert!((loss - libm::log(10.0)).abs() < 1e-12);
    }

    #[test]
    fn pad_tokens_are_excluded() {
        let params = ModelParams::init(small_cfg(), 12);
        let sp = space();
        let mut batch = sample_batch(2, 3);
        let base = ar_nll(&batch, &params, &sp).unwrap();
        // Appending pads never changes the loss.
        for s in &mut batch {
            s.tokens.extend([sp.pad; 5]);
        }
        assert_eq!(ar_nll(&batch, &params, &sp).unwrap(), base);
        // A pad-only batch contributes zero tokens.
        let pad_only = vec![TrainSample {
            tokens: vec![sp.pad; 4],
            ..batch[0].clone()
        }];
        assert_eq!(ar_nll(&pad_only, &params, &sp).unwrap(), 0.0);
    }

    #[test]
    fn flow_gradients_pass_finite_difference_check() {
        let params = ModelParams::init(small_cfg(), 13);
        let batch = sample_batch(6, 4);
        let err = grad_check(
            CheckedLoss::Flow,
            &params,
            &batch,
            &space(),
            55,
            1e-5,
            120,
            9,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn ar_gradients_pass_finite_difference_check() {
        let params = ModelParams::init(small_cfg(), 14);
        let batch = sample_batch(6, 5);
        let err = grad_check(
            CheckedLoss::ArNll,
            &params,
            &batch,
            &space(),
            55,
            1e-5,
            120,
            10,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn grad_check_is_deterministic_and_ignores_dead_units() {
        let params = ModelParams::init(small_cfg(), 15);
        let batch = sample_batch(3, 6);
        let a = grad_check(CheckedLoss::ArNll, &params, &batch, &space(), 1, 1e-5, 60, 2).unwrap();
        let b = grad_check(CheckedLoss::ArNll, &params, &batch, &space(), 1, 1e-5, 60, 2).unwrap();
        assert_eq!(a, b);
        // A flow-loss check on zero params: most probed parameters are dead
        // (zero analytic and numeric gradient) and contribute exactly 0.
        let zeros = ModelParams::zeros(small_cfg());
        let err =
            grad_check(CheckedLoss::Flow, &zeros, &batch, &space(), 1, 1e-5, 60, 3).unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn ar_training_reduces_loss_on_a_repeated_batch() {
        let mut params = ModelParams::init(small_cfg(), 16);
        let mut opt = AdamState::new(&params);
        let cfg = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        let batch = sample_batch(4, 7);
        let sp = space();
        let first = ar_train_step(&batch, &mut params, &mut opt, &cfg, &sp).unwrap();
        let mut last = first;
        for _ in 0..99 {
            last = ar_train_step(&batch, &mut params, &mut opt, &cfg, &sp).unwrap();
        }
        assert!(last < first, "first {first}, last {last}");
    }

    #[test]
    fn cotrain_total_is_the_weighted_sum() {
        let mut params = ModelParams::init(small_cfg(), 17);
        let mut opt = AdamState::new(&params);
        let cfg = TrainConfig::default();
        let batch = sample_batch(4, 8);
        let losses = cotrain_step(&batch, &mut params, &mut opt, &cfg, &space(), 5).unwrap();
        assert!((losses.total - (losses.vlm + cfg.beta * losses.dif)).abs() < 1e-12);
    }

    #[test]
    fn zero_beta_cotraining_leaves_the_flow_untouched() {
        let cfg = TrainConfig {
            beta: 0.0,
            ..TrainConfig::default()
        };
        let mut params = ModelParams::init(small_cfg(), 18);
        let flow_before = params.flow.data.clone();
        let mut opt = AdamState::new(&params);
        let batch = sample_batch(4, 9);
        let losses = cotrain_step(&batch, &mut params, &mut opt, &cfg, &space(), 6).unwrap();
        assert_eq!(losses.total, losses.vlm);
        assert_eq!(params.flow.data, flow_before);
        assert_ne!(params.scorer.data, ModelParams::init(small_cfg(), 18).scorer.data);
    }

    #[test]
    fn scorer_only_step_freezes_the_encoder() {
        let mut params = ModelParams::init(small_cfg(), 19);
        let encoder_before = params.encoder.data.clone();
        let mut opt = AdamState::new(&params);
        let cfg = TrainConfig::default();
        let batch = sample_batch(4, 10);
        ar_scorer_step(&batch, &mut params, &mut opt, &cfg, &space()).unwrap();
        assert_eq!(params.encoder.data, encoder_before);
    }

    #[test]
    fn training_is_bit_deterministic_per_seed() {
        let run = || {
            let mut params = ModelParams::init(small_cfg(), 20);
            let mut opt = AdamState::new(&params);
            let cfg = TrainConfig::default();
            let batch = sample_batch(6, 11);
            for step in 0..20 {
                cotrain_step(&batch, &mut params, &mut opt, &cfg, &space(), step).unwrap();
            }
            params
        };
        let a = run();
        let b = run();
        assert_eq!(a.encoder.data, b.encoder.data);
        assert_eq!(a.flow.data, b.flow.data);
        assert_eq!(a.scorer.data, b.scorer.data);
    }

    #[test]
    fn oracle_velocity_drives_flow_loss_to_zero() {
        // If the network output were exactly (A - eps), the loss is 0; check
        // the loss formula by injecting the oracle through the residual path.
        let params = ModelParams::zeros(small_cfg());
        let batch = vec![TrainSample {
            obs: Observation([0.0; 4]),
            instr: Instruction { goal_id: 0 },
            chunk: vec![0.0; 4],
            tokens: vec![3],
        }];
        // With chunk == 0 the target is -eps; a zero net cannot match it, but
        // when eps is also forced to zero the loss must be exactly zero.
        // Construct that by scaling: loss(c=0) == mean ||0 - (0 - eps)||^2.
        let loss = flow_loss(&batch, &params, 123).unwrap();
        let mut noise = Stream::substream(123, "flow", 0);
        let _tau = noise.uniform();
        let eps: Vec<f64> = (0..4).map(|_| noise.normal()).collect();
        let want: f64 = eps.iter().map(|e| e * e).sum();
        assert!((loss - want).abs() < 1e-12);
    }
}
