//! Training loops: co-training, flow-only fitting, and per-scheme scorer
//! heads. Gradients accumulate over batch samples in parallel with a fixed
//! combination order, so runs are bit-reproducible per seed regardless of
//! scheduling.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use adv_core::codec::{
    dct_forward, flatten_column_first, normalize, quantize, BpeVocab, CodecConfig, Scheme,
    TextTokenizer, TokenSpace,
};
use adv_core::model::checkpoint::{CheckpointHeader, CHECKPOINT_VERSION};
use adv_core::model::train::{
    ar_nll_sum_grad, count_scored_tokens, flow_loss_sum_grad, AdamState, TrainConfig, TrainSample,
};
use adv_core::model::{ModelGrads, ModelParams};
use adv_core::rng::{derive_seed, Stream};

use crate::artifacts::{checkpoint_path, codec_path, load_checkpoint, save_checkpoint, save_codec};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, Dataset};

/// Which objective a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Token NLL plus beta-weighted flow loss, everything trainable.
    Cotrain,
    /// Flow loss only (used for the long-chunk disturbance model).
    FlowOnly,
    /// Token NLL only with the encoder frozen (per-scheme verifier heads).
    ScorerOnly,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "cotrain" => TrainMode::Cotrain,
            "flow" => TrainMode::FlowOnly,
            "scorer" => TrainMode::ScorerOnly,
            other => bail!("unknown train mode {other:?}"),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Cotrain => "cotrain",
            TrainMode::FlowOnly => "flow",
            TrainMode::ScorerOnly => "scorer",
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_vlm: f64,
    pub final_dif: f64,
    pub steps: u64,
}

/// Builds the training corpus for one scheme: normalized chunks plus token
/// sequences with EOS appended.
pub fn build_samples(
    dataset: &Dataset,
    codec: &CodecConfig,
    vocab: &BpeVocab,
    tk: &TextTokenizer,
    scheme: Scheme,
    space: &TokenSpace,
) -> Result<Vec<TrainSample>> {
    dataset
        .triples
        .iter()
        .map(|(obs, instr, chunk)| {
            let normalized = normalize(chunk, &codec.norm)?;
            let mut tokens = scheme.encode(chunk, codec, vocab, tk)?;
            tokens.push(space.eos);
            Ok(TrainSample {
                obs: *obs,
                instr: *instr,
                chunk: normalized.values().to_vec(),
                tokens,
            })
        })
        .collect::<Result<Vec<_>, adv_core::codec::CodecError>>()
        .context("encoding training triples")
}

/// Trains the BPE merge table on the dataset's quantized coefficient
/// sequences and persists the codec file.
pub fn fit_codec(cfg: &RunConfig, dataset: &Dataset) -> Result<(CodecConfig, BpeVocab)> {
    let codec = cfg.codec.with_norm(dataset.meta.h, dataset.meta.norm.clone());
    codec.validate().context("codec configuration")?;
    let corpus: Vec<Vec<i32>> = dataset
        .triples
        .iter()
        .map(|(_, _, chunk)| {
            let coeffs = dct_forward(&normalize(chunk, &codec.norm)?);
            Ok(flatten_column_first(
                &quantize(&coeffs, &codec).values,
                codec.h,
                codec.d,
            ))
        })
        .collect::<Result<_, adv_core::codec::CodecError>>()?;
    let vocab = BpeVocab::train(&corpus, codec.q_max, codec.bpe_vocab_size)?;
    save_codec(&codec_path(&cfg.out_dir, codec.h), &codec, &vocab)?;
    Ok((codec, vocab))
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, Default)]
struct EpochLosses {
    vlm: f64,
    dif: f64,
}

/// Fixed parallel chunk size; part of the reproducible summation order.
const GRAD_CHUNK: usize = 16;

/// One optimizer step over `batch`. Gradients accumulate per fixed-size
/// sample chunk in parallel and combine in chunk order, so results do not
/// depend on scheduling. The AR term weights every token by 1/total tokens
/// and the flow term every sample by 1/batch (times beta when co-training),
/// which together is exactly the batch-mean objective.
fn train_step(
    batch: &[TrainSample],
    params: &mut ModelParams,
    opt: &mut AdamState,
    train: &TrainConfig,
    space: &TokenSpace,
    mode: TrainMode,
    step_seed: u64,
) -> Result<(f64, f64)> {
    let do_ar = mode != TrainMode::FlowOnly;
    let do_flow = mode == TrainMode::Cotrain || mode == TrainMode::FlowOnly;
    let token_total = if do_ar {
        count_scored_tokens(batch, params, space)?
    } else {
        0
    };
    let ar_scale = if token_total > 0 {
        1.0 / token_total as f64
    } else {
        0.0
    };
    let flow_weight = 1.0 / batch.len() as f64;
    // In cotrain mode the flow gradient carries beta directly.
    let flow_scale = if mode == TrainMode::Cotrain {
        train.beta * flow_weight
    } else {
        flow_weight
    };
    let shared: &ModelParams = params;
    let parts: Vec<(f64, f64, ModelGrads)> = batch
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(chunk_idx, chunk)| -> Result<(f64, f64, ModelGrads)> {
            let mut grads = ModelGrads::zeros(shared);
            let mut vlm_sum = 0.0;
            let mut dif_sum = 0.0;
            for (j, sample) in chunk.iter().enumerate() {
                let single = std::slice::from_ref(sample);
                if do_ar && token_total > 0 {
                    let (nll_sum, _) =
                        ar_nll_sum_grad(single, shared, space, &mut grads, ar_scale)?;
                    vlm_sum += nll_sum;
                }
                if do_flow {
                    let index = (chunk_idx * GRAD_CHUNK + j) as u64;
                    let noise_seed = derive_seed(step_seed, "sample", index);
                    dif_sum +=
                        flow_loss_sum_grad(single, shared, noise_seed, &mut grads, flow_scale)?;
                }
            }
            Ok((vlm_sum, dif_sum, grads))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grads = ModelGrads::zeros(params);
    let mut vlm = 0.0;
    let mut dif = 0.0;
    for (v, d, g) in &parts {
        vlm += v;
        dif += d;
        grads.add_scaled(g, 1.0);
    }
    vlm *= ar_scale;
    dif *= flow_weight;
    if mode == TrainMode::ScorerOnly {
        grads.encoder.iter_mut().for_each(|g| *g = 0.0);
    }
    opt.apply(params, &grads, train);
    Ok((vlm, dif))
}

/// Runs the configured training job end to end: loads the dataset, fits the
/// codec, builds samples, trains, logs per-epoch losses to CSV, and saves
/// the checkpoint.
pub fn run_training(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let mode = TrainMode::parse(&cfg.train_mode)?;
    let scheme = cfg.scheme()?;
    let h = cfg.codec.h;
    let seed = cfg.train.seed;
    let dataset = load_dataset(&cfg.out_dir, h)?;
    let (codec, vocab) = fit_codec(cfg, &dataset)?;
    let tk = TextTokenizer::standard();
    let space = scheme.token_space(&codec, &vocab);
    let samples = build_samples(&dataset, &codec, &vocab, &tk, scheme, &space)?;

    let ckpt_path = checkpoint_path(&cfg.out_dir, h, mode.name(), scheme.name(), seed);
    let arch = cfg.model.arch(h, codec.d, space.vocab_size);
    let (mut params, mut opt) = if resume {
        let ckpt = load_checkpoint(&ckpt_path)?;
        if ckpt.header.arch != arch {
            bail!("checkpoint architecture does not match the configuration");
        }
        (ckpt.params, ckpt.opt)
    } else if mode == TrainMode::ScorerOnly {
        // Fresh scorer head over the frozen co-trained backbone.
        let base_path = checkpoint_path(&cfg.out_dir, h, "cotrain", "textual_fast", seed);
        let base = load_checkpoint(&base_path)?;
        let mut params = ModelParams::init(arch.clone(), derive_seed(seed, "scorer_head", 0));
        params.encoder = base.params.encoder.clone();
        params.flow = base.params.flow.clone();
        let opt = AdamState::new(&params);
        (params, opt)
    } else {
        let params = ModelParams::init(arch.clone(), seed);
        let opt = AdamState::new(&params);
        (params, opt)
    };

    let log_path = cfg.out_dir.join(format!(
        "train_log_h{h}_{}_{}_seed{seed}.csv",
        mode.name(),
        scheme.name()
    ));
    let mut log = String::new();
    log.push_str(&format!(
        "# mode={} scheme={} h={h} seed={seed} beta={} lr={} batch_size={} epochs={}\n",
        mode.name(),
        scheme.name(),
        cfg.train.beta,
        cfg.train.learning_rate,
        cfg.train.batch_size,
        cfg.train.epochs,
    ));
    log.push_str("epoch,loss_vlm,loss_dif,loss_total\n");

    let n = samples.len();
    let mut last = EpochLosses::default();
    for epoch in 0..cfg.train.epochs {
        let order = Stream::substream(seed, "shuffle", epoch as u64).shuffled_indices(n);
        let mut epoch_losses = EpochLosses::default();
        let mut batches = 0usize;
        for batch_idx in order.chunks(cfg.train.batch_size.max(1)) {
            let batch: Vec<TrainSample> =
                batch_idx.iter().map(|&i| samples[i].clone()).collect();
            let step_seed = derive_seed(seed, "noise", opt.step);
            let (vlm, dif) =
                train_step(&batch, &mut params, &mut opt, &cfg.train, &space, mode, step_seed)?;
            epoch_losses.vlm += vlm;
            epoch_losses.dif += dif;
            batches += 1;
        }
        epoch_losses.vlm /= batches.max(1) as f64;
        epoch_losses.dif /= batches.max(1) as f64;
        let total = epoch_losses.vlm + cfg.train.beta * epoch_losses.dif;
        log.push_str(&format!(
            "{epoch},{:.9},{:.9},{:.9}\n",
            epoch_losses.vlm, epoch_losses.dif, total
        ));
        last = epoch_losses;
    }

    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        arch,
        seed,
        train_step: opt.step,
        scheme: scheme.name().to_string(),
        train: cfg.train.clone(),
    };
    save_checkpoint(&ckpt_path, &header, &params, &opt)?;
    let mut file = fs::File::create(&log_path)
        .with_context(|| format!("writing training log {}", log_path.display()))?;
    file.write_all(log.as_bytes())?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        log: log_path,
        final_vlm: last.vlm,
        final_dif: last.dif,
        steps: opt.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_dataset;

    fn tiny_cfg(dir: &std::path::Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.out_dir = dir.to_path_buf();
        cfg.data.episodes = 4;
        cfg.codec.h = 4;
        cfg.train.epochs = 2;
        cfg.train.batch_size = 16;
        cfg.train.seed = 5;
        cfg.infer.replan_every = 4;
        cfg
    }

    #[test]
    fn cotraining_runs_and_checkpoints_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        generate_dataset(&cfg, 4).unwrap();
        let a = run_training(&cfg, false).unwrap();
        let bytes_a = fs::read(&a.checkpoint).unwrap();
        let b = run_training(&cfg, false).unwrap();
        let bytes_b = fs::read(&b.checkpoint).unwrap();
        assert_eq!(bytes_a, bytes_b);
        assert!(a.steps > 0);
        // Initial textual NLL sits near ln(vocab) and training reduces it.
        let log = fs::read_to_string(&a.log).unwrap();
        let mut rows = log.lines().skip(2);
        let first: f64 = rows.next().unwrap().split(',').nth(1).unwrap().parse().unwrap();
        assert!(first < (199f64).ln() * 1.05);
        assert!(a.final_vlm < first);
    }

    #[test]
    fn resume_continues_the_step_count() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        generate_dataset(&cfg, 4).unwrap();
        let first = run_training(&cfg, false).unwrap();
        let resumed = run_training(&cfg, true).unwrap();
        assert_eq!(resumed.steps, 2 * first.steps);
    }

    #[test]
    fn scorer_mode_requires_the_base_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        generate_dataset(&cfg, 4).unwrap();
        cfg.train_mode = "scorer".to_string();
        cfg.scheme = "bins".to_string();
        let err = run_training(&cfg, false).unwrap_err();
        assert!(format!("{err:#}").contains("model_h4_cotrain_textual_fast_seed5.ckpt"));
        // After co-training the scorer head fits fine and freezes the backbone.
        cfg.train_mode = "cotrain".to_string();
        cfg.scheme = "textual_fast".to_string();
        run_training(&cfg, false).unwrap();
        cfg.train_mode = "scorer".to_string();
        cfg.scheme = "bins".to_string();
        let out = run_training(&cfg, false).unwrap();
        let scorer = load_checkpoint(&out.checkpoint).unwrap();
        let base = load_checkpoint(&checkpoint_path(dir.path(), 4, "cotrain", "textual_fast", 5))
            .unwrap();
        assert_eq!(scorer.params.encoder.data, base.params.encoder.data);
        assert_eq!(scorer.header.scheme, "bins");
        assert_eq!(scorer.params.cfg.vocab_size, 512 + 3);
    }

    #[test]
    fn flow_mode_trains_without_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        generate_dataset(&cfg, 4).unwrap();
        cfg.train_mode = "flow".to_string();
        let out = run_training(&cfg, false).unwrap();
        assert!(out.checkpoint.ends_with("model_h4_flow_seed5.ckpt"));
        assert!(out.final_dif.is_finite());
    }
}
