//! Evaluation harness: policy planners for the three inference modes,
//! paired seeded rollouts, and the experiment suite.
//!
//! Pairing discipline: environment seeds depend only on the episode index,
//! and drafting seeds only on (train seed, episode, query), so any two
//! modes or selection rules see identical environments and identical
//! candidate sets.

pub mod experiments;
pub mod report;

use std::path::Path;
use std::time::Instant;

use anyhow::Result;
use rayon::prelude::*;

use adv_core::codec::{ActionChunk, BpeVocab, CodecConfig, Scheme, TextTokenizer, TokenSpace};
use adv_core::env::{rollout, EnvConfig, Episode, RolloutConfig, Split};
use adv_core::metrics::{aggregate, MetricSet};
use adv_core::model::{ar_decode, draft, encode_context, Instruction, ModelParams, Observation};
use adv_core::rng::{derive_seed, Stream};
use adv_core::verifier::{score_batch, score_candidate, select, select_kth, ScoreOutcome, VerifierConfig};

use crate::artifacts::{checkpoint_path, codec_path, load_checkpoint, load_codec};
use crate::config::RunConfig;

/// The three inference paradigms under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyMode {
    /// Token-by-token greedy decoding, then detokenization to actions.
    ArDecode,
    /// Single flow draft executed unverified.
    Diffusion,
    /// Draft M candidates, verify, execute the argmin-score chunk.
    Adv,
}

impl PolicyMode {
    pub fn name(self) -> &'static str {
        match self {
            PolicyMode::ArDecode => "ar_decode",
            PolicyMode::Diffusion => "diffusion",
            PolicyMode::Adv => "adv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ar" | "ar_decode" => Some(PolicyMode::ArDecode),
            "diffusion" => Some(PolicyMode::Diffusion),
            "adv" => Some(PolicyMode::Adv),
            _ => None,
        }
    }
}

/// A loaded model stack: codec, BPE vocabulary, tokenizer, and parameters.
pub struct Stack {
    pub codec: CodecConfig,
    pub vocab: BpeVocab,
    pub tokenizer: TextTokenizer,
    pub model: ModelParams,
    pub scheme: Scheme,
}

impl Stack {
    pub fn space(&self) -> TokenSpace {
        self.scheme.token_space(&self.codec, &self.vocab)
    }
}

/// Loads the codec and a checkpoint for `(h, mode, scheme, seed)`.
pub fn load_stack(
    out_dir: &Path,
    h: usize,
    mode: &str,
    scheme: Scheme,
    seed: u64,
) -> Result<Stack> {
    let (codec, vocab) = load_codec(&codec_path(out_dir, h))?;
    let ckpt = load_checkpoint(&checkpoint_path(out_dir, h, mode, scheme.name(), seed))?;
    anyhow::ensure!(
        ckpt.params.cfg.h == codec.h && ckpt.params.cfg.d == codec.d,
        "checkpoint dims do not match the codec file"
    );
    Ok(Stack {
        codec,
        vocab,
        tokenizer: TextTokenizer::standard(),
        model: ckpt.params,
        scheme,
    })
}

/// How the verifier picks among scored candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Argmin score (rank 1).
    Best,
    /// K-th smallest score, 1-based.
    Kth(usize),
    /// Uniformly random candidate, ignoring scores.
    Random,
}

/// What one policy query reports back to the harness.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlanInfo {
    pub chosen: Option<usize>,
    /// Perplexity-style score of the executed chunk, when scoring ran.
    pub executed_score: Option<f64>,
    pub decode_failed: bool,
}

/// A chunk planner: one policy query. Implementations must be pure given
/// `(obs, instr, query_seed)` so episodes stay deterministic under rayon.
pub trait Planner: Sync {
    fn plan(&self, obs: &Observation, instr: Instruction, query_seed: u64) -> (ActionChunk, PlanInfo);
    fn chunk_len(&self) -> usize;
}

/// Greedy autoregressive decoding through the action codec; malformed
/// decodes fall back to a zero chunk.
pub struct ArDecodePlanner<'a> {
    pub stack: &'a Stack,
    pub max_len: usize,
}

impl Planner for ArDecodePlanner<'_> {
    fn plan(&self, obs: &Observation, instr: Instruction, _query_seed: u64) -> (ActionChunk, PlanInfo) {
        let stack = self.stack;
        let feature = encode_context(obs, instr, &stack.model);
        let space = stack.space();
        let decoded = ar_decode(&feature, &stack.model, &space, self.max_len);
        match stack
            .scheme
            .decode(&decoded.tokens, &stack.codec, &stack.vocab, &stack.tokenizer)
        {
            Ok(chunk) => (chunk, PlanInfo::default()),
            Err(_) => (
                ActionChunk::zeros(stack.codec.h, stack.codec.d),
                PlanInfo {
                    decode_failed: true,
                    ..PlanInfo::default()
                },
            ),
        }
    }

    fn chunk_len(&self) -> usize {
        self.stack.codec.h
    }
}

/// Single-draft diffusion execution; optionally scores its own draft so
/// score-versus-outcome statistics can be collected.
pub struct DiffusionPlanner<'a> {
    pub stack: &'a Stack,
    pub steps: usize,
    pub score_drafts: bool,
}

impl Planner for DiffusionPlanner<'_> {
    fn plan(&self, obs: &Observation, instr: Instruction, query_seed: u64) -> (ActionChunk, PlanInfo) {
        let stack = self.stack;
        let set = draft(obs, instr, &stack.model, 1, self.steps, query_seed, &stack.codec.norm);
        let chunk = set.chunks.into_iter().next().expect("m >= 1");
        let mut info = PlanInfo {
            chosen: Some(0),
            ..PlanInfo::default()
        };
        if self.score_drafts {
            let space = stack.space();
            if let Ok(tokens) =
                stack
                    .scheme
                    .encode(&chunk, &stack.codec, &stack.vocab, &stack.tokenizer)
            {
                if let Ok(score) = score_candidate(&set.feature, &tokens, &stack.model, &space) {
                    info.executed_score = Some(score.value);
                }
            }
        }
        (chunk, info)
    }

    fn chunk_len(&self) -> usize {
        self.stack.codec.h
    }
}

/// Draft-and-verify planning with hooks for the analysis experiments:
/// rank-k / random selection, per-candidate noise injection, and a separate
/// scoring model (per-scheme verifier heads).
pub struct AdvPlanner<'a> {
    /// Drafting model (encoder + flow expert).
    pub stack: &'a Stack,
    /// Scoring model; usually `stack.model`, a scheme-specific head in the
    /// tokenizer experiment.
    pub scorer: &'a ModelParams,
    pub scorer_scheme: Scheme,
    pub verifier: &'a VerifierConfig,
    pub m: usize,
    pub steps: usize,
    pub selection: Selection,
    /// Uniform noise amplitude as a fraction of the per-dimension range,
    /// applied to every candidate except index 0.
    pub noise_level: Option<f64>,
}

impl AdvPlanner<'_> {
    fn perturb(&self, chunks: &mut [ActionChunk], level: f64, query_seed: u64) {
        let norm = &self.stack.codec.norm;
        let mut stream = Stream::substream(query_seed, "cand_noise", 0);
        for chunk in chunks.iter_mut().skip(1) {
            for step in 0..chunk.h() {
                for dim in 0..chunk.d() {
                    let amplitude = level * (norm.hi[dim] - norm.lo[dim]);
                    let delta = stream.uniform_in(-amplitude, amplitude);
                    chunk.set(step, dim, chunk.get(step, dim) + delta);
                }
            }
        }
    }
}

impl Planner for AdvPlanner<'_> {
    fn plan(&self, obs: &Observation, instr: Instruction, query_seed: u64) -> (ActionChunk, PlanInfo) {
        let stack = self.stack;
        let mut set = draft(
            obs,
            instr,
            &stack.model,
            self.m,
            self.steps,
            query_seed,
            &stack.codec.norm,
        );
        if let Some(level) = self.noise_level {
            if level > 0.0 {
                self.perturb(&mut set.chunks, level, query_seed);
            }
        }
        let space = self.scorer_scheme.token_space(&stack.codec, &stack.vocab);
        let feature = encode_context(obs, instr, self.scorer);
        let token_seqs: Vec<_> = set
            .chunks
            .iter()
            .map(|c| {
                self.scorer_scheme
                    .encode(c, &stack.codec, &stack.vocab, &stack.tokenizer)
                    .expect("finite drafts encode")
            })
            .collect();
        let outcomes = score_batch(&feature, &token_seqs, self.scorer, &space, self.verifier)
            .expect("drafted tokens are in-vocabulary");
        let chosen = match self.selection {
            Selection::Best => select(&outcomes).unwrap_or(0),
            Selection::Kth(k) => select_kth(&outcomes, k).unwrap_or(0),
            Selection::Random => {
                let valid: Vec<usize> = (0..outcomes.len())
                    .filter(|&i| matches!(outcomes[i], ScoreOutcome::Valid(_)))
                    .collect();
                if valid.is_empty() {
                    0
                } else {
                    let mut stream = Stream::substream(query_seed, "random_pick", 0);
                    valid[stream.uniform_index(valid.len())]
                }
            }
        };
        let info = PlanInfo {
            chosen: Some(chosen),
            executed_score: outcomes[chosen].value(),
            decode_failed: false,
        };
        (set.chunks[chosen].clone(), info)
    }

    fn chunk_len(&self) -> usize {
        self.stack.codec.h
    }
}

/// Per-episode statistics accumulated from [`PlanInfo`].
#[derive(Debug, Clone, Default)]
pub struct EpisodeStats {
    pub queries: u32,
    pub clean_chosen: u32,
    pub chosen_indices: Vec<usize>,
    pub executed_scores: Vec<f64>,
    pub decode_failures: u32,
}

/// Outcome of one evaluated cell.
pub struct CellResult {
    pub metrics: MetricSet,
    pub episodes: Vec<Episode>,
    pub stats: Vec<EpisodeStats>,
    pub inference_seconds: f64,
}

/// Environment seed for episode `i`; shared by every cell so comparisons
/// are paired.
pub fn episode_env_seed(global_seed: u64, index: usize) -> u64 {
    derive_seed(global_seed, "env", index as u64)
}

/// Drafting seed for `(train_seed, episode, query)`; mode-independent.
pub fn query_draft_seed(global_seed: u64, train_seed: u64, episode: usize, query: u64) -> u64 {
    let per_train = derive_seed(global_seed, "draft", train_seed);
    let per_episode = derive_seed(per_train, "episode", episode as u64);
    derive_seed(per_episode, "query", query)
}

/// Runs `episodes` seeded rollouts of `planner` and aggregates metrics.
/// Episodes run in parallel; results reduce in episode order.
pub fn run_cell<P: Planner>(
    planner: &P,
    env: &EnvConfig,
    rcfg: &RolloutConfig,
    episodes: usize,
    global_seed: u64,
    train_seed: u64,
) -> CellResult {
    let results: Vec<(Episode, EpisodeStats, f64)> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let env_seed = episode_env_seed(global_seed, i);
            let mut stats = EpisodeStats::default();
            let mut seconds = 0.0;
            let episode = {
                let stats = &mut stats;
                let seconds = &mut seconds;
                let mut policy = |obs: &Observation, instr: Instruction, query: u64| {
                    let qseed = query_draft_seed(global_seed, train_seed, i, query);
                    let start = Instant::now();
                    let (chunk, info) = planner.plan(obs, instr, qseed);
                    *seconds += start.elapsed().as_secs_f64();
                    stats.queries += 1;
                    if let Some(chosen) = info.chosen {
                        stats.chosen_indices.push(chosen);
                        if chosen == 0 {
                            stats.clean_chosen += 1;
                        }
                    }
                    if let Some(score) = info.executed_score {
                        stats.executed_scores.push(score);
                    }
                    if info.decode_failed {
                        stats.decode_failures += 1;
                    }
                    chunk
                };
                rollout(&mut policy, env, env_seed, rcfg)
            };
            (episode, stats, seconds)
        })
        .collect();

    let mut episodes_out = Vec::with_capacity(results.len());
    let mut stats_out = Vec::with_capacity(results.len());
    let mut seconds = 0.0;
    for (episode, stats, s) in results {
        episodes_out.push(episode);
        stats_out.push(stats);
        seconds += s;
    }
    let metrics = aggregate(&episodes_out, env, seconds);
    CellResult {
        metrics,
        episodes: episodes_out,
        stats: stats_out,
        inference_seconds: seconds,
    }
}

/// Convenience: evaluates one `(mode, split)` cell with the stack's own
/// scorer and standard selection.
pub fn eval_policy(
    stack: &Stack,
    cfg: &RunConfig,
    mode: PolicyMode,
    split: Split,
    episodes: usize,
    train_seed: u64,
) -> CellResult {
    let env = EnvConfig {
        split,
        ..cfg.env.clone()
    };
    let rcfg = RolloutConfig {
        chunk_len: stack.codec.h,
        replan_every: cfg.infer.replan_every.min(stack.codec.h),
    };
    match mode {
        PolicyMode::ArDecode => {
            let planner = ArDecodePlanner {
                stack,
                max_len: cfg.infer.max_decode_len,
            };
            run_cell(&planner, &env, &rcfg, episodes, cfg.seed, train_seed)
        }
        PolicyMode::Diffusion => {
            let planner = DiffusionPlanner {
                stack,
                steps: cfg.infer.steps,
                score_drafts: false,
            };
            run_cell(&planner, &env, &rcfg, episodes, cfg.seed, train_seed)
        }
        PolicyMode::Adv => {
            let planner = AdvPlanner {
                stack,
                scorer: &stack.model,
                scorer_scheme: stack.scheme,
                verifier: &cfg.verifier,
                m: cfg.infer.m,
                steps: cfg.infer.steps,
                selection: Selection::Best,
                noise_level: None,
            };
            run_cell(&planner, &env, &rcfg, episodes, cfg.seed, train_seed)
        }
    }
}
