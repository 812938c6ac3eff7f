//! Candidate verification: length-normalized perplexity-style scores over
//! token sequences, argmin selection, and the full draft-and-verify
//! inference path.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{ActionChunk, BpeVocab, CodecConfig, CodecError, Scheme, TextTokenizer, TokenSpace};
use crate::model::{ar_logprobs, draft, Instruction, ModelError, ModelParams, Observation};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifierError {
    #[error("no scorable tokens after stripping special ids")]
    EmptySequence,
    #[error("every candidate overflowed the padding length")]
    AllOverflow,
    #[error("rank {k} out of range: {valid} valid candidates")]
    KOutOfRange { k: usize, valid: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Perplexity-style score: `exp` of the mean token negative log-likelihood.
/// Log-probabilities are never positive, so `value >= 1` always.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    /// Number of tokens the mean ran over (specials excluded).
    pub token_count: usize,
}

/// Scoring configuration; candidates pad to `max_len` for batch scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierConfig {
    pub max_len: usize,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        VerifierConfig { max_len: 256 }
    }
}

/// Outcome of scoring one candidate in a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreOutcome {
    Valid(Score),
    /// Longer than the padding length; excluded from selection.
    Overflow,
}

impl ScoreOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            ScoreOutcome::Valid(s) => Some(s.value),
            ScoreOutcome::Overflow => None,
        }
    }
}

/// Scores one token sequence: `exp(-(1/T) * sum log pi(t_i | f_c, t_<i))`
/// with BOS/EOS/PAD excluded from both the sum and `T`.
pub fn score_candidate(
    feature: &[f64],
    tokens: &[u32],
    params: &ModelParams,
    space: &TokenSpace,
) -> Result<Score, VerifierError> {
    let logps = ar_logprobs(feature, tokens, params, space)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (lp, &tok) in logps.iter().zip(tokens) {
        if space.is_special(tok) {
            continue;
        }
        sum += lp;
        count += 1;
    }
    if count == 0 {
        return Err(VerifierError::EmptySequence);
    }
    Ok(Score {
        value: libm::exp(-sum / count as f64),
        token_count: count,
    })
}

/// Scores a drafted batch. Every candidate pads to `cfg.max_len`; a
/// candidate longer than that is marked [`ScoreOutcome::Overflow`] instead
/// of being scored. Padding never changes a score: pad positions are
/// excluded and sit after all content.
pub fn score_batch(
    feature: &[f64],
    candidates: &[crate::TokenSeq],
    params: &ModelParams,
    space: &TokenSpace,
    cfg: &VerifierConfig,
) -> Result<Vec<ScoreOutcome>, VerifierError> {
    let mut out = Vec::with_capacity(candidates.len());
    for tokens in candidates {
        let effective = tokens.iter().filter(|&&t| !space.is_special(t)).count();
        if effective > cfg.max_len {
            out.push(ScoreOutcome::Overflow);
            continue;
        }
        let mut padded = tokens.clone();
        padded.resize(cfg.max_len.max(tokens.len()), space.pad);
        out.push(ScoreOutcome::Valid(score_candidate(
            feature, &padded, params, space,
        )?));
    }
    Ok(out)
}

/// Index of the lowest-scoring valid candidate; ties break to the lowest
/// index.
pub fn select(outcomes: &[ScoreOutcome]) -> Result<usize, VerifierError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, outcome) in outcomes.iter().enumerate() {
        if let Some(v) = outcome.value() {
            if best.map_or(true, |(_, bv)| v < bv) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i).ok_or(VerifierError::AllOverflow)
}

/// Index of the k-th smallest valid score (1-based); ties resolve in index
/// order.
pub fn select_kth(outcomes: &[ScoreOutcome], k: usize) -> Result<usize, VerifierError> {
    let mut ranked: Vec<(f64, usize)> = outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.value().map(|v| (v, i)))
        .collect();
    if k == 0 || k > ranked.len() {
        return Err(VerifierError::KOutOfRange {
            k,
            valid: ranked.len(),
        });
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked[k - 1].1)
}

/// Per-inference diagnostics; serializes to
/// `{"scores":[...],"chosen":i,"overflow":[...],"seed":...}` with `null`
/// in place of overflowed candidates' scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvDiagnostics {
    pub scores: Vec<Option<f64>>,
    pub chosen: usize,
    pub overflow: Vec<usize>,
    pub seed: u64,
}

/// Everything the draft-and-verify path needs besides the model.
pub struct AdvContext<'a> {
    pub codec: &'a CodecConfig,
    pub vocab: &'a BpeVocab,
    pub tokenizer: &'a TextTokenizer,
    pub scheme: Scheme,
    pub verifier: &'a VerifierConfig,
    /// Candidate count M.
    pub m: usize,
    /// Euler de-noising steps.
    pub steps: usize,
}

/// Draft-and-verify inference: draft `m` chunks, tokenize each, score them
/// in one batch, execute the argmin. The returned chunk is always one of
/// the drafted candidates, never a decode of its tokens. If every candidate
/// overflows, candidate 0 is executed and flagged via the diagnostics.
pub fn adv_infer(
    obs: &Observation,
    instr: Instruction,
    params: &ModelParams,
    ctx: &AdvContext<'_>,
    base_seed: u64,
) -> Result<(ActionChunk, AdvDiagnostics), VerifierError> {
    let set = draft(
        obs,
        instr,
        params,
        ctx.m,
        ctx.steps,
        base_seed,
        &ctx.codec.norm,
    );
    let space = ctx.scheme.token_space(ctx.codec, ctx.vocab);
    let mut token_seqs = Vec::with_capacity(set.chunks.len());
    for chunk in &set.chunks {
        token_seqs.push(ctx.scheme.encode(chunk, ctx.codec, ctx.vocab, ctx.tokenizer)?);
    }
    let outcomes = score_batch(&set.feature, &token_seqs, params, &space, ctx.verifier)?;
    let chosen = match select(&outcomes) {
        Ok(i) => i,
        Err(VerifierError::AllOverflow) => 0,
        Err(e) => return Err(e),
    };
    let diagnostics = AdvDiagnostics {
        scores: outcomes.iter().map(|o| o.value()).collect(),
        chosen,
        overflow: outcomes
            .iter()
            .enumerate()
            .filter_map(|(i, o)| matches!(o, ScoreOutcome::Overflow).then_some(i))
            .collect(),
        seed: base_seed,
    };
    Ok((set.chunks[chosen].clone(), diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::NormStats;
    use crate::model::ModelConfig;
    use crate::rng::Stream;
    use alloc::vec;

    fn space(vocab: usize) -> TokenSpace {
        TokenSpace {
            vocab_size: vocab,
            bos: 0,
            eos: 1,
            pad: 2,
        }
    }

    fn uniform_params(vocab: usize) -> ModelParams {
        ModelParams::zeros(ModelConfig {
            h: 2,
            d: 2,
            feature_dim: 4,
            enc_hidden: 5,
            flow_hidden: 6,
            window: 3,
            embed_dim: 4,
            scorer_hidden: 5,
            vocab_size: vocab,
        })
    }

    #[test]
    fn uniform_scorer_scores_equal_vocab_size() {
        let params = uniform_params(10);
        let sp = space(10);
        let score = score_candidate(&vec![0.0; 4], &[3, 4, 5], &params, &sp).unwrap();
        assert!((score.value - 10.0).abs() < 1e-9);
        assert_eq!(score.token_count, 3);
    }

    #[test]
    fn two_half_probability_tokens_score_two() {
        // Bias the output layer so ids 3 and 4 carry probability 1/2 each;
        // the -1e9 logits underflow to exactly zero probability.
        let mut params = uniform_params(10);
        let b = params.scorer.output_bias_offset();
        for i in 0..10 {
            params.scorer.data[b + i] = if i == 3 || i == 4 { 0.0 } else { -1e9 };
        }
        let sp = space(10);
        let score = score_candidate(&vec![0.0; 4], &[3, 4], &params, &sp).unwrap();
        assert!((score.value - 2.0).abs() < 1e-9);
    }

    #[test]
    fn scores_are_at_least_one() {
        let mut stream = Stream::from_seed(50);
        for seed in 0..10 {
            let params = ModelParams::init(
                ModelConfig {
                    vocab_size: 12,
                    ..uniform_params(12).cfg
                },
                seed,
            );
            let sp = space(12);
            let tokens: Vec<u32> = (0..8).map(|_| 3 + stream.uniform_index(9) as u32).collect();
            let f: Vec<f64> = (0..4).map(|_| stream.uniform_in(-1.0, 1.0)).collect();
            let score = score_candidate(&f, &tokens, &params, &sp).unwrap();
            assert!(score.value >= 1.0);
            assert!(score.value.is_finite());
        }
    }

    #[test]
    fn special_tokens_are_excluded_from_sum_and_count() {
        let params = uniform_params(10);
        let sp = space(10);
        let plain = score_candidate(&vec![0.0; 4], &[5, 6], &params, &sp).unwrap();
        let padded = score_candidate(&vec![0.0; 4], &[5, 6, 1, 2, 2], &params, &sp).unwrap();
        assert_eq!(plain.value, padded.value);
        assert_eq!(padded.token_count, 2);
        assert_eq!(
            score_candidate(&vec![0.0; 4], &[2, 2], &params, &sp),
            Err(VerifierError::EmptySequence)
        );
    }

    #[test]
    fn batched_scores_match_sequential_bit_for_bit() {
        let params = ModelParams::init(uniform_params(12).cfg.clone(), 9);
        let sp = space(12);
        let mut stream = Stream::from_seed(51);
        let f: Vec<f64> = (0..4).map(|_| stream.uniform_in(-1.0, 1.0)).collect();
        let candidates: Vec<crate::TokenSeq> = (0..8)
            .map(|_| {
                (0..3 + stream.uniform_index(6))
                    .map(|_| 3 + stream.uniform_index(9) as u32)
                    .collect()
            })
            .collect();
        for max_len in [16usize, 64, 256] {
            let cfg = VerifierConfig { max_len };
            let batch = score_batch(&f, &candidates, &params, &sp, &cfg).unwrap();
            for (tokens, outcome) in candidates.iter().zip(&batch) {
                let single = score_candidate(&f, tokens, &params, &sp).unwrap();
                match outcome {
                    ScoreOutcome::Valid(s) => {
                        assert_eq!(s.value, single.value);
                        assert_eq!(s.token_count, single.token_count);
                    }
                    ScoreOutcome::Overflow => panic!("unexpected overflow"),
                }
            }
        }
    }

    #[test]
    fn over_length_candidates_become_overflow_markers() {
        let params = uniform_params(10);
        let sp = space(10);
        let cfg = VerifierConfig { max_len: 4 };
        let candidates: Vec<crate::TokenSeq> = vec![vec![3, 4], vec![3; 9], vec![5, 6, 7]];
        let batch = score_batch(&vec![0.0; 4], &candidates, &params, &sp, &cfg).unwrap();
        assert!(matches!(batch[0], ScoreOutcome::Valid(_)));
        assert!(matches!(batch[1], ScoreOutcome::Overflow));
        assert!(matches!(batch[2], ScoreOutcome::Valid(_)));
        assert_eq!(select(&batch).unwrap(), 0);
    }

    fn valid(values: &[f64]) -> Vec<ScoreOutcome> {
        values
            .iter()
            .map(|&v| {
                ScoreOutcome::Valid(Score {
                    value: v,
                    token_count: 1,
                })
            })
            .collect()
    }

    #[test]
    fn select_takes_the_argmin_with_lowest_index_ties() {
        assert_eq!(select(&valid(&[2.0, 1.5, 3.0])).unwrap(), 1);
        assert_eq!(select(&valid(&[1.5, 1.5])).unwrap(), 0);
        assert_eq!(
            select(&[ScoreOutcome::Overflow]),
            Err(VerifierError::AllOverflow)
        );
    }

    #[test]
    fn select_kth_ranks_by_value_then_index() {
        let scores = valid(&[3.0, 1.0, 2.0]);
        assert_eq!(select_kth(&scores, 1).unwrap(), select(&scores).unwrap());
        assert_eq!(select_kth(&scores, 2).unwrap(), 2);
        assert_eq!(select_kth(&scores, 3).unwrap(), 0);
        assert!(matches!(
            select_kth(&scores, 4),
            Err(VerifierError::KOutOfRange { k: 4, valid: 3 })
        ));
        assert!(matches!(
            select_kth(&scores, 0),
            Err(VerifierError::KOutOfRange { .. })
        ));
        // Ties resolve in index order at every rank.
        let tied = valid(&[1.5, 1.5, 1.0]);
        assert_eq!(select_kth(&tied, 1).unwrap(), 2);
        assert_eq!(select_kth(&tied, 2).unwrap(), 0);
        assert_eq!(select_kth(&tied, 3).unwrap(), 1);
    }

    #[test]
    fn argmin_is_invariant_under_monotone_transforms_of_mean_nll() {
        let mut stream = Stream::from_seed(52);
        for _ in 0..100 {
            let nll: Vec<f64> = (0..8).map(|_| stream.uniform_in(0.0, 4.0)).collect();
            let direct = valid(&nll.iter().map(|&x| libm::exp(x)).collect::<Vec<_>>());
            let scaled = valid(&nll.iter().map(|&x| 2.0 * x + 1.0).collect::<Vec<_>>());
            let raw = valid(&nll);
            let i = select(&direct).unwrap();
            assert_eq!(select(&scaled).unwrap(), i);
            assert_eq!(select(&raw).unwrap(), i);
        }
    }

    fn adv_fixture() -> (ModelParams, CodecConfig, BpeVocab, TextTokenizer) {
        let codec = CodecConfig {
            h: 2,
            d: 2,
            gamma: 100.0,
            q_max: 512,
            bins: 512,
            bpe_vocab_size: 1026,
            norm: NormStats {
                lo: vec![-1.0, -1.0],
                hi: vec![1.0, 1.0],
            },
        };
        let tk = TextTokenizer::standard();
        let vocab = BpeVocab::identity(codec.q_max);
        let params = ModelParams::init(
            ModelConfig::with_dims(2, 2, tk.vocab_size()),
            33,
        );
        (params, codec, vocab, tk)
    }

    #[test]
    fn adv_infer_executes_a_drafted_candidate() {
        let (params, codec, vocab, tk) = adv_fixture();
        let vcfg = VerifierConfig::default();
        let ctx = AdvContext {
            codec: &codec,
            vocab: &vocab,
            tokenizer: &tk,
            scheme: Scheme::TextualFast,
            verifier: &vcfg,
            m: 16,
            steps: 4,
        };
        let obs = Observation([0.1, -0.4, 0.2, 0.0]);
        let instr = Instruction { goal_id: 2 };
        let (chunk, diag) = adv_infer(&obs, instr, &params, &ctx, 900).unwrap();
        assert_eq!(diag.scores.len(), 16);
        assert!(diag.overflow.is_empty());
        let min = diag
            .scores
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min);
        assert_eq!(diag.scores[diag.chosen], Some(min));
        // The executed chunk is bit-identical to one drafted candidate.
        let set = draft(&obs, instr, &params, 16, 4, 900, &codec.norm);
        assert_eq!(chunk.values(), set.chunks[diag.chosen].values());
        assert_eq!(diag.seed, 900);

        let json = serde_json::to_string(&diag).unwrap();
        assert!(json.starts_with("{\"scores\":["));
        assert!(json.contains("\"chosen\":"));
        assert!(json.contains("\"overflow\":[]"));
        assert!(json.contains("\"seed\":900"));
    }

    #[test]
    fn single_candidate_inference_returns_the_sole_draft() {
        let (params, codec, vocab, tk) = adv_fixture();
        let vcfg = VerifierConfig::default();
        let ctx = AdvContext {
            codec: &codec,
            vocab: &vocab,
            tokenizer: &tk,
            scheme: Scheme::TextualFast,
            verifier: &vcfg,
            m: 1,
            steps: 4,
        };
        let obs = Observation([0.0; 4]);
        let instr = Instruction { goal_id: 0 };
        let (chunk, diag) = adv_infer(&obs, instr, &params, &ctx, 17).unwrap();
        assert_eq!(diag.chosen, 0);
        let set = draft(&obs, instr, &params, 1, 4, 17, &codec.norm);
        assert_eq!(chunk.values(), set.chunks[0].values());
    }

    #[test]
    fn all_overflow_falls_back_to_candidate_zero() {
        let (params, codec, vocab, tk) = adv_fixture();
        let vcfg = VerifierConfig { max_len: 1 };
        let ctx = AdvContext {
            codec: &codec,
            vocab: &vocab,
            tokenizer: &tk,
            scheme: Scheme::TextualFast,
            verifier: &vcfg,
            m: 4,
            steps: 2,
        };
        let (_, diag) = adv_infer(
            &Observation([0.3, 0.3, -0.3, 0.1]),
            Instruction { goal_id: 1 },
            &params,
            &ctx,
            5,
        )
        .unwrap();
        assert_eq!(diag.chosen, 0);
        assert_eq!(diag.overflow, vec![0, 1, 2, 3]);
        assert!(diag.scores.iter().all(|s| s.is_none()));
    }
}
