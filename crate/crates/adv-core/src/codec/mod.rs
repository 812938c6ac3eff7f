//! Action tokenization: continuous chunks to discrete token sequences and
//! back, via four schemes.
//!
//! * `bins` — quantile-normalize, clip, uniform-discretize each value.
//! * `fast` — normalize, per-dimension DCT, scale-and-round by gamma,
//!   flatten low-frequency-first, then BPE.
//! * `vla0` — bin indices rendered as decimal text, then re-tokenized
//!   character by character.
//! * `textual_fast` — the `fast` token ids rendered as decimal text, then
//!   re-tokenized character by character.
//!
//! All codec state is immutable after construction; every operation here is
//! a pure function.

pub mod bpe;
pub mod dct;
pub mod text;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bpe::BpeVocab;
pub use dct::{dct_forward, dct_inverse};
pub use text::{parse_text, render_text, TextTokenizer};

use crate::TokenSeq;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("empty input")]
    EmptyInput,
    #[error("dimension {0} is degenerate: 1st and 99th percentiles coincide")]
    DegenerateDimension(usize),
    #[error("dimension mismatch: got {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("sequence length {got} does not match h*d = {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("symbol {0} outside the base alphabet")]
    SymbolOutOfRange(i32),
    #[error("unknown symbol id {0}")]
    UnknownSymbol(u32),
    #[error("unknown token id {0}")]
    UnknownTokenId(u32),
    #[error("character {0:?} not in the tokenizer alphabet")]
    UnknownCharacter(char),
    #[error("token {got} out of range for {expected} bins")]
    BinOutOfRange { got: u32, expected: u32 },
    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: &'static str },
    #[error("non-finite value at step {row}, dim {dim}")]
    NonFinite { row: usize, dim: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
}

/// An H-by-D matrix of continuous control actions, row-major by timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    h: usize,
    d: usize,
    values: Vec<f64>,
}

impl ActionChunk {
    pub fn new(h: usize, d: usize, values: Vec<f64>) -> Result<Self, CodecError> {
        if h == 0 || d == 0 {
            return Err(CodecError::InvalidConfig("chunk dimensions must be >= 1"));
        }
        if values.len() != h * d {
            return Err(CodecError::LengthMismatch {
                got: values.len(),
                expected: h * d,
            });
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(CodecError::NonFinite {
                    row: i / d,
                    dim: i % d,
                });
            }
        }
        Ok(ActionChunk { h, d, values })
    }

    pub fn zeros(h: usize, d: usize) -> Self {
        ActionChunk {
            h,
            d,
            values: vec![0.0; h * d],
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn get(&self, step: usize, dim: usize) -> f64 {
        self.values[step * self.d + dim]
    }

    pub fn set(&mut self, step: usize, dim: usize, value: f64) {
        self.values[step * self.d + dim] = value;
    }

    /// Row-major backing slice (`values[step * d + dim]`).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Action row for one timestep.
    pub fn row(&self, step: usize) -> &[f64] {
        &self.values[step * self.d..(step + 1) * self.d]
    }

    pub fn max_abs_difference(&self, other: &ActionChunk) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-dimension 1st/99th-percentile bounds used for quantile normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl NormStats {
    pub fn d(&self) -> usize {
        self.lo.len()
    }

    fn check_dims(&self, chunk: &ActionChunk) -> Result<(), CodecError> {
        if chunk.d() != self.d() {
            return Err(CodecError::DimensionMismatch {
                got: chunk.d(),
                expected: self.d(),
            });
        }
        Ok(())
    }
}

/// Fits per-dimension percentile bounds over every value in the collection.
///
/// Percentiles use linear interpolation between order statistics:
/// rank `(n-1)*p`, interpolating between the two straddling sorted values.
pub fn fit_norm_stats(chunks: &[ActionChunk]) -> Result<NormStats, CodecError> {
    let Some(first) = chunks.first() else {
        return Err(CodecError::EmptyInput);
    };
    let d = first.d();
    for c in chunks {
        if c.d() != d {
            return Err(CodecError::DimensionMismatch {
                got: c.d(),
                expected: d,
            });
        }
    }
    let mut lo = Vec::with_capacity(d);
    let mut hi = Vec::with_capacity(d);
    let mut pooled: Vec<f64> = Vec::new();
    for dim in 0..d {
        pooled.clear();
        for c in chunks {
            for step in 0..c.h() {
                pooled.push(c.get(step, dim));
            }
        }
        pooled.sort_unstable_by(f64::total_cmp);
        let p_lo = percentile_sorted(&pooled, 0.01);
        let p_hi = percentile_sorted(&pooled, 0.99);
        if p_lo >= p_hi {
            return Err(CodecError::DegenerateDimension(dim));
        }
        lo.push(p_lo);
        hi.push(p_hi);
    }
    Ok(NormStats { lo, hi })
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = (n - 1) as f64 * p;
    let below = rank as usize;
    let frac = rank - below as f64;
    if below + 1 == n {
        sorted[below]
    } else {
        sorted[below] + frac * (sorted[below + 1] - sorted[below])
    }
}

/// Affine map sending `lo[d]` to -1 and `hi[d]` to +1; values outside the
/// percentile band map outside [-1, 1] (no clipping).
pub fn normalize(chunk: &ActionChunk, stats: &NormStats) -> Result<ActionChunk, CodecError> {
    stats.check_dims(chunk)?;
    let mut out = chunk.clone();
    for step in 0..chunk.h() {
        for dim in 0..chunk.d() {
            let x = chunk.get(step, dim);
            out.set(
                step,
                dim,
                2.0 * (x - stats.lo[dim]) / (stats.hi[dim] - stats.lo[dim]) - 1.0,
            );
        }
    }
    Ok(out)
}

/// Exact inverse of [`normalize`].
pub fn denormalize(chunk: &ActionChunk, stats: &NormStats) -> Result<ActionChunk, CodecError> {
    stats.check_dims(chunk)?;
    let mut out = chunk.clone();
    for step in 0..chunk.h() {
        for dim in 0..chunk.d() {
            let y = chunk.get(step, dim);
            out.set(
                step,
                dim,
                stats.lo[dim] + (y + 1.0) * 0.5 * (stats.hi[dim] - stats.lo[dim]),
            );
        }
    }
    Ok(out)
}

/// Codec parameters shared by all four tokenization schemes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Chunk length in timesteps.
    pub h: usize,
    /// Action dimensionality per timestep.
    pub d: usize,
    /// Quantization scale applied to DCT coefficients before rounding.
    pub gamma: f64,
    /// Quantized symbols clamp to `[-q_max, q_max]`.
    pub q_max: u32,
    /// Bin count for the bins / vla0 schemes.
    pub bins: u32,
    /// Total vocabulary budget (base alphabet plus merges) for BPE training.
    pub bpe_vocab_size: usize,
    pub norm: NormStats,
}

impl CodecConfig {
    pub fn validate(&self) -> Result<(), CodecError> {
        if self.h == 0 || self.d == 0 {
            return Err(CodecError::InvalidConfig("h and d must be >= 1"));
        }
        if !(self.gamma > 0.0) {
            return Err(CodecError::InvalidConfig("gamma must be positive"));
        }
        if self.q_max == 0 {
            return Err(CodecError::InvalidConfig("q_max must be >= 1"));
        }
        if self.bins < 2 {
            return Err(CodecError::InvalidConfig("bins must be >= 2"));
        }
        if self.bpe_vocab_size <= 2 * self.q_max as usize + 1 {
            return Err(CodecError::InvalidConfig(
                "bpe_vocab_size must exceed the base alphabet",
            ));
        }
        if self.norm.d() != self.d || self.norm.hi.len() != self.d {
            return Err(CodecError::InvalidConfig("norm stats dim mismatch"));
        }
        Ok(())
    }

    fn check_chunk(&self, chunk: &ActionChunk) -> Result<(), CodecError> {
        if chunk.h() != self.h || chunk.d() != self.d {
            return Err(CodecError::DimensionMismatch {
                got: chunk.h() * chunk.d(),
                expected: self.h * self.d,
            });
        }
        Ok(())
    }
}

/// Quantized coefficient matrix plus a saturation diagnostic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quantized {
    /// Row-major `h*d` integers in `[-q_max, q_max]`.
    pub values: Vec<i32>,
    /// How many coefficients hit the clamp bound.
    pub saturated: usize,
}

/// Scales coefficients by gamma and rounds half away from zero, clamping to
/// the symbol alphabet. Clamping is counted, not an error.
pub fn quantize(coeffs: &ActionChunk, cfg: &CodecConfig) -> Quantized {
    let bound = cfg.q_max as i64;
    let mut values = Vec::with_capacity(coeffs.values().len());
    let mut saturated = 0;
    for &c in coeffs.values() {
        let scaled = libm::round(cfg.gamma * c);
        // f64 -> i64 casts saturate, so extreme coefficients stay clampable.
        let q = (scaled as i64).clamp(-bound, bound);
        if (scaled as i64) != q {
            saturated += 1;
        }
        values.push(q as i32);
    }
    Quantized { values, saturated }
}

/// Inverse of [`quantize`] up to rounding: symbols scale back by 1/gamma.
pub fn dequantize(symbols: &[i32], cfg: &CodecConfig) -> Result<ActionChunk, CodecError> {
    if symbols.len() != cfg.h * cfg.d {
        return Err(CodecError::LengthMismatch {
            got: symbols.len(),
            expected: cfg.h * cfg.d,
        });
    }
    let values = symbols.iter().map(|&q| q as f64 / cfg.gamma).collect();
    ActionChunk::new(cfg.h, cfg.d, values)
}

/// Flattens a quantized coefficient matrix frequency-first: output index
/// `k*D + d` holds coefficient `(k, d)`, so every dimension's frequency-k
/// entry precedes any frequency-(k+1) entry.
pub fn flatten_column_first(q: &[i32], h: usize, d: usize) -> Vec<i32> {
    debug_assert_eq!(q.len(), h * d);
    let mut out = Vec::with_capacity(h * d);
    for k in 0..h {
        for dim in 0..d {
            out.push(q[k * d + dim]);
        }
    }
    out
}

/// Exact inverse of [`flatten_column_first`].
pub fn unflatten(symbols: &[i32], cfg: &CodecConfig) -> Result<Vec<i32>, CodecError> {
    if symbols.len() != cfg.h * cfg.d {
        return Err(CodecError::LengthMismatch {
            got: symbols.len(),
            expected: cfg.h * cfg.d,
        });
    }
    let mut out = vec![0i32; cfg.h * cfg.d];
    for k in 0..cfg.h {
        for dim in 0..cfg.d {
            out[k * cfg.d + dim] = symbols[k * cfg.d + dim];
        }
    }
    Ok(out)
}

/// FAST tokenization: normalize, DCT, quantize, flatten, BPE.
pub fn fast_encode(
    chunk: &ActionChunk,
    cfg: &CodecConfig,
    vocab: &BpeVocab,
) -> Result<TokenSeq, CodecError> {
    cfg.check_chunk(chunk)?;
    let coeffs = dct_forward(&normalize(chunk, &cfg.norm)?);
    let q = quantize(&coeffs, cfg);
    let flat = flatten_column_first(&q.values, cfg.h, cfg.d);
    vocab.encode(&flat)
}

/// Inverse FAST pipeline; reconstruction error is bounded by quantization.
pub fn fast_decode(
    tokens: &[u32],
    cfg: &CodecConfig,
    vocab: &BpeVocab,
) -> Result<ActionChunk, CodecError> {
    let flat = vocab.decode(tokens)?;
    let symbols = unflatten(&flat, cfg)?;
    let coeffs = dequantize(&symbols, cfg)?;
    denormalize(&dct_inverse(&coeffs), &cfg.norm)
}

/// Textual FAST: FAST token ids rendered as text, re-tokenized per character.
pub fn textual_fast_encode(
    chunk: &ActionChunk,
    cfg: &CodecConfig,
    vocab: &BpeVocab,
    tk: &TextTokenizer,
) -> Result<TokenSeq, CodecError> {
    let fast = fast_encode(chunk, cfg, vocab)?;
    tk.tokenize(&render_text(&fast))
}

pub fn textual_fast_decode(
    tokens: &[u32],
    cfg: &CodecConfig,
    vocab: &BpeVocab,
    tk: &TextTokenizer,
) -> Result<ActionChunk, CodecError> {
    let fast = parse_text(&tk.detokenize(tokens)?)?;
    fast_decode(&fast, cfg, vocab)
}

/// Action-bins tokenization: clip normalized values to [-1, 1] and map them
/// uniformly to bin indices, one token per value, timestep-major.
pub fn bins_encode(chunk: &ActionChunk, cfg: &CodecConfig) -> Result<TokenSeq, CodecError> {
    cfg.check_chunk(chunk)?;
    let normalized = normalize(chunk, &cfg.norm)?;
    let bins = cfg.bins as f64;
    let mut out = Vec::with_capacity(cfg.h * cfg.d);
    for step in 0..cfg.h {
        for dim in 0..cfg.d {
            let v = normalized.get(step, dim).clamp(-1.0, 1.0);
            let idx = libm::floor((v + 1.0) * 0.5 * bins) as i64;
            out.push(idx.clamp(0, cfg.bins as i64 - 1) as u32);
        }
    }
    Ok(out)
}

/// Maps each bin index back to its center value and denormalizes.
pub fn bins_decode(tokens: &[u32], cfg: &CodecConfig) -> Result<ActionChunk, CodecError> {
    if tokens.len() != cfg.h * cfg.d {
        return Err(CodecError::LengthMismatch {
            got: tokens.len(),
            expected: cfg.h * cfg.d,
        });
    }
    let mut values = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if t >= cfg.bins {
            return Err(CodecError::BinOutOfRange {
                got: t,
                expected: cfg.bins,
            });
        }
        values.push(-1.0 + (t as f64 + 0.5) * 2.0 / cfg.bins as f64);
    }
    let normalized = ActionChunk::new(cfg.h, cfg.d, values)?;
    denormalize(&normalized, &cfg.norm)
}

/// VLA-0 tokenization: bin indices rendered as decimal text, re-tokenized
/// per character.
pub fn vla0_encode(
    chunk: &ActionChunk,
    cfg: &CodecConfig,
    tk: &TextTokenizer,
) -> Result<TokenSeq, CodecError> {
    let bins = bins_encode(chunk, cfg)?;
    tk.tokenize(&render_text(&bins))
}

pub fn vla0_decode(
    tokens: &[u32],
    cfg: &CodecConfig,
    tk: &TextTokenizer,
) -> Result<ActionChunk, CodecError> {
    let bins = parse_text(&tk.detokenize(tokens)?)?;
    bins_decode(&bins, cfg)
}

/// The four tokenization schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Bins,
    Fast,
    Vla0,
    TextualFast,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Bins, Scheme::Fast, Scheme::Vla0, Scheme::TextualFast];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Bins => "bins",
            Scheme::Fast => "fast",
            Scheme::Vla0 => "vla0",
            Scheme::TextualFast => "textual_fast",
        }
    }

    pub fn parse(name: &str) -> Option<Scheme> {
        Scheme::ALL.iter().copied().find(|s| s.name() == name)
    }

    pub fn encode(
        self,
        chunk: &ActionChunk,
        cfg: &CodecConfig,
        vocab: &BpeVocab,
        tk: &TextTokenizer,
    ) -> Result<TokenSeq, CodecError> {
        match self {
            Scheme::Bins => bins_encode(chunk, cfg),
            Scheme::Fast => fast_encode(chunk, cfg, vocab),
            Scheme::Vla0 => vla0_encode(chunk, cfg, tk),
            Scheme::TextualFast => textual_fast_encode(chunk, cfg, vocab, tk),
        }
    }

    pub fn decode(
        self,
        tokens: &[u32],
        cfg: &CodecConfig,
        vocab: &BpeVocab,
        tk: &TextTokenizer,
    ) -> Result<ActionChunk, CodecError> {
        match self {
            Scheme::Bins => bins_decode(tokens, cfg),
            Scheme::Fast => fast_decode(tokens, cfg, vocab),
            Scheme::Vla0 => vla0_decode(tokens, cfg, tk),
            Scheme::TextualFast => textual_fast_decode(tokens, cfg, vocab, tk),
        }
    }

    /// Token id space a sequence model over this scheme must cover.
    ///
    /// Text-rendered schemes use the tokenizer's reserved ids 0/1/2 for
    /// BOS/EOS/PAD; the raw-id schemes append specials after the content
    /// vocabulary.
    pub fn token_space(self, cfg: &CodecConfig, vocab: &BpeVocab) -> TokenSpace {
        match self {
            Scheme::Vla0 | Scheme::TextualFast => TokenSpace {
                vocab_size: TextTokenizer::standard().vocab_size(),
                bos: TextTokenizer::BOS,
                eos: TextTokenizer::EOS,
                pad: TextTokenizer::PAD,
            },
            Scheme::Bins => TokenSpace::with_trailing_specials(cfg.bins as usize),
            Scheme::Fast => TokenSpace::with_trailing_specials(vocab.vocab_size()),
        }
    }
}

/// Vocabulary size and special token ids for one scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpace {
    pub vocab_size: usize,
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
}

impl TokenSpace {
    fn with_trailing_specials(content: usize) -> TokenSpace {
        TokenSpace {
            vocab_size: content + 3,
            bos: content as u32,
            eos: content as u32 + 1,
            pad: content as u32 + 2,
        }
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.bos || id == self.eos || id == self.pad
    }
}

/// On-disk form of the codec: configuration, normalization stats, and the
/// trained merge table. Merge order is significant and reloads bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecFile {
    pub version: u32,
    pub h: usize,
    pub d: usize,
    pub gamma: f64,
    pub q_max: u32,
    pub bins: u32,
    pub norm: NormStats,
    pub merges: Vec<(u32, u32)>,
}

pub const CODEC_FILE_VERSION: u32 = 1;

impl CodecFile {
    pub fn pack(cfg: &CodecConfig, vocab: &BpeVocab) -> CodecFile {
        CodecFile {
            version: CODEC_FILE_VERSION,
            h: cfg.h,
            d: cfg.d,
            gamma: cfg.gamma,
            q_max: cfg.q_max,
            bins: cfg.bins,
            norm: cfg.norm.clone(),
            merges: vocab.merges().to_vec(),
        }
    }

    pub fn unpack(self) -> Result<(CodecConfig, BpeVocab), CodecError> {
        if self.version != CODEC_FILE_VERSION {
            return Err(CodecError::InvalidConfig("unsupported codec file version"));
        }
        let vocab = BpeVocab::from_merges(self.q_max, self.merges)?;
        let cfg = CodecConfig {
            h: self.h,
            d: self.d,
            gamma: self.gamma,
            q_max: self.q_max,
            bins: self.bins,
            bpe_vocab_size: vocab.vocab_size().max(2 * self.q_max as usize + 2),
            norm: self.norm,
        };
        cfg.validate()?;
        Ok((cfg, vocab))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("codec file serializes")
    }

    pub fn from_json(s: &str) -> Result<CodecFile, CodecError> {
        serde_json::from_str(s).map_err(|_| CodecError::InvalidConfig("malformed codec JSON"))
    }
}
