//! Byte-pair encoding over quantized coefficient symbols.
//!
//! The base alphabet is the closed integer range `[-q_max, q_max]`; symbol
//! `s` has id `s + q_max`, and merged pairs get fresh ids above the base
//! alphabet in training order. Encoding applies merges greedily in training
//! order; decoding expands them, so decode∘encode is the identity on any
//! sequence over the base alphabet.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use super::CodecError;
use crate::TokenSeq;

/// A trained merge table plus the implied base alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    q_max: u32,
    merges: Vec<(u32, u32)>,
}

impl BpeVocab {
    /// Vocabulary with no merges; encoding is the identity on base ids.
    pub fn identity(q_max: u32) -> Self {
        BpeVocab {
            q_max,
            merges: Vec::new(),
        }
    }

    /// Rebuilds a vocabulary from a stored merge list.
    pub fn from_merges(q_max: u32, merges: Vec<(u32, u32)>) -> Result<Self, CodecError> {
        let base = 2 * q_max as usize + 1;
        for (i, &(l, r)) in merges.iter().enumerate() {
            let defined = (base + i) as u32;
            if l >= defined || r >= defined {
                return Err(CodecError::UnknownSymbol(l.max(r)));
            }
        }
        Ok(BpeVocab { q_max, merges })
    }

    /// Trains a merge table on a corpus of quantized symbol sequences.
    ///
    /// Repeatedly merges the most frequent adjacent pair until the vocabulary
    /// reaches `vocab_budget` or no pair occurs at least twice. Ties break to
    /// the numerically smallest `(left, right)` pair.
    pub fn train(
        corpus: &[Vec<i32>],
        q_max: u32,
        vocab_budget: usize,
    ) -> Result<Self, CodecError> {
        if corpus.is_empty() {
            return Err(CodecError::EmptyInput);
        }
        let mut work: Vec<Vec<u32>> = corpus
            .iter()
            .map(|seq| {
                seq.iter()
                    .map(|&s| symbol_to_id(s, q_max))
                    .collect::<Result<Vec<u32>, CodecError>>()
            })
            .collect::<Result<_, _>>()?;

        let base = base_size(q_max);
        let mut merges = Vec::new();
        while base + merges.len() < vocab_budget {
            let mut counts: BTreeMap<(u32, u32), u64> = BTreeMap::new();
            for seq in &work {
                for pair in seq.windows(2) {
                    *counts.entry((pair[0], pair[1])).or_insert(0) += 1;
                }
            }
            // Ascending BTreeMap order plus a strict comparison picks the
            // numerically smallest pair among those tied at the maximum.
            let mut best: Option<((u32, u32), u64)> = None;
            for (&pair, &count) in &counts {
                if best.map_or(true, |(_, c)| count > c) {
                    best = Some((pair, count));
                }
            }
            let Some((pair, count)) = best else { break };
            if count < 2 {
                break;
            }
            let new_id = (base + merges.len()) as u32;
            merges.push(pair);
            for seq in &mut work {
                merge_in_place(seq, pair, new_id);
            }
        }
        Ok(BpeVocab { q_max, merges })
    }

    pub fn q_max(&self) -> u32 {
        self.q_max
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Number of base-alphabet symbols (`2*q_max + 1`).
    pub fn base_size(&self) -> usize {
        base_size(self.q_max)
    }

    /// Total number of defined ids: base alphabet plus merges.
    pub fn vocab_size(&self) -> usize {
        self.base_size() + self.merges.len()
    }

    /// Encodes quantized symbols into merged token ids.
    pub fn encode(&self, symbols: &[i32]) -> Result<TokenSeq, CodecError> {
        let mut seq: Vec<u32> = symbols
            .iter()
            .map(|&s| symbol_to_id(s, self.q_max))
            .collect::<Result<_, _>>()?;
        if self.merges.is_empty() {
            return Ok(seq);
        }
        // Rank-priority application: repeatedly apply the earliest-trained
        // merge present in the sequence, leftmost occurrence first. This is
        // equivalent to one full left-to-right pass per merge in training
        // order (a later merge can never re-create an earlier pair, since
        // merged ids are fresh symbols).
        let ranks: BTreeMap<(u32, u32), (usize, u32)> = self
            .merges
            .iter()
            .enumerate()
            .map(|(rank, &pair)| (pair, (rank, (self.base_size() + rank) as u32)))
            .collect();
        loop {
            let mut best: Option<(usize, usize, u32)> = None; // (rank, pos, new_id)
            for i in 0..seq.len().saturating_sub(1) {
                if let Some(&(rank, id)) = ranks.get(&(seq[i], seq[i + 1])) {
                    if best.map_or(true, |(r, _, _)| rank < r) {
                        best = Some((rank, i, id));
                    }
                }
            }
            let Some((_, pos, id)) = best else { break };
            seq[pos] = id;
            seq.remove(pos + 1);
        }
        Ok(seq)
    }

    /// Expands merged token ids back to quantized symbols.
    pub fn decode(&self, tokens: &[u32]) -> Result<Vec<i32>, CodecError> {
        let base = self.base_size() as u32;
        let mut out = Vec::with_capacity(tokens.len());
        let mut stack: Vec<u32> = Vec::new();
        for &tok in tokens {
            stack.push(tok);
            while let Some(id) = stack.pop() {
                if id < base {
                    out.push((i64::from(id) - i64::from(self.q_max)) as i32);
                } else {
                    let merge_index = (id - base) as usize;
                    let &(l, r) = self
                        .merges
                        .get(merge_index)
                        .ok_or(CodecError::UnknownSymbol(id))?;
                    stack.push(r);
                    stack.push(l);
                }
            }
        }
        Ok(out)
    }
}

fn base_size(q_max: u32) -> usize {
    2 * q_max as usize + 1
}

fn symbol_to_id(s: i32, q_max: u32) -> Result<u32, CodecError> {
    let q = i64::from(q_max);
    if i64::from(s) < -q || i64::from(s) > q {
        return Err(CodecError::SymbolOutOfRange(s));
    }
    Ok((i64::from(s) + q) as u32)
}

/// One full left-to-right pass replacing non-overlapping `pair` with `new_id`.
fn merge_in_place(seq: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut write = 0;
    let mut read = 0;
    while read < seq.len() {
        if read + 1 < seq.len() && seq[read] == pair.0 && seq[read + 1] == pair.1 {
            seq[write] = new_id;
            read += 2;
        } else {
            seq[write] = seq[read];
            read += 1;
        }
        write += 1;
    }
    seq.truncate(write);
}
