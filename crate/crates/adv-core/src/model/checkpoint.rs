//! Checkpoint byte format.
//!
//! Layout: the magic line `ADVCKPT1`, one JSON header line, then raw
//! little-endian f64 blocks in declared order: encoder, flow, scorer
//! parameters, Adam first moments, Adam second moments. Loading reproduces
//! every parameter bit-exactly.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::train::{AdamState, TrainConfig};
use super::{ModelConfig, ModelError, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8] = b"ADVCKPT1\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub arch: ModelConfig,
    pub seed: u64,
    pub train_step: u64,
    /// Tokenization scheme the scorer head was trained against.
    pub scheme: String,
    pub train: TrainConfig,
}

/// A loaded checkpoint: header plus parameter and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
    pub opt: AdamState,
}

pub fn encode_checkpoint(
    header: &CheckpointHeader,
    params: &ModelParams,
    opt: &AdamState,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(
        serde_json::to_string(header)
            .expect("header serializes")
            .as_bytes(),
    );
    out.push(b'\n');
    for block in [
        &params.encoder.data,
        &params.flow.data,
        &params.scorer.data,
        &opt.m,
        &opt.v,
    ] {
        for &value in block.iter() {
            out.extend_from_slice(&value.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC
    {
        return Err(ModelError::Checkpoint("bad magic bytes"));
    }
    let rest = &bytes[CHECKPOINT_MAGIC.len()..];
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(ModelError::Checkpoint("missing header line"))?;
    let header: CheckpointHeader = serde_json::from_slice(&rest[..newline])
        .map_err(|_| ModelError::Checkpoint("malformed header JSON"))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint("unsupported checkpoint version"));
    }
    let mut params = ModelParams::zeros(header.arch.clone());
    let mut opt = AdamState::new(&params);
    opt.step = header.train_step;
    let body = &rest[newline + 1..];
    let total = params.total_len();
    // Parameter blocks plus the two Adam moment blocks, 8 bytes per value.
    let want_bytes = 3 * total * 8;
    if body.len() != want_bytes {
        return Err(ModelError::Checkpoint("truncated or oversized body"));
    }
    let mut cursor = 0usize;
    {
        let blocks: [&mut Vec<f64>; 5] = [
            &mut params.encoder.data,
            &mut params.flow.data,
            &mut params.scorer.data,
            &mut opt.m,
            &mut opt.v,
        ];
        for block in blocks {
            for value in block.iter_mut() {
                let mut raw = [0u8; 8];
                raw.copy_from_slice(&body[cursor..cursor + 8]);
                *value = f64::from_le_bytes(raw);
                cursor += 8;
            }
        }
    }
    Ok(Checkpoint {
        header,
        params,
        opt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn fixture() -> (CheckpointHeader, ModelParams, AdamState) {
        let arch = ModelConfig::with_dims(2, 2, 16);
        let params = ModelParams::init(arch.clone(), 5);
        let mut opt = AdamState::new(&params);
        opt.step = 17;
        opt.m[3] = 0.125;
        opt.v[9] = 2.5;
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            arch,
            seed: 42,
            train_step: 17,
            scheme: "textual_fast".to_string(),
            train: TrainConfig::default(),
        };
        (header, params, opt)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (header, params, opt) = fixture();
        let bytes = encode_checkpoint(&header, &params, &opt);
        let loaded = decode_checkpoint(&bytes).unwrap();
        assert_eq!(loaded.header, header);
        assert_eq!(loaded.params, params);
        assert_eq!(loaded.opt, opt);
        assert_eq!(encode_checkpoint(&loaded.header, &loaded.params, &loaded.opt), bytes);
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let (header, params, opt) = fixture();
        let mut bytes = encode_checkpoint(&header, &params, &opt);
        bytes[0] = b'X';
        assert_eq!(
            decode_checkpoint(&bytes),
            Err(ModelError::Checkpoint("bad magic bytes"))
        );
    }

    #[test]
    fn wrong_version_and_truncation_are_rejected() {
        let (mut header, params, opt) = fixture();
        header.version = 9;
        let bytes = encode_checkpoint(&header, &params, &opt);
        assert_eq!(
            decode_checkpoint(&bytes),
            Err(ModelError::Checkpoint("unsupported checkpoint version"))
        );
        header.version = CHECKPOINT_VERSION;
        let bytes = encode_checkpoint(&header, &params, &opt);
        assert_eq!(
            decode_checkpoint(&bytes[..bytes.len() - 4]),
            Err(ModelError::Checkpoint("truncated or oversized body"))
        );
    }
}
