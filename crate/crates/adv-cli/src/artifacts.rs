//! On-disk artifact naming and IO: datasets, codec files, checkpoints.
//!
//! Every artifact name is a pure function of the run configuration, so
//! commands can state exactly which file a missing prerequisite would have.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use adv_core::codec::{BpeVocab, CodecConfig, CodecFile};
use adv_core::model::checkpoint::{
    decode_checkpoint, encode_checkpoint, Checkpoint, CheckpointHeader,
};
use adv_core::model::train::AdamState;
use adv_core::model::ModelParams;

pub fn dataset_path(out_dir: &Path, h: usize) -> PathBuf {
    out_dir.join(format!("dataset_h{h}.jsonl"))
}

pub fn dataset_meta_path(out_dir: &Path, h: usize) -> PathBuf {
    out_dir.join(format!("dataset_h{h}.meta.json"))
}

pub fn codec_path(out_dir: &Path, h: usize) -> PathBuf {
    out_dir.join(format!("codec_h{h}.json"))
}

/// Checkpoint names carry chunk length, training mode, scheme, and seed:
/// `model_h8_cotrain_textual_fast_seed1.ckpt`.
pub fn checkpoint_path(out_dir: &Path, h: usize, mode: &str, scheme: &str, seed: u64) -> PathBuf {
    let tag = match mode {
        "flow" => format!("model_h{h}_flow_seed{seed}.ckpt"),
        _ => format!("model_h{h}_{mode}_{scheme}_seed{seed}.ckpt"),
    };
    out_dir.join(tag)
}

pub fn save_codec(path: &Path, cfg: &CodecConfig, vocab: &BpeVocab) -> Result<()> {
    let json = CodecFile::pack(cfg, vocab).to_json();
    fs::write(path, json.as_bytes())
        .with_context(|| format!("writing codec file {}", path.display()))?;
    Ok(())
}

pub fn load_codec(path: &Path) -> Result<(CodecConfig, BpeVocab)> {
    let text = fs::read_to_string(path).with_context(|| missing(path))?;
    let file = CodecFile::from_json(&text)
        .with_context(|| format!("parsing codec file {}", path.display()))?;
    Ok(file.unpack()?)
}

pub fn save_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    params: &ModelParams,
    opt: &AdamState,
) -> Result<()> {
    fs::write(path, encode_checkpoint(header, params, opt))
        .with_context(|| format!("writing checkpoint {}", path.display()))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| missing(path))?;
    decode_checkpoint(&bytes).with_context(|| format!("decoding checkpoint {}", path.display()))
}

fn missing(path: &Path) -> String {
    format!(
        "missing prerequisite artifact {}; generate it first",
        path.display()
    )
}

/// Creates the output directory if needed and confirms it is writable.
pub fn ensure_out_dir(out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let probe = out_dir.join(".write_probe");
    fs::write(&probe, b"ok")
        .with_context(|| format!("output directory {} is not writable", out_dir.display()))?;
    let _ = fs::remove_file(&probe);
    Ok(())
}

/// `git describe` of the working tree, for report manifests.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

/// Fails with the artifact's path in the message when it does not exist.
pub fn require_artifact(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("{}", missing(path));
    }
    Ok(())
}
