//! Expert demonstration datasets: generation, JSONL persistence, reload.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use adv_core::codec::{fit_norm_stats, ActionChunk, NormStats};
use adv_core::env::{expert_rollout_jittered, EnvConfig};
use adv_core::model::{Instruction, Observation};
use adv_core::rng::derive_seed;

use crate::artifacts::{dataset_meta_path, dataset_path};
use crate::config::RunConfig;

/// One training triple as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetRow {
    obs: [f64; 4],
    goal: u8,
    chunk: Vec<Vec<f64>>,
    episode: usize,
    t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub h: usize,
    pub d: usize,
    pub episodes: usize,
    pub triples: usize,
    pub seed: u64,
    pub env: EnvConfig,
    pub norm: NormStats,
}

pub const DATASET_VERSION: u32 = 1;

/// A loaded dataset: triples plus the metadata sidecar.
pub struct Dataset {
    pub triples: Vec<(Observation, Instruction, ActionChunk)>,
    pub meta: DatasetMeta,
}

/// Runs seeded expert episodes, slices them into stride-1 windows of length
/// `h`, writes one JSONL row per triple plus a metadata sidecar carrying the
/// environment config and fitted normalization stats.
pub fn generate_dataset(cfg: &RunConfig, h: usize) -> Result<DatasetMeta> {
    let env = EnvConfig {
        split: adv_core::env::Split::Id,
        ..cfg.env.clone()
    };
    let mut rows = Vec::new();
    let mut chunks = Vec::new();
    for episode_idx in 0..cfg.data.episodes {
        let seed = derive_seed(cfg.seed, "data_env", episode_idx as u64);
        let jitter_sd = cfg.data.jitter * env.max_speed;
        let episode = expert_rollout_jittered(&env, seed, jitter_sd);
        for (t, (obs, instr, chunk)) in adv_core::env::slice_training_triples(&episode, h)
            .into_iter()
            .enumerate()
        {
            rows.push(DatasetRow {
                obs: obs.0,
                goal: instr.goal_id,
                chunk: (0..chunk.h()).map(|s| chunk.row(s).to_vec()).collect(),
                episode: episode_idx,
                t,
            });
            chunks.push(chunk);
        }
    }
    if chunks.is_empty() {
        bail!("no training triples: episodes shorter than the chunk length {h}");
    }
    let norm = fit_norm_stats(&chunks).context("fitting normalization stats")?;
    let meta = DatasetMeta {
        version: DATASET_VERSION,
        h,
        d: 2,
        episodes: cfg.data.episodes,
        triples: rows.len(),
        seed: cfg.seed,
        env,
        norm,
    };

    let path = dataset_path(&cfg.out_dir, h);
    let mut file = fs::File::create(&path)
        .with_context(|| format!("creating dataset file {}", path.display()))?;
    for row in &rows {
        serde_json::to_writer(&mut file, row)?;
        file.write_all(b"\n")?;
    }
    let meta_path = dataset_meta_path(&cfg.out_dir, h);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
        .with_context(|| format!("writing dataset metadata {}", meta_path.display()))?;
    Ok(meta)
}

pub fn load_dataset(out_dir: &Path, h: usize) -> Result<Dataset> {
    let meta_path = dataset_meta_path(out_dir, h);
    let meta_text = fs::read_to_string(&meta_path).with_context(|| {
        format!(
            "missing prerequisite artifact {}; run gen-data first",
            meta_path.display()
        )
    })?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)
        .with_context(|| format!("parsing dataset metadata {}", meta_path.display()))?;
    if meta.version != DATASET_VERSION {
        bail!("unsupported dataset version {}", meta.version);
    }
    let path = dataset_path(out_dir, h);
    let file = fs::File::open(&path).with_context(|| {
        format!(
            "missing prerequisite artifact {}; run gen-data first",
            path.display()
        )
    })?;
    let mut triples = Vec::with_capacity(meta.triples);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let row: DatasetRow = serde_json::from_str(&line)
            .with_context(|| format!("parsing dataset row {} of {}", i + 1, path.display()))?;
        let values: Vec<f64> = row.chunk.iter().flatten().copied().collect();
        let chunk = ActionChunk::new(meta.h, meta.d, values)
            .map_err(|e| anyhow::anyhow!("row {}: {e}", i + 1))?;
        triples.push((
            Observation(row.obs),
            Instruction { goal_id: row.goal },
            chunk,
        ));
    }
    if triples.len() != meta.triples {
        bail!(
            "dataset truncated: metadata promises {} triples, found {}",
            meta.triples,
            triples.len()
        );
    }
    Ok(Dataset { triples, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn tiny_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.out_dir = dir.to_path_buf();
        cfg.data.episodes = 3;
        cfg
    }

    #[test]
    fn generated_datasets_reload_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let meta = generate_dataset(&cfg, 8).unwrap();
        assert!(meta.triples > 0);
        let ds = load_dataset(dir.path(), 8).unwrap();
        assert_eq!(ds.meta, meta);
        assert_eq!(ds.triples.len(), meta.triples);
        for (_, instr, chunk) in &ds.triples {
            assert!(instr.goal_id < 4);
            assert_eq!(chunk.h(), 8);
            assert_eq!(chunk.d(), 2);
        }
        // Regenerating produces byte-identical files.
        let bytes_a = fs::read(dataset_path(dir.path(), 8)).unwrap();
        generate_dataset(&cfg, 8).unwrap();
        let bytes_b = fs::read(dataset_path(dir.path(), 8)).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn window_count_matches_episode_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let env = EnvConfig::default();
        let mut expected = 0;
        for i in 0..cfg.data.episodes {
            let seed = derive_seed(cfg.seed, "data_env", i as u64);
            let jitter_sd = cfg.data.jitter * env.max_speed;
            let len = expert_rollout_jittered(&env, seed, jitter_sd).transitions.len();
            expected += len.saturating_sub(8) + usize::from(len >= 8);
        }
        let meta = generate_dataset(&cfg, 8).unwrap();
        assert_eq!(meta.triples, expected);
    }

    #[test]
    fn oversized_windows_fail_clearly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        assert!(generate_dataset(&cfg, 500).is_err());
    }
}
