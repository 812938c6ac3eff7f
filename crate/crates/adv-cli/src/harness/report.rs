//! Experiment reports: one deterministic CSV per experiment plus a JSON
//! manifest carrying run metadata.
//!
//! The CSV bytes are a pure function of (config, seed). Wall-clock figures
//! (throughput, elapsed time) and the git description are volatile by
//! nature and live only in the manifest.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use adv_core::metrics::{DISTURBANCE_DISPLACEMENT, SUSTAINED_CONTACT_STEPS};

use crate::artifacts::git_describe;
use crate::config::RunConfig;

pub struct Report {
    pub name: String,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
    /// Cell label to steps-per-second, manifest only.
    pub throughput: Vec<(String, f64)>,
}

#[derive(Serialize)]
struct Manifest {
    experiment: String,
    config_sha256: String,
    seed: u64,
    train_seeds: Vec<u64>,
    git_describe: String,
    wall_seconds: f64,
    throughput_steps_per_second: Vec<(String, f64)>,
}

pub fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

/// Writes `<name>.csv` and `<name>_manifest.json`; returns both paths.
pub fn write_report(
    out_dir: &Path,
    cfg: &RunConfig,
    report: &Report,
    wall_seconds: f64,
) -> Result<(PathBuf, PathBuf)> {
    let csv_path = out_dir.join(format!("{}.csv", report.name));
    let mut csv = String::new();
    // Metric thresholds are inventions of this harness; state them where
    // the numbers land.
    csv.push_str(&format!(
        "# sustained_contact_steps={SUSTAINED_CONTACT_STEPS} disturbance_displacement={DISTURBANCE_DISPLACEMENT}\n"
    ));
    csv.push_str(&report.columns.join(","));
    csv.push('\n');
    for row in &report.rows {
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    std::fs::write(&csv_path, csv.as_bytes())
        .with_context(|| format!("writing report {}", csv_path.display()))?;

    let manifest = Manifest {
        experiment: report.name.clone(),
        config_sha256: hex_digest(&cfg.canonical_json()),
        seed: cfg.seed,
        train_seeds: cfg.experiment.train_seeds.clone(),
        git_describe: git_describe(),
        wall_seconds,
        throughput_steps_per_second: report.throughput.clone(),
    };
    let manifest_path = out_dir.join(format!("{}_manifest.json", report.name));
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing manifest {}", manifest_path.display()))?;
    Ok((csv_path, manifest_path))
}

fn hex_digest(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One-sided upper tail of the standard normal distribution.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / core::f64::consts::SQRT_2)
}

/// Welch z statistic and one-sided p for mean(a) > mean(b).
pub fn welch_one_sided(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let var = |xs: &[f64], m: f64| {
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0).max(1.0)
    };
    let (ma, mb) = (mean(a), mean(b));
    let se = (var(a, ma) / a.len() as f64 + var(b, mb) / b.len() as f64).max(1e-300);
    let z = (ma - mb) / libm::sqrt(se);
    (z, normal_sf(z))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_tail_matches_known_points() {
        assert!((normal_sf(0.0) - 0.5).abs() < 1e-12);
        assert!((normal_sf(1.6448536269514722) - 0.05).abs() < 1e-9);
        assert!((normal_sf(2.3263478740408408) - 0.01).abs() < 1e-9);
    }

    #[test]
    fn welch_detects_a_clear_shift() {
        let a: Vec<f64> = (0..50).map(|i| 2.0 + 0.01 * i as f64).collect();
        let b: Vec<f64> = (0..50).map(|i| 1.0 + 0.01 * i as f64).collect();
        let (z, p) = welch_one_sided(&a, &b);
        assert!(z > 5.0);
        assert!(p < 1e-6);
        let (_, p_rev) = welch_one_sided(&b, &a);
        assert!(p_rev > 0.999);
    }

    #[test]
    fn reports_write_deterministic_csv() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let report = Report {
            name: "probe".to_string(),
            columns: vec!["a", "b"],
            rows: vec![vec!["1".into(), fmt_f(0.5)], vec!["2".into(), fmt_opt(None)]],
            throughput: vec![("cell".to_string(), 123.4)],
        };
        let (csv_a, manifest) = write_report(dir.path(), &cfg, &report, 1.0).unwrap();
        let bytes_a = std::fs::read(&csv_a).unwrap();
        write_report(dir.path(), &cfg, &report, 2.0).unwrap();
        let bytes_b = std::fs::read(&csv_a).unwrap();
        assert_eq!(bytes_a, bytes_b);
        let text = String::from_utf8(bytes_a).unwrap();
        assert!(text.contains("a,b\n1,0.500000\n2,\n"));
        let manifest_text = std::fs::read_to_string(manifest).unwrap();
        assert!(manifest_text.contains("\"experiment\": \"probe\""));
        assert!(manifest_text.contains("config_sha256"));
    }
}
