//! The analysis experiment suite: main evaluation, rank-K selection, noise
//! robustness, score separation, tokenizer comparison, and long-chunk
//! recovery. Every experiment pairs its cells over identical environment
//! and drafting seeds.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use adv_core::codec::Scheme;
use adv_core::env::{observe, reset, step, EnvConfig, Episode, Outcome, Split, Transition};
use adv_core::metrics::MetricSet;

use super::report::{fmt_f, fmt_opt, welch_one_sided, write_report, Report};
use super::{
    episode_env_seed, eval_policy, query_draft_seed, run_cell, AdvPlanner, CellResult,
    DiffusionPlanner, Planner, PolicyMode, Selection, Stack,
};
use crate::artifacts::{checkpoint_path, codec_path, require_artifact};
use crate::config::RunConfig;

pub const EXPERIMENT_NAMES: [&str; 6] = [
    "main_eval",
    "kth_best",
    "noise",
    "score_sep",
    "tokenizers",
    "recovery",
];

/// Dispatches one experiment by name, writing its CSV and manifest.
pub fn run_experiment(cfg: &RunConfig, name: &str) -> Result<(PathBuf, PathBuf)> {
    let start = Instant::now();
    let report = match name {
        "main_eval" => main_eval(cfg)?,
        "kth_best" => kth_best(cfg)?,
        "noise" => noise(cfg)?,
        "score_sep" => score_sep(cfg)?,
        "tokenizers" => tokenizers(cfg)?,
        "recovery" => recovery(cfg)?,
        other => bail!(
            "unknown experiment {other:?}; valid names: {}",
            EXPERIMENT_NAMES.join(", ")
        ),
    };
    write_report(&cfg.out_dir, cfg, &report, start.elapsed().as_secs_f64())
}

/// Fails with the exact missing path when prerequisites are absent.
fn require_main_artifacts(cfg: &RunConfig) -> Result<()> {
    require_artifact(&codec_path(&cfg.out_dir, cfg.codec.h))?;
    for &seed in &cfg.experiment.train_seeds {
        require_artifact(&checkpoint_path(
            &cfg.out_dir,
            cfg.codec.h,
            "cotrain",
            "textual_fast",
            seed,
        ))?;
    }
    Ok(())
}

fn load_main_stack(cfg: &RunConfig, seed: u64) -> Result<Stack> {
    super::load_stack(&cfg.out_dir, cfg.codec.h, "cotrain", Scheme::TextualFast, seed)
}

fn metric_cells(m: &MetricSet) -> Vec<String> {
    vec![
        m.episodes.to_string(),
        fmt_f(m.success_rate),
        fmt_opt(m.avg_success_steps),
        fmt_f(m.recovery_attempts),
        fmt_f(m.pre_contact_disturbance_rate),
    ]
}

/// Pools per-seed metric sets; success steps weight by success counts.
fn pool_metrics(cells: &[MetricSet]) -> MetricSet {
    let n: usize = cells.iter().map(|m| m.episodes).sum();
    let successes: f64 = cells
        .iter()
        .map(|m| m.success_rate * m.episodes as f64)
        .sum();
    let steps_weighted: f64 = cells
        .iter()
        .filter_map(|m| {
            m.avg_success_steps
                .map(|s| s * m.success_rate * m.episodes as f64)
        })
        .sum();
    MetricSet {
        success_rate: successes / n as f64,
        avg_success_steps: if successes > 0.0 {
            Some(steps_weighted / successes)
        } else {
            None
        },
        recovery_attempts: weighted_mean(cells, |m| m.recovery_attempts),
        pre_contact_disturbance_rate: weighted_mean(cells, |m| m.pre_contact_disturbance_rate),
        steps_per_second: weighted_mean(cells, |m| m.steps_per_second),
        episodes: n,
    }
}

fn weighted_mean(cells: &[MetricSet], f: impl Fn(&MetricSet) -> f64) -> f64 {
    let n: usize = cells.iter().map(|m| m.episodes).sum();
    cells
        .iter()
        .map(|m| f(m) * m.episodes as f64)
        .sum::<f64>()
        / n as f64
}

/// Success rate and auxiliary metrics for the three policy modes on both
/// splits, paired over identical seeds.
pub fn main_eval(cfg: &RunConfig) -> Result<Report> {
    require_main_artifacts(cfg)?;
    let mut rows = Vec::new();
    let mut throughput = Vec::new();
    let episodes = cfg.experiment.main_episodes;
    for mode in [PolicyMode::ArDecode, PolicyMode::Diffusion, PolicyMode::Adv] {
        for split in [Split::Id, Split::Ood] {
            let mut pooled = Vec::new();
            for &seed in &cfg.experiment.train_seeds {
                let stack = load_main_stack(cfg, seed)?;
                let cell = eval_policy(&stack, cfg, mode, split, episodes, seed);
                let label = format!("{}/{:?}/seed{seed}", mode.name(), split);
                throughput.push((label, cell.metrics.steps_per_second));
                let mut row = vec![
                    seed.to_string(),
                    mode.name().to_string(),
                    split_name(split).to_string(),
                ];
                row.extend(metric_cells(&cell.metrics));
                rows.push(row);
                pooled.push(cell.metrics);
            }
            let mut row = vec![
                "all".to_string(),
                mode.name().to_string(),
                split_name(split).to_string(),
            ];
            row.extend(metric_cells(&pool_metrics(&pooled)));
            rows.push(row);
        }
    }
    Ok(Report {
        name: "main_eval".to_string(),
        columns: vec![
            "train_seed",
            "mode",
            "split",
            "episodes",
            "success_rate",
            "avg_success_steps",
            "recovery_attempts",
            "pre_contact_disturbance_rate",
        ],
        rows,
        throughput,
    })
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Id => "id",
        Split::Ood => "ood",
    }
}

/// Success rate when executing the K-th ranked candidate instead of the
/// best, plus a uniformly random row; evaluated on the OOD split where the
/// candidate set actually spreads.
pub fn kth_best(cfg: &RunConfig) -> Result<Report> {
    require_main_artifacts(cfg)?;
    let mut ranks: Vec<usize> = cfg
        .experiment
        .kth
        .iter()
        .copied()
        .filter(|&k| k >= 1 && k <= cfg.infer.m)
        .collect();
    ranks.dedup();
    if ranks.is_empty() {
        bail!("experiment.kth selects no valid ranks for m = {}", cfg.infer.m);
    }
    let episodes = cfg.experiment.analysis_episodes;
    let env = EnvConfig {
        split: Split::Ood,
        ..cfg.env.clone()
    };
    let rcfg = adv_core::env::RolloutConfig {
        chunk_len: cfg.codec.h,
        replan_every: cfg.infer.replan_every.min(cfg.codec.h),
    };
    let mut rows = Vec::new();
    let mut throughput = Vec::new();
    let selections: Vec<(String, Selection)> = ranks
        .iter()
        .map(|&k| (k.to_string(), Selection::Kth(k)))
        .chain(std::iter::once(("random".to_string(), Selection::Random)))
        .collect();
    for (label, selection) in &selections {
        let mut pooled = Vec::new();
        for &seed in &cfg.experiment.train_seeds {
            let stack = load_main_stack(cfg, seed)?;
            let planner = AdvPlanner {
                stack: &stack,
                scorer: &stack.model,
                scorer_scheme: stack.scheme,
                verifier: &cfg.verifier,
                m: cfg.infer.m,
                steps: cfg.infer.steps,
                selection: *selection,
                noise_level: None,
            };
            let cell = run_cell(&planner, &env, &rcfg, episodes, cfg.seed, seed);
            throughput.push((format!("k={label}/seed{seed}"), cell.metrics.steps_per_second));
            rows.push(vec![
                seed.to_string(),
                label.clone(),
                episodes.to_string(),
                fmt_f(cell.metrics.success_rate),
                fmt_opt(cell.metrics.avg_success_steps),
            ]);
            pooled.push(cell.metrics);
        }
        let pool = pool_metrics(&pooled);
        rows.push(vec![
            "all".to_string(),
            label.clone(),
            pool.episodes.to_string(),
            fmt_f(pool.success_rate),
            fmt_opt(pool.avg_success_steps),
        ]);
    }
    Ok(Report {
        name: "kth_best".to_string(),
        columns: vec!["train_seed", "rank", "episodes", "success_rate", "avg_success_steps"],
        rows,
        throughput,
    })
}

/// Noise robustness: perturb every candidate except the first and measure
/// how often the verifier picks the clean one.
pub fn noise(cfg: &RunConfig) -> Result<Report> {
    require_main_artifacts(cfg)?;
    let episodes = cfg.experiment.analysis_episodes;
    let env = cfg.env.clone();
    let rcfg = adv_core::env::RolloutConfig {
        chunk_len: cfg.codec.h,
        replan_every: cfg.infer.replan_every.min(cfg.codec.h),
    };
    // Level 0 is the all-clean control row.
    let mut levels = vec![0.0];
    levels.extend(cfg.experiment.noise_levels.iter().copied());
    let mut rows = Vec::new();
    let mut throughput = Vec::new();
    for &level in &levels {
        let mut pooled = Vec::new();
        let mut queries = 0u64;
        let mut clean = 0u64;
        let mut distinct = std::collections::BTreeSet::new();
        for &seed in &cfg.experiment.train_seeds {
            let stack = load_main_stack(cfg, seed)?;
            let planner = AdvPlanner {
                stack: &stack,
                scorer: &stack.model,
                scorer_scheme: stack.scheme,
                verifier: &cfg.verifier,
                m: cfg.infer.m,
                steps: cfg.infer.steps,
                selection: Selection::Best,
                noise_level: Some(level),
            };
            let cell = run_cell(&planner, &env, &rcfg, episodes, cfg.seed, seed);
            throughput.push((
                format!("noise={level}/seed{seed}"),
                cell.metrics.steps_per_second,
            ));
            for stats in &cell.stats {
                queries += u64::from(stats.queries);
                clean += u64::from(stats.clean_chosen);
                distinct.extend(stats.chosen_indices.iter().copied());
            }
            pooled.push(cell.metrics);
        }
        let pool = pool_metrics(&pooled);
        rows.push(vec![
            format!("{level}"),
            pool.episodes.to_string(),
            queries.to_string(),
            fmt_f(clean as f64 / queries.max(1) as f64),
            fmt_f(pool.success_rate),
            distinct.len().to_string(),
        ]);
    }
    Ok(Report {
        name: "noise".to_string(),
        columns: vec![
            "noise_level",
            "episodes",
            "queries",
            "clean_chosen_rate",
            "success_rate",
            "distinct_chosen",
        ],
        rows,
        throughput,
    })
}

/// Average trajectory score of successful versus failed diffusion
/// rollouts, with a one-sided Welch test that failures score higher.
pub fn score_sep(cfg: &RunConfig) -> Result<Report> {
    require_main_artifacts(cfg)?;
    let episodes = cfg.experiment.main_episodes;
    let env = cfg.env.clone();
    let rcfg = adv_core::env::RolloutConfig {
        chunk_len: cfg.codec.h,
        replan_every: cfg.infer.replan_every.min(cfg.codec.h),
    };
    let mut rows = Vec::new();
    let mut throughput = Vec::new();
    let mut all_success = Vec::new();
    let mut all_fail = Vec::new();
    for &seed in &cfg.experiment.train_seeds {
        let stack = load_main_stack(cfg, seed)?;
        let planner = DiffusionPlanner {
            stack: &stack,
            steps: cfg.infer.steps,
            score_drafts: true,
        };
        let cell = run_cell(&planner, &env, &rcfg, episodes, cfg.seed, seed);
        throughput.push((format!("seed{seed}"), cell.metrics.steps_per_second));
        let (succ, fail) = trajectory_scores(&cell);
        rows.push(score_row(seed.to_string(), &succ, &fail));
        all_success.extend(succ);
        all_fail.extend(fail);
    }
    rows.push(score_row("all".to_string(), &all_success, &all_fail));
    Ok(Report {
        name: "score_sep".to_string(),
        columns: vec![
            "train_seed",
            "n_success",
            "n_fail",
            "mean_score_success",
            "mean_score_fail",
            "welch_z",
            "p_one_sided",
            "insufficient_data",
        ],
        rows,
        throughput,
    })
}

/// Mean per-chunk score of each episode, grouped by outcome.
fn trajectory_scores(cell: &CellResult) -> (Vec<f64>, Vec<f64>) {
    let mut success = Vec::new();
    let mut fail = Vec::new();
    for (episode, stats) in cell.episodes.iter().zip(&cell.stats) {
        if stats.executed_scores.is_empty() {
            continue;
        }
        let mean =
            stats.executed_scores.iter().sum::<f64>() / stats.executed_scores.len() as f64;
        match episode.outcome {
            Outcome::Success => success.push(mean),
            Outcome::Failure => fail.push(mean),
        }
    }
    (success, fail)
}

fn score_row(label: String, success: &[f64], fail: &[f64]) -> Vec<String> {
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().sum::<f64>() / xs.len() as f64)
        }
    };
    let insufficient = success.len() < 5 || fail.len() < 5;
    let (z, p) = if insufficient {
        (None, None)
    } else {
        let (z, p) = welch_one_sided(fail, success);
        (Some(z), Some(p))
    };
    vec![
        label,
        success.len().to_string(),
        fail.len().to_string(),
        fmt_opt(mean(success)),
        fmt_opt(mean(fail)),
        fmt_opt(z),
        fmt_opt(p),
        insufficient.to_string(),
    ]
}

/// ADV success rate per tokenization scheme against the unverified
/// diffusion baseline, all rows sharing drafting seeds. Scorer heads come
/// from scorer-only training on the first train seed.
pub fn tokenizers(cfg: &RunConfig) -> Result<Report> {
    let seed = cfg.experiment.train_seeds[0];
    require_artifact(&codec_path(&cfg.out_dir, cfg.codec.h))?;
    require_artifact(&checkpoint_path(
        &cfg.out_dir,
        cfg.codec.h,
        "cotrain",
        "textual_fast",
        seed,
    ))?;
    for scheme in Scheme::ALL {
        require_artifact(&checkpoint_path(
            &cfg.out_dir,
            cfg.codec.h,
            "scorer",
            scheme.name(),
            seed,
        ))?;
    }
    let episodes = cfg.experiment.analysis_episodes;
    let env = cfg.env.clone();
    let rcfg = adv_core::env::RolloutConfig {
        chunk_len: cfg.codec.h,
        replan_every: cfg.infer.replan_every.min(cfg.codec.h),
    };
    let stack = load_main_stack(cfg, seed)?;
    let dataset = crate::dataset::load_dataset(&cfg.out_dir, cfg.codec.h)?;

    let mut rows = Vec::new();
    let mut throughput = Vec::new();
    let baseline = run_cell(
        &DiffusionPlanner {
            stack: &stack,
            steps: cfg.infer.steps,
            score_drafts: false,
        },
        &env,
        &rcfg,
        episodes,
        cfg.seed,
        seed,
    );
    throughput.push(("diffusion".to_string(), baseline.metrics.steps_per_second));
    rows.push(vec![
        seed.to_string(),
        "diffusion".to_string(),
        episodes.to_string(),
        fmt_f(baseline.metrics.success_rate),
        String::new(),
    ]);
    for scheme in Scheme::ALL {
        let head = super::load_stack(&cfg.out_dir, cfg.codec.h, "scorer", scheme, seed)?;
        let planner = AdvPlanner {
            stack: &stack,
            scorer: &head.model,
            scorer_scheme: scheme,
            verifier: &cfg.verifier,
            m: cfg.infer.m,
            steps: cfg.infer.steps,
            selection: Selection::Best,
            noise_level: None,
        };
        let cell = run_cell(&planner, &env, &rcfg, episodes, cfg.seed, seed);
        throughput.push((scheme.name().to_string(), cell.metrics.steps_per_second));
        let mean_tokens = mean_token_length(&dataset, &stack, scheme)?;
        rows.push(vec![
            seed.to_string(),
            scheme.name().to_string(),
            episodes.to_string(),
            fmt_f(cell.metrics.success_rate),
            fmt_f(mean_tokens),
        ]);
    }
    Ok(Report {
        name: "tokenizers".to_string(),
        columns: vec![
            "train_seed",
            "scheme",
            "episodes",
            "success_rate",
            "dataset_mean_tokens",
        ],
        rows,
        throughput,
    })
}

fn mean_token_length(
    dataset: &crate::dataset::Dataset,
    stack: &Stack,
    scheme: Scheme,
) -> Result<f64> {
    let mut total = 0usize;
    for (_, _, chunk) in &dataset.triples {
        total += scheme
            .encode(chunk, &stack.codec, &stack.vocab, &stack.tokenizer)
            .context("encoding dataset chunk")?
            .len();
    }
    Ok(total as f64 / dataset.triples.len().max(1) as f64)
}

/// Recovery capability: execute `n_long` open-loop long chunks from the
/// flow-only model, then switch to short chunks under the mode under test.
/// `-1` long chunks means long chunks for the whole episode.
pub fn recovery(cfg: &RunConfig) -> Result<Report> {
    let exp = &cfg.experiment;
    require_artifact(&codec_path(&cfg.out_dir, exp.h_short))?;
    require_artifact(&codec_path(&cfg.out_dir, exp.h_long))?;
    for &seed in &exp.train_seeds {
        require_artifact(&checkpoint_path(
            &cfg.out_dir,
            exp.h_short,
            "cotrain",
            "textual_fast",
            seed,
        ))?;
        require_artifact(&checkpoint_path(
            &cfg.out_dir,
            exp.h_long,
            "flow",
            "textual_fast",
            seed,
        ))?;
    }
    let episodes = exp.analysis_episodes;
    let env = cfg.env.clone();
    let mut rows = Vec::new();
    let mut throughput = Vec::new();
    for &n_long in &exp.recovery_n_long {
        let n_long_label = if n_long < 0 {
            "inf".to_string()
        } else {
            n_long.to_string()
        };
        for mode in [PolicyMode::Diffusion, PolicyMode::Adv] {
            let mut pooled = Vec::new();
            for &seed in &exp.train_seeds {
                let short = super::load_stack(
                    &cfg.out_dir,
                    exp.h_short,
                    "cotrain",
                    Scheme::TextualFast,
                    seed,
                )?;
                let long =
                    super::load_stack(&cfg.out_dir, exp.h_long, "flow", Scheme::TextualFast, seed)?;
                let cell = run_recovery_cell(cfg, &env, &long, &short, mode, n_long, episodes, seed);
                throughput.push((
                    format!("n_long={n_long_label}/{}/seed{seed}", mode.name()),
                    cell.metrics.steps_per_second,
                ));
                rows.push(vec![
                    seed.to_string(),
                    n_long_label.clone(),
                    mode.name().to_string(),
                    episodes.to_string(),
                    fmt_f(cell.metrics.success_rate),
                    fmt_opt(cell.metrics.avg_success_steps),
                ]);
                pooled.push(cell.metrics);
            }
            let pool = pool_metrics(&pooled);
            rows.push(vec![
                "all".to_string(),
                n_long_label.clone(),
                mode.name().to_string(),
                pool.episodes.to_string(),
                fmt_f(pool.success_rate),
                fmt_opt(pool.avg_success_steps),
            ]);
        }
    }
    Ok(Report {
        name: "recovery".to_string(),
        columns: vec![
            "train_seed",
            "n_long",
            "mode",
            "episodes",
            "success_rate",
            "avg_success_steps",
        ],
        rows,
        throughput,
    })
}

/// Two-phase rollouts for the recovery experiment.
#[allow(clippy::too_many_arguments)]
fn run_recovery_cell(
    cfg: &RunConfig,
    env: &EnvConfig,
    long: &Stack,
    short: &Stack,
    mode: PolicyMode,
    n_long: i64,
    episodes: usize,
    train_seed: u64,
) -> CellResult {
    let long_planner = DiffusionPlanner {
        stack: long,
        steps: cfg.infer.steps,
        score_drafts: false,
    };
    let adv_planner = AdvPlanner {
        stack: short,
        scorer: &short.model,
        scorer_scheme: short.scheme,
        verifier: &cfg.verifier,
        m: cfg.infer.m,
        steps: cfg.infer.steps,
        selection: Selection::Best,
        noise_level: None,
    };
    let diff_planner = DiffusionPlanner {
        stack: short,
        steps: cfg.infer.steps,
        score_drafts: false,
    };
    let results: Vec<(Episode, f64)> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let env_seed = episode_env_seed(cfg.seed, i);
            let mut state = reset(env, env_seed);
            let mut transitions = Vec::new();
            let mut outcome = Outcome::Failure;
            let mut query: u64 = 0;
            let mut seconds = 0.0;
            'episode: while state.step_count < env.max_steps {
                let long_phase = n_long < 0 || (query as i64) < n_long;
                let planner: &dyn Planner = if long_phase {
                    &long_planner
                } else if mode == PolicyMode::Adv {
                    &adv_planner
                } else {
                    &diff_planner
                };
                let obs = observe(&state, env, env_seed, query);
                let qseed = query_draft_seed(cfg.seed, train_seed, i, query);
                let start = Instant::now();
                let (chunk, _) = planner.plan(&obs, state.instruction(), qseed);
                seconds += start.elapsed().as_secs_f64();
                query += 1;
                for s in 0..chunk.h() {
                    let row = chunk.row(s);
                    let next = step(&state, [row[0], row[1]], env);
                    transitions.push(Transition {
                        before: state.clone(),
                        action: [row[0], row[1]],
                        after: next.clone(),
                    });
                    state = next;
                    if state.block_in_goal(env) {
                        outcome = Outcome::Success;
                        break 'episode;
                    }
                    if state.step_count >= env.max_steps {
                        break 'episode;
                    }
                }
            }
            (
                Episode {
                    steps_used: state.step_count,
                    queries: query as u32,
                    transitions,
                    outcome,
                },
                seconds,
            )
        })
        .collect();
    let mut episodes_out = Vec::with_capacity(results.len());
    let mut seconds = 0.0;
    for (episode, s) in results {
        episodes_out.push(episode);
        seconds += s;
    }
    let metrics = adv_core::metrics::aggregate(&episodes_out, env, seconds);
    CellResult {
        metrics,
        stats: vec![Default::default(); episodes_out.len()],
        episodes: episodes_out,
        inference_seconds: seconds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_experiments_list_the_valid_names() {
        let cfg = RunConfig::default();
        let err = run_experiment(&cfg, "nope").unwrap_err();
        let text = format!("{err}");
        assert!(text.contains("main_eval") && text.contains("recovery"), "{text}");
    }

    #[test]
    fn missing_prerequisites_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.out_dir = dir.path().to_path_buf();
        let err = run_experiment(&cfg, "main_eval").unwrap_err();
        assert!(format!("{err}").contains("codec_h8.json"));
    }
}
