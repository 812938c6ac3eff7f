//! Evaluation metrics, all pure functions of the episode trace so reports
//! can be recomputed offline from logs.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::env::{ContactInterval, EnvConfig, Episode, Outcome};

/// A touch shorter than this many steps is a glancing contact, not a
/// manipulation attempt.
pub const SUSTAINED_CONTACT_STEPS: u32 = 3;
/// A glancing touch that moves the block at least this far counts as a
/// pre-contact disturbance.
pub const DISTURBANCE_DISPLACEMENT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub success_rate: f64,
    /// Mean steps over successful episodes; absent when none succeeded.
    pub avg_success_steps: Option<f64>,
    /// Mean number of touch intervals opened after the first failed touch.
    pub recovery_attempts: f64,
    /// Fraction of episodes with a glancing pre-contact block displacement.
    pub pre_contact_disturbance_rate: f64,
    /// Executed environment steps per second of policy inference wall time.
    pub steps_per_second: f64,
    pub episodes: usize,
}

fn block_at_interval_end(episode: &Episode, interval: &ContactInterval) -> [f64; 2] {
    episode.transitions[interval.end as usize].after.block
}

/// Counts touch intervals opened after the first interval that ended with
/// the block still outside the goal.
pub fn recovery_attempts(episode: &Episode, cfg: &EnvConfig) -> u32 {
    let history = &episode.final_state().contact_history;
    let goal = episode.final_state().goal_center();
    let first_failure = history.iter().find(|interval| {
        let block = block_at_interval_end(episode, interval);
        libm::hypot(block[0] - goal[0], block[1] - goal[1]) > cfg.goal_radius
    });
    match first_failure {
        Some(failed) => history
            .iter()
            .filter(|interval| interval.start > failed.end)
            .count() as u32,
        None => 0,
    }
}

/// True when a touch shorter than [`SUSTAINED_CONTACT_STEPS`] moved the
/// block at least [`DISTURBANCE_DISPLACEMENT`] before the first sustained
/// touch.
pub fn has_pre_contact_disturbance(episode: &Episode, _cfg: &EnvConfig) -> bool {
    let history = &episode.final_state().contact_history;
    let first_sustained_start = history
        .iter()
        .find(|i| i.len_steps() >= SUSTAINED_CONTACT_STEPS)
        .map(|i| i.start);
    history.iter().any(|interval| {
        interval.len_steps() < SUSTAINED_CONTACT_STEPS
            && interval.moved >= DISTURBANCE_DISPLACEMENT
            && first_sustained_start.map_or(true, |s| interval.end < s)
    })
}

/// Reduces a set of episodes to a metric row. `inference_seconds` is the
/// summed policy wall time used for the throughput figure.
pub fn aggregate(episodes: &[Episode], cfg: &EnvConfig, inference_seconds: f64) -> MetricSet {
    let n = episodes.len().max(1);
    let successes: Vec<&Episode> = episodes
        .iter()
        .filter(|e| e.outcome == Outcome::Success)
        .collect();
    let total_steps: u64 = episodes.iter().map(|e| u64::from(e.steps_used)).sum();
    MetricSet {
        success_rate: successes.len() as f64 / n as f64,
        avg_success_steps: if successes.is_empty() {
            None
        } else {
            Some(
                successes.iter().map(|e| f64::from(e.steps_used)).sum::<f64>()
                    / successes.len() as f64,
            )
        },
        recovery_attempts: episodes
            .iter()
            .map(|e| f64::from(recovery_attempts(e, cfg)))
            .sum::<f64>()
            / n as f64,
        pre_contact_disturbance_rate: episodes
            .iter()
            .filter(|e| has_pre_contact_disturbance(e, cfg))
            .count() as f64
            / n as f64,
        steps_per_second: if inference_seconds > 0.0 {
            total_steps as f64 / inference_seconds
        } else {
            0.0
        },
        episodes: episodes.len(),
    }
}
