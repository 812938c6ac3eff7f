use super::*;
use crate::metrics;
use alloc::vec;

#[test]
fn reset_is_deterministic_per_seed() {
    let cfg = EnvConfig::default();
    for seed in 0..20 {
        assert_eq!(reset(&cfg, seed), reset(&cfg, seed));
    }
    assert_ne!(reset(&cfg, 1), reset(&cfg, 2));
}

#[test]
fn spawn_supports_are_disjoint() {
    let id_cfg = EnvConfig::with_split(Split::Id);
    let ood_cfg = EnvConfig::with_split(Split::Ood);
    for seed in 0..500 {
        let id = reset(&id_cfg, seed);
        assert!(id.block[0].abs() <= 0.3 && id.block[1].abs() <= 0.3, "seed {seed}");
        assert!(id.gripper[0] >= -0.9 && id.gripper[0] <= -0.5);
        assert!(id.gripper[1].abs() <= 0.9);
        assert!(id.goal_id < 4);

        let ood = reset(&ood_cfg, seed);
        let radius = libm::hypot(ood.block[0], ood.block[1]);
        assert!((0.45..=0.6).contains(&radius), "seed {seed} radius {radius}");
        // The ID box's farthest corner is at radius ~0.424 < 0.45.
        assert!(radius > libm::hypot(0.3, 0.3));
    }
}

#[test]
fn zero_action_only_advances_the_clock() {
    let cfg = EnvConfig::default();
    let state = reset(&cfg, 3);
    let next = step(&state, [0.0, 0.0], &cfg);
    assert_eq!(next.gripper, state.gripper);
    assert_eq!(next.block, state.block);
    assert_eq!(next.step_count, state.step_count + 1);
}

#[test]
fn distant_gripper_never_moves_the_block() {
    let cfg = EnvConfig::default();
    let mut state = reset(&cfg, 4);
    state.gripper = [-0.9, -0.9];
    state.block = [0.3, 0.3];
    let next = step(&state, [cfg.max_speed, cfg.max_speed], &cfg);
    assert_eq!(next.block, state.block);
    assert!(next.contact_history.is_empty());
}

#[test]
fn actions_clip_per_component_and_positions_stay_in_the_arena() {
    let cfg = EnvConfig::default();
    let mut state = reset(&cfg, 5);
    state.gripper = [0.99, 0.99];
    let next = step(&state, [5.0, 5.0], &cfg);
    assert_eq!(next.gripper, [1.0, 1.0]);
}

#[test]
fn pushing_moves_the_block_away_and_never_pulls() {
    let cfg = EnvConfig::default();
    let mut state = reset(&cfg, 6);
    state.gripper = [0.0, 0.0];
    state.block = [0.05, 0.0];
    // Push straight at the block.
    let next = step(&state, [cfg.max_speed, 0.0], &cfg);
    assert!(next.block[0] > state.block[0]);
    assert_eq!(next.block[1], 0.0);
    assert_eq!(next.contact_history.len(), 1);
    // Retreating while in contact must not drag the block.
    let retreat = step(&state, [-cfg.max_speed, 0.0], &cfg);
    assert_eq!(retreat.block, state.block);
}

#[test]
fn block_moves_only_inside_contact_intervals() {
    let cfg = EnvConfig::default();
    for seed in 0..50 {
        let episode = expert_rollout(&cfg, seed);
        let history = &episode.final_state().contact_history;
        for (i, t) in episode.transitions.iter().enumerate() {
            let moved = libm::hypot(
                t.after.block[0] - t.before.block[0],
                t.after.block[1] - t.before.block[1],
            );
            let covered = history
                .iter()
                .any(|iv| iv.start <= i as u32 && i as u32 <= iv.end);
            if moved > 0.0 {
                assert!(covered, "seed {seed} step {i} moved {moved} uncovered");
                assert!(moved <= cfg.max_speed + 1e-12);
            }
        }
    }
}

#[test]
fn expert_is_idle_once_the_block_is_home() {
    let cfg = EnvConfig::default();
    let mut state = reset(&cfg, 7);
    state.block = GOAL_CENTERS[state.goal_id as usize];
    assert_eq!(expert_action(&state, &cfg), [0.0, 0.0]);
}

#[test]
fn expert_succeeds_on_every_id_seed() {
    let cfg = EnvConfig::default();
    let mut total_steps = 0u64;
    for seed in 0..1000 {
        let episode = expert_rollout(&cfg, seed);
        assert_eq!(episode.outcome, Outcome::Success, "seed {seed}");
        total_steps += u64::from(episode.steps_used);
    }
    let mean = total_steps as f64 / 1000.0;
    assert!((20.0..=100.0).contains(&mean), "mean steps {mean}");
}

#[test]
fn expert_never_touches_before_committing() {
    let cfg = EnvConfig::default();
    for seed in 0..200 {
        let episode = expert_rollout(&cfg, seed);
        assert!(!metrics::has_pre_contact_disturbance(&episode, &cfg));
        let history = &episode.final_state().contact_history;
        if let Some(first_sustained) = history.iter().position(|iv| iv.len_steps() >= 3) {
            for iv in &history[..first_sustained] {
                assert!(
                    iv.len_steps() >= 3 || iv.moved < 0.05,
                    "seed {seed}: glancing pre-contact touch {iv:?}"
                );
            }
        }
    }
}

#[test]
fn episodes_chain_and_are_deterministic() {
    let cfg = EnvConfig::with_split(Split::Ood);
    let rcfg = RolloutConfig {
        chunk_len: 4,
        replan_every: 4,
    };
    let run = || {
        let mut policy = |obs: &Observation, _instr: Instruction, query: u64| {
            // An arbitrary but deterministic wiggle policy.
            let mut values = vec![];
            for i in 0..4 {
                let phase = (query as f64) * 0.3 + i as f64 + obs.0[0];
                values.push(0.05 * libm::sin(phase));
                values.push(0.05 * libm::cos(phase));
            }
            ActionChunk::new(4, 2, values).unwrap()
        };
        rollout(&mut policy, &cfg, 9, &rcfg)
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    for pair in a.transitions.windows(2) {
        assert_eq!(pair[0].after, pair[1].before);
    }
    assert_eq!(a.steps_used as usize, a.transitions.len());
}

#[test]
fn replanning_counts_queries() {
    let cfg = EnvConfig::default();
    let mut calls = 0u32;
    let mut policy = |_: &Observation, _: Instruction, _: u64| {
        calls += 1;
        ActionChunk::zeros(8, 2)
    };
    let episode = rollout(
        &mut policy,
        &cfg,
        11,
        &RolloutConfig {
            chunk_len: 8,
            replan_every: 8,
        },
    );
    // A zero policy never succeeds; every chunk runs fully open loop.
    assert_eq!(episode.outcome, Outcome::Failure);
    assert_eq!(episode.steps_used, cfg.max_steps);
    assert_eq!(calls, cfg.max_steps / 8);
    assert_eq!(episode.queries, calls);
}

#[test]
fn ood_observations_are_noisy_but_seeded() {
    let cfg = EnvConfig::with_split(Split::Ood);
    let state = reset(&cfg, 12);
    let clean = state.observation();
    let a = observe(&state, &cfg, 12, 0);
    let b = observe(&state, &cfg, 12, 0);
    let c = observe(&state, &cfg, 12, 1);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_ne!(a, clean);
    let id_cfg = EnvConfig::default();
    assert_eq!(observe(&state, &id_cfg, 12, 0), clean);
}

#[test]
fn training_triples_window_the_episode() {
    let cfg = EnvConfig::default();
    let episode = expert_rollout(&cfg, 13);
    let len = episode.transitions.len();
    let triples = slice_training_triples(&episode, 8);
    assert_eq!(triples.len(), len - 8 + 1);
    for (obs, instr, chunk) in &triples {
        assert_eq!(chunk.h(), 8);
        assert_eq!(chunk.d(), 2);
        assert!(instr.goal_id < 4);
        assert!(obs.0.iter().all(|v| v.is_finite()));
    }
    // The first triple starts at the initial observation.
    assert_eq!(triples[0].0, episode.transitions[0].before.observation());
    // Episodes shorter than the window produce nothing.
    assert!(slice_training_triples(&episode, len + 1).is_empty());
}
