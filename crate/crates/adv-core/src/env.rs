//! Deterministic 2D push-block environment with a scripted expert.
//!
//! A point gripper moves inside the arena `[-1, 1]^2` and pushes a point
//! block toward one of four goal zones. Contact within `contact_radius`
//! translates the block along the gripper-to-block direction by the
//! component of the gripper's displacement in that direction (pushing only,
//! never pulling). Everything is pure and seeded.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::codec::ActionChunk;
use crate::model::{Instruction, Observation, GOAL_COUNT};
use crate::rng::Stream;

/// Goal zone centers for goal ids 0..3.
pub const GOAL_CENTERS: [[f64; 2]; GOAL_COUNT] =
    [[0.0, 0.8], [0.0, -0.8], [0.8, 0.0], [-0.8, 0.0]];

/// Block spawn distribution: in-distribution box or the out-of-distribution
/// ring (their supports are disjoint).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Id,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub arena_half_width: f64,
    /// Per-component action clip per step.
    pub max_speed: f64,
    pub contact_radius: f64,
    pub goal_radius: f64,
    pub max_steps: u32,
    pub split: Split,
    /// Standard deviation of observation noise; applied on the OOD split only.
    pub obs_noise_sd: f64,
    /// Half-width of the in-distribution block spawn box.
    pub id_spawn_half_width: f64,
    /// Radius range of the out-of-distribution spawn ring.
    pub ood_ring_min: f64,
    pub ood_ring_max: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            arena_half_width: 1.0,
            max_speed: 0.04,
            contact_radius: 0.06,
            goal_radius: 0.12,
            max_steps: 200,
            split: Split::Id,
            obs_noise_sd: 0.02,
            id_spawn_half_width: 0.3,
            ood_ring_min: 0.45,
            ood_ring_max: 0.6,
        }
    }
}

impl EnvConfig {
    pub fn with_split(split: Split) -> Self {
        EnvConfig {
            split,
            ..EnvConfig::default()
        }
    }
}

/// One maximal run of consecutive contact steps. `start`/`end` are acting
/// step indices (inclusive); `moved` is the accumulated block displacement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactInterval {
    pub start: u32,
    pub end: u32,
    pub moved: f64,
}

impl ContactInterval {
    pub fn len_steps(&self) -> u32 {
        self.end - self.start + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub gripper: [f64; 2],
    pub block: [f64; 2],
    pub goal_id: u8,
    pub step_count: u32,
    pub contact_history: Vec<ContactInterval>,
}

impl EnvState {
    pub fn observation(&self) -> Observation {
        Observation([self.gripper[0], self.gripper[1], self.block[0], self.block[1]])
    }

    pub fn instruction(&self) -> Instruction {
        Instruction {
            goal_id: self.goal_id,
        }
    }

    pub fn goal_center(&self) -> [f64; 2] {
        GOAL_CENTERS[self.goal_id as usize]
    }

    pub fn block_in_goal(&self, cfg: &EnvConfig) -> bool {
        dist(self.block, self.goal_center()) <= cfg.goal_radius
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    libm::hypot(a[0] - b[0], a[1] - b[1])
}

fn norm(v: [f64; 2]) -> f64 {
    libm::hypot(v[0], v[1])
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn scale(v: [f64; 2], s: f64) -> [f64; 2] {
    [v[0] * s, v[1] * s]
}

fn unit(v: [f64; 2]) -> Option<[f64; 2]> {
    let n = norm(v);
    if n < 1e-12 {
        None
    } else {
        Some(scale(v, 1.0 / n))
    }
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn clamp_to_arena(p: [f64; 2], half: f64) -> [f64; 2] {
    [p[0].clamp(-half, half), p[1].clamp(-half, half)]
}

/// Distance from point `c` to the segment `[p, q]`.
fn segment_distance(p: [f64; 2], q: [f64; 2], c: [f64; 2]) -> f64 {
    let pq = sub(q, p);
    let len2 = dot(pq, pq);
    if len2 < 1e-18 {
        return dist(p, c);
    }
    let t = (dot(sub(c, p), pq) / len2).clamp(0.0, 1.0);
    dist([p[0] + t * pq[0], p[1] + t * pq[1]], c)
}

/// Seeded reset. Draw order is fixed: gripper x, gripper y, block position
/// (two draws), goal id.
pub fn reset(cfg: &EnvConfig, seed: u64) -> EnvState {
    let mut stream = Stream::from_seed(seed);
    let gripper = [
        stream.uniform_in(-0.9, -0.5),
        stream.uniform_in(-0.9, 0.9),
    ];
    let block = match cfg.split {
        Split::Id => [
            stream.uniform_in(-cfg.id_spawn_half_width, cfg.id_spawn_half_width),
            stream.uniform_in(-cfg.id_spawn_half_width, cfg.id_spawn_half_width),
        ],
        Split::Ood => {
            let radius = stream.uniform_in(cfg.ood_ring_min, cfg.ood_ring_max);
            let angle = stream.uniform_in(0.0, core::f64::consts::TAU);
            [radius * libm::cos(angle), radius * libm::sin(angle)]
        }
    };
    let goal_id = stream.uniform_index(GOAL_COUNT) as u8;
    EnvState {
        gripper,
        block,
        goal_id,
        step_count: 0,
        contact_history: Vec::new(),
    }
}

/// Advances one step: clip the action per component, move the gripper, push
/// the block if in contact, clamp both to the arena.
pub fn step(state: &EnvState, action: [f64; 2], cfg: &EnvConfig) -> EnvState {
    let speed = cfg.max_speed;
    let clipped = [action[0].clamp(-speed, speed), action[1].clamp(-speed, speed)];
    let old_gripper = state.gripper;
    let gripper = clamp_to_arena(
        [old_gripper[0] + clipped[0], old_gripper[1] + clipped[1]],
        cfg.arena_half_width,
    );
    let displacement = sub(gripper, old_gripper);
    let mut block = state.block;
    let mut contact_history = state.contact_history.clone();
    let acting_step = state.step_count;

    if dist(gripper, state.block) <= cfg.contact_radius {
        // Push along the (pre-move) gripper-to-block direction, by the
        // displacement component in that direction. No pulling, and the
        // block never outruns the speed limit.
        let dir = unit(sub(state.block, old_gripper)).or_else(|| unit(displacement));
        if let Some(dir) = dir {
            let push = dot(displacement, dir).clamp(0.0, speed);
            if push > 0.0 {
                block = clamp_to_arena(
                    [block[0] + push * dir[0], block[1] + push * dir[1]],
                    cfg.arena_half_width,
                );
            }
        }
        let moved = dist(block, state.block);
        match contact_history.last_mut() {
            Some(last) if acting_step > 0 && last.end == acting_step - 1 => {
                last.end = acting_step;
                last.moved += moved;
            }
            _ => contact_history.push(ContactInterval {
                start: acting_step,
                end: acting_step,
                moved,
            }),
        }
    }

    EnvState {
        gripper,
        block,
        goal_id: state.goal_id,
        step_count: state.step_count + 1,
        contact_history,
    }
}

/// Scripted demonstrator: walk to the staging point behind the block
/// (detouring around it), then push straight toward the goal.
pub fn expert_action(state: &EnvState, cfg: &EnvConfig) -> [f64; 2] {
    let goal = state.goal_center();
    let speed = cfg.max_speed;
    let rc = cfg.contact_radius;
    if state.block_in_goal(cfg) {
        return [0.0, 0.0];
    }
    let goal_dir = match unit(sub(goal, state.block)) {
        Some(d) => d,
        None => return [0.0, 0.0],
    };
    // In the pocket behind the block: push toward the goal. Entry requires
    // tight alignment with the push line; while contact is already open the
    // bound is looser, so a push in progress is never abandoned after a
    // single step.
    let rel = sub(state.gripper, state.block);
    let rel_dist = norm(rel);
    let backward = dot(rel, scale(goal_dir, -1.0));
    let lateral = libm::sqrt((rel_dist * rel_dist - backward * backward).max(0.0));
    let touching = state
        .contact_history
        .last()
        .map_or(false, |iv| iv.end + 1 == state.step_count);
    let lateral_bound = if touching { 0.75 * rc } else { 0.25 * rc };
    if rel_dist <= 2.5 * rc && backward > 0.0 && lateral <= lateral_bound {
        // Drive straight through the block center; block, gripper and goal
        // stay on one ray, so the push direction cannot drift.
        let through = unit(sub(state.block, state.gripper)).unwrap_or(goal_dir);
        return scale(through, speed);
    }
    // Approach the staging point, keeping clear of the block.
    let staging = sub(state.block, scale(goal_dir, 1.5 * rc));
    let desired = sub(staging, state.gripper);
    let desired_dist = norm(desired);
    if desired_dist < 1e-9 {
        return scale(goal_dir, speed);
    }
    let dir = scale(desired, 1.0 / desired_dist);
    let step_len = desired_dist.min(speed);
    let next = [
        state.gripper[0] + dir[0] * step_len,
        state.gripper[1] + dir[1] * step_len,
    ];
    let avoid_radius = 1.25 * rc;
    if segment_distance(state.gripper, next, state.block) >= avoid_radius {
        return scale(dir, step_len);
    }
    // Orbit the block along the tangent closer to the desired direction,
    // drifting outward when already inside the avoidance radius.
    let to_block = unit(sub(state.block, state.gripper)).unwrap_or([1.0, 0.0]);
    let t1 = [-to_block[1], to_block[0]];
    let t2 = [to_block[1], -to_block[0]];
    let tangent = if dot(t1, dir) >= dot(t2, dir) { t1 } else { t2 };
    let mut out = tangent;
    if rel_dist < avoid_radius {
        out = [
            tangent[0] - 0.5 * to_block[0],
            tangent[1] - 0.5 * to_block[1],
        ];
    }
    match unit(out) {
        Some(u) => scale(u, speed),
        None => scale(dir, step_len),
    }
}

/// Episode outcome: the block ended inside the goal zone, or the step
/// budget ran out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub before: EnvState,
    pub action: [f64; 2],
    pub after: EnvState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub outcome: Outcome,
    pub steps_used: u32,
    /// Policy queries issued (chunked rollouts only; expert rollouts count
    /// one per step).
    pub queries: u32,
}

impl Episode {
    pub fn final_state(&self) -> &EnvState {
        &self
            .transitions
            .last()
            .expect("episodes contain at least one transition")
            .after
    }
}

/// Chunked rollout configuration: the policy emits `chunk_len` actions per
/// query and the first `replan_every` of them execute open-loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub chunk_len: usize,
    pub replan_every: usize,
}

/// Rolls out a chunk policy. The policy sees the (possibly noisy)
/// observation, the instruction, and its own query index for seeding.
pub fn rollout<P>(policy: &mut P, cfg: &EnvConfig, seed: u64, rcfg: &RolloutConfig) -> Episode
where
    P: FnMut(&Observation, Instruction, u64) -> ActionChunk,
{
    debug_assert!(rcfg.chunk_len >= 1);
    debug_assert!(rcfg.replan_every >= 1 && rcfg.replan_every <= rcfg.chunk_len);
    let mut state = reset(cfg, seed);
    let mut transitions = Vec::new();
    let mut queries = 0u64;
    let mut outcome = Outcome::Failure;
    'episode: while state.step_count < cfg.max_steps {
        let obs = observe(&state, cfg, seed, queries);
        let chunk = policy(&obs, state.instruction(), queries);
        debug_assert_eq!(chunk.h(), rcfg.chunk_len);
        queries += 1;
        for step_in_chunk in 0..rcfg.replan_every {
            let row = chunk.row(step_in_chunk);
            let action = [row[0], row[1]];
            let next = step(&state, action, cfg);
            transitions.push(Transition {
                before: state.clone(),
                action,
                after: next.clone(),
            });
            state = next;
            if state.block_in_goal(cfg) {
                outcome = Outcome::Success;
                break 'episode;
            }
            if state.step_count >= cfg.max_steps {
                break 'episode;
            }
        }
    }
    Episode {
        steps_used: state.step_count,
        queries: queries as u32,
        transitions,
        outcome,
    }
}

/// Observation of the current state; the OOD split adds seeded Gaussian
/// noise, drawn per query so scheduling cannot change it.
pub fn observe(state: &EnvState, cfg: &EnvConfig, seed: u64, query: u64) -> Observation {
    let mut obs = state.observation();
    if cfg.split == Split::Ood && cfg.obs_noise_sd > 0.0 {
        let mut noise = Stream::substream(seed, "obs_noise", query);
        for v in obs.0.iter_mut() {
            *v += cfg.obs_noise_sd * noise.normal();
        }
    }
    obs
}

/// Runs the scripted expert to termination, one action per step.
///
/// The expert acts on the true environment state (it needs the open-contact
/// flag for its push hysteresis), unlike learned policies which only see
/// observations.
pub fn expert_rollout(cfg: &EnvConfig, seed: u64) -> Episode {
    expert_rollout_jittered(cfg, seed, 0.0)
}

/// Expert rollout with seeded Gaussian noise added to every executed
/// action. The recorded actions are the executed (noisy) ones, so sliced
/// demonstrations stay consistent with their state sequences while covering
/// the off-line states the expert then corrects out of.
pub fn expert_rollout_jittered(cfg: &EnvConfig, seed: u64, jitter_sd: f64) -> Episode {
    let mut state = reset(cfg, seed);
    let mut noise = Stream::substream(seed, "expert_jitter", 0);
    let mut transitions = Vec::new();
    let mut outcome = Outcome::Failure;
    while state.step_count < cfg.max_steps {
        let mut action = expert_action(&state, cfg);
        if jitter_sd > 0.0 {
            action[0] += jitter_sd * noise.normal();
            action[1] += jitter_sd * noise.normal();
            let speed = cfg.max_speed;
            action[0] = action[0].clamp(-speed, speed);
            action[1] = action[1].clamp(-speed, speed);
        }
        let next = step(&state, action, cfg);
        transitions.push(Transition {
            before: state.clone(),
            action,
            after: next.clone(),
        });
        state = next;
        if state.block_in_goal(cfg) {
            outcome = Outcome::Success;
            break;
        }
    }
    Episode {
        steps_used: state.step_count,
        queries: state.step_count,
        transitions,
        outcome,
    }
}

/// Slices an episode into overlapping stride-1 training triples of length
/// `h`: the observation at the window start, the instruction, and the next
/// `h` executed actions.
pub fn slice_training_triples(
    episode: &Episode,
    h: usize,
) -> Vec<(Observation, Instruction, ActionChunk)> {
    let len = episode.transitions.len();
    if len < h {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(len - h + 1);
    for start in 0..=len - h {
        let before = &episode.transitions[start].before;
        let mut values = Vec::with_capacity(h * 2);
        for t in &episode.transitions[start..start + h] {
            values.extend_from_slice(&t.action);
        }
        out.push((
            before.observation(),
            before.instruction(),
            ActionChunk::new(h, 2, values).expect("recorded actions are finite"),
        ));
    }
    out
}

#[cfg(test)]
mod tests;
