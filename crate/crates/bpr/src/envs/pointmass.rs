//! Point-mass box environment with dense and sparse reward modes, plus
//! the scripted controllers used to build offline datasets.
//!
//! State is (position, velocity) in [−1, 1]² × [−v_max, v_max]², action
//! is an acceleration in [−1, 1]². Euler dynamics: x′ = clip(x + dt·v),
//! v′ = clip(v + dt·a). Dense reward is −‖x′ − goal‖₂; sparse reward is 1
//! inside the goal ball (radius 0.1), which also terminates the episode.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

pub const GOAL_RADIUS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
}

impl PmState {
    pub fn to_vec(self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PointMassEnv {
    pub goal: [f64; 2],
    pub start_center: [f64; 2],
    pub start_noise: f64,
    /// Intermediate controller target for the stitching construction.
    pub waypoint: [f64; 2],
    /// Where second-leg episodes begin.
    pub second_leg_start: [f64; 2],
    /// Anti-goal target for decoy second-leg episodes; the stitch dataset
    /// launches as many decoy legs as goal legs so the behavior average
    /// at the junction carries no net goal direction.
    pub decoy_target: [f64; 2],
    pub dt: f64,
    pub horizon: usize,
    pub v_max: f64,
    pub reward_mode: RewardMode,
}

impl PointMassEnv {
    /// Dense-reward task: travel the diagonal of the box. The waypoint
    /// sits in the opposite corner so waypoint-seeking episodes actively
    /// diverge from goal-seeking ones.
    pub fn dense() -> Self {
        PointMassEnv {
            goal: [0.8, 0.8],
            start_center: [-0.8, -0.8],
            start_noise: 0.05,
            waypoint: [0.8, -0.8],
            second_leg_start: [0.8, -0.8],
            decoy_target: [0.8, -0.8],
            dt: 0.1,
            horizon: 100,
            v_max: 1.0,
            reward_mode: RewardMode::Dense,
        }
    }

    /// Sparse stitching task: first-leg episodes drive from the start to
    /// the junction and park; second-leg episodes launch at the junction
    /// toward either the goal or its mirror decoy in equal shares. No
    /// single trajectory goes start → goal, and the junction's average
    /// behavior points nowhere.
    pub fn sparse_stitch() -> Self {
        PointMassEnv {
            goal: [0.0, 0.8],
            start_center: [-0.8, 0.0],
            start_noise: 0.05,
            waypoint: [0.0, 0.0],
            second_leg_start: [0.0, 0.0],
            decoy_target: [0.0, -0.8],
            dt: 0.1,
            horizon: 100,
            v_max: 1.0,
            reward_mode: RewardMode::Sparse,
        }
    }

    pub fn state_dim(&self) -> usize {
        4
    }

    pub fn action_dim(&self) -> usize {
        2
    }

    pub fn reset<R: Rng>(&self, rng: &mut R) -> PmState {
        self.reset_at(self.start_center, rng)
    }

    /// Reset near an arbitrary centre (used to start second-leg stitch
    /// episodes at the waypoint).
    pub fn reset_at<R: Rng>(&self, center: [f64; 2], rng: &mut R) -> PmState {
        let jitter = |rng: &mut R| rng.random_range(-self.start_noise..self.start_noise);
        PmState {
            pos: [
                (center[0] + jitter(rng)).clamp(-1.0, 1.0),
                (center[1] + jitter(rng)).clamp(-1.0, 1.0),
            ],
            vel: [0.0, 0.0],
        }
    }

    pub fn goal_distance(&self, pos: [f64; 2]) -> f64 {
        let dx = pos[0] - self.goal[0];
        let dy = pos[1] - self.goal[1];
        (dx * dx + dy * dy).sqrt()
    }

    /// Deterministic Euler step. Returns (next state, reward, done).
    /// `done` covers only the reward-mode termination (goal entry in
    /// sparse mode); the horizon is enforced by the rollout loop.
    pub fn step(&self, state: PmState, action: [f64; 2]) -> (PmState, f64, bool) {
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let next = PmState {
            pos: [
                (state.pos[0] + self.dt * state.vel[0]).clamp(-1.0, 1.0),
                (state.pos[1] + self.dt * state.vel[1]).clamp(-1.0, 1.0),
            ],
            vel: [
                (state.vel[0] + self.dt * a[0]).clamp(-self.v_max, self.v_max),
                (state.vel[1] + self.dt * a[1]).clamp(-self.v_max, self.v_max),
            ],
        };
        let dist = self.goal_distance(next.pos);
        match self.reward_mode {
            RewardMode::Dense => (next, -dist, false),
            RewardMode::Sparse => {
                let hit = dist < GOAL_RADIUS;
                (next, if hit { 1.0 } else { 0.0 }, hit)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BehaviorKind {
    /// Proportional-derivative controller toward the goal.
    Expert,
    /// Half-gain expert plus Gaussian noise (std 0.3).
    Medium,
    /// PD controller toward the waypoint; episodes start at the task
    /// start, so these trajectories never approach the goal.
    StitchA,
    /// PD controller toward the goal; episodes start near the waypoint.
    StitchB,
}

const KP: f64 = 5.0;
const KD: f64 = 3.0;
pub const MEDIUM_NOISE_STD: f64 = 0.3;

fn pd_action(target: [f64; 2], state: PmState) -> [f64; 2] {
    [
        (KP * (target[0] - state.pos[0]) - KD * state.vel[0]).clamp(-1.0, 1.0),
        (KP * (target[1] - state.pos[1]) - KD * state.vel[1]).clamp(-1.0, 1.0),
    ]
}

/// Scripted behavior-policy action for dataset generation.
pub fn scripted_behavior<R: Rng>(
    kind: BehaviorKind,
    env: &PointMassEnv,
    state: PmState,
    rng: &mut R,
) -> [f64; 2] {
    match kind {
        BehaviorKind::Expert => pd_action(env.goal, state),
        BehaviorKind::Medium => {
            let e = pd_action(env.goal, state);
            let noise = Normal::new(0.0, MEDIUM_NOISE_STD).expect("valid std");
            [
                (0.5 * e[0] + noise.sample(rng)).clamp(-1.0, 1.0),
                (0.5 * e[1] + noise.sample(rng)).clamp(-1.0, 1.0),
            ]
        }
        BehaviorKind::StitchA => pd_action(env.waypoint, state),
        BehaviorKind::StitchB => pd_action(env.goal, state),
    }
}

/// Roll the scripted controller for one episode and return the visited
/// (state, action, reward, next_state, done) tuples plus the return.
pub fn rollout_scripted<R: Rng>(
    kind: BehaviorKind,
    env: &PointMassEnv,
    rng: &mut R,
) -> Result<(Vec<(PmState, [f64; 2], f64, PmState, bool)>, f64)> {
    let start = match kind {
        BehaviorKind::StitchB => env.reset_at(env.second_leg_start, rng),
        _ => env.reset(rng),
    };
    rollout_controller(env, start, |s, rng| scripted_behavior(kind, env, s, rng), rng)
}

/// Decoy second leg: same PD primitive as the stitch legs, launched at
/// the junction but driven at the anti-goal.
pub fn rollout_decoy<R: Rng>(
    env: &PointMassEnv,
    rng: &mut R,
) -> Result<(Vec<(PmState, [f64; 2], f64, PmState, bool)>, f64)> {
    let start = env.reset_at(env.second_leg_start, rng);
    rollout_controller(env, start, |s, _| pd_action(env.decoy_target, s), rng)
}

/// The decoy controller's action at a state (for next-action storage).
pub fn decoy_action(env: &PointMassEnv, state: PmState) -> [f64; 2] {
    pd_action(env.decoy_target, state)
}

fn rollout_controller<R: Rng>(
    env: &PointMassEnv,
    start: PmState,
    mut controller: impl FnMut(PmState, &mut R) -> [f64; 2],
    rng: &mut R,
) -> Result<(Vec<(PmState, [f64; 2], f64, PmState, bool)>, f64)> {
    let mut state = start;
    let mut steps = Vec::with_capacity(env.horizon);
    let mut ret = 0.0;
    for _ in 0..env.horizon {
        let action = controller(state, rng);
        let (next, reward, done) = env.step(state, action);
        steps.push((state, action, reward, next, done));
        ret += reward;
        state = next;
        if done {
            break;
        }
    }
    Ok((steps, ret))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_velocity_zero_action_keeps_position() {
        let env = PointMassEnv::dense();
        let s = PmState { pos: [0.3, -0.2], vel: [0.0, 0.0] };
        let (next, _, _) = env.step(s, [0.0, 0.0]);
        assert_eq!(next.pos, s.pos);
    }

    #[test]
    fn euler_step_arithmetic() {
        let mut env = PointMassEnv::dense();
        env.goal = [1.0, 0.0];
        let s = PmState { pos: [0.0, 0.0], vel: [1.0, 0.0] };
        let (next, reward, done) = env.step(s, [0.0, 0.0]);
        assert_relative_eq!(next.pos[0], 0.1);
        assert_relative_eq!(reward, -0.9);
        assert!(!done);
    }

    #[test]
    fn sparse_mode_terminates_inside_goal_ball() {
        let mut env = PointMassEnv::sparse_stitch();
        env.goal = [0.0, 0.0];
        let s = PmState { pos: [0.05, 0.0], vel: [0.0, 0.0] };
        let (_, reward, done) = env.step(s, [0.0, 0.0]);
        assert_eq!(reward, 1.0);
        assert!(done);
    }

    #[test]
    fn expert_is_stationary_at_goal() {
        let env = PointMassEnv::dense();
        let s = PmState { pos: env.goal, vel: [0.0, 0.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = scripted_behavior(BehaviorKind::Expert, &env, s, &mut rng);
        assert_eq!(a, [0.0, 0.0]);
    }

    #[test]
    fn medium_mean_is_half_gain_expert() {
        let env = PointMassEnv::dense();
        // state with a small expert action so clipping cannot bias the mean
        let s = PmState { pos: [0.76, 0.76], vel: [0.0, 0.0] };
        let expert = scripted_behavior(BehaviorKind::Expert, &env, s, &mut ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let mut sum = [0.0, 0.0];
        for _ in 0..n {
            let a = scripted_behavior(BehaviorKind::Medium, &env, s, &mut rng);
            sum[0] += a[0];
            sum[1] += a[1];
        }
        let se = MEDIUM_NOISE_STD / (n as f64).sqrt();
        for d in 0..2 {
            let mean = sum[d] / n as f64;
            assert!(
                (mean - 0.5 * expert[d]).abs() < 3.0 * se,
                "dim {d}: mean {mean} vs {}",
                0.5 * expert[d]
            );
        }
    }

    #[test]
    fn expert_reaches_the_dense_goal() {
        let env = PointMassEnv::dense();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (steps, ret) = rollout_scripted(BehaviorKind::Expert, &env, &mut rng).unwrap();
        let last = steps.last().unwrap().3;
        assert!(env.goal_distance(last.pos) < 0.05, "end distance {}", env.goal_distance(last.pos));
        assert!(ret > -60.0, "return {ret}");
    }

    #[test]
    fn first_leg_stitch_never_enters_goal_ball() {
        let env = PointMassEnv::sparse_stitch();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut successes = 0;
        for _ in 0..100 {
            let (_, ret) = rollout_scripted(BehaviorKind::StitchA, &env, &mut rng).unwrap();
            if ret > 0.0 {
                successes += 1;
            }
        }
        assert_eq!(successes, 0);
    }

    #[test]
    fn second_leg_stitch_reaches_goal_from_waypoint() {
        let env = PointMassEnv::sparse_stitch();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut successes = 0;
        for _ in 0..100 {
            let (_, ret) = rollout_scripted(BehaviorKind::StitchB, &env, &mut rng).unwrap();
            if ret > 0.0 {
                successes += 1;
            }
        }
        assert!(successes > 90, "successes {successes}");
    }
}
