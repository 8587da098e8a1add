//! Deterministic planar pushing environment with a T-shaped block, a scripted
//! pushing controller and the four disturbance modes.

mod dataset;
mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{gen_dataset, DatasetConfig, SplitCounts, SPLITS};
pub use render::{locate_color, render};

use crate::trajkit::{Action, Mode, State, Trajectory};

pub const AGENT_RADIUS: f64 = 0.035;

/// Axis-aligned rectangles (center, half-extent) making up the T in the
/// block frame; the centroid sits at the origin.
pub const T_RECTS: [([f64; 2], [f64; 2]); 2] = [
    ([0.0, 0.04], [0.12, 0.03]),
    ([0.0, -0.055], [0.03, 0.075]),
];

/// Squared radius of gyration used to turn contact torque into spin.
const ROT_INERTIA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvParams {
    /// Per-step velocity retention is `1 - friction`.
    pub friction: f64,
    pub push_gain: f64,
    pub block_color: [f32; 3],
    pub agent_color: [f32; 3],
    pub goal_color: [f32; 3],
    pub max_steps: usize,
    pub goal_tolerance: f64,
    pub action_max: f64,
    /// Amplitude of the uniform exploration noise added by the controller.
    pub policy_noise: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            friction: 0.5,
            push_gain: 3.0,
            block_color: [0.0, 0.0, 1.0],
            agent_color: [0.2, 0.2, 0.2],
            goal_color: [0.0, 1.0, 0.0],
            max_steps: 160,
            goal_tolerance: 0.03,
            action_max: 0.025,
            policy_noise: 0.004,
        }
    }
}

impl EnvParams {
    /// Parameters with a disturbance applied.
    pub fn disturbed(&self, mode: Mode) -> EnvParams {
        let mut p = *self;
        match mode {
            Mode::None => {}
            Mode::RecolorOrange => p.block_color = [1.0, 0.5, 0.0],
            Mode::RecolorGreen => p.block_color = [0.0, 1.0, 0.0],
            Mode::HalfFriction => p.friction /= 2.0,
            Mode::ZeroFriction => p.friction = 0.0,
        }
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimState {
    pub agent_pos: [f64; 2],
    pub block_pos: [f64; 2],
    pub block_angle: f64,
    pub block_vel: [f64; 2],
    pub block_omega: f64,
    pub goal_pos: [f64; 2],
    pub goal_angle: f64,
    pub step: usize,
}

impl SimState {
    pub fn goal_distance(&self) -> f64 {
        dist(self.block_pos, self.goal_pos)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn clamp_action(delta: [f64; 2], max: f64) -> [f64; 2] {
    let n = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt();
    if n > max && n > 0.0 {
        [delta[0] * max / n, delta[1] * max / n]
    } else {
        delta
    }
}

/// Whether a point in the block frame lies inside the T.
pub(crate) fn in_t(local: [f64; 2]) -> bool {
    T_RECTS.iter().any(|(c, h)| {
        (local[0] - c[0]).abs() <= h[0] && (local[1] - c[1]).abs() <= h[1]
    })
}

/// Penetration of the agent disc into the block: `(vector, contact point)`,
/// both in the block frame. The vector points from the agent into the block
/// and its length is the penetration depth.
fn penetration(local: [f64; 2]) -> Option<([f64; 2], [f64; 2])> {
    let mut best: Option<(f64, [f64; 2], [f64; 2])> = None;
    for (c, h) in T_RECTS {
        let lo = [c[0] - h[0], c[1] - h[1]];
        let hi = [c[0] + h[0], c[1] + h[1]];
        let q = [local[0].clamp(lo[0], hi[0]), local[1].clamp(lo[1], hi[1])];
        let cand = if q != local {
            let d = dist(q, local);
            (d < AGENT_RADIUS).then(|| {
                let n = [(q[0] - local[0]) / d, (q[1] - local[1]) / d];
                (AGENT_RADIUS - d, n, q)
            })
        } else {
            // centre inside: leave through the nearest edge
            let exits = [
                (local[0] - lo[0], [1.0, 0.0], [lo[0], local[1]]),
                (hi[0] - local[0], [-1.0, 0.0], [hi[0], local[1]]),
                (local[1] - lo[1], [0.0, 1.0], [local[0], lo[1]]),
                (hi[1] - local[1], [0.0, -1.0], [local[0], hi[1]]),
            ];
            let (e, n, q) = exits
                .into_iter()
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap();
            Some((AGENT_RADIUS + e, n, q))
        };
        if let Some(c) = cand {
            if best.is_none_or(|b| c.0 > b.0) {
                best = Some(c);
            }
        }
    }
    best.map(|(depth, n, q)| ([n[0] * depth, n[1] * depth], q))
}

/// Advances the environment by one unit step.
pub fn step(state: &SimState, action: &Action, params: &EnvParams) -> SimState {
    assert!(
        action.delta.iter().all(|v| v.is_finite()),
        "step: non-finite action"
    );
    let mut s = *state;
    let a = clamp_action(
        [action.delta[0] as f64, action.delta[1] as f64],
        params.action_max,
    );
    s.agent_pos = [
        (s.agent_pos[0] + a[0]).clamp(0.0, 1.0),
        (s.agent_pos[1] + a[1]).clamp(0.0, 1.0),
    ];

    let local = rotate(
        [s.agent_pos[0] - s.block_pos[0], s.agent_pos[1] - s.block_pos[1]],
        -s.block_angle,
    );
    if let Some((pen, contact)) = penetration(local) {
        let pen = rotate(pen, s.block_angle);
        let r = rotate(contact, s.block_angle);
        let g = params.push_gain;
        s.block_vel[0] += g * pen[0];
        s.block_vel[1] += g * pen[1];
        s.block_omega += g * (r[0] * pen[1] - r[1] * pen[0]) / ROT_INERTIA;
    }

    let keep = 1.0 - params.friction;
    s.block_vel = [s.block_vel[0] * keep, s.block_vel[1] * keep];
    s.block_omega *= keep;

    for i in 0..2 {
        let p = s.block_pos[i] + s.block_vel[i];
        if !(0.0..=1.0).contains(&p) {
            s.block_vel[i] = 0.0;
        }
        s.block_pos[i] = p.clamp(0.0, 1.0);
    }
    s.block_angle += s.block_omega;
    s.step += 1;
    s
}

/// Deterministic part of the controller: the point the agent heads for.
fn controller_target(s: &SimState) -> [f64; 2] {
    let b = s.block_pos;
    let to_goal = [s.goal_pos[0] - b[0], s.goal_pos[1] - b[1]];
    let d = (to_goal[0].powi(2) + to_goal[1].powi(2)).sqrt();
    let dir = [to_goal[0] / d, to_goal[1] / d];
    let perp = [-dir[1], dir[0]];
    let rel = [s.agent_pos[0] - b[0], s.agent_pos[1] - b[1]];
    let along = rel[0] * dir[0] + rel[1] * dir[1];
    let lat = rel[0] * perp[0] + rel[1] * perp[1];
    let side = if lat >= 0.0 { 1.0 } else { -1.0 };
    let standoff = 0.18;
    let at = |a: f64, l: f64| [b[0] + dir[0] * a + perp[0] * l, b[1] + dir[1] * a + perp[1] * l];

    if along < -0.04 && lat.abs() < 0.05 {
        // aligned behind the block: push through its centre
        at(d.min(0.1), 0.0)
    } else if along < -0.04 {
        if along > -standoff + 0.01 {
            // misaligned while close: back off before sliding across
            at(-standoff - 0.02, lat)
        } else {
            at(-standoff, 0.0)
        }
    } else if lat.abs() < 0.22 {
        // beside or ahead of the block: step sideways first
        at(along, side * 0.24)
    } else {
        at(-standoff, side * 0.24)
    }
}

/// Scripted pushing controller with seeded uniform exploration noise.
pub fn scripted_policy<R: Rng>(state: &SimState, params: &EnvParams, rng: &mut R) -> Action {
    if state.goal_distance() < params.goal_tolerance {
        return Action::zero(2);
    }
    let target = controller_target(state);
    let mut delta = [target[0] - state.agent_pos[0], target[1] - state.agent_pos[1]];
    delta = clamp_action(delta, params.action_max);
    if params.policy_noise > 0.0 {
        for v in &mut delta {
            *v += rng.random_range(-params.policy_noise..=params.policy_noise);
        }
    }
    let delta = clamp_action(delta, params.action_max);
    Action {
        delta: vec![delta[0] as f32, delta[1] as f32],
    }
}

/// Random initial configuration; the goal pose is fixed.
pub fn initial_state<R: Rng>(rng: &mut R) -> SimState {
    let goal_pos = [0.5, 0.5];
    let block_pos = loop {
        let p = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
        if dist(p, goal_pos) >= 0.2 {
            break p;
        }
    };
    let block_angle = rng.random_range(0.0..std::f64::consts::TAU);
    let agent_pos = loop {
        let p = [rng.random_range(0.08..0.92), rng.random_range(0.08..0.92)];
        if dist(p, block_pos) >= 0.2 {
            break p;
        }
    };
    SimState {
        agent_pos,
        block_pos,
        block_angle,
        block_vel: [0.0, 0.0],
        block_omega: 0.0,
        goal_pos,
        goal_angle: std::f64::consts::FRAC_PI_4,
        step: 0,
    }
}

fn observe(s: &SimState, params: &EnvParams, t: usize) -> State {
    State {
        image: render(s, params),
        proprio: vec![s.agent_pos[0] as f32, s.agent_pos[1] as f32],
        t,
    }
}

/// Result of a rollout together with its final simulator state.
pub struct RolloutOutcome {
    pub trajectory: Trajectory,
    pub final_state: SimState,
    pub reached_goal: bool,
}

/// Where the controller believes the block is, given the last frame: the
/// centroid of pixels showing the nominal block color.
fn perceive_block(image: &[f32], nominal: &EnvParams) -> Option<[f64; 2]> {
    locate_color(image, nominal.block_color, 0.25, 4)
}

/// Runs the controller from a seeded initial state until the block is within
/// tolerance of the goal or `max_steps` states have been recorded.
///
/// The controller sees the block through the previous frame, looking for the
/// undisturbed block color; it starts from the true initial pose and keeps its
/// last estimate while the block is not found.
pub fn rollout_detailed(seed: u64, mode: Mode, params: &EnvParams) -> RolloutOutcome {
    let nominal = *params;
    let params = params.disturbed(mode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = initial_state(&mut rng);
    let mut belief = s.block_pos;
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut reached = false;
    for t in 0..params.max_steps {
        let seen = SimState { block_pos: belief, ..s };
        let a = scripted_policy(&seen, &params, &mut rng);
        let obs = observe(&s, &params, t);
        if let Some(p) = perceive_block(&obs.image, &nominal) {
            belief = p;
        }
        states.push(obs);
        actions.push(a.clone());
        if s.goal_distance() < params.goal_tolerance {
            reached = true;
            break;
        }
        if t + 1 < params.max_steps {
            s = step(&s, &a, &params);
        }
    }
    RolloutOutcome {
        trajectory: Trajectory {
            id: format!("s{seed}"),
            states,
            actions,
            label: mode.label(),
            mode,
            seed,
        },
        final_state: s,
        reached_goal: reached,
    }
}

pub fn rollout(seed: u64, mode: Mode, params: &EnvParams) -> Trajectory {
    rollout_detailed(seed, mode, params).trajectory
}
