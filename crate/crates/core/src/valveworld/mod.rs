//! Deterministic toy valve-rotation environment with a dual renderer and
//! dataset collection.
//!
//! Two fingertips live on a ring around a three-spoke valve. Positions are
//! ring coordinates in [0,1] (angle 2π·φ) and are clamped, not wrapped: a
//! finger cannot circulate past the 0/1 cut, which is what forces
//! drag-release-return gaits. A finger within the contact half-width of a
//! spoke transfers its own angular displacement to the valve (the mean when
//! both engage); a stationary finger transfers nothing.

pub mod render;

pub use render::{
    apply_occlusion, render_canonical, render_randomized, render_transparent, DomainParams,
    Palette, IMG_H, IMG_W, PIXELS,
};

use crate::error::{KrcError, Result};
use crate::rng::Streams;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

/// Valve rotation per control step for the base task (1 step = 1 second).
pub const BASE_RATE: f64 = 0.157;
/// Maximum fingertip travel per step, radians.
pub const DELTA_MAX: f64 = 0.25;
/// Engagement half-width around a spoke, radians.
pub const CONTACT_HALF_WIDTH: f64 = 0.35;
pub const SPOKES: usize = 3;

pub const D_B: usize = 2;
pub const D_U: usize = 2;
pub const D_Z: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    /// valve angle, wrapped to [0, 2π)
    pub theta: f64,
    /// fingertip ring positions in [0,1]
    pub f1: f64,
    pub f2: f64,
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % TAU;
    if x < 0.0 {
        x += TAU;
    }
    x
}

/// Signed angular difference wrapped to (−π, π].
pub fn wrap_pi(a: f64) -> f64 {
    let mut x = (a + std::f64::consts::PI) % TAU;
    if x < 0.0 {
        x += TAU;
    }
    x - std::f64::consts::PI
}

impl EnvState {
    pub fn wrapped(&self) -> EnvState {
        EnvState { theta: wrap_angle(self.theta), f1: self.f1.clamp(0.0, 1.0), f2: self.f2.clamp(0.0, 1.0) }
    }

    /// Exported state [φ1, φ2, cos(3θ), sin(3θ)], each normalized to [0,1].
    pub fn export(&self) -> Tensor {
        Tensor::vector(vec![
            self.f1,
            self.f2,
            ((3.0 * self.theta).cos() + 1.0) / 2.0,
            ((3.0 * self.theta).sin() + 1.0) / 2.0,
        ])
    }

    /// Finger encoder readings [φ1, φ2].
    pub fn proprio(&self) -> Tensor {
        Tensor::vector(vec![self.f1, self.f2])
    }
}

/// Valve angle (mod 2π/3) recovered from an exported state.
pub fn theta_from_export(z: &Tensor) -> f64 {
    let c = z.data()[2] * 2.0 - 1.0;
    let s = z.data()[3] * 2.0 - 1.0;
    wrap_angle(s.atan2(c) / 3.0)
}

fn distance_to_nearest_spoke(pos_angle: f64, theta: f64) -> f64 {
    (0..SPOKES)
        .map(|j| wrap_pi(pos_angle - (theta + j as f64 * TAU / SPOKES as f64)).abs())
        .fold(f64::INFINITY, f64::min)
}

/// One control step. Fingers move toward target ring positions 2π·u by at
/// most `DELTA_MAX`; engaged fingers transfer their displacement to the valve
/// (mean displacement when both engage). Inputs outside [0,1] are clamped.
pub fn step(state: &EnvState, u: [f64; 2]) -> EnvState {
    let s = state.wrapped();
    let targets = [u[0].clamp(0.0, 1.0) * TAU, u[1].clamp(0.0, 1.0) * TAU];
    let pos = [s.f1 * TAU, s.f2 * TAU];

    let mut new_pos = [0.0; 2];
    let mut delta = [0.0; 2];
    let mut engaged = [false; 2];
    for i in 0..2 {
        let step_i = (targets[i] - pos[i]).clamp(-DELTA_MAX, DELTA_MAX);
        new_pos[i] = pos[i] + step_i;
        delta[i] = step_i;
        engaged[i] = distance_to_nearest_spoke(pos[i], s.theta) <= CONTACT_HALF_WIDTH;
    }

    let torque = match (engaged[0], engaged[1]) {
        (true, true) => (delta[0] + delta[1]) / 2.0,
        (true, false) => delta[0],
        (false, true) => delta[1],
        (false, false) => 0.0,
    };

    EnvState {
        theta: wrap_angle(s.theta + torque),
        f1: (new_pos[0] / TAU).clamp(0.0, 1.0),
        f2: (new_pos[1] / TAU).clamp(0.0, 1.0),
    }
}

// ---- scripted task -----------------------------------------------------------

const START_THETA: f64 = 0.3;
const DRAG_STEPS: usize = 8;
const CYCLE_STEPS: usize = 10;
/// idle-finger offset: mid-gap between adjacent spokes
const MIDGAP: f64 = TAU / 6.0;

/// Canonical start state shared by the scripted task, data collection of the
/// task sequences, and evaluation runs: finger 1 on a spoke, finger 2 parked
/// mid-gap (where the contact zones of both neighboring spokes are farthest).
pub fn start_state() -> EnvState {
    EnvState { theta: START_THETA, f1: START_THETA / TAU, f2: (START_THETA + MIDGAP) / TAU }
}

/// Per-step drag rate for a speed multiplier: 8 drag steps out of every 10
/// must average to `BASE_RATE·multiplier`.
pub fn drag_rate(speed_multiplier: f64) -> f64 {
    BASE_RATE * speed_multiplier * CYCLE_STEPS as f64 / DRAG_STEPS as f64
}

/// Scripted gait: finger 1 rides a spoke, dragging for 8 steps then holding
/// 2; finger 2 rides the gap between spokes in lockstep so it never engages
/// (an engaged idle finger would brake the valve under the mean-displacement
/// rule). Executed open loop from [`start_state`] this rotates the valve at
/// `BASE_RATE·multiplier` on average; multiplier 0 holds everything still.
pub fn task_specific_sequence(speed_multiplier: f64, t_len: usize) -> Vec<[f64; 2]> {
    let r = drag_rate(speed_multiplier);
    let mut nominal = START_THETA;
    let mut us = Vec::with_capacity(t_len);
    for step_idx in 0..t_len {
        let phase = step_idx % CYCLE_STEPS;
        if phase < DRAG_STEPS {
            nominal += r;
        }
        us.push([
            (nominal / TAU).clamp(0.0, 1.0),
            ((nominal + MIDGAP) / TAU).clamp(0.0, 1.0),
        ]);
    }
    us
}

/// Target valve trajectory for a task: θ*_l = θ₀ + BASE_RATE·multiplier·l.
pub fn target_theta(speed_multiplier: f64, l: usize) -> f64 {
    START_THETA + BASE_RATE * speed_multiplier * l as f64
}

/// Roll a control sequence forward, returning the visited states
/// (length T+1, including the start).
pub fn rollout(start: &EnvState, us: &[[f64; 2]]) -> Vec<EnvState> {
    let mut states = Vec::with_capacity(us.len() + 1);
    states.push(start.wrapped());
    for u in us {
        let next = step(states.last().unwrap(), *u);
        states.push(next);
    }
    states
}

// ---- dataset collection ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureInterval {
    EachStep,
    EachSequence,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollectConfig {
    pub n_random: usize,
    pub n_noisy_task: usize,
    pub t_len: usize,
    /// Gaussian noise on the task-specific controls, in ring units
    pub noise_sigma_u: f64,
    pub texture_interval: TextureInterval,
    pub speed_multiplier: f64,
}

impl CollectConfig {
    pub fn total_episodes(&self) -> usize {
        self.n_random + 1 + self.n_noisy_task
    }
}

/// One rollout: per-step randomized image, canonical image, proprioception,
/// state, control. Images are stored flattened, one row per step.
#[derive(Debug, Clone)]
pub struct Episode {
    pub x_ran: Tensor,
    pub x_can: Tensor,
    pub b: Tensor,
    pub z: Tensor,
    pub u: Tensor,
    pub domain: DomainParams,
    /// true valve angles per step (evaluation bookkeeping, not model input)
    pub thetas: Vec<f64>,
}

impl Episode {
    pub fn t_len(&self) -> usize {
        self.b.shape()[0]
    }
}

fn record_episode(
    states: &[EnvState],
    us: &[[f64; 2]],
    domain: DomainParams,
    texture_interval: TextureInterval,
    ep_streams: &Streams,
) -> Episode {
    // states has T+1 entries; step t observes states[t] (t = 1..T are the
    // post-control states, states[0] is only the pre-roll pose)
    let t_len = us.len();
    let mut x_ran = Tensor::zeros(vec![t_len, PIXELS]);
    let mut x_can = Tensor::zeros(vec![t_len, PIXELS]);
    let mut b = Tensor::zeros(vec![t_len, D_B]);
    let mut z = Tensor::zeros(vec![t_len, D_Z]);
    let mut u = Tensor::zeros(vec![t_len, D_U]);
    let mut thetas = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let s = &states[t];
        let step_seed = match texture_interval {
            TextureInterval::EachStep => ep_streams.stream("texture-step", t as u64).gen(),
            TextureInterval::EachSequence => 0u64,
        };
        let ran = render_randomized(s, &domain, step_seed);
        let can = render_canonical(s);
        x_ran.data_mut()[t * PIXELS..(t + 1) * PIXELS].copy_from_slice(ran.data());
        x_can.data_mut()[t * PIXELS..(t + 1) * PIXELS].copy_from_slice(can.data());
        b.data_mut()[t * D_B..(t + 1) * D_B].copy_from_slice(s.proprio().data());
        z.data_mut()[t * D_Z..(t + 1) * D_Z].copy_from_slice(s.export().data());
        u.data_mut()[t * D_U..(t + 1) * D_U].copy_from_slice(&us[t]);
        thetas.push(s.theta);
    }
    Episode { x_ran, x_can, b, z, u, domain, thetas }
}

/// Observation convention: u_t is the command consumed by the transition into
/// step t, so episodes record (state before control t+1) at row t and the
/// first row pairs the start pose with a hold command.
fn roll_and_record(
    start: &EnvState,
    mut us: Vec<[f64; 2]>,
    domain: DomainParams,
    texture_interval: TextureInterval,
    ep_streams: &Streams,
) -> Episode {
    // prepend the hold command for step 1 (no transition into the start pose)
    let hold = [start.f1, start.f2];
    us.insert(0, hold);
    us.pop();
    let applied = &us[1..];
    let mut states = vec![start.wrapped()];
    for u in applied {
        states.push(step(states.last().unwrap(), *u));
    }
    record_episode(&states, &us, domain, texture_interval, ep_streams)
}

/// Collect the full dataset: `n_random` random-action episodes from random
/// poses, one scripted task episode, and `n_noisy_task` noise-perturbed task
/// episodes, all with per-sequence domain sampling. Each episode owns an RNG
/// stream derived from the dataset seed and episode index.
pub fn collect_dataset(cfg: &CollectConfig, streams: &Streams) -> Result<Vec<Episode>> {
    if cfg.t_len < 2 {
        return Err(KrcError::Config(format!("episode length {} too short", cfg.t_len)));
    }
    if cfg.noise_sigma_u < 0.0 || cfg.speed_multiplier < 0.0 {
        return Err(KrcError::Config("negative noise or speed".to_string()));
    }
    let total = cfg.total_episodes();
    let mut episodes = Vec::with_capacity(total);
    for idx in 0..total {
        let ep_streams = streams.scoped("episode", idx as u64);
        let mut rng = ep_streams.stream("actions", 0);
        let domain = DomainParams::sample(&mut ep_streams.stream("domain", 0));
        let episode = if idx < cfg.n_random {
            let start = EnvState {
                theta: rng.gen_range(0.0..TAU),
                f1: rng.gen_range(0.0..1.0),
                f2: rng.gen_range(0.0..1.0),
            };
            let us: Vec<[f64; 2]> =
                (0..cfg.t_len).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
            roll_and_record(&start, us, domain, cfg.texture_interval, &ep_streams)
        } else {
            let script = task_specific_sequence(cfg.speed_multiplier, cfg.t_len);
            let us = if idx == cfg.n_random {
                script
            } else {
                script
                    .iter()
                    .map(|u| {
                        let n1: f64 = rng.sample(StandardNormal);
                        let n2: f64 = rng.sample(StandardNormal);
                        [
                            (u[0] + cfg.noise_sigma_u * n1).clamp(0.0, 1.0),
                            (u[1] + cfg.noise_sigma_u * n2).clamp(0.0, 1.0),
                        ]
                    })
                    .collect()
            };
            roll_and_record(&start_state(), us, domain, cfg.texture_interval, &ep_streams)
        };
        episodes.push(episode);
    }
    Ok(episodes)
}

/// Transparent-valve targets rendered from an episode's proprioception (the
/// valve layer is omitted, so only fingertip positions matter).
pub fn transparent_targets(episode: &Episode) -> Tensor {
    let t_len = episode.t_len();
    let mut out = Tensor::zeros(vec![t_len, PIXELS]);
    for t in 0..t_len {
        let s = EnvState {
            theta: 0.0,
            f1: episode.b.at2(t, 0),
            f2: episode.b.at2(t, 1),
        };
        let img = render_transparent(&s);
        out.data_mut()[t * PIXELS..(t + 1) * PIXELS].copy_from_slice(img.data());
    }
    out
}
