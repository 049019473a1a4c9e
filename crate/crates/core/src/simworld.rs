//! Deterministic 2-D soccer world: omnidirectional robot kinematics, a
//! dribble contact model, seeded episode placement and goal detection.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Field half-length along x (goal lines at ±4.5 m).
pub const FIELD_HALF_LENGTH: f64 = 4.5;
/// Field half-width along y (touch lines at ±3.0 m).
pub const FIELD_HALF_WIDTH: f64 = 3.0;
/// Half-width of the goal mouth.
pub const GOAL_HALF_WIDTH: f64 = 0.75;
pub const GOAL_DEPTH: f64 = 0.5;
pub const BALL_RADIUS: f64 = 0.05;

pub const FORWARD_SCALE: f64 = 0.25;
pub const LEFT_SCALE: f64 = 0.15;
pub const TURN_SCALE: f64 = 1.0;

/// Control period (30 Hz).
pub const DT: f64 = 1.0 / 30.0;
pub const EPISODE_TIMEOUT: u32 = 1800;

/// Ball contact: a disc around a point ahead of the robot centre.
pub const CONTACT_OFFSET: f64 = 0.10;
pub const CONTACT_RADIUS: f64 = 0.12;
pub const MIN_PUSH_SPEED: f64 = 0.05;
pub const KICK_FACTOR: f64 = 1.4;
pub const BALL_FRICTION: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("non-finite speed command {0:?}")]
    NonFinite([f64; 3]),
}

/// Normalised (forward, left, turn) command; each component in `[-1, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SpeedCommand {
    pub forward: f64,
    pub left: f64,
    pub turn: f64,
}

impl SpeedCommand {
    pub const ZERO: Self = Self {
        forward: 0.0,
        left: 0.0,
        turn: 0.0,
    };

    /// Builds a command, clamping each component to `[-1, 1]`. NaN stays NaN
    /// so that [`step`] can reject it.
    pub fn new(forward: f64, left: f64, turn: f64) -> Self {
        Self {
            forward: forward.clamp(-1.0, 1.0),
            left: left.clamp(-1.0, 1.0),
            turn: turn.clamp(-1.0, 1.0),
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.forward, self.left, self.turn]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn heading(&self) -> (f64, f64) {
        (self.theta.cos(), self.theta.sin())
    }

    /// Expresses a world point in the robot frame (x forward, y left).
    pub fn to_local(&self, px: f64, py: f64) -> (f64, f64) {
        let (c, s) = self.heading();
        let (dx, dy) = (px - self.x, py - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldState {
    pub robot: Pose2D,
    pub ball_pos: (f64, f64),
    pub ball_vel: (f64, f64),
    /// +1 scores at x = +4.5, −1 at x = −4.5.
    pub target_goal_sign: i8,
    pub tick: u32,
    pub rng_seed: u64,
}

impl WorldState {
    pub fn goal_center(&self) -> (f64, f64) {
        (self.target_goal_sign as f64 * FIELD_HALF_LENGTH, 0.0)
    }

    pub fn ball_distance(&self) -> f64 {
        (self.ball_pos.0 - self.robot.x).hypot(self.ball_pos.1 - self.robot.y)
    }
}

/// Random placement: robot in the central 4×4 m square with any heading;
/// ball in x ∈ s·[1, 3], y ∈ [−2, 2] on a uniformly chosen side s, which is
/// also the side to score on.
pub fn reset_episode(seed: u64) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let robot = Pose2D {
        x: rng.gen_range(-2.0..=2.0),
        y: rng.gen_range(-2.0..=2.0),
        theta: rng.gen_range(-PI..PI),
    };
    let side: i8 = if rng.gen_bool(0.5) { 1 } else { -1 };
    let bx = side as f64 * rng.gen_range(1.0..=3.0);
    let by = rng.gen_range(-2.0..=2.0);
    WorldState {
        robot,
        ball_pos: (bx, by),
        ball_vel: (0.0, 0.0),
        target_goal_sign: side,
        tick: 0,
        rng_seed: seed,
    }
}

/// Advances the world by `dt` seconds under `cmd`.
///
/// The robot translates in its pre-step heading frame, then rotates. A ball
/// inside the contact disc is pushed along the heading at
/// `max(forward·0.25, 0.05)` m/s plus a 1.4× kick; a free ball decelerates
/// at 0.5 m/s². The ball stops dead at the field boundary except through
/// the goal mouths.
pub fn step(state: &WorldState, cmd: SpeedCommand, dt: f64) -> Result<WorldState, SimError> {
    if !cmd.is_finite() {
        return Err(SimError::NonFinite(cmd.to_array()));
    }
    let cmd = SpeedCommand::new(cmd.forward, cmd.left, cmd.turn);
    let mut next = *state;
    let r = state.robot;
    let (c, s) = r.heading();
    let vf = cmd.forward * FORWARD_SCALE;
    let vl = cmd.left * LEFT_SCALE;
    next.robot.x = r.x + (c * vf - s * vl) * dt;
    next.robot.y = r.y + (s * vf + c * vl) * dt;
    next.robot.theta = wrap_angle(r.theta + cmd.turn * TURN_SCALE * dt);

    let (cx, cy) = (
        next.robot.x + CONTACT_OFFSET * c,
        next.robot.y + CONTACT_OFFSET * s,
    );
    let (bx, by) = state.ball_pos;
    let in_contact = (bx - cx).hypot(by - cy) < CONTACT_RADIUS;
    let (mut vx, mut vy) = state.ball_vel;
    if in_contact {
        let push = (cmd.forward * FORWARD_SCALE).max(MIN_PUSH_SPEED);
        let speed = push * (1.0 + KICK_FACTOR);
        vx = c * speed;
        vy = s * speed;
    } else {
        let speed = vx.hypot(vy);
        if speed > 0.0 {
            let reduced = (speed - BALL_FRICTION * dt).max(0.0);
            vx *= reduced / speed;
            vy *= reduced / speed;
        }
    }
    let (mut nx, mut ny) = (bx + vx * dt, by + vy * dt);
    if ny.abs() > FIELD_HALF_WIDTH {
        ny = ny.clamp(-FIELD_HALF_WIDTH, FIELD_HALF_WIDTH);
        vx = 0.0;
        vy = 0.0;
    }
    let x_limit = if ny.abs() < GOAL_HALF_WIDTH {
        FIELD_HALF_LENGTH + GOAL_DEPTH
    } else {
        FIELD_HALF_LENGTH
    };
    if nx.abs() > x_limit {
        nx = nx.clamp(-x_limit, x_limit);
        vx = 0.0;
        vy = 0.0;
    }
    next.ball_pos = (nx, ny);
    next.ball_vel = (vx, vy);
    next.tick = state.tick + 1;
    Ok(next)
}

pub fn is_goal(state: &WorldState) -> bool {
    let (bx, by) = state.ball_pos;
    bx * state.target_goal_sign as f64 > FIELD_HALF_LENGTH && by.abs() < GOAL_HALF_WIDTH
}
