//! Scripted four-phase demonstrator: search, approach, align, dribble.
//!
//! The expert reads ground truth from the simulator but only "sees" the ball
//! when it lies inside the cameras' horizontal field of view and range.

use crate::camrender::CameraModel;
use crate::simworld::{wrap_angle, SpeedCommand, WorldState, LEFT_SCALE, TURN_SCALE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum FsmState {
    SearchBall = 0,
    GoToBall = 1,
    AlignToGoal = 2,
    Dribble = 3,
}

impl FsmState {
    pub const ALL: [FsmState; 4] = [
        FsmState::SearchBall,
        FsmState::GoToBall,
        FsmState::AlignToGoal,
        FsmState::Dribble,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FsmState::SearchBall => "search",
            FsmState::GoToBall => "goto",
            FsmState::AlignToGoal => "align",
            FsmState::Dribble => "dribble",
        }
    }

    /// The transition edges the expert may take.
    pub fn can_transition_to(self, next: FsmState) -> bool {
        use FsmState::*;
        self == next
            || matches!(
                (self, next),
                (SearchBall, GoToBall)
                    | (GoToBall, AlignToGoal)
                    | (GoToBall, SearchBall)
                    | (AlignToGoal, Dribble)
                    | (Dribble, GoToBall)
            )
    }
}

/// Tunable thresholds and gains.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertConfig {
    pub search_turn: f64,
    /// Ball counts as seen within this range inside the horizontal FOV.
    pub visibility_range: f64,
    pub bearing_gain: f64,
    pub distance_gain: f64,
    /// Bearing error at which the approach stops walking forward.
    pub bearing_slowdown: f64,
    pub approach_distance: f64,
    pub orbit_radius: f64,
    pub orbit_lateral: f64,
    pub orbit_radial_gain: f64,
    pub align_tolerance: f64,
    pub dribble_lateral_gain: f64,
    pub dribble_turn_bias: f64,
    pub loss_distance: f64,
    pub research_ticks: u32,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            search_turn: 0.5,
            visibility_range: 7.0,
            bearing_gain: 2.0,
            distance_gain: 2.0,
            bearing_slowdown: 0.8,
            approach_distance: 0.35,
            orbit_radius: 0.30,
            orbit_lateral: 0.8,
            orbit_radial_gain: 3.0,
            align_tolerance: 0.20,
            dribble_lateral_gain: 3.0,
            dribble_turn_bias: 0.3,
            loss_distance: 0.6,
            research_ticks: 90,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertMemory {
    pub fsm_state: FsmState,
    pub ball_seen: bool,
    pub last_cmd: SpeedCommand,
    /// Consecutive ticks without sight of the ball while approaching.
    pub unseen_ticks: u32,
}

impl Default for ExpertMemory {
    fn default() -> Self {
        Self {
            fsm_state: FsmState::SearchBall,
            ball_seen: false,
            last_cmd: SpeedCommand::ZERO,
            unseen_ticks: 0,
        }
    }
}

/// Geometry the guards and controllers share.
#[derive(Clone, Copy, Debug)]
struct View {
    distance: f64,
    /// Ball direction relative to the robot heading.
    bearing: f64,
    /// Absolute direction robot → ball.
    to_ball: f64,
    /// Signed angle from robot→ball to ball→goal.
    align_error: f64,
}

fn view(state: &WorldState) -> View {
    let r = state.robot;
    let (bx, by) = state.ball_pos;
    let (gx, gy) = state.goal_center();
    let to_ball = (by - r.y).atan2(bx - r.x);
    let to_goal = (gy - by).atan2(gx - bx);
    View {
        distance: state.ball_distance(),
        bearing: wrap_angle(to_ball - r.theta),
        to_ball,
        align_error: wrap_angle(to_goal - to_ball),
    }
}

/// Whether the ball lies inside the cameras' horizontal field of view and
/// within the configured range.
pub fn ball_visible(state: &WorldState, cfg: &ExpertConfig) -> bool {
    let v = view(state);
    v.bearing.abs() <= CameraModel::TOP.horizontal_fov / 2.0 && v.distance <= cfg.visibility_range
}

/// Applies the guard conditions; no edges other than
/// [`FsmState::can_transition_to`] are possible.
pub fn fsm_transition(mem: &ExpertMemory, state: &WorldState, cfg: &ExpertConfig) -> ExpertMemory {
    let v = view(state);
    let visible = ball_visible(state, cfg);
    let mut next = *mem;
    match mem.fsm_state {
        FsmState::SearchBall => {
            if visible {
                next.fsm_state = FsmState::GoToBall;
                next.ball_seen = true;
                next.unseen_ticks = 0;
            }
        }
        FsmState::GoToBall => {
            if v.distance < cfg.approach_distance {
                next.fsm_state = FsmState::AlignToGoal;
                next.unseen_ticks = 0;
            } else if visible {
                next.unseen_ticks = 0;
            } else {
                next.unseen_ticks = mem.unseen_ticks + 1;
                if next.unseen_ticks > cfg.research_ticks {
                    next.fsm_state = FsmState::SearchBall;
                    next.ball_seen = false;
                    next.unseen_ticks = 0;
                }
            }
        }
        FsmState::AlignToGoal => {
            if v.align_error.abs() < cfg.align_tolerance {
                next.fsm_state = FsmState::Dribble;
            }
        }
        FsmState::Dribble => {
            if v.distance > cfg.loss_distance {
                next.fsm_state = FsmState::GoToBall;
                next.unseen_ticks = 0;
            }
        }
    }
    next
}

fn command_for(fsm: FsmState, v: &View, state: &WorldState, cfg: &ExpertConfig) -> SpeedCommand {
    let turn_to = |err: f64| (cfg.bearing_gain * err).clamp(-1.0, 1.0);
    match fsm {
        FsmState::SearchBall => SpeedCommand::new(0.0, 0.0, cfg.search_turn),
        FsmState::GoToBall => {
            let forward = (cfg.distance_gain * v.distance).clamp(0.0, 1.0)
                * (1.0 - v.bearing.abs() / cfg.bearing_slowdown).max(0.0);
            SpeedCommand::new(forward, 0.0, turn_to(v.bearing))
        }
        FsmState::AlignToGoal => {
            // left > 0 swings the robot clockwise around the ball, which
            // decreases the robot→ball direction
            let left = -cfg.orbit_lateral * v.align_error.signum();
            let forward = (cfg.orbit_radial_gain * (v.distance - cfg.orbit_radius)).clamp(-1.0, 1.0);
            let swing = -left * LEFT_SCALE / v.distance.max(0.1) / TURN_SCALE;
            SpeedCommand::new(forward, left, turn_to(v.bearing) + swing)
        }
        FsmState::Dribble => {
            let left = (-cfg.dribble_lateral_gain * v.align_error).clamp(-1.0, 1.0);
            let bias = (0.5 * v.align_error).clamp(-cfg.dribble_turn_bias, cfg.dribble_turn_bias);
            let heading_err = wrap_angle(v.to_ball + bias - state.robot.theta);
            SpeedCommand::new(1.0, left, turn_to(heading_err))
        }
    }
}

/// One expert decision: update the FSM, then act for the new state.
pub fn expert_policy(
    state: &WorldState,
    mem: &ExpertMemory,
    cfg: &ExpertConfig,
) -> (SpeedCommand, ExpertMemory) {
    let mut next = fsm_transition(mem, state, cfg);
    let cmd = command_for(next.fsm_state, &view(state), state, cfg);
    next.last_cmd = cmd;
    (cmd, next)
}
