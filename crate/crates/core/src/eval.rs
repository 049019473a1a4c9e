//! Closed-loop rollouts, goal counts, trajectory export and latency.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::camrender::{render, CameraFrame, CameraId, CameraModel};
use crate::controller::{Controller, Observation};
use crate::simworld::{
    is_goal, reset_episode, step, Pose2D, SimError, SpeedCommand, WorldState, DT, EPISODE_TIMEOUT,
    FIELD_HALF_LENGTH, FIELD_HALF_WIDTH, GOAL_DEPTH, GOAL_HALF_WIDTH,
};
use crate::train::ErrorStats;

#[derive(Clone, Debug, PartialEq)]
pub enum Status {
    Goal,
    Timeout,
    /// The controller produced a non-finite command at this tick.
    Aborted { tick: u32, command: [f64; 3] },
}

impl Status {
    pub fn name(&self) -> &'static str {
        match self {
            Status::Goal => "goal",
            Status::Timeout => "timeout",
            Status::Aborted { .. } => "aborted",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TickRecord {
    pub tick: u32,
    pub robot: Pose2D,
    pub ball: (f64, f64),
    /// The clamped command applied on this tick.
    pub cmd: SpeedCommand,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub policy: String,
    pub ticks: Vec<TickRecord>,
    pub status: Status,
    /// Robot and ball after the last applied command.
    pub final_state: WorldState,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.ticks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ticks.is_empty()
    }

    pub fn scored(&self) -> bool {
        self.status == Status::Goal
    }
}

/// Render, act, clamp, step until a goal or `max_ticks`, both cameras
/// refreshed every tick.
pub fn rollout(controller: &mut dyn Controller, seed: u64, max_ticks: u32) -> Result<Trajectory, SimError> {
    rollout_with(controller, seed, max_ticks, false)
}

/// As [`rollout`]; with `staggered` the cameras alternate ticks and the
/// controller decides on even ticks only, as during staggered recording.
pub fn rollout_with(
    controller: &mut dyn Controller,
    seed: u64,
    max_ticks: u32,
    staggered: bool,
) -> Result<Trajectory, SimError> {
    let mut state = reset_episode(seed);
    controller.reset();
    let mut top = render(&state, &CameraModel::TOP, CameraId::Top);
    let mut bottom = render(&state, &CameraModel::BOTTOM, CameraId::Bottom);
    let mut cmd = SpeedCommand::ZERO;
    let mut ticks = Vec::new();
    let mut status = Status::Timeout;
    while state.tick < max_ticks {
        let tick = state.tick;
        let decide = if !staggered {
            top = render(&state, &CameraModel::TOP, CameraId::Top);
            bottom = render(&state, &CameraModel::BOTTOM, CameraId::Bottom);
            true
        } else if tick % 2 == 0 {
            if tick > 0 {
                top = render(&state, &CameraModel::TOP, CameraId::Top);
            }
            true
        } else {
            bottom = render(&state, &CameraModel::BOTTOM, CameraId::Bottom);
            false
        };
        if decide {
            let raw = controller.act(&Observation {
                state: &state,
                top: &top,
                bottom: &bottom,
            });
            if !raw.is_finite() {
                status = Status::Aborted {
                    tick,
                    command: raw.to_array(),
                };
                break;
            }
            cmd = SpeedCommand::new(raw.forward, raw.left, raw.turn);
        }
        ticks.push(TickRecord {
            tick,
            robot: state.robot,
            ball: state.ball_pos,
            cmd,
            label: controller.label(),
        });
        state = step(&state, cmd, DT)?;
        if is_goal(&state) {
            status = Status::Goal;
            break;
        }
    }
    Ok(Trajectory {
        seed,
        policy: controller.name(),
        ticks,
        status,
        final_state: state,
    })
}

/// One full-length rollout per seed, in parallel, in seed order.
pub fn count_goals<C, F>(make: F, seeds: &[u64], staggered: bool) -> Result<(usize, Vec<Trajectory>), SimError>
where
    C: Controller,
    F: Fn() -> C + Sync,
{
    let trajs: Vec<Trajectory> = seeds
        .par_iter()
        .map(|&seed| rollout_with(&mut make(), seed, EPISODE_TIMEOUT, staggered))
        .collect::<Result<_, _>>()?;
    Ok((trajs.iter().filter(|t| t.scored()).count(), trajs))
}

pub const TRAJECTORY_CSV_HEADER: &str = "tick,robot_x,robot_y,robot_theta,ball_x,ball_y,cmd_f,cmd_l,cmd_t";

/// Header line plus one row per tick, values at f32 precision.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut s = String::with_capacity(64 * (traj.len() + 1));
    s.push_str(TRAJECTORY_CSV_HEADER);
    s.push('\n');
    for t in &traj.ticks {
        let v = [
            t.robot.x,
            t.robot.y,
            t.robot.theta,
            t.ball.0,
            t.ball.1,
            t.cmd.forward,
            t.cmd.left,
            t.cmd.turn,
        ];
        let _ = write!(s, "{}", t.tick);
        for x in v {
            let _ = write!(s, ",{}", x as f32);
        }
        s.push('\n');
    }
    s
}

/// Rows of a trajectory CSV as `(tick, [8 values])`.
pub fn parse_trajectory_csv(text: &str) -> Result<Vec<(u32, [f32; 8])>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(TRAJECTORY_CSV_HEADER) {
        return Err("missing trajectory header".into());
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || format!("row {}: {line:?}", i + 1);
            let mut fields = line.split(',');
            let tick = fields.next().and_then(|f| f.parse().ok()).ok_or_else(bad)?;
            let mut v = [0f32; 8];
            for slot in &mut v {
                *slot = fields.next().and_then(|f| f.parse().ok()).ok_or_else(bad)?;
            }
            if fields.next().is_some() {
                return Err(bad());
            }
            Ok((tick, v))
        })
        .collect()
}

const SVG_SCALE: f64 = 60.0;
const SVG_MARGIN: f64 = 0.8;

fn svg_xy(x: f64, y: f64) -> (f64, f64) {
    (
        (x + FIELD_HALF_LENGTH + SVG_MARGIN) * SVG_SCALE,
        (FIELD_HALF_WIDTH + SVG_MARGIN - y) * SVG_SCALE,
    )
}

fn svg_path(points: impl Iterator<Item = (f64, f64)>, color: &str, id: &str) -> String {
    let mut d = String::new();
    for (i, (x, y)) in points.enumerate() {
        let (u, v) = svg_xy(x, y);
        let _ = write!(d, "{}{u:.1},{v:.1} ", if i == 0 { "M" } else { "L" });
    }
    format!(
        "<path id=\"{id}\" d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
        d.trim_end()
    )
}

/// Top-down plot: field, both goal mouths, robot and ball paths as the only
/// two `<path>` elements, circles at the start positions.
pub fn trajectory_svg(traj: &Trajectory, comment: Option<&str>) -> String {
    let w = 2.0 * (FIELD_HALF_LENGTH + SVG_MARGIN) * SVG_SCALE;
    let h = 2.0 * (FIELD_HALF_WIDTH + SVG_MARGIN) * SVG_SCALE;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n"
    );
    if let Some(c) = comment {
        let _ = writeln!(s, "<!-- {} -->", c.replace("--", "- -"));
    }
    let _ = writeln!(s, "<rect width=\"{w:.0}\" height=\"{h:.0}\" fill=\"#1f5f2f\"/>");
    let (x0, y0) = svg_xy(-FIELD_HALF_LENGTH, FIELD_HALF_WIDTH);
    let _ = writeln!(
        s,
        "<rect x=\"{x0:.1}\" y=\"{y0:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"white\" stroke-width=\"2\"/>",
        2.0 * FIELD_HALF_LENGTH * SVG_SCALE,
        2.0 * FIELD_HALF_WIDTH * SVG_SCALE
    );
    for sign in [-1.0, 1.0] {
        let mouth_x = sign * FIELD_HALF_LENGTH;
        let back_x = sign * (FIELD_HALF_LENGTH + GOAL_DEPTH);
        let (a, b) = (svg_xy(mouth_x.min(back_x), GOAL_HALF_WIDTH), svg_xy(mouth_x.max(back_x), -GOAL_HALF_WIDTH));
        let target = traj.final_state.target_goal_sign as f64 == sign;
        let _ = writeln!(
            s,
            "<rect class=\"goal\" x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\" stroke=\"white\"/>",
            a.0,
            a.1,
            b.0 - a.0,
            b.1 - a.1,
            if target { "#d8c040" } else { "#808080" }
        );
    }
    s.push_str(&svg_path(traj.ticks.iter().map(|t| (t.robot.x, t.robot.y)), "#3070ff", "robot"));
    s.push_str(&svg_path(traj.ticks.iter().map(|t| t.ball), "#ff8020", "ball"));
    if let Some(first) = traj.ticks.first() {
        for ((x, y), color, class) in [
            ((first.robot.x, first.robot.y), "#3070ff", "robot-start"),
            (first.ball, "#ff8020", "ball-start"),
        ] {
            let (u, v) = svg_xy(x, y);
            let _ = writeln!(
                s,
                "<circle class=\"{class}\" cx=\"{u:.1}\" cy=\"{v:.1}\" r=\"6\" fill=\"{color}\" stroke=\"black\"/>"
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.csv` and `<stem>.svg` from the same trajectory.
pub fn export_trajectory(traj: &Trajectory, dir: impl AsRef<Path>, stem: &str, comment: Option<&str>) -> io::Result<()> {
    let dir = dir.as_ref();
    fs::write(dir.join(format!("{stem}.csv")), trajectory_csv(traj))?;
    fs::write(dir.join(format!("{stem}.svg")), trajectory_svg(traj, comment))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
    pub n: usize,
}

pub const LATENCY_WARMUP: usize = 100;
/// Mean forward-pass budget in seconds.
pub const LATENCY_GATE: f64 = 0.010;

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Wall time of `n` single-frame `act` calls after the warm-up calls,
/// all on the initial frames of `seed`.
pub fn bench_latency(controller: &mut dyn Controller, n: usize, seed: u64) -> LatencyStats {
    let state = reset_episode(seed);
    let top: CameraFrame = render(&state, &CameraModel::TOP, CameraId::Top);
    let bottom = render(&state, &CameraModel::BOTTOM, CameraId::Bottom);
    let obs = Observation {
        state: &state,
        top: &top,
        bottom: &bottom,
    };
    controller.reset();
    for _ in 0..LATENCY_WARMUP {
        std::hint::black_box(controller.act(&obs));
    }
    let n = n.max(1);
    let mut times: Vec<f64> = (0..n)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(controller.act(&obs));
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    LatencyStats {
        mean: times.iter().sum::<f64>() / n as f64,
        p50: percentile(&times, 50.0),
        p99: percentile(&times, 99.0),
        n,
    }
}

/// Everything one evaluation reports.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct EvalSummary {
    pub model: String,
    pub seeds: Vec<u64>,
    pub goals: usize,
    pub timeouts: usize,
    pub aborted: usize,
    pub error: Option<ErrorStats>,
    pub latency: Option<LatencyStats>,
}

impl EvalSummary {
    pub fn from_trajectories(model: &str, trajs: &[Trajectory]) -> Self {
        let count = |name: &str| trajs.iter().filter(|t| t.status.name() == name).count();
        Self {
            model: model.into(),
            seeds: trajs.iter().map(|t| t.seed).collect(),
            goals: count("goal"),
            timeouts: count("timeout"),
            aborted: count("aborted"),
            ..Default::default()
        }
    }

    /// Flat JSON object.
    pub fn to_json(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut s = format!(
            "{{\"model\": \"{}\", \"episodes\": {}, \"seeds\": [{}], \"goals\": {}, \"timeouts\": {}, \"aborted\": {}",
            self.model.replace('"', "'"),
            self.seeds.len(),
            seeds.join(", "),
            self.goals,
            self.timeouts,
            self.aborted
        );
        if let Some(e) = self.error {
            let _ = write!(s, ", \"E_rms\": {:.6}, \"E_mean\": {:.6}, \"records\": {}", e.e_rms, e.e_mean, e.n);
        }
        if let Some(l) = self.latency {
            let _ = write!(
                s,
                ", \"latency_mean_ms\": {:.4}, \"latency_p50_ms\": {:.4}, \"latency_p99_ms\": {:.4}",
                l.mean * 1e3,
                l.p50 * 1e3,
                l.p99 * 1e3
            );
        }
        s.push('}');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{Constant, Expert};

    #[test]
    fn zero_policy_never_moves() {
        let t = rollout(&mut Constant(SpeedCommand::ZERO), 3, 200).unwrap();
        assert_eq!(t.status, Status::Timeout);
        assert_eq!(t.len(), 200);
        let p0 = t.ticks[0].robot;
        assert!(t.ticks.iter().all(|r| r.robot == p0));
    }

    #[test]
    fn rollouts_are_deterministic() {
        let a = rollout(&mut Expert::default(), 11, 300).unwrap();
        let b = rollout(&mut Expert::default(), 11, 300).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn commands_are_clamped() {
        let t = rollout(&mut Constant(SpeedCommand { forward: 5.0, left: -3.0, turn: 0.5 }), 2, 20).unwrap();
        assert!(t.ticks.iter().all(|r| r.cmd == SpeedCommand { forward: 1.0, left: -1.0, turn: 0.5 }));
    }

    #[test]
    fn non_finite_output_aborts() {
        let t = rollout(&mut Constant(SpeedCommand { forward: f64::NAN, left: 0.0, turn: 0.0 }), 2, 20).unwrap();
        assert!(matches!(t.status, Status::Aborted { tick: 0, .. }));
        assert!(t.is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let t = rollout(&mut Expert::default(), 5, 150).unwrap();
        let csv = trajectory_csv(&t);
        assert_eq!(csv.lines().count(), t.len() + 1);
        let rows = parse_trajectory_csv(&csv).unwrap();
        for (r, (tick, v)) in t.ticks.iter().zip(rows) {
            assert_eq!(tick, r.tick);
            assert_eq!(v[0], r.robot.x as f32);
            assert_eq!(v[1], r.robot.y as f32);
            assert_eq!(v[2], r.robot.theta as f32);
            assert_eq!(v[3], r.ball.0 as f32);
            assert_eq!(v[4], r.ball.1 as f32);
        }
    }

    #[test]
    fn svg_has_two_paths() {
        let t = rollout(&mut Expert::default(), 5, 150).unwrap();
        let svg = trajectory_svg(&t, Some("seed=5"));
        assert_eq!(svg.matches("<path").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 2);
        assert_eq!(svg.matches("class=\"goal\"").count(), 2);
    }

    #[test]
    fn percentiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[3.0], 99.0), 3.0);
    }
}
