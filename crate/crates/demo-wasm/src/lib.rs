//! WebAssembly bindings for the browser demo in `www/`.
//!
//! One [`Episode`] holds an expert rollout. The page scrubs through its
//! ticks, re-renders both onboard cameras at any tick and shows the
//! intensity-histogram features the H-CNN dispatcher clusters on.

use pitchpilot::camrender::{render_pair, CameraFrame};
use pitchpilot::controller::Expert;
use pitchpilot::eval::{rollout, Trajectory};
use pitchpilot::policy::hist_features;
use pitchpilot::simworld::{reset_episode, WorldState, EPISODE_TIMEOUT};
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct Episode {
    traj: Trajectory,
    start: WorldState,
}

#[wasm_bindgen]
impl Episode {
    /// Runs the scripted expert from the layout drawn by `seed`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<Episode, JsError> {
        let traj = rollout(&mut Expert::default(), seed, EPISODE_TIMEOUT)?;
        Ok(Episode {
            traj,
            start: reset_episode(seed),
        })
    }

    pub fn len(&self) -> usize {
        self.traj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traj.is_empty()
    }

    /// `goal`, `timeout` or `aborted`.
    pub fn status(&self) -> String {
        self.traj.status.name().to_string()
    }

    /// Flat `[robot_x, robot_y, robot_theta, ball_x, ball_y]` per tick.
    pub fn path(&self) -> Vec<f64> {
        self.traj
            .ticks
            .iter()
            .flat_map(|t| [t.robot.x, t.robot.y, t.robot.theta, t.ball.0, t.ball.1])
            .collect()
    }

    /// Goal the robot attacks: +1 for x = +4.5, -1 for x = -4.5.
    pub fn goal_sign(&self) -> i8 {
        self.start.target_goal_sign
    }

    /// `[forward, left, turn]` applied at `tick`.
    pub fn command(&self, tick: usize) -> Vec<f64> {
        self.at(tick)
            .map(|i| self.traj.ticks[i].cmd.to_array().to_vec())
            .unwrap_or_default()
    }

    /// Expert state-machine label at `tick` (0 search, 1 goto, 2 align, 3 dribble).
    pub fn label(&self, tick: usize) -> u8 {
        self.at(tick).map(|i| self.traj.ticks[i].label).unwrap_or(0)
    }

    /// Top frame (160x120) followed by bottom frame (80x60), grayscale.
    pub fn frames(&self, tick: usize) -> Vec<u8> {
        let (top, bottom) = self.render(tick);
        let mut px = top.pixels;
        px.extend_from_slice(&bottom.pixels);
        px
    }

    /// Five-bin intensity histogram of each camera, top first.
    pub fn histogram(&self, tick: usize) -> Vec<f64> {
        let (top, bottom) = self.render(tick);
        hist_features(&top, &bottom).to_vec()
    }
}

impl Episode {
    fn at(&self, tick: usize) -> Option<usize> {
        (!self.traj.is_empty()).then(|| tick.min(self.traj.len() - 1))
    }

    fn render(&self, tick: usize) -> (CameraFrame, CameraFrame) {
        let mut state = self.start.clone();
        if let Some(i) = self.at(tick) {
            let t = &self.traj.ticks[i];
            state.robot = t.robot;
            state.ball_pos = t.ball;
            state.tick = t.tick;
        }
        render_pair(&state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_and_features_have_fixed_sizes() {
        let ep = Episode::new(3).unwrap();
        assert!(!ep.is_empty());
        assert_eq!(ep.path().len(), 5 * ep.len());
        assert_eq!(ep.frames(0).len(), 160 * 120 + 80 * 60);
        let h = ep.histogram(ep.len() + 10);
        assert_eq!(h.len(), 10);
        assert!((h[..5].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(ep.command(0).len(), 3);
    }

    #[test]
    fn tick_zero_matches_the_reset_layout() {
        let ep = Episode::new(11).unwrap();
        let start = reset_episode(11);
        assert_eq!(ep.frames(0), {
            let (t, b) = render_pair(&start);
            [t.pixels, b.pixels].concat()
        });
    }
}
