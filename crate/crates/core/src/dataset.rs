//! Demonstration recording, the `DIML` file format and training views.
//!
//! File layout (little-endian): magic `DIML`, version `u32`, flags `u32`
//! (bit 0: staggered cameras), episode count `u32`; per episode: seed `u64`,
//! terminal `u8`, step count `u32`, then fixed-size step records of top
//! pixels, bottom pixels, action `3×f32`, pose `3×f32`, ball `2×f32` and the
//! FSM label `u8`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::camrender::{render, CameraFrame, CameraId, CameraModel};
use crate::controller::{Controller, Observation};
use crate::simworld::{
    is_goal, reset_episode, step, Pose2D, SimError, SpeedCommand, DT, EPISODE_TIMEOUT,
};

pub const DATASET_MAGIC: &[u8; 4] = b"DIML";
pub const DATASET_VERSION: u32 = 1;
pub const HEADER_SIZE: usize = 16;
pub const EPISODE_HEADER_SIZE: usize = 8 + 1 + 4;
pub const TOP_PIXELS: usize = 160 * 120;
pub const BOTTOM_PIXELS: usize = 80 * 60;
pub const RECORD_SIZE: usize = TOP_PIXELS + BOTTOM_PIXELS + 12 + 12 + 8 + 1;
const FLAG_STAGGERED: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad dataset magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("dataset file is truncated")]
    Truncated,
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Terminal {
    Timeout = 0,
    Goal = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub top: CameraFrame,
    pub bottom: CameraFrame,
    /// The command applied to the simulator on this tick.
    pub action: [f32; 3],
    /// Robot pose when the frames were taken.
    pub aux_pose: [f32; 3],
    pub aux_ball: [f32; 2],
    pub fsm_label: u8,
}

impl StepRecord {
    pub fn action_command(&self) -> SpeedCommand {
        SpeedCommand::from_array(self.action.map(f64::from))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub terminal: Terminal,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub staggered: bool,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    /// `(episode, step)` for every record, in file order.
    pub fn index(&self) -> Vec<(usize, usize)> {
        self.episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.steps.len()).map(move |s| (e, s)))
            .collect()
    }

    pub fn record(&self, at: (usize, usize)) -> &StepRecord {
        &self.episodes[at.0].steps[at.1]
    }

    /// Exact serialized size in bytes.
    pub fn file_size(&self) -> usize {
        HEADER_SIZE
            + self
                .episodes
                .iter()
                .map(|e| EPISODE_HEADER_SIZE + e.steps.len() * RECORD_SIZE)
                .sum::<usize>()
    }
}

/// Rounds every component through `f32` so the stored label is exactly the
/// command the simulator receives.
fn quantize(cmd: SpeedCommand) -> SpeedCommand {
    SpeedCommand::from_array(cmd.to_array().map(|v| v as f32 as f64))
}

/// Runs one episode under `demonstrator`, rendering both cameras every tick.
///
/// In staggered mode the top camera refreshes on even ticks and the bottom
/// on odd ticks; the controller is queried only when both frames are newer
/// than its last decision, otherwise the previous command is repeated.
pub fn record_episode(
    seed: u64,
    demonstrator: &mut dyn Controller,
    staggered: bool,
) -> Result<Episode, SimError> {
    let mut state = reset_episode(seed);
    demonstrator.reset();
    let mut top = render(&state, &CameraModel::TOP, CameraId::Top);
    let mut bottom = render(&state, &CameraModel::BOTTOM, CameraId::Bottom);
    let mut cmd = SpeedCommand::ZERO;
    let mut label = 0;
    let mut steps = Vec::new();
    let mut terminal = Terminal::Timeout;
    while state.tick < EPISODE_TIMEOUT {
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
            let obs = Observation {
                state: &state,
                top: &top,
                bottom: &bottom,
            };
            let raw = demonstrator.act(&obs);
            cmd = quantize(SpeedCommand::new(raw.forward, raw.left, raw.turn));
            label = demonstrator.label();
        }
        steps.push(StepRecord {
            top: top.clone(),
            bottom: bottom.clone(),
            action: cmd.to_array().map(|v| v as f32),
            aux_pose: [state.robot.x, state.robot.y, state.robot.theta].map(|v| v as f32),
            aux_ball: [state.ball_pos.0 as f32, state.ball_pos.1 as f32],
            fsm_label: label,
        });
        state = step(&state, cmd, DT)?;
        if is_goal(&state) {
            terminal = Terminal::Goal;
            break;
        }
    }
    Ok(Episode {
        seed,
        terminal,
        steps,
    })
}

/// Records one episode per seed, in parallel, keeping seed order.
pub fn record_episodes<C, F>(seeds: &[u64], make: F, staggered: bool) -> Result<Vec<Episode>, SimError>
where
    C: Controller,
    F: Fn() -> C + Sync,
{
    seeds
        .par_iter()
        .map(|&seed| record_episode(seed, &mut make(), staggered))
        .collect()
}

/// `n` consecutive seeds starting at `base`.
pub fn seed_range(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}

pub fn seeds_disjoint(a: &[u64], b: &[u64]) -> bool {
    let set: std::collections::HashSet<_> = a.iter().collect();
    !b.iter().any(|s| set.contains(s))
}

pub fn write_dataset<W: Write>(mut w: W, data: &Dataset) -> Result<(), DatasetError> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    let flags = if data.staggered { FLAG_STAGGERED } else { 0 };
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&(data.episodes.len() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(RECORD_SIZE);
    for ep in &data.episodes {
        w.write_all(&ep.seed.to_le_bytes())?;
        w.write_all(&[ep.terminal as u8])?;
        w.write_all(&(ep.steps.len() as u32).to_le_bytes())?;
        for s in &ep.steps {
            buf.clear();
            buf.extend_from_slice(&s.top.pixels);
            buf.extend_from_slice(&s.bottom.pixels);
            for v in s.action.iter().chain(&s.aux_pose).chain(&s.aux_ball) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.push(s.fsm_label);
            w.write_all(&buf)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), DatasetError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => DatasetError::Truncated,
        _ => DatasetError::Io(e),
    })
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], DatasetError> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn f32s<const N: usize>(bytes: &[u8]) -> [f32; N] {
    std::array::from_fn(|i| f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()))
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset, DatasetError> {
    let magic = read_array::<_, 4>(&mut r)?;
    if &magic != DATASET_MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != DATASET_VERSION {
        return Err(DatasetError::Version(version));
    }
    let flags = u32::from_le_bytes(read_array(&mut r)?);
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut episodes = Vec::with_capacity(count.min(4096) as usize);
    let mut rec = vec![0u8; RECORD_SIZE];
    for _ in 0..count {
        let seed = u64::from_le_bytes(read_array(&mut r)?);
        let terminal = match read_array::<_, 1>(&mut r)?[0] {
            0 => Terminal::Timeout,
            1 => Terminal::Goal,
            t => return Err(DatasetError::Invalid(format!("terminal byte {t}"))),
        };
        let n = u32::from_le_bytes(read_array(&mut r)?) as usize;
        if n == 0 {
            return Err(DatasetError::Invalid(format!("episode {seed} has no steps")));
        }
        let mut steps = Vec::with_capacity(n.min(EPISODE_TIMEOUT as usize));
        for _ in 0..n {
            read_exact(&mut r, &mut rec)?;
            let (top, rest) = rec.split_at(TOP_PIXELS);
            let (bottom, rest) = rest.split_at(BOTTOM_PIXELS);
            let action: [f32; 3] = f32s(&rest[0..12]);
            if action.iter().any(|a| !(-1.0..=1.0).contains(a)) {
                return Err(DatasetError::Invalid(format!("action {action:?} out of range")));
            }
            steps.push(StepRecord {
                top: CameraFrame::new(CameraId::Top, top.to_vec()).expect("top size"),
                bottom: CameraFrame::new(CameraId::Bottom, bottom.to_vec()).expect("bottom size"),
                action,
                aux_pose: f32s(&rest[12..24]),
                aux_ball: f32s(&rest[24..32]),
                fsm_label: rest[32],
            });
        }
        episodes.push(Episode {
            seed,
            terminal,
            steps,
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(DatasetError::Invalid("trailing bytes".into()));
    }
    Ok(Dataset {
        staggered: flags & FLAG_STAGGERED != 0,
        episodes,
    })
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_dataset(BufWriter::new(File::create(path)?), data)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// A window of `pad + (end - start)` steps: `pad` copies of record `start`
/// followed by `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub end: usize,
    pub pad: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.pad + self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Step indices in order, padding included.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::repeat(self.start)
            .take(self.pad)
            .chain(self.start..self.end)
    }
}

/// Every window of length `window` starting at multiples of `stride` that
/// fits inside an episode of `len` steps. Shorter episodes give a single
/// window padded at the front with the first record.
pub fn make_windows(len: usize, window: usize, stride: usize) -> Vec<Window> {
    assert!(window >= 1 && stride >= 1, "window and stride must be positive");
    if len == 0 {
        return vec![];
    }
    if len < window {
        return vec![Window {
            start: 0,
            end: len,
            pad: window - len,
        }];
    }
    (0..=len - window)
        .step_by(stride)
        .map(|start| Window {
            start,
            end: start + window,
            pad: 0,
        })
        .collect()
}

/// `0..n` in a seeded random order.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Replays the stored actions from the episode's initial state and returns
/// the largest deviation between the simulated and recorded robot pose.
pub fn replay_pose_error(ep: &Episode) -> Result<f64, SimError> {
    let mut state = reset_episode(ep.seed);
    let mut worst = 0.0f64;
    for s in &ep.steps {
        let rec = Pose2D {
            x: s.aux_pose[0] as f64,
            y: s.aux_pose[1] as f64,
            theta: s.aux_pose[2] as f64,
        };
        let dtheta = crate::simworld::wrap_angle(state.robot.theta - rec.theta).abs();
        worst = worst
            .max((state.robot.x - rec.x).abs())
            .max((state.robot.y - rec.y).abs())
            .max(dtheta);
        state = step(&state, s.action_command(), DT)?;
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{Constant, Expert};

    fn short_episode(seed: u64, n: usize) -> Episode {
        let mut ep = record_episode(seed, &mut Constant(SpeedCommand::new(0.5, 0.0, 0.2)), false)
            .unwrap();
        ep.steps.truncate(n);
        ep
    }

    #[test]
    fn record_size_matches_layout() {
        assert_eq!(RECORD_SIZE, 24033);
        let data = Dataset {
            staggered: false,
            episodes: vec![short_episode(3, 7)],
        };
        let mut bytes = vec![];
        write_dataset(&mut bytes, &data).unwrap();
        assert_eq!(bytes.len(), HEADER_SIZE + EPISODE_HEADER_SIZE + 7 * 24033);
        assert_eq!(bytes.len(), data.file_size());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let data = Dataset {
            staggered: true,
            episodes: vec![short_episode(1, 5), short_episode(2, 3)],
        };
        let mut a = vec![];
        write_dataset(&mut a, &data).unwrap();
        let back = read_dataset(a.as_slice()).unwrap();
        assert_eq!(back, data);
        let mut b = vec![];
        write_dataset(&mut b, &back).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_files_give_distinct_errors() {
        let data = Dataset {
            staggered: false,
            episodes: vec![short_episode(1, 2)],
        };
        let mut bytes = vec![];
        write_dataset(&mut bytes, &data).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset(bad.as_slice()), Err(DatasetError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(read_dataset(bad.as_slice()), Err(DatasetError::Version(9))));
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(read_dataset(cut), Err(DatasetError::Truncated)));
        assert!(matches!(read_dataset(&bytes[..2]), Err(DatasetError::Truncated)));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(read_dataset(long.as_slice()), Err(DatasetError::Invalid(_))));
    }

    #[test]
    fn windows() {
        assert_eq!(make_windows(150, 100, 1).len(), 51);
        assert_eq!(make_windows(100, 100, 1).len(), 1);
        assert_eq!(make_windows(150, 100, 10).len(), 6);
        let w = make_windows(40, 100, 1);
        assert_eq!(w.len(), 1);
        let idx: Vec<_> = w[0].indices().collect();
        assert_eq!(idx.len(), 100);
        assert!(idx[..61].iter().all(|&i| i == 0));
        assert_eq!(&idx[61..], &(1..40).collect::<Vec<_>>()[..]);
        assert_eq!(*idx.last().unwrap(), 39);
        for w in make_windows(537, 100, 7) {
            assert!(w.end <= 537 && w.len() == 100);
        }
    }

    #[test]
    fn shuffle_is_seeded() {
        let a = shuffled_indices(100, 5);
        assert_eq!(a, shuffled_indices(100, 5));
        assert_ne!(a, shuffled_indices(100, 6));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn expert_episode_is_aligned_and_deterministic() {
        let a = record_episode(11, &mut Expert::default(), false).unwrap();
        let b = record_episode(11, &mut Expert::default(), false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.terminal, Terminal::Goal);
        assert!(replay_pose_error(&a).unwrap() < 1e-6);
        // the step after the last record scores
        let mut state = reset_episode(11);
        for s in &a.steps {
            assert!(!is_goal(&state));
            state = step(&state, s.action_command(), DT).unwrap();
        }
        assert!(is_goal(&state));
    }

    #[test]
    fn staggered_repeats_on_odd_ticks() {
        let ep = record_episode(4, &mut Expert::default(), true).unwrap();
        for pair in ep.steps.chunks(2) {
            if let [a, b] = pair {
                assert_eq!(a.action, b.action);
                assert_eq!(a.top, b.top);
            }
        }
        assert!(replay_pose_error(&ep).unwrap() < 1e-6);
    }

    #[test]
    fn seed_split() {
        let train = seed_range(1, 100);
        let test = seed_range(10_000, 20);
        assert!(seeds_disjoint(&train, &test));
        assert!(!seeds_disjoint(&train, &[50]));
    }
}
