//! Flat-shaded pinhole rendering of the robot's two cameras, ray cast
//! directly at the policy input resolutions.

use std::fs;
use std::io;
use std::path::Path;

use crate::simworld::{
    Pose2D, WorldState, BALL_RADIUS, FIELD_HALF_LENGTH, FIELD_HALF_WIDTH, GOAL_HALF_WIDTH,
};

pub const BACKGROUND: u8 = 25;
pub const FIELD: u8 = 90;
pub const BALL: u8 = 200;
pub const POST: u8 = 230;
pub const LINE: u8 = 255;

pub const TOP_WIDTH: usize = 160;
pub const TOP_HEIGHT: usize = 120;
pub const BOTTOM_WIDTH: usize = 80;
pub const BOTTOM_HEIGHT: usize = 60;

const LINE_HALF_WIDTH: f64 = 0.025;
const CENTER_CIRCLE_RADIUS: f64 = 0.75;
/// Green carpet beyond the field lines.
const CARPET_MARGIN: f64 = 0.7;
const POST_HEIGHT: f64 = 0.8;
const POST_RADIUS: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CameraId {
    Top,
    Bottom,
}

impl CameraId {
    pub fn resolution(self) -> (usize, usize) {
        match self {
            CameraId::Top => (TOP_WIDTH, TOP_HEIGHT),
            CameraId::Bottom => (BOTTOM_WIDTH, BOTTOM_HEIGHT),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CameraId::Top => "top",
            CameraId::Bottom => "bottom",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub mount_height: f64,
    /// Downward tilt of the optical axis, radians.
    pub pitch: f64,
    pub horizontal_fov: f64,
    /// Yaw relative to the robot heading.
    pub yaw: f64,
}

impl CameraModel {
    pub const TOP: Self = Self {
        mount_height: 0.50,
        pitch: 20.0 * std::f64::consts::PI / 180.0,
        horizontal_fov: 60.0 * std::f64::consts::PI / 180.0,
        yaw: 0.0,
    };
    pub const BOTTOM: Self = Self {
        mount_height: 0.45,
        pitch: 60.0 * std::f64::consts::PI / 180.0,
        horizontal_fov: 60.0 * std::f64::consts::PI / 180.0,
        yaw: 0.0,
    };

    pub fn for_id(id: CameraId) -> Self {
        match id {
            CameraId::Top => Self::TOP,
            CameraId::Bottom => Self::BOTTOM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CameraFrame {
    pub camera: CameraId,
    pub width: usize,
    pub height: usize,
    /// Row-major, top-left origin.
    pub pixels: Vec<u8>,
}

impl CameraFrame {
    /// Wraps raw pixels, checking the resolution belongs to `camera`.
    pub fn new(camera: CameraId, pixels: Vec<u8>) -> Option<Self> {
        let (width, height) = camera.resolution();
        (pixels.len() == width * height).then_some(Self {
            camera,
            width,
            height,
            pixels,
        })
    }

    pub fn blank(camera: CameraId, value: u8) -> Self {
        let (w, h) = camera.resolution();
        Self::new(camera, vec![value; w * h]).expect("resolution matches")
    }

    pub fn get(&self, u: usize, v: usize) -> u8 {
        self.pixels[v * self.width + u]
    }

    /// Binary PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> io::Result<()> {
        fs::write(path, self.to_pgm())
    }
}

/// `ep{e:04}_t{t:05}_{top|bottom}.pgm`
pub fn pgm_file_name(episode: usize, tick: usize, camera: CameraId) -> String {
    format!("ep{episode:04}_t{tick:05}_{}.pgm", camera.name())
}

type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Camera pose in the world: origin plus forward/right/up unit axes.
struct CameraPose {
    origin: Vec3,
    forward: Vec3,
    right: Vec3,
    up: Vec3,
    focal: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

impl CameraPose {
    fn new(model: &CameraModel, robot: &Pose2D, id: CameraId) -> Self {
        let (width, height) = id.resolution();
        let yaw = robot.theta + model.yaw;
        let (cy_, sy) = (yaw.cos(), yaw.sin());
        let (cp, sp) = (model.pitch.cos(), model.pitch.sin());
        Self {
            origin: [robot.x, robot.y, model.mount_height],
            forward: [cy_ * cp, sy * cp, -sp],
            right: [sy, -cy_, 0.0],
            up: [cy_ * sp, sy * sp, cp],
            focal: (width as f64 / 2.0) / (model.horizontal_fov / 2.0).tan(),
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    /// World-space ray direction through the pixel coordinate `(u, v)`.
    fn ray(&self, u: f64, v: f64) -> Vec3 {
        let a = (u - self.cx) / self.focal;
        let b = (v - self.cy) / self.focal;
        std::array::from_fn(|i| self.forward[i] + a * self.right[i] - b * self.up[i])
    }

    fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let d = [
            p[0] - self.origin[0],
            p[1] - self.origin[1],
            p[2] - self.origin[2],
        ];
        let z = dot(d, self.forward);
        if z <= 1e-9 {
            return None;
        }
        let u = self.cx + self.focal * dot(d, self.right) / z;
        let v = self.cy - self.focal * dot(d, self.up) / z;
        let inside = (0.0..self.width as f64).contains(&u) && (0.0..self.height as f64).contains(&v);
        inside.then_some((u, v))
    }
}

/// Pixel coordinates of a world point, or `None` when it is behind the
/// camera or outside the frame.
pub fn project_point(
    model: &CameraModel,
    robot: &Pose2D,
    id: CameraId,
    point: (f64, f64, f64),
) -> Option<(f64, f64)> {
    CameraPose::new(model, robot, id).project([point.0, point.1, point.2])
}

/// Ground point hit by the ray through pixel `(u, v)`, if the ray descends.
pub fn pixel_ground_point(
    model: &CameraModel,
    robot: &Pose2D,
    id: CameraId,
    u: f64,
    v: f64,
) -> Option<(f64, f64)> {
    let cam = CameraPose::new(model, robot, id);
    let d = cam.ray(u, v);
    (d[2] < 0.0).then(|| {
        let t = -cam.origin[2] / d[2];
        (cam.origin[0] + t * d[0], cam.origin[1] + t * d[1])
    })
}

fn ground_intensity(x: f64, y: f64) -> u8 {
    let (ax, ay) = (x.abs(), y.abs());
    if ax > FIELD_HALF_LENGTH + CARPET_MARGIN || ay > FIELD_HALF_WIDTH + CARPET_MARGIN {
        return BACKGROUND;
    }
    let w = LINE_HALF_WIDTH;
    let on_goal_line = (ax - FIELD_HALF_LENGTH).abs() <= w && ay <= FIELD_HALF_WIDTH + w;
    let on_touch_line = (ay - FIELD_HALF_WIDTH).abs() <= w && ax <= FIELD_HALF_LENGTH + w;
    let on_center_line = ax <= w && ay <= FIELD_HALF_WIDTH;
    let on_circle = (x.hypot(y) - CENTER_CIRCLE_RADIUS).abs() <= w;
    if on_goal_line || on_touch_line || on_center_line || on_circle {
        LINE
    } else {
        FIELD
    }
}

fn hits_sphere(o: Vec3, d: Vec3, c: Vec3, r: f64) -> bool {
    let oc = [o[0] - c[0], o[1] - c[1], o[2] - c[2]];
    let a = dot(d, d);
    let b = dot(oc, d);
    let cc = dot(oc, oc) - r * r;
    let disc = b * b - a * cc;
    disc >= 0.0 && (-b + disc.sqrt()) > 0.0
}

fn hits_post(o: Vec3, d: Vec3, px: f64, py: f64) -> bool {
    let (ox, oy) = (o[0] - px, o[1] - py);
    let a = d[0] * d[0] + d[1] * d[1];
    if a < 1e-12 {
        return false;
    }
    let b = ox * d[0] + oy * d[1];
    let c = ox * ox + oy * oy - POST_RADIUS * POST_RADIUS;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return false;
    }
    let sq = disc.sqrt();
    [(-b - sq) / a, (-b + sq) / a].iter().any(|&t| {
        let z = o[2] + t * d[2];
        t > 0.0 && (0.0..=POST_HEIGHT).contains(&z)
    })
}

const POSTS: [(f64, f64); 4] = [
    (FIELD_HALF_LENGTH, GOAL_HALF_WIDTH),
    (FIELD_HALF_LENGTH, -GOAL_HALF_WIDTH),
    (-FIELD_HALF_LENGTH, GOAL_HALF_WIDTH),
    (-FIELD_HALF_LENGTH, -GOAL_HALF_WIDTH),
];

/// Renders one camera. Painter's order: field, lines, posts, ball.
pub fn render(state: &WorldState, model: &CameraModel, id: CameraId) -> CameraFrame {
    let cam = CameraPose::new(model, &state.robot, id);
    let ball = [state.ball_pos.0, state.ball_pos.1, BALL_RADIUS];
    let mut pixels = Vec::with_capacity(cam.width * cam.height);
    for v in 0..cam.height {
        for u in 0..cam.width {
            let d = cam.ray(u as f64 + 0.5, v as f64 + 0.5);
            let value = if hits_sphere(cam.origin, d, ball, BALL_RADIUS) {
                BALL
            } else if POSTS.iter().any(|&(px, py)| hits_post(cam.origin, d, px, py)) {
                POST
            } else if d[2] < 0.0 {
                let t = -cam.origin[2] / d[2];
                ground_intensity(cam.origin[0] + t * d[0], cam.origin[1] + t * d[1])
            } else {
                BACKGROUND
            };
            pixels.push(value);
        }
    }
    CameraFrame {
        camera: id,
        width: cam.width,
        height: cam.height,
        pixels,
    }
}

/// Both frames with the default camera models.
pub fn render_pair(state: &WorldState) -> (CameraFrame, CameraFrame) {
    (
        render(state, &CameraModel::TOP, CameraId::Top),
        render(state, &CameraModel::BOTTOM, CameraId::Bottom),
    )
}
