//! Cube-collection environment.
//!
//! The drone lives on a flat plane, starts at the origin facing +y and
//! drifts forward every step; `Left` and `Right` add a lateral offset to the
//! forward move. Cubes are scattered ahead of it and are collected when the
//! drone passes within `collect_radius` of them. Observations come from a
//! pinhole camera mounted on the drone and rendered in software.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::{self, SplitMix64};
use crate::tensor::Tensor;

pub const SKY_INTENSITY: f32 = 0.1;
pub const GROUND_INTENSITY: f32 = 0.35;
pub const CUBE_INTENSITY: f32 = 1.0;

/// Cubes closer than this to the image plane are not drawn.
const NEAR_PLANE: f64 = 0.05;
const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Action {
    Left = 0,
    Forward = 1,
    Right = 2,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Left, Action::Forward, Action::Right];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Left => "left",
            Action::Forward => "forward",
            Action::Right => "right",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Action::Left),
            "forward" => Ok(Action::Forward),
            "right" => Ok(Action::Right),
            other => Err(Error::Usage(format!(
                "unknown action '{other}' (expected left, forward or right)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub num_cubes: usize,
    pub arena_half_width: f64,
    pub spawn_depth_min: f64,
    pub spawn_depth_max: f64,
    pub collect_radius: f64,
    pub step_forward: f64,
    pub step_lateral: f64,
    /// Maximum number of steps per episode.
    pub horizon: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub seed: u64,
    /// Horizontal field of view of the camera.
    pub fov_degrees: f64,
    /// Edge length of the cubes; they rest on the ground.
    pub cube_size: f64,
    pub camera_height: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_cubes: 3,
            arena_half_width: 1.5,
            spawn_depth_min: 2.0,
            spawn_depth_max: 14.0,
            collect_radius: 1.0,
            step_forward: 0.5,
            step_lateral: 0.5,
            horizon: 40,
            image_h: 32,
            image_w: 32,
            seed: 0,
            fov_degrees: 90.0,
            cube_size: 1.0,
            camera_height: 0.5,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("arena_half_width", self.arena_half_width),
            ("spawn_depth_min", self.spawn_depth_min),
            ("spawn_depth_max", self.spawn_depth_max),
            ("collect_radius", self.collect_radius),
            ("step_forward", self.step_forward),
            ("step_lateral", self.step_lateral),
            ("cube_size", self.cube_size),
            ("camera_height", self.camera_height),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.spawn_depth_min >= self.spawn_depth_max {
            return Err(Error::Config(format!(
                "spawn_depth_min {} must be below spawn_depth_max {}",
                self.spawn_depth_min, self.spawn_depth_max
            )));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.image_h == 0 || self.image_w == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) {
            return Err(Error::Config(format!(
                "fov_degrees must lie in (0, 180), got {}",
                self.fov_degrees
            )));
        }
        Ok(())
    }

    /// Focal length in pixels.
    pub fn focal_px(&self) -> f64 {
        (self.image_w as f64 / 2.0) / (self.fov_degrees.to_radians() / 2.0).tan()
    }

    /// First image row belonging to the ground band.
    pub fn horizon_row(&self) -> usize {
        self.image_h / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cube {
    pub x: f64,
    pub y: f64,
    pub alive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub drone: (f64, f64),
    pub cubes: Vec<Cube>,
    pub steps_taken: usize,
    pub done: bool,
    pub episode_seed: u64,
}

impl EnvState {
    pub fn alive_cubes(&self) -> usize {
        self.cubes.iter().filter(|c| c.alive).count()
    }

    pub fn collected(&self) -> usize {
        self.cubes.len() - self.alive_cubes()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// `[1, image_h, image_w]`, values in `[0, 1]`.
    pub observation: Tensor,
    /// Number of cubes collected by this step.
    pub reward: f32,
    pub done: bool,
}

/// Places the drone at the origin and scatters cubes uniformly in the spawn
/// rectangle, redrawing any cube that lands within `collect_radius` of one
/// already placed.
pub fn reset(config: &EnvConfig, episode_seed: u64) -> Result<(EnvState, Tensor)> {
    config.validate()?;
    let mut rng = rng::seeded(episode_seed);
    let mut cubes: Vec<Cube> = Vec::with_capacity(config.num_cubes);
    let mut attempts = 0;
    while cubes.len() < config.num_cubes {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Config(format!(
                "spawn region cannot fit {} cubes {} apart",
                config.num_cubes, config.collect_radius
            )));
        }
        let cube = draw_cube(config, &mut rng);
        let clear = cubes.iter().all(|c| {
            (c.x - cube.x).hypot(c.y - cube.y) > config.collect_radius
        });
        if clear {
            cubes.push(cube);
        }
    }
    let state = EnvState {
        drone: (0.0, 0.0),
        cubes,
        steps_taken: 0,
        done: false,
        episode_seed,
    };
    let obs = render(&state, config);
    Ok((state, obs))
}

fn draw_cube(config: &EnvConfig, rng: &mut SplitMix64) -> Cube {
    let x = -config.arena_half_width + 2.0 * config.arena_half_width * rng::uniform(rng);
    let y = config.spawn_depth_min
        + (config.spawn_depth_max - config.spawn_depth_min) * rng::uniform(rng);
    Cube { x, y, alive: true }
}

pub fn step(state: &mut EnvState, action: Action, config: &EnvConfig) -> Result<StepResult> {
    if state.done {
        return Err(Error::Usage("step called on a finished episode".into()));
    }
    let dx = match action {
        Action::Left => -config.step_lateral,
        Action::Forward => 0.0,
        Action::Right => config.step_lateral,
    };
    state.drone = (state.drone.0 + dx, state.drone.1 + config.step_forward);
    let mut reward = 0.0;
    let (px, py) = state.drone;
    for cube in state.cubes.iter_mut().filter(|c| c.alive) {
        if (cube.x - px).hypot(cube.y - py) <= config.collect_radius {
            cube.alive = false;
            reward += 1.0;
        }
    }
    state.steps_taken += 1;
    state.done = state.alive_cubes() == 0 || state.steps_taken >= config.horizon;
    Ok(StepResult {
        observation: render(state, config),
        reward,
        done: state.done,
    })
}

/// Pixel-space bounds of a projected cube: columns `[u0, u1)`, rows `[v0, v1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenRect {
    pub u0: f64,
    pub u1: f64,
    pub v0: f64,
    pub v1: f64,
    pub depth: f64,
}

impl ScreenRect {
    /// Pixel-center coverage test.
    fn covers(&self, row: usize, col: usize) -> bool {
        let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
        u >= self.u0 && u < self.u1 && v >= self.v0 && v < self.v1
    }

    /// Number of pixel columns whose centers fall inside the rectangle.
    pub fn pixel_width(&self, image_w: usize) -> usize {
        (0..image_w)
            .filter(|&c| {
                let u = c as f64 + 0.5;
                u >= self.u0 && u < self.u1
            })
            .count()
    }
}

/// Pinhole projection of a cube's camera-facing square. `None` when the cube
/// is at or behind the near plane.
pub fn project_cube(drone: (f64, f64), cube: &Cube, config: &EnvConfig) -> Option<ScreenRect> {
    let depth = cube.y - drone.1;
    if depth <= NEAR_PLANE {
        return None;
    }
    let f = config.focal_px();
    let cx = config.image_w as f64 / 2.0;
    let cy = config.image_h as f64 / 2.0;
    let u = cx + f * (cube.x - drone.0) / depth;
    let half = f * (config.cube_size / 2.0) / depth;
    Some(ScreenRect {
        u0: u - half,
        u1: u + half,
        v0: cy - f * (config.cube_size - config.camera_height) / depth,
        v1: cy + f * config.camera_height / depth,
        depth,
    })
}

fn visible_rects(state: &EnvState, config: &EnvConfig) -> Vec<ScreenRect> {
    let mut rects: Vec<(usize, ScreenRect)> = state
        .cubes
        .iter()
        .enumerate()
        .filter(|(_, c)| c.alive)
        .filter_map(|(i, c)| project_cube(state.drone, c, config).map(|r| (i, r)))
        .collect();
    // back to front; ties broken by cube index
    rects.sort_by(|a, b| b.1.depth.total_cmp(&a.1.depth).then(a.0.cmp(&b.0)));
    rects.into_iter().map(|(_, r)| r).collect()
}

/// Renders the camera frame: sky above the horizon row, ground below, and
/// alive cubes painted back to front.
pub fn render(state: &EnvState, config: &EnvConfig) -> Tensor {
    let (h, w) = (config.image_h, config.image_w);
    let horizon = config.horizon_row();
    let mut data: Vec<f32> = (0..h * w)
        .map(|i| {
            if i / w < horizon {
                SKY_INTENSITY
            } else {
                GROUND_INTENSITY
            }
        })
        .collect();
    for rect in visible_rects(state, config) {
        paint(&mut data, &rect, h, w, CUBE_INTENSITY);
    }
    Tensor::new(vec![1, h, w], data).expect("render shape")
}

/// Binary mask (`[h, w]`, values 0/1) of pixels covered by any alive cube.
pub fn cube_mask(state: &EnvState, config: &EnvConfig) -> Tensor {
    let (h, w) = (config.image_h, config.image_w);
    let mut data = vec![0.0f32; h * w];
    for rect in visible_rects(state, config) {
        paint(&mut data, &rect, h, w, 1.0);
    }
    Tensor::new(vec![h, w], data).expect("mask shape")
}

fn paint(data: &mut [f32], rect: &ScreenRect, h: usize, w: usize, value: f32) {
    let r0 = rect.v0.max(0.0).floor() as usize;
    let r1 = (rect.v1.max(0.0).ceil() as usize).min(h);
    let c0 = rect.u0.max(0.0).floor() as usize;
    let c1 = (rect.u1.max(0.0).ceil() as usize).min(w);
    for row in r0..r1 {
        for col in c0..c1 {
            if rect.covers(row, col) {
                data[row * w + col] = value;
            }
        }
    }
}
