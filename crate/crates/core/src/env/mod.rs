//! Desk-scale tabletop: a point effector on the unit square with a red glass
//! (R), a green box (G) and a white box (W).
//!
//! * Task 1: grasp R.
//! * Task 2: push G onto R.
//! * Task 3: push G onto W.
//!
//! Rewards are sparse: +1 on the step that completes the task, which also ends
//! the episode. Episodes are capped at `max_steps`.

mod demo;
mod render;

pub use demo::{
    generate_pool, mean_lengths, read_dataset, scripted_demo, write_dataset, DemoPool, DemoSettings, Demonstration, SplitManifest,
};
pub use render::{render, ObservationMode, PIXEL_SIDE};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type Point = [f64; 2];

pub const FEATURE_WIDTH: usize = 9;
pub const ACTION_WIDTH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Task {
    Grasp,
    PushToRed,
    PushToWhite,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Grasp, Task::PushToRed, Task::PushToWhite];

    /// 1-based task number used in files and on the command line.
    pub fn id(self) -> u8 {
        match self {
            Task::Grasp => 1,
            Task::PushToRed => 2,
            Task::PushToWhite => 3,
        }
    }

    pub fn index(self) -> usize {
        self.id() as usize - 1
    }

    pub fn from_id(id: u8) -> Result<Task> {
        match id {
            1 => Ok(Task::Grasp),
            2 => Ok(Task::PushToRed),
            3 => Ok(Task::PushToWhite),
            _ => Err(Error::Input(format!("unknown task {id}"))),
        }
    }
}

impl TryFrom<u8> for Task {
    type Error = Error;
    fn try_from(v: u8) -> Result<Task> {
        Task::from_id(v)
    }
}

impl From<Task> for u8 {
    fn from(t: Task) -> u8 {
        t.id()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSettings {
    pub step_size: f64,
    pub contact_radius: f64,
    pub grasp_radius: f64,
    pub success_radius: f64,
    pub min_separation: f64,
    /// Objects and the effector are placed at least this far from the walls.
    pub placement_margin: f64,
    pub max_steps: u32,
}

impl Default for EnvSettings {
    fn default() -> Self {
        EnvSettings {
            step_size: 0.05,
            contact_radius: 0.05,
            grasp_radius: 0.05,
            success_radius: 0.05,
            min_separation: 0.15,
            placement_margin: 0.05,
            max_steps: 50,
        }
    }
}

impl EnvSettings {
    pub fn validate(&self) -> Result<()> {
        let span = 1.0 - 2.0 * self.placement_margin;
        let positive = [self.step_size, self.contact_radius, self.grasp_radius, self.success_radius];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("env radii and step size must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.placement_margin) || self.min_separation < 0.0 || self.min_separation * 2.5 > span {
            return Err(Error::Config("env placement cannot fit four separated points".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct EnvAction {
    pub velocity: Point,
    /// Positive closes the gripper.
    pub grip: f64,
}

impl EnvAction {
    pub fn new(vx: f64, vy: f64, grip: f64) -> Self {
        EnvAction {
            velocity: [vx, vy],
            grip,
        }
        .clamped()
    }

    /// From a policy output `[vx, vy, grip]`.
    pub fn from_slice(a: &[f64]) -> Result<Self> {
        if a.len() != ACTION_WIDTH {
            return Err(Error::Shape(format!("action width {} vs {ACTION_WIDTH}", a.len())));
        }
        if !a.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("non-finite action".into()));
        }
        Ok(EnvAction::new(a[0], a[1], a[2]))
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.velocity[0], self.velocity[1], self.grip]
    }

    fn clamped(self) -> Self {
        EnvAction {
            velocity: [self.velocity[0].clamp(-1.0, 1.0), self.velocity[1].clamp(-1.0, 1.0)],
            grip: self.grip.clamp(-1.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub task: Task,
    pub effector: Point,
    pub red: Point,
    pub green: Point,
    pub white: Point,
    pub gripper_closed: bool,
    /// Whether R is held by the gripper.
    pub holding_red: bool,
    pub steps: u32,
    pub done: bool,
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn clamp_unit(p: Point) -> Point {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

/// Uniform placement with rejection until every pair is separated.
pub fn reset(task: Task, settings: &EnvSettings, rng: &mut Rng) -> WorldState {
    let (lo, hi) = (settings.placement_margin, 1.0 - settings.placement_margin);
    let pts = loop {
        let pts: Vec<Point> = (0..4).map(|_| [rng.random_range(lo..=hi), rng.random_range(lo..=hi)]).collect();
        let separated = (0..4).all(|i| (i + 1..4).all(|j| dist(pts[i], pts[j]) >= settings.min_separation));
        if separated {
            break pts;
        }
    };
    WorldState {
        task,
        effector: pts[0],
        red: pts[1],
        green: pts[2],
        white: pts[3],
        gripper_closed: false,
        holding_red: false,
        steps: 0,
        done: false,
    }
}

pub fn is_success(state: &WorldState, settings: &EnvSettings) -> bool {
    match state.task {
        Task::Grasp => state.holding_red,
        Task::PushToRed => dist(state.green, state.red) < settings.success_radius,
        Task::PushToWhite => dist(state.green, state.white) < settings.success_radius,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: WorldState,
    pub reward: f64,
    pub terminal: bool,
    pub success: bool,
}

/// Pure transition. G is pushed along with the effector when they were in
/// contact before the move; R follows the effector while held.
pub fn step(state: &WorldState, action: EnvAction, settings: &EnvSettings) -> Result<StepOutcome> {
    if state.done {
        return Err(Error::Usage("step called on a terminal state".into()));
    }
    let action = action.clamped();
    let mut next = state.clone();
    let target = clamp_unit([
        state.effector[0] + settings.step_size * action.velocity[0],
        state.effector[1] + settings.step_size * action.velocity[1],
    ]);
    let delta = [target[0] - state.effector[0], target[1] - state.effector[1]];
    let moving = delta != [0.0, 0.0];
    next.effector = target;
    if moving && dist(state.effector, state.green) < settings.contact_radius {
        next.green = clamp_unit([state.green[0] + delta[0], state.green[1] + delta[1]]);
    }
    next.gripper_closed = action.grip > 0.0;
    next.holding_red = next.gripper_closed && (state.holding_red || dist(next.effector, state.red) < settings.grasp_radius);
    if state.holding_red && next.holding_red {
        next.red = clamp_unit([state.red[0] + delta[0], state.red[1] + delta[1]]);
    }
    next.steps += 1;
    let success = is_success(&next, settings);
    let terminal = success || next.steps >= settings.max_steps;
    next.done = terminal;
    Ok(StepOutcome {
        state: next,
        reward: if success { 1.0 } else { 0.0 },
        terminal,
        success,
    })
}
