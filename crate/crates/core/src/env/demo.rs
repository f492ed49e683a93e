//! Scripted demonstrators and the demonstration dataset files.
//!
//! `demos.bin` layout (little endian):
//!
//! ```text
//! magic "BGPODEMO", u32 version (1), u32 demo count
//! per demo: u8 task, u32 action count n,
//!           (n + 1) states: 8 x f64 (effector, R, G, W), u8 flags, u32 steps
//!           n actions: 3 x f64 (vx, vy, grip)
//! ```
//!
//! State flags: bit 0 gripper closed, bit 1 holding R, bit 2 done.
//! `split.json` lists which demo indices are for training and which are held out.

use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{dist, is_success, reset, step, EnvAction, EnvSettings, ObservationMode, Point, Task, WorldState};
use crate::error::{Error, Result};
use crate::lae::MAX_SEQUENCE_LEN;
use crate::par::{self, Execution};
use crate::rng::{derive, seeded, stream};

const MAGIC: &[u8; 8] = b"BGPODEMO";
const VERSION: u32 = 1;
pub const DATASET_FILE: &str = "demos.bin";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoSettings {
    pub per_task: usize,
    pub held_out_per_task: usize,
    /// Scale of the Gaussian noise added to every commanded velocity.
    pub suboptimality: f64,
    /// Proportional gain from position error to velocity.
    pub gain: f64,
    /// Speed cap of the demonstrator, per velocity component.
    pub max_speed: f64,
    pub max_attempts: u32,
}

impl Default for DemoSettings {
    fn default() -> Self {
        DemoSettings {
            per_task: 1200,
            held_out_per_task: 200,
            suboptimality: 0.2,
            gain: 6.0,
            max_speed: 0.7,
            max_attempts: 10,
        }
    }
}

impl DemoSettings {
    pub fn validate(&self) -> Result<()> {
        if self.held_out_per_task >= self.per_task {
            return Err(Error::Config("held_out_per_task must be below per_task".into()));
        }
        if !(0.0..=1.0).contains(&self.suboptimality) {
            return Err(Error::Config("suboptimality must lie in [0, 1]".into()));
        }
        if !(self.gain > 0.0 && self.max_speed > 0.0 && self.max_speed <= 1.0) || self.max_attempts == 0 {
            return Err(Error::Config("demonstrator gain and speed must be positive, speed at most 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub task: Task,
    /// `actions.len() + 1` states, the last one satisfying the task.
    pub states: Vec<WorldState>,
    pub actions: Vec<EnvAction>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn succeeded(&self, env: &EnvSettings) -> bool {
        self.states.last().is_some_and(|s| is_success(s, env))
    }

    pub fn frames(&self, mode: ObservationMode) -> Vec<Vec<f64>> {
        self.states.iter().map(|s| super::render(s, mode)).collect()
    }
}

fn toward(from: Point, to: Point, gain: f64, cap: f64) -> Point {
    [
        (gain * (to[0] - from[0])).clamp(-cap, cap),
        (gain * (to[1] - from[1])).clamp(-cap, cap),
    ]
}

/// Proportional controller: reach and close on R, or get behind G and push it
/// onto its goal.
fn controller(state: &WorldState, env: &EnvSettings, demo: &DemoSettings) -> EnvAction {
    let (gain, cap) = (demo.gain, demo.max_speed);
    match state.task {
        Task::Grasp => {
            if dist(state.effector, state.red) < 0.6 * env.grasp_radius {
                EnvAction::new(0.0, 0.0, 1.0)
            } else {
                let v = toward(state.effector, state.red, gain, cap);
                EnvAction::new(v[0], v[1], -1.0)
            }
        }
        Task::PushToRed | Task::PushToWhite => {
            let goal = if state.task == Task::PushToRed { state.red } else { state.white };
            if dist(state.effector, state.green) < 0.8 * env.contact_radius {
                let v = toward(state.green, goal, gain, cap);
                EnvAction::new(v[0], v[1], -1.0)
            } else {
                let d = dist(goal, state.green).max(1e-9);
                let back = 0.6 * env.contact_radius;
                let behind = [
                    state.green[0] - back * (goal[0] - state.green[0]) / d,
                    state.green[1] - back * (goal[1] - state.green[1]) / d,
                ];
                let v = toward(state.effector, behind, gain, cap);
                EnvAction::new(v[0], v[1], -1.0)
            }
        }
    }
}

/// One successful scripted demonstration of at most `MAX_SEQUENCE_LEN`
/// frames; retries from a fresh layout when an attempt runs out of steps.
pub fn scripted_demo(task: Task, seed: u64, env: &EnvSettings, demo: &DemoSettings) -> Result<Demonstration> {
    let noise = Normal::new(0.0, demo.suboptimality.max(f64::MIN_POSITIVE)).expect("valid normal");
    for attempt in 0..demo.max_attempts as u64 {
        let mut rng = seeded(derive(seed, attempt), stream::ENV);
        let mut state = reset(task, env, &mut rng);
        let mut states = vec![state.clone()];
        let mut actions = Vec::new();
        loop {
            let mut a = controller(&state, env, demo);
            if demo.suboptimality > 0.0 {
                a = EnvAction::new(
                    a.velocity[0] + noise.sample(&mut rng),
                    a.velocity[1] + noise.sample(&mut rng),
                    a.grip,
                );
            }
            let out = step(&state, a, env)?;
            actions.push(a);
            states.push(out.state.clone());
            state = out.state;
            if out.success && states.len() <= MAX_SEQUENCE_LEN {
                return Ok(Demonstration { task, states, actions });
            }
            if out.terminal || states.len() >= MAX_SEQUENCE_LEN {
                break;
            }
        }
    }
    Err(Error::Generation(format!(
        "task {} seed {seed}: no successful demo in {} attempts",
        task.id(),
        demo.max_attempts
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub version: u32,
    pub seed: u64,
    pub per_task: usize,
    pub held_out_per_task: usize,
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoPool {
    pub demos: Vec<Demonstration>,
    pub split: SplitManifest,
}

impl DemoPool {
    pub fn train(&self) -> impl Iterator<Item = &Demonstration> {
        self.split.train.iter().map(move |&i| &self.demos[i])
    }

    pub fn held_out(&self) -> impl Iterator<Item = &Demonstration> {
        self.split.held_out.iter().map(move |&i| &self.demos[i])
    }

    pub fn held_out_for(&self, task: Task) -> Vec<&Demonstration> {
        self.held_out().filter(|d| d.task == task).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_dataset(&dir.join(DATASET_FILE), &self.demos)?;
        let json = serde_json::to_string_pretty(&self.split).map_err(|e| Error::format(dir.join(SPLIT_FILE), e.to_string()))?;
        std::fs::write(dir.join(SPLIT_FILE), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let demos = read_dataset(&dir.join(DATASET_FILE))?;
        let split_path = dir.join(SPLIT_FILE);
        if !split_path.exists() {
            return Err(Error::MissingArtifact(split_path));
        }
        let split: SplitManifest = serde_json::from_str(&std::fs::read_to_string(&split_path)?)
            .map_err(|e| Error::format(&split_path, e.to_string()))?;
        if split.train.iter().chain(&split.held_out).any(|&i| i >= demos.len()) {
            return Err(Error::format(&split_path, "split references a demo beyond the dataset"));
        }
        Ok(DemoPool { demos, split })
    }
}

/// `per_task` demos for every task, task-major; the last `held_out_per_task`
/// of each task are held out.
pub fn generate_pool(env: &EnvSettings, settings: &DemoSettings, seed: u64, exec: Execution) -> Result<DemoPool> {
    env.validate()?;
    settings.validate()?;
    let n = settings.per_task;
    let jobs: Vec<(Task, usize)> = Task::ALL.iter().flat_map(|&t| (0..n).map(move |k| (t, k))).collect();
    let demos = par::map(exec, &jobs, |&(task, k)| {
        scripted_demo(task, derive(derive(seed, task.id() as u64), k as u64), env, settings)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let cut = n - settings.held_out_per_task;
    let (mut train, mut held_out) = (Vec::new(), Vec::new());
    for t in 0..Task::ALL.len() {
        train.extend(t * n..t * n + cut);
        held_out.extend(t * n + cut..(t + 1) * n);
    }
    Ok(DemoPool {
        demos,
        split: SplitManifest {
            version: VERSION,
            seed,
            per_task: n,
            held_out_per_task: settings.held_out_per_task,
            train,
            held_out,
        },
    })
}

pub fn write_dataset(path: &Path, demos: &[Demonstration]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(demos.len() as u32).to_le_bytes());
    for d in demos {
        buf.push(d.task.id());
        buf.extend_from_slice(&(d.actions.len() as u32).to_le_bytes());
        for s in &d.states {
            for p in [s.effector, s.red, s.green, s.white] {
                buf.extend_from_slice(&p[0].to_le_bytes());
                buf.extend_from_slice(&p[1].to_le_bytes());
            }
            buf.push(s.gripper_closed as u8 | (s.holding_red as u8) << 1 | (s.done as u8) << 2);
            buf.extend_from_slice(&s.steps.to_le_bytes());
        }
        for a in &d.actions {
            for v in a.to_vec() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.at + N;
        let slice = self.bytes.get(self.at..end).ok_or_else(|| Error::format(self.path, "truncated dataset"))?;
        self.at = end;
        Ok(slice.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    fn point(&mut self) -> Result<Point> {
        Ok([self.f64()?, self.f64()?])
    }
}

pub fn read_dataset(path: &Path) -> Result<Vec<Demonstration>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, at: 0, path };
    if &c.take::<8>()? != MAGIC {
        return Err(Error::format(path, "not a demonstration dataset"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported dataset version {version}")));
    }
    let count = c.u32()? as usize;
    let mut demos = Vec::with_capacity(count);
    for _ in 0..count {
        let task = Task::from_id(c.u8()?).map_err(|e| Error::format(path, e.to_string()))?;
        let n = c.u32()? as usize;
        let mut states = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            let (effector, red, green, white) = (c.point()?, c.point()?, c.point()?, c.point()?);
            let flags = c.u8()?;
            states.push(WorldState {
                task,
                effector,
                red,
                green,
                white,
                gripper_closed: flags & 1 != 0,
                holding_red: flags & 2 != 0,
                done: flags & 4 != 0,
                steps: c.u32()?,
            });
        }
        let mut actions = Vec::with_capacity(n);
        for _ in 0..n {
            actions.push(EnvAction::from_slice(&[c.f64()?, c.f64()?, c.f64()?]).map_err(|e| Error::format(path, e.to_string()))?);
        }
        demos.push(Demonstration { task, states, actions });
    }
    if c.at != bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last demo"));
    }
    Ok(demos)
}

/// Mean demo length per task.
pub fn mean_lengths(demos: &[Demonstration]) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut count = [0usize; 3];
    for d in demos {
        sum[d.task.index()] += d.len() as f64;
        count[d.task.index()] += 1;
    }
    std::array::from_fn(|i| if count[i] == 0 { 0.0 } else { sum[i] / count[i] as f64 })
}
