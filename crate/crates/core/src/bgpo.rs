//! Behavior-guided policy optimization: per-episode task inference through
//! the GWR network, DDPG rollouts conditioned on the inferred behavior
//! embedding, and a terminal reward for matching that behavior.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::agent::{ActorCritic, ReplayBuffer, Transition};
use crate::config::ExperimentConfig;
use crate::env::{self, EnvAction, Task, ACTION_WIDTH};
use crate::error::{ensure_shape, Error, Result};
use crate::gwr::GwrNetwork;
use crate::lae::distance;
use crate::nn::Checkpoint;
use crate::par::{self, Execution};
use crate::pipeline::{DemoBank, Encoders};
use crate::rng::{derive, seeded, stream, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// GWR task inference and the intrinsic reward.
    #[default]
    Full,
    /// GWR task inference, extrinsic reward only.
    GwrOnly,
    /// Demo latent used directly as `b`, intrinsic reward on.
    RintOnly,
    /// Demo latent used directly, extrinsic reward only.
    Neither,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Full,
        AblationMode::GwrOnly,
        AblationMode::RintOnly,
        AblationMode::Neither,
    ];

    pub fn uses_gwr(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::GwrOnly)
    }

    pub fn uses_intrinsic(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::RintOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::GwrOnly => "gwr-only",
            AblationMode::RintOnly => "rint-only",
            AblationMode::Neither => "neither",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Every task available from the first episode.
    #[default]
    Concurrent,
    /// Tasks introduced one at a time at the configured milestones.
    Continual,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Concurrent => "concurrent",
            ScheduleKind::Continual => "continual",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concurrent" => Ok(ScheduleKind::Concurrent),
            "continual" => Ok(ScheduleKind::Continual),
            _ => Err(Error::Config(format!("unknown schedule `{s}`"))),
        }
    }
}

/// Episode indices at which tasks become available.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSchedule {
    introductions: Vec<(usize, Vec<Task>)>,
}

impl TaskSchedule {
    pub fn new(introductions: Vec<(usize, Vec<Task>)>) -> Result<Self> {
        if introductions.first().map(|(e, _)| *e) != Some(0) {
            return Err(Error::Config("the first task introduction must be at episode 0".into()));
        }
        if introductions.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("task introductions must be strictly increasing".into()));
        }
        if introductions.iter().any(|(_, t)| t.is_empty()) {
            return Err(Error::Config("every introduction must add a task".into()));
        }
        Ok(TaskSchedule { introductions })
    }

    pub fn concurrent() -> Self {
        TaskSchedule {
            introductions: vec![(0, Task::ALL.to_vec())],
        }
    }

    /// Task 1 at 0, task 2 at `milestones[0]`, task 3 at `milestones[1]`.
    pub fn continual(milestones: &[usize]) -> Result<Self> {
        if milestones.len() != 2 {
            return Err(Error::Config("continual schedule needs two milestones".into()));
        }
        TaskSchedule::new(vec![
            (0, vec![Task::Grasp]),
            (milestones[0], vec![Task::PushToRed]),
            (milestones[1], vec![Task::PushToWhite]),
        ])
    }

    pub fn available(&self, episode: usize) -> Vec<Task> {
        self.introductions
            .iter()
            .take_while(|(e, _)| *e <= episode)
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    pub fn introduction_episodes(&self) -> Vec<usize> {
        self.introductions.iter().map(|(e, _)| *e).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BgpoSettings {
    /// Weight of the intrinsic reward on terminal transitions.
    pub beta: f64,
    pub mode: AblationMode,
    pub schedule: ScheduleKind,
    pub concurrent_episodes: usize,
    pub continual_episodes: usize,
    /// Episodes at which tasks 2 and 3 are introduced under the continual schedule.
    pub milestones: Vec<usize>,
    /// Trailing episodes averaged for the final evaluation success rate.
    pub eval_window: usize,
    /// Episodes between agent and GWR checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for BgpoSettings {
    fn default() -> Self {
        BgpoSettings {
            beta: 0.1,
            mode: AblationMode::Full,
            schedule: ScheduleKind::Concurrent,
            concurrent_episodes: 5000,
            continual_episodes: 6000,
            milestones: vec![2000, 4000],
            eval_window: 200,
            checkpoint_every: 0,
        }
    }
}

impl BgpoSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if self.episodes() == 0 {
            return Err(Error::Config("episode budget must be positive".into()));
        }
        self.task_schedule().map(|_| ())
    }

    pub fn episodes(&self) -> usize {
        match self.schedule {
            ScheduleKind::Concurrent => self.concurrent_episodes,
            ScheduleKind::Continual => self.continual_episodes,
        }
    }

    pub fn task_schedule(&self) -> Result<TaskSchedule> {
        match self.schedule {
            ScheduleKind::Concurrent => Ok(TaskSchedule::concurrent()),
            ScheduleKind::Continual => TaskSchedule::continual(&self.milestones),
        }
    }
}

/// `exp(-|b - phi_g|)`.
pub fn intrinsic_reward(b: &[f64], phi_g: &[f64]) -> Result<f64> {
    ensure_shape(b.len() == phi_g.len(), || format!("b width {} vs phi_g width {}", b.len(), phi_g.len()))?;
    Ok((-distance(b, phi_g)).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub seed: u64,
    pub mode: AblationMode,
    pub schedule: ScheduleKind,
    pub task: Task,
    pub train_return: f64,
    pub intrinsic: f64,
    pub success: bool,
    pub ep_len: usize,
    pub gwr_nodes: usize,
    pub eval_task: Task,
    pub eval_success: bool,
    pub eval_return: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStats {
    pub task: Task,
    pub extrinsic: f64,
    pub intrinsic: f64,
    pub success: bool,
    pub len: usize,
    /// Latents of the policy's own trajectory, `len + 1` frames.
    pub trajectory_latents: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub task: Task,
    pub success: bool,
    pub ret: f64,
    pub len: usize,
}

/// Mutable learning state of one seed.
pub struct BgpoRun<'a> {
    encoders: &'a Encoders,
    bank: &'a DemoBank,
    config: ExperimentConfig,
    schedule: TaskSchedule,
    seed: u64,
    pub gwr: GwrNetwork,
    pub agent: ActorCritic,
    pub buffer: ReplayBuffer,
    env_steps: usize,
    minibatch_rng: Rng,
}

impl<'a> BgpoRun<'a> {
    pub fn new(encoders: &'a Encoders, bank: &'a DemoBank, config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let z_width = encoders.vae.latent_width();
        let b_width = encoders.lae.behavior_width();
        if encoders.vae.obs_width() != config.observation.width() || encoders.lae.latent_width() != z_width {
            return Err(Error::Config("encoder widths do not match the configured observation mode".into()));
        }
        if bank.width() != b_width {
            return Err(Error::Config("demo bank latents do not match the LAE width".into()));
        }
        let agent = ActorCritic::new(z_width, b_width, ACTION_WIDTH, &config.agent, &mut seeded(seed, stream::INIT))?;
        Ok(BgpoRun {
            encoders,
            bank,
            schedule: config.bgpo.task_schedule()?,
            seed,
            gwr: bank.new_gwr(config, seed)?,
            agent,
            buffer: ReplayBuffer::new(config.agent.buffer_capacity, z_width, b_width, ACTION_WIDTH),
            env_steps: 0,
            minibatch_rng: seeded(seed, stream::MINIBATCH),
            config: config.clone(),
        })
    }

    pub fn schedule(&self) -> &TaskSchedule {
        &self.schedule
    }

    pub fn mode(&self) -> AblationMode {
        self.config.bgpo.mode
    }

    fn episode_rng(&self, episode: usize, purpose: u64) -> Rng {
        seeded(derive(self.seed, episode as u64), purpose)
    }

    fn pick_demo(&self, task: Task, rng: &mut Rng) -> &'a [f64] {
        let pool = &self.bank.held_out[task.index()];
        &pool[rng.random_range(0..pool.len())]
    }

    /// One training episode on `task`: infer `b`, roll out, store
    /// transitions, and learn from the buffer.
    pub fn run_episode(&mut self, episode: usize, task: Task) -> Result<EpisodeStats> {
        let mode = self.config.bgpo.mode;
        let phi_d = self.pick_demo(task, &mut self.episode_rng(episode, stream::DEMO_PICK)).to_vec();
        let b = if mode.uses_gwr() { self.gwr.step(&phi_d)?.0.b } else { phi_d };

        let env_settings = self.config.env.clone();
        let agent_settings = self.config.agent.clone();
        let mut env_rng = self.episode_rng(episode, stream::ENV);
        let mut noise_rng = self.episode_rng(episode, stream::ACTION_NOISE);
        let progress = episode as f64 / self.config.bgpo.episodes().max(1) as f64;
        let noise = agent_settings.noise_scale(progress);

        let mut state = env::reset(task, &env_settings, &mut env_rng);
        let mut z = self.encoders.encode_state(&state)?;
        let mut g = vec![z.clone()];
        let mut extrinsic = 0.0;
        loop {
            let uniform = self.buffer.len() < agent_settings.warmup
                || (agent_settings.random_eps > 0.0 && noise_rng.random::<f64>() < agent_settings.random_eps);
            let a = if uniform {
                (0..ACTION_WIDTH).map(|_| noise_rng.random_range(-1.0..=1.0)).collect()
            } else {
                self.agent.act(&z, &b, noise, &mut noise_rng)?
            };
            let out = env::step(&state, EnvAction::from_slice(&a)?, &env_settings)?;
            let z_next = self.encoders.encode_state(&out.state)?;
            g.push(z_next.clone());
            extrinsic += out.reward;
            let mut r = out.reward;
            let mut intrinsic = None;
            if out.terminal {
                let phi_g = self.encoders.behavior_of_latents(&g)?;
                let r_int = intrinsic_reward(&b, &phi_g)?;
                if mode.uses_intrinsic() {
                    r += self.config.bgpo.beta * r_int;
                }
                intrinsic = Some(r_int);
            }
            self.buffer.push(&Transition {
                z,
                b: b.clone(),
                a,
                r,
                z_next: z_next.clone(),
                terminal: out.terminal,
            })?;
            self.env_steps += 1;
            self.learn()?;
            z = z_next;
            state = out.state;
            if let Some(r_int) = intrinsic {
                return Ok(EpisodeStats {
                    task,
                    extrinsic,
                    intrinsic: r_int,
                    success: out.success,
                    len: state.steps as usize,
                    trajectory_latents: g.len(),
                });
            }
        }
    }

    fn learn(&mut self) -> Result<()> {
        let s = &self.config.agent;
        if self.buffer.len() < s.warmup || self.env_steps % s.update_every != 0 {
            return Ok(());
        }
        let batch = self.buffer.sample(s.batch_size, &mut self.minibatch_rng)?;
        self.agent.critic_update(&batch)?;
        self.agent.actor_update(&batch)?;
        self.agent.soft_update(s.tau)
    }

    /// Greedy rollout on a random available task with a random held-out
    /// demonstration. Touches neither the networks, the GWR nor the buffer.
    pub fn evaluate(&self, episode: usize, available: &[Task]) -> Result<EvalOutcome> {
        if available.is_empty() {
            return Err(Error::Precondition("no task available for evaluation".into()));
        }
        let mut rng = self.episode_rng(episode, stream::EVAL);
        let task = available[rng.random_range(0..available.len())];
        self.evaluate_task(task, &mut rng)
    }

    pub fn evaluate_task(&self, task: Task, rng: &mut Rng) -> Result<EvalOutcome> {
        let phi_d = self.pick_demo(task, rng);
        let b = if self.config.bgpo.mode.uses_gwr() { self.gwr.infer(phi_d)?.b } else { phi_d.to_vec() };
        let env_settings = &self.config.env;
        let mut state = env::reset(task, env_settings, rng);
        let mut ret = 0.0;
        loop {
            let z = self.encoders.encode_state(&state)?;
            let a = self.agent.policy(&z, &b)?;
            let out = env::step(&state, EnvAction::from_slice(&a)?, env_settings)?;
            ret += out.reward;
            state = out.state;
            if out.terminal {
                return Ok(EvalOutcome {
                    task,
                    success: out.success,
                    ret,
                    len: state.steps as usize,
                });
            }
        }
    }

    /// Training episode on a task drawn from the schedule, then one evaluation.
    pub fn train_episode(&mut self, episode: usize) -> Result<EpisodeLog> {
        let available = self.schedule.available(episode);
        let mut task_rng = self.episode_rng(episode, stream::TASK);
        let task = available[task_rng.random_range(0..available.len())];
        let stats = self.run_episode(episode, task)?;
        let eval = self.evaluate(episode, &available)?;
        Ok(EpisodeLog {
            episode,
            seed: self.seed,
            mode: self.config.bgpo.mode,
            schedule: self.config.bgpo.schedule,
            task,
            train_return: stats.extrinsic,
            intrinsic: stats.intrinsic,
            success: stats.success,
            ep_len: stats.len,
            gwr_nodes: self.gwr.node_count(),
            eval_task: eval.task,
            eval_success: eval.success,
            eval_return: eval.ret,
        })
    }

    pub fn save(&self, dir: &Path, tag: &str) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        self.agent.store(&mut ckpt, "agent.");
        ckpt.save(&dir.join(format!("agent_{tag}.ckpt")))?;
        self.gwr.save(&dir.join(format!("gwr_{tag}.txt")))
    }

    /// Replaces the networks and the GWR by those written by [`BgpoRun::save`].
    pub fn restore(&mut self, dir: &Path, tag: &str) -> Result<()> {
        let ckpt = Checkpoint::load(&dir.join(format!("agent_{tag}.ckpt")))?;
        self.agent.load(&ckpt, "agent.")?;
        let gwr = GwrNetwork::load(&dir.join(format!("gwr_{tag}.txt")))?;
        if gwr.dim() != self.gwr.dim() {
            return Err(Error::Config("GWR snapshot width does not match the LAE".into()));
        }
        self.gwr = gwr;
        Ok(())
    }
}

/// Full training run of one seed. Per-episode rows go to `on_episode` as they
/// are produced; checkpoints go to `out` when given.
pub fn train_seed(
    encoders: &Encoders,
    bank: &DemoBank,
    config: &ExperimentConfig,
    seed: u64,
    out: Option<&Path>,
    mut on_episode: impl FnMut(&EpisodeLog),
) -> Result<Vec<EpisodeLog>> {
    let mut run = BgpoRun::new(encoders, bank, config, seed)?;
    let episodes = config.bgpo.episodes();
    let every = config.bgpo.checkpoint_every;
    let mut logs = Vec::with_capacity(episodes);
    for episode in 0..episodes {
        let log = run.train_episode(episode)?;
        on_episode(&log);
        logs.push(log);
        if let Some(dir) = out {
            if every > 0 && (episode + 1) % every == 0 && episode + 1 < episodes {
                run.save(dir, &format!("{}", episode + 1))?;
            }
        }
    }
    if let Some(dir) = out {
        run.save(dir, "final")?;
    }
    Ok(logs)
}

/// Runs several seeds, in parallel when the build and `exec` allow it.
pub fn train_seeds(
    encoders: &Encoders,
    bank: &DemoBank,
    config: &ExperimentConfig,
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<Vec<EpisodeLog>>> {
    par::map(exec, seeds, |&seed| train_seed(encoders, bank, config, seed, None, |_| {}))
        .into_iter()
        .collect()
}

/// Mean evaluation success over the last `window` rows.
pub fn final_success_rate(logs: &[EpisodeLog], window: usize) -> f64 {
    let tail = &logs[logs.len().saturating_sub(window)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().filter(|l| l.eval_success).count() as f64 / tail.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intrinsic_reward_values() {
        let b = [0.3, -0.2, 0.5];
        assert_eq!(intrinsic_reward(&b, &b).unwrap(), 1.0);
        let shifted = [0.3 + 2f64.ln(), -0.2, 0.5];
        assert!((intrinsic_reward(&b, &shifted).unwrap() - 0.5).abs() < 1e-12);
        let mut last = 1.0;
        for k in 1..50 {
            let r = intrinsic_reward(&[0.0], &[k as f64 * 0.1]).unwrap();
            assert!(r < last && r > 0.0);
            last = r;
        }
        assert!(intrinsic_reward(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn schedules() {
        let c = TaskSchedule::concurrent();
        assert_eq!(c.available(0), Task::ALL.to_vec());
        let s = TaskSchedule::continual(&[2000, 4000]).unwrap();
        assert_eq!(s.available(0), vec![Task::Grasp]);
        assert_eq!(s.available(1999), vec![Task::Grasp]);
        assert_eq!(s.available(2000), vec![Task::Grasp, Task::PushToRed]);
        assert_eq!(s.available(5999), Task::ALL.to_vec());
        assert!(TaskSchedule::continual(&[2000, 2000]).is_err());
        assert!(TaskSchedule::new(vec![(5, vec![Task::Grasp])]).is_err());
    }

    #[test]
    fn mode_wiring_and_names() {
        for m in AblationMode::ALL {
            assert_eq!(m.name().parse::<AblationMode>().unwrap(), m);
        }
        assert!(AblationMode::Full.uses_gwr() && AblationMode::Full.uses_intrinsic());
        assert!(AblationMode::GwrOnly.uses_gwr() && !AblationMode::GwrOnly.uses_intrinsic());
        assert!(!AblationMode::RintOnly.uses_gwr() && AblationMode::RintOnly.uses_intrinsic());
        assert!(!AblationMode::Neither.uses_gwr() && !AblationMode::Neither.uses_intrinsic());
        assert!("both".parse::<AblationMode>().is_err());
        assert_eq!("continual".parse::<ScheduleKind>().unwrap(), ScheduleKind::Continual);
    }
}
