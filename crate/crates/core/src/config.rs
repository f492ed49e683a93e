//! Experiment configuration, read from TOML.
//!
//! Every section is optional and falls back to the defaults below; unknown
//! keys are rejected.
//!
//! ```toml
//! seed = 0                  # base seed; run k uses seed + k
//! seeds = 10                # runs for train / ablate
//! observation = "feature"   # or "pixel"
//!
//! [env]                     # step_size, contact_radius, grasp_radius, success_radius,
//!                           # min_separation, placement_margin, max_steps
//! [demos]                   # per_task, held_out_per_task, suboptimality, gain, max_speed, max_attempts
//! [vae]                     # latent_width, hidden_width, kl_weight, inverse_weight,
//!                           # reconstruction ("cross_entropy" | "squared_error"),
//!                           # learning_rate, batch_size, epochs
//! [lae]                     # hidden_width, teacher_forcing, learning_rate, batch_size, epochs
//! [gwr]                     # activity_threshold, habituation_threshold, winner_rate, neighbor_rate,
//!                           # initial_habituation, winner_alpha, neighbor_alpha, winner_tau,
//!                           # neighbor_tau, max_edge_age
//! [agent]                   # hidden, gamma, tau, actor_lr, critic_lr, batch_size, buffer_capacity,
//!                           # warmup, noise_start, noise_end, update_every
//! [bgpo]                    # beta, mode, schedule, concurrent_episodes, continual_episodes,
//!                           # milestones, eval_window, checkpoint_every
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::AgentSettings;
use crate::bgpo::BgpoSettings;
use crate::env::{DemoSettings, EnvSettings, ObservationMode};
use crate::error::{Error, Result};
use crate::gwr::GwrParams;
use crate::lae::LaeSettings;
use crate::vae::VaeSettings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub seeds: usize,
    pub observation: ObservationMode,
    pub env: EnvSettings,
    pub demos: DemoSettings,
    pub vae: VaeSettings,
    pub lae: LaeSettings,
    pub gwr: GwrParams,
    pub agent: AgentSettings,
    pub bgpo: BgpoSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            seeds: 10,
            observation: ObservationMode::Feature,
            env: EnvSettings::default(),
            demos: DemoSettings::default(),
            vae: VaeSettings::default(),
            lae: LaeSettings::default(),
            gwr: GwrParams::default(),
            agent: AgentSettings::default(),
            bgpo: BgpoSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        if self.lae.hidden_width == 0 || self.vae.latent_width == 0 || self.vae.hidden_width == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        self.env.validate()?;
        self.demos.validate()?;
        self.gwr.validate()?;
        self.agent.validate()?;
        self.bgpo.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        ExperimentConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Seed of the `k`-th run.
    pub fn run_seed(&self, k: usize) -> u64 {
        self.seed + k as u64
    }
}
