//! On-disk layout of an experiment directory and the multi-seed driver.
//!
//! ```text
//! demos.bin, split.json                          demonstrations and split
//! vae.ckpt, lae.ckpt, vae_loss.csv, lae_loss.csv pretrained encoders
//! metrics_{schedule}_{mode}_seed{s}.csv          one row per episode
//! aggregate_{schedule}_{mode}.csv                mean and std across seeds
//! runs/{schedule}_{mode}_seed{s}/                agent_*.ckpt, gwr_*.txt
//! pca_{schedule}_{mode}_seed{s}.csv              node projection
//! ```

use std::path::{Path, PathBuf};

use crate::bgpo::{train_seed, BgpoRun, EpisodeLog};
use crate::config::ExperimentConfig;
use crate::env::{DemoPool, Task};
use crate::error::Result;
use crate::gwr::GwrNetwork;
use crate::metrics::{aggregate, metrics_file_name, write_aggregate, MetricsWriter};
use crate::par::{self, Execution};
use crate::pca::{project_network, write_projection, ProjectionRow};
use crate::pipeline::{dominant_tasks, DemoBank, Encoders};
use crate::rng::{seeded, stream};

pub const FINAL_TAG: &str = "final";

/// Everything BGPO needs from the pretraining stages.
pub struct Workspace {
    pub pool: DemoPool,
    pub encoders: Encoders,
    pub bank: DemoBank,
}

impl Workspace {
    pub fn open(dir: &Path, config: &ExperimentConfig, exec: Execution) -> Result<Self> {
        let pool = DemoPool::load(dir)?;
        let encoders = Encoders::load(dir, config)?;
        let bank = DemoBank::build(&encoders, &pool, exec)?;
        Ok(Workspace { pool, encoders, bank })
    }
}

fn tag(config: &ExperimentConfig) -> String {
    format!("{}_{}", config.bgpo.schedule.name(), config.bgpo.mode.name())
}

pub fn run_dir(dir: &Path, config: &ExperimentConfig, seed: u64) -> PathBuf {
    dir.join("runs").join(format!("{}_seed{seed}", tag(config)))
}

pub fn metrics_path(dir: &Path, config: &ExperimentConfig, seed: u64) -> PathBuf {
    dir.join(metrics_file_name(config.bgpo.mode.name(), config.bgpo.schedule.name(), seed))
}

pub fn aggregate_path(dir: &Path, config: &ExperimentConfig) -> PathBuf {
    dir.join(format!("aggregate_{}.csv", tag(config)))
}

pub fn pca_path(dir: &Path, config: &ExperimentConfig, seed: u64) -> PathBuf {
    dir.join(format!("pca_{}_seed{seed}.csv", tag(config)))
}

pub fn seeds(config: &ExperimentConfig) -> Vec<u64> {
    (0..config.seeds).map(|k| config.run_seed(k)).collect()
}

/// Trains every seed of `config`, streaming one metrics file per seed, then
/// writes the aggregate file. Returns the logs in seed order.
pub fn run_experiment(ws: &Workspace, config: &ExperimentConfig, dir: &Path, exec: Execution) -> Result<Vec<Vec<EpisodeLog>>> {
    config.validate()?;
    let runs: Vec<Vec<EpisodeLog>> = par::map(exec, &seeds(config), |&seed| {
        let mut writer = MetricsWriter::create(&metrics_path(dir, config, seed))?;
        let mut failure = None;
        let out = run_dir(dir, config, seed);
        std::fs::create_dir_all(&out)?;
        let window = config.bgpo.eval_window.max(1);
        let mut wins = 0usize;
        let logs = train_seed(&ws.encoders, &ws.bank, config, seed, Some(&out), |log| {
            if failure.is_none() {
                failure = writer.write(log).err();
            }
            wins += usize::from(log.eval_success);
            if (log.episode + 1) % window == 0 {
                log::info!(
                    "{} seed {seed} episode {} eval success {:.3} nodes {}",
                    config.bgpo.mode.name(),
                    log.episode + 1,
                    wins as f64 / window as f64,
                    log.gwr_nodes
                );
                wins = 0;
            }
        })?;
        match failure {
            Some(e) => Err(e),
            None => Ok(logs),
        }
    })
    .into_iter()
    .collect::<Result<_>>()?;
    write_aggregate(&aggregate_path(dir, config), &aggregate(&runs)?)?;
    Ok(runs)
}

/// Greedy success rate per task of a saved run, over `episodes` evaluations
/// per task.
pub fn evaluate_saved(ws: &Workspace, config: &ExperimentConfig, dir: &Path, seed: u64, episodes: usize) -> Result<[f64; 3]> {
    let mut run = BgpoRun::new(&ws.encoders, &ws.bank, config, seed)?;
    run.restore(&run_dir(dir, config, seed), FINAL_TAG)?;
    let mut rng = seeded(seed, stream::EVAL);
    let mut rates = [0.0; 3];
    for task in Task::ALL {
        let mut wins = 0usize;
        for _ in 0..episodes {
            wins += usize::from(run.evaluate_task(task, &mut rng)?.success);
        }
        rates[task.index()] = wins as f64 / episodes.max(1) as f64;
    }
    Ok(rates)
}

/// Projects the saved GWR of a run onto its top two principal components and
/// labels each node by the task of most demonstrations it best matches.
pub fn export_pca(ws: &Workspace, config: &ExperimentConfig, dir: &Path, seed: u64) -> Result<(PathBuf, Vec<ProjectionRow>)> {
    let gwr = GwrNetwork::load(&run_dir(dir, config, seed).join(format!("gwr_{FINAL_TAG}.txt")))?;
    let held = Task::ALL
        .iter()
        .flat_map(|t| ws.bank.held_out[t.index()].iter().map(move |p| (*t, p.as_slice())));
    let labelled = ws.bank.train.iter().map(|(t, p)| (*t, p.as_slice())).chain(held);
    let labels = dominant_tasks(&gwr, labelled)?;
    let rows = project_network(&gwr, &labels)?;
    let path = pca_path(dir, config, seed);
    write_projection(&path, &rows)?;
    Ok((path, rows))
}
