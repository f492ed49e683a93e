use std::path::PathBuf;
use std::process::ExitCode;

use bgpo_core::bgpo::{final_success_rate, AblationMode, ScheduleKind};
use bgpo_core::config::ExperimentConfig;
use bgpo_core::env::{generate_pool, mean_lengths, Task};
use bgpo_core::experiment::{evaluate_saved, export_pca, metrics_path, run_experiment, seeds, Workspace};
use bgpo_core::par::Execution;
use bgpo_core::pipeline::pretrain;
use bgpo_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bgpo", version, about = "Behavior-guided policy optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the demonstration pool and its train / held-out split.
    GenDemos(Common),
    /// Train the VAE and then the LAE on the training demonstrations.
    Pretrain(Common),
    /// Run BGPO for every seed and write metrics.
    Train(Run),
    /// Run BGPO in all four ablation modes.
    Ablate(Run),
    /// Greedy evaluation of saved runs on every task.
    Eval {
        #[command(flatten)]
        run: Run,
        /// Evaluation episodes per task.
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
    /// Project saved GWR node weights onto their top two principal components.
    Pca(Run),
}

#[derive(Args)]
struct Common {
    /// TOML configuration; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; run k uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Experiment directory.
    #[arg(long, default_value = "experiment")]
    out: PathBuf,
    /// Run seeds and minibatches one at a time.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct Run {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    mode: Option<AblationMode>,
    #[arg(long)]
    schedule: Option<ScheduleKind>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(n) = self.seeds {
            cfg.seeds = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

impl Run {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = self.common.config()?;
        if let Some(mode) = self.mode {
            cfg.bgpo.mode = mode;
        }
        if let Some(schedule) = self.schedule {
            cfg.bgpo.schedule = schedule;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn train(run: &Run, modes: &[AblationMode]) -> Result<()> {
    let base = run.config()?;
    let dir = &run.common.out;
    let ws = Workspace::open(dir, &base, run.common.exec())?;
    for &mode in modes {
        let mut cfg = base.clone();
        cfg.bgpo.mode = mode;
        let logs = run_experiment(&ws, &cfg, dir, run.common.exec())?;
        let rates: Vec<f64> = logs.iter().map(|l| final_success_rate(l, cfg.bgpo.eval_window)).collect();
        for (seed, rate) in seeds(&cfg).into_iter().zip(&rates) {
            println!(
                "{} seed {seed}: final success {rate:.3} ({})",
                mode.name(),
                metrics_path(dir, &cfg, seed).display()
            );
        }
        println!("{} mean final success {:.3}", mode.name(), rates.iter().sum::<f64>() / rates.len() as f64);
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDemos(c) => {
            let cfg = c.config()?;
            let pool = generate_pool(&cfg.env, &cfg.demos, cfg.seed, c.exec())?;
            pool.save(&c.out)?;
            let lengths = mean_lengths(&pool.demos);
            println!(
                "{} demonstrations ({} train, {} held out) in {}",
                pool.demos.len(),
                pool.split.train.len(),
                pool.split.held_out.len(),
                c.out.display()
            );
            for task in Task::ALL {
                println!("task {} mean length {:.1}", task.id(), lengths[task.index()]);
            }
        }
        Command::Pretrain(c) => {
            let cfg = c.config()?;
            let pool = bgpo_core::env::DemoPool::load(&c.out)?;
            pretrain(&cfg, &pool, &c.out, c.exec(), None)?;
            println!("encoders written to {}", c.out.display());
        }
        Command::Train(run) => {
            let mode = run.config()?.bgpo.mode;
            train(&run, &[mode])?;
        }
        Command::Ablate(run) => train(&run, &AblationMode::ALL)?,
        Command::Eval { run, episodes } => {
            let cfg = run.config()?;
            let ws = Workspace::open(&run.common.out, &cfg, run.common.exec())?;
            for seed in seeds(&cfg) {
                let rates = evaluate_saved(&ws, &cfg, &run.common.out, seed, episodes)?;
                println!(
                    "seed {seed}: task 1 {:.3} task 2 {:.3} task 3 {:.3}",
                    rates[0], rates[1], rates[2]
                );
            }
        }
        Command::Pca(run) => {
            let cfg = run.config()?;
            let ws = Workspace::open(&run.common.out, &cfg, run.common.exec())?;
            for seed in seeds(&cfg) {
                let (path, rows) = export_pca(&ws, &cfg, &run.common.out, seed)?;
                println!("seed {seed}: {} nodes projected to {}", rows.len(), path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::MissingArtifact(_) => 3,
                _ => 1,
            })
        }
    }
}
