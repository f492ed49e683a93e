//! Pretraining of the frozen encoders and the derived demonstration bank.
//!
//! Artifacts written to the pretraining directory:
//!
//! * `vae.ckpt`, `lae.ckpt`: model, optimizer state, completed epochs and the
//!   loss history so far. An interrupted run resumes from the last epoch.
//! * `vae_loss.csv`, `lae_loss.csv`: loss histories.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::config::ExperimentConfig;
use crate::env::{DemoPool, Demonstration, ObservationMode, Task, WorldState};
use crate::error::{Error, Result};
use crate::gwr::{GwrNetwork, NodeId};
use crate::lae::{self, LaeLossRecord, LaeModel, LatentSequence};
use crate::nn::{Adam, Checkpoint, Tensor};
use crate::par::{self, Execution};
use crate::rng::{self, seeded, stream};
use crate::vae::{self, LossRecord, TrainOptions, TransitionTriple, VaeLossBreakdown, VaeModel};

pub const VAE_CKPT: &str = "vae.ckpt";
pub const LAE_CKPT: &str = "lae.ckpt";
pub const VAE_LOSS: &str = "vae_loss.csv";
pub const LAE_LOSS: &str = "lae_loss.csv";

/// The frozen VAE and LAE plus the observation mode they were trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoders {
    pub vae: VaeModel,
    pub lae: LaeModel,
    pub mode: ObservationMode,
}

impl Encoders {
    pub fn encode_observation(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.vae.encode(obs, None)?.mean)
    }

    pub fn encode_state(&self, state: &WorldState) -> Result<Vec<f64>> {
        self.encode_observation(&crate::env::render(state, self.mode))
    }

    pub fn encode_frames(&self, frames: &[Vec<f64>]) -> Result<Array2<f64>> {
        let width = frames.first().map_or(0, Vec::len);
        let flat: Vec<f64> = frames.iter().flatten().copied().collect();
        let x = Array2::from_shape_vec((frames.len(), width), flat).map_err(|e| Error::Shape(e.to_string()))?;
        self.vae.encode_mean_batch(x.view())
    }

    /// Behavior latent of a sequence of state latents.
    pub fn behavior_of_latents(&self, latents: &[Vec<f64>]) -> Result<Vec<f64>> {
        let width = latents.first().map_or(0, Vec::len);
        let flat: Vec<f64> = latents.iter().flatten().copied().collect();
        let z = Array2::from_shape_vec((latents.len(), width), flat).map_err(|e| Error::Shape(e.to_string()))?;
        self.lae.encode_frames(z.view())
    }

    pub fn behavior(&self, demo: &Demonstration) -> Result<Vec<f64>> {
        let z = self.encode_frames(&demo.frames(self.mode))?;
        self.lae.encode_frames(z.view())
    }

    pub fn load(dir: &Path, config: &ExperimentConfig) -> Result<Self> {
        let (vae, vae_done) = load_stage_vae(dir, config)?;
        let (lae, lae_done) = load_stage_lae(dir, config)?;
        let incomplete = |name: &str| Error::MissingArtifact(dir.join(format!("{name} (pretraining incomplete)")));
        match (vae, lae) {
            (Some(v), Some(l)) if vae_done && lae_done => Ok(Encoders {
                vae: v.model,
                lae: l.model,
                mode: config.observation,
            }),
            (None, _) => Err(Error::MissingArtifact(dir.join(VAE_CKPT))),
            (_, None) => Err(Error::MissingArtifact(dir.join(LAE_CKPT))),
            _ => Err(incomplete(if vae_done { LAE_CKPT } else { VAE_CKPT })),
        }
    }
}

/// `(s, a, s')` triples from every training demonstration.
pub fn vae_triples(pool: &DemoPool, mode: ObservationMode) -> Result<Vec<TransitionTriple>> {
    let mut out = Vec::new();
    for demo in pool.train() {
        let frames = demo.frames(mode);
        for (t, a) in demo.actions.iter().enumerate() {
            out.push(TransitionTriple::new(frames[t].clone(), a.to_vec(), frames[t + 1].clone())?);
        }
    }
    Ok(out)
}

pub fn latent_sequences(vae: &VaeModel, demos: &[&Demonstration], mode: ObservationMode, exec: Execution) -> Result<Vec<LatentSequence>> {
    par::map(exec, demos, |d| {
        let frames = d.frames(mode);
        let flat: Vec<f64> = frames.iter().flatten().copied().collect();
        let x = Array2::from_shape_vec((frames.len(), frames[0].len()), flat).map_err(|e| Error::Shape(e.to_string()))?;
        LatentSequence::new(vae.encode_mean_batch(x.view())?.view())
    })
    .into_iter()
    .collect()
}

struct Stage<M> {
    model: M,
    adam: Adam,
    epochs_done: usize,
    history: Vec<Vec<f64>>,
}

fn history_tensor(rows: &[Vec<f64>], cols: usize) -> Tensor {
    Tensor {
        shape: vec![rows.len(), cols],
        data: rows.iter().flatten().copied().collect(),
    }
}

fn history_rows(t: &Tensor) -> Vec<Vec<f64>> {
    match t.shape.as_slice() {
        [_, cols] if *cols > 0 => t.data.chunks(*cols).map(<[f64]>::to_vec).collect(),
        _ => Vec::new(),
    }
}

fn save_stage<M>(path: &Path, stage: &Stage<M>, cols: usize, store: impl Fn(&M, &mut Checkpoint)) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    store(&stage.model, &mut ckpt);
    stage.adam.store(&mut ckpt, "adam.");
    ckpt.insert("epochs_done", Tensor::vector(vec![stage.epochs_done as f64]));
    ckpt.insert("history", history_tensor(&stage.history, cols));
    ckpt.save(path)
}

fn read_stage<M>(path: &Path, mut model: M, load: impl Fn(&mut M, &Checkpoint) -> Result<()>) -> Result<Option<Stage<M>>> {
    if !path.exists() {
        return Ok(None);
    }
    let ckpt = Checkpoint::load(path)?;
    load(&mut model, &ckpt)?;
    Ok(Some(Stage {
        model,
        adam: Adam::load(&ckpt, "adam.")?,
        epochs_done: ckpt.require("epochs_done")?.scalar()? as usize,
        history: history_rows(ckpt.require("history")?),
    }))
}

fn fresh_vae(config: &ExperimentConfig) -> VaeModel {
    VaeModel::new(
        config.observation.width(),
        crate::env::ACTION_WIDTH,
        &config.vae,
        &mut seeded(config.seed, stream::INIT),
    )
}

fn fresh_lae(config: &ExperimentConfig) -> LaeModel {
    LaeModel::new(
        config.vae.latent_width,
        &config.lae,
        &mut seeded(rng::derive(config.seed, 1), stream::INIT),
    )
}

fn load_stage_vae(dir: &Path, config: &ExperimentConfig) -> Result<(Option<Stage<VaeModel>>, bool)> {
    let stage = read_stage(&dir.join(VAE_CKPT), fresh_vae(config), |m, c| m.load(c, "vae."))?;
    let done = stage.as_ref().is_some_and(|s| s.epochs_done >= config.vae.epochs);
    Ok((stage, done))
}

fn load_stage_lae(dir: &Path, config: &ExperimentConfig) -> Result<(Option<Stage<LaeModel>>, bool)> {
    let stage = read_stage(&dir.join(LAE_CKPT), fresh_lae(config), |m, c| m.load(c, "lae."))?;
    let done = stage.as_ref().is_some_and(|s| s.epochs_done >= config.lae.epochs);
    Ok((stage, done))
}

/// Trains (or resumes) the VAE, then the LAE on the VAE's mean latents.
/// `max_epochs` bounds how many epochs this call runs per stage, which lets
/// callers stop early and resume later.
pub fn pretrain(
    config: &ExperimentConfig,
    pool: &DemoPool,
    dir: &Path,
    exec: Execution,
    max_epochs: Option<usize>,
) -> Result<Encoders> {
    config.validate()?;
    std::fs::create_dir_all(dir)?;
    let budget = max_epochs.unwrap_or(usize::MAX);

    let mut vae_stage = match load_stage_vae(dir, config)?.0 {
        Some(s) => s,
        None => {
            let model = fresh_vae(config);
            let adam = vae::new_optimizer(&model, &config.vae)?;
            Stage {
                model,
                adam,
                epochs_done: 0,
                history: Vec::new(),
            }
        }
    };
    let remaining = config.vae.epochs.saturating_sub(vae_stage.epochs_done).min(budget);
    if remaining > 0 {
        let triples = vae_triples(pool, config.observation)?;
        for _ in 0..remaining {
            let opts = TrainOptions {
                epochs: 1,
                batch_size: config.vae.batch_size,
                seed: config.seed,
                start_epoch: vae_stage.epochs_done,
                execution: exec,
            };
            let records = vae::train_vae(&mut vae_stage.model, &mut vae_stage.adam, &triples, &opts)?;
            vae_stage.history.extend(records.iter().map(|r| {
                let l = r.loss;
                vec![r.step as f64, l.reconstruction, l.kl, l.inverse, l.total]
            }));
            vae_stage.epochs_done += 1;
            save_stage(&dir.join(VAE_CKPT), &vae_stage, 5, |m, c| m.store(c, "vae."))?;
            log::info!("vae epoch {}/{}", vae_stage.epochs_done, config.vae.epochs);
        }
        vae::write_loss_csv(&dir.join(VAE_LOSS), &vae_records(&vae_stage.history))?;
    }
    if vae_stage.epochs_done < config.vae.epochs {
        return Err(Error::MissingArtifact(dir.join(format!("{VAE_CKPT} (pretraining incomplete)"))));
    }

    let mut lae_stage = match load_stage_lae(dir, config)?.0 {
        Some(s) => s,
        None => {
            let model = fresh_lae(config);
            let adam = lae::new_optimizer(&model, &config.lae)?;
            Stage {
                model,
                adam,
                epochs_done: 0,
                history: Vec::new(),
            }
        }
    };
    let remaining = config.lae.epochs.saturating_sub(lae_stage.epochs_done).min(budget);
    if remaining > 0 {
        let demos: Vec<&Demonstration> = pool.train().collect();
        let seqs = latent_sequences(&vae_stage.model, &demos, config.observation, exec)?;
        for _ in 0..remaining {
            let opts = TrainOptions {
                epochs: 1,
                batch_size: config.lae.batch_size,
                seed: rng::derive(config.seed, 1),
                start_epoch: lae_stage.epochs_done,
                execution: exec,
            };
            let records = lae::train_lae(&mut lae_stage.model, &mut lae_stage.adam, &seqs, &opts)?;
            lae_stage.history.extend(records.iter().map(|r| vec![r.step as f64, r.loss]));
            lae_stage.epochs_done += 1;
            save_stage(&dir.join(LAE_CKPT), &lae_stage, 2, |m, c| m.store(c, "lae."))?;
            log::info!("lae epoch {}/{}", lae_stage.epochs_done, config.lae.epochs);
        }
        lae::write_loss_csv(&dir.join(LAE_LOSS), &lae_records(&lae_stage.history))?;
    }
    if lae_stage.epochs_done < config.lae.epochs {
        return Err(Error::MissingArtifact(dir.join(format!("{LAE_CKPT} (pretraining incomplete)"))));
    }
    Ok(Encoders {
        vae: vae_stage.model,
        lae: lae_stage.model,
        mode: config.observation,
    })
}

fn vae_records(rows: &[Vec<f64>]) -> Vec<LossRecord> {
    rows.iter()
        .map(|r| LossRecord {
            step: r[0] as usize,
            loss: VaeLossBreakdown {
                reconstruction: r[1],
                kl: r[2],
                inverse: r[3],
                total: r[4],
            },
        })
        .collect()
}

fn lae_records(rows: &[Vec<f64>]) -> Vec<LaeLossRecord> {
    rows.iter()
        .map(|r| LaeLossRecord {
            step: r[0] as usize,
            loss: r[1],
        })
        .collect()
}

/// Behavior latents of every demonstration, computed once with the frozen
/// encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoBank {
    pub train: Vec<(Task, Vec<f64>)>,
    /// Held-out latents indexed by `Task::index`.
    pub held_out: [Vec<Vec<f64>>; 3],
}

impl DemoBank {
    pub fn build(encoders: &Encoders, pool: &DemoPool, exec: Execution) -> Result<Self> {
        let embed = |ids: &[usize]| -> Result<Vec<(Task, Vec<f64>)>> {
            par::map(exec, ids, |&i| Ok((pool.demos[i].task, encoders.behavior(&pool.demos[i])?)))
                .into_iter()
                .collect()
        };
        let train = embed(&pool.split.train)?;
        let mut held_out: [Vec<Vec<f64>>; 3] = Default::default();
        for (task, phi) in embed(&pool.split.held_out)? {
            held_out[task.index()].push(phi);
        }
        if held_out.iter().any(Vec::is_empty) || train.is_empty() {
            return Err(Error::Precondition("every task needs training and held-out demonstrations".into()));
        }
        Ok(DemoBank { train, held_out })
    }

    pub fn width(&self) -> usize {
        self.train[0].1.len()
    }

    /// Per-dimension minimum and maximum of the training latents.
    pub fn train_range(&self) -> (Vec<f64>, Vec<f64>) {
        let w = self.width();
        let mut lo = vec![f64::INFINITY; w];
        let mut hi = vec![f64::NEG_INFINITY; w];
        for (_, phi) in &self.train {
            for j in 0..w {
                lo[j] = lo[j].min(phi[j]);
                hi[j] = hi[j].max(phi[j]);
            }
        }
        (lo, hi)
    }

    pub fn new_gwr(&self, config: &ExperimentConfig, seed: u64) -> Result<GwrNetwork> {
        let (lo, hi) = self.train_range();
        GwrNetwork::new(config.gwr.clone(), &lo, &hi, &mut seeded(seed, stream::GWR_INIT))
    }
}

/// One pass of the training latents through the network, in a seeded order.
pub fn stream_training_latents(gwr: &mut GwrNetwork, bank: &DemoBank, seed: u64) -> Result<()> {
    let mut order: Vec<usize> = (0..bank.train.len()).collect();
    order.shuffle(&mut seeded(seed, stream::SHUFFLE));
    for i in order {
        gwr.step(&bank.train[i].1)?;
    }
    Ok(())
}

/// Task with the most best-match latents per node; ties go to the lower task.
pub fn dominant_tasks<'a>(gwr: &GwrNetwork, labelled: impl IntoIterator<Item = (Task, &'a [f64])>) -> Result<BTreeMap<NodeId, Task>> {
    let mut counts: BTreeMap<NodeId, [usize; 3]> = BTreeMap::new();
    for (task, phi) in labelled {
        let node = gwr.infer(phi)?.node;
        counts.entry(node).or_default()[task.index()] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(node, c)| {
            let best = (0..3).fold(0, |b, k| if c[k] > c[b] { k } else { b });
            (node, Task::ALL[best])
        })
        .collect())
}

/// Fraction of held-out latents whose best-matching node carries their task's
/// label. Latents landing on an unlabelled node count as misses.
pub fn inference_accuracy(gwr: &GwrNetwork, bank: &DemoBank) -> Result<f64> {
    let labels = dominant_tasks(gwr, bank.train.iter().map(|(t, p)| (*t, p.as_slice())))?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for task in Task::ALL {
        for phi in &bank.held_out[task.index()] {
            let node = gwr.infer(phi)?.node;
            hits += usize::from(labels.get(&node) == Some(&task));
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_pool, DemoSettings};

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.demos = DemoSettings {
            per_task: 12,
            held_out_per_task: 3,
            ..DemoSettings::default()
        };
        cfg.vae.latent_width = 8;
        cfg.vae.hidden_width = 8;
        cfg.vae.epochs = 2;
        cfg.vae.batch_size = 32;
        cfg.lae.hidden_width = 4;
        cfg.lae.epochs = 2;
        cfg.lae.batch_size = 8;
        cfg
    }

    #[test]
    fn pretrain_resume_matches_uninterrupted_run() {
        let cfg = tiny_config();
        let pool = generate_pool(&cfg.env, &cfg.demos, 1, Execution::Parallel).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let whole = pretrain(&cfg, &pool, a.path(), Execution::Parallel, None).unwrap();
        assert!(matches!(
            pretrain(&cfg, &pool, b.path(), Execution::Sequential, Some(1)),
            Err(Error::MissingArtifact(_))
        ));
        assert!(matches!(Encoders::load(b.path(), &cfg), Err(Error::MissingArtifact(_))));
        pretrain(&cfg, &pool, b.path(), Execution::Sequential, Some(1)).unwrap_err();
        let resumed = pretrain(&cfg, &pool, b.path(), Execution::Sequential, None).unwrap();
        assert_eq!(whole, resumed);
        for f in [VAE_CKPT, LAE_CKPT, VAE_LOSS, LAE_LOSS] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        assert_eq!(Encoders::load(a.path(), &cfg).unwrap(), whole);
        let rows = std::fs::read_to_string(a.path().join(VAE_LOSS)).unwrap().lines().count();
        assert!(rows > 1);
    }

    #[test]
    fn missing_pretraining_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Encoders::load(dir.path(), &tiny_config()), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn dominant_task_ties_and_accuracy() {
        let gwr = GwrNetwork::from_weights(Default::default(), vec![vec![0.0], vec![1.0], vec![5.0]]).unwrap();
        let data = [(Task::PushToRed, [0.1]), (Task::Grasp, [0.1]), (Task::PushToWhite, [0.9]), (Task::PushToWhite, [1.1])];
        let labels = dominant_tasks(&gwr, data.iter().map(|(t, p)| (*t, p.as_slice()))).unwrap();
        assert_eq!(labels[&0], Task::Grasp);
        assert_eq!(labels[&1], Task::PushToWhite);
        assert!(!labels.contains_key(&2));
        let bank = DemoBank {
            train: data.iter().map(|(t, p)| (*t, p.to_vec())).collect(),
            held_out: [vec![vec![0.0]], vec![vec![0.05]], vec![vec![4.0]]],
        };
        // grasp hits node 0, push-to-red lands on node 0 (labelled grasp), push-to-white on unlabelled node 2
        assert!((inference_accuracy(&gwr, &bank).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }
}
