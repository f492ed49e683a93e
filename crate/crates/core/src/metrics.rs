//! Metrics CSV files.
//!
//! Per-run file header:
//! `episode,seed,mode,schedule,task,train_return,intrinsic,success,ep_len,gwr_nodes,eval_task,eval_success,eval_return`
//!
//! Aggregate file: one row per episode with the number of runs and the mean
//! and population standard deviation of every numeric column across runs.

use std::path::Path;

use crate::bgpo::EpisodeLog;
use crate::env::Task;
use crate::error::{Error, Result};

pub const HEADER: [&str; 13] = [
    "episode",
    "seed",
    "mode",
    "schedule",
    "task",
    "train_return",
    "intrinsic",
    "success",
    "ep_len",
    "gwr_nodes",
    "eval_task",
    "eval_success",
    "eval_return",
];

/// Columns summarised in the aggregate file.
pub const AGGREGATE_COLUMNS: [&str; 7] = [
    "train_return",
    "intrinsic",
    "success",
    "ep_len",
    "gwr_nodes",
    "eval_success",
    "eval_return",
];

pub fn metrics_file_name(mode: &str, schedule: &str, seed: u64) -> String {
    format!("metrics_{schedule}_{mode}_seed{seed}.csv")
}

fn row(l: &EpisodeLog) -> [String; 13] {
    [
        l.episode.to_string(),
        l.seed.to_string(),
        l.mode.name().to_string(),
        l.schedule.name().to_string(),
        l.task.id().to_string(),
        l.train_return.to_string(),
        l.intrinsic.to_string(),
        u8::from(l.success).to_string(),
        l.ep_len.to_string(),
        l.gwr_nodes.to_string(),
        l.eval_task.id().to_string(),
        u8::from(l.eval_success).to_string(),
        l.eval_return.to_string(),
    ]
}

/// Streaming writer; flushes every row so partial runs stay readable.
pub struct MetricsWriter {
    inner: csv::Writer<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut inner = csv::Writer::from_path(path)?;
        inner.write_record(HEADER)?;
        Ok(MetricsWriter { inner })
    }

    pub fn write(&mut self, log: &EpisodeLog) -> Result<()> {
        self.inner.write_record(row(log))?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_metrics(path: &Path, logs: &[EpisodeLog]) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    for l in logs {
        w.write(l)?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpisodeLog>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(Error::format(path, "unexpected metrics header"));
    }
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| bad("malformed number")) };
        let int = |i: usize| -> Result<u64> { rec[i].parse().map_err(|_| bad("malformed integer")) };
        let task = |i: usize| -> Result<Task> { Task::from_id(int(i)? as u8).map_err(|_| bad("unknown task")) };
        out.push(EpisodeLog {
            episode: int(0)? as usize,
            seed: int(1)?,
            mode: rec[2].parse().map_err(|_| bad("unknown mode"))?,
            schedule: rec[3].parse().map_err(|_| bad("unknown schedule"))?,
            task: task(4)?,
            train_return: num(5)?,
            intrinsic: num(6)?,
            success: int(7)? != 0,
            ep_len: int(8)? as usize,
            gwr_nodes: int(9)? as usize,
            eval_task: task(10)?,
            eval_success: int(11)? != 0,
            eval_return: num(12)?,
        });
    }
    Ok(out)
}

fn numeric(l: &EpisodeLog) -> [f64; 7] {
    [
        l.train_return,
        l.intrinsic,
        f64::from(u8::from(l.success)),
        l.ep_len as f64,
        l.gwr_nodes as f64,
        f64::from(u8::from(l.eval_success)),
        l.eval_return,
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub episode: usize,
    pub runs: usize,
    pub mean: [f64; 7],
    pub std: [f64; 7],
}

/// Per-episode mean and population standard deviation across runs. Every run
/// must cover the same episodes.
pub fn aggregate(runs: &[Vec<EpisodeLog>]) -> Result<Vec<AggregateRow>> {
    let first = runs.first().ok_or_else(|| Error::Precondition("nothing to aggregate".into()))?;
    if runs.iter().any(|r| r.len() != first.len()) {
        return Err(Error::Consistency("runs differ in episode count".into()));
    }
    let n = runs.len() as f64;
    let mut out = Vec::with_capacity(first.len());
    for (i, base) in first.iter().enumerate() {
        let mut mean = [0.0; 7];
        let mut std = [0.0; 7];
        for r in runs {
            if r[i].episode != base.episode {
                return Err(Error::Consistency("runs are not aligned by episode".into()));
            }
            for (m, v) in mean.iter_mut().zip(numeric(&r[i])) {
                *m += v / n;
            }
        }
        for r in runs {
            for ((s, v), m) in std.iter_mut().zip(numeric(&r[i])).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt();
        }
        out.push(AggregateRow {
            episode: base.episode,
            runs: runs.len(),
            mean,
            std,
        });
    }
    Ok(out)
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["episode".to_string(), "runs".to_string()];
    for c in AGGREGATE_COLUMNS {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_std"));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.episode.to_string(), r.runs.to_string()];
        for k in 0..7 {
            rec.push(r.mean[k].to_string());
            rec.push(r.std[k].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
