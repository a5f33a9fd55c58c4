//! Training runs on disk: resumable step store, logs and per-run metrics.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use contiseg::data::LabeledImage;
use contiseg::eval::MetricsReport;
use contiseg::model::Checkpoint;
use contiseg::trainer::{evaluate, run_continual_with, Ablation, StepArtifacts, StepStore, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::experiment::{ExperimentSpec, Layout};

/// Metrics of one `(ablation, seed)` run, one report per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub name: String,
    pub ablation: Ablation,
    pub seed: u64,
    pub protocol: String,
    pub mode: String,
    pub history: Vec<StepMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub report: MetricsReport,
}

impl RunMetrics {
    pub fn final_report(&self) -> &MetricsReport {
        &self.history.last().expect("at least one step").report
    }
}

/// Step artifacts stored as JSON, one file per step.
pub struct DiskStore<'a> {
    layout: &'a Layout,
    seed: u64,
    ablation: Ablation,
}

impl StepStore for DiskStore<'_> {
    fn load(&mut self, step: usize) -> contiseg::Result<Option<StepArtifacts>> {
        let path = self.layout.step_file(self.seed, self.ablation, step);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path).map_err(|e| contiseg::Error::Io { path: path.clone(), source: e })?;
        let artifacts = serde_json::from_slice(&bytes).map_err(|e| contiseg::Error::Json { path, source: e })?;
        Ok(Some(artifacts))
    }

    fn save(&mut self, artifacts: &StepArtifacts) -> contiseg::Result<()> {
        let path = self.layout.step_file(self.seed, self.ablation, artifacts.step);
        write_json(&path, artifacts).map_err(|e| contiseg::Error::Config(format!("{e:#}")))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    let bytes = serde_json::to_vec_pretty(value)?;
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// Trains (or resumes) one run and writes its log and metrics.
pub fn run_one(
    spec: &ExperimentSpec,
    layout: &Layout,
    train: &[LabeledImage],
    test: &[LabeledImage],
    seed: u64,
    ablation: Ablation,
) -> Result<RunMetrics> {
    let config = TrainConfig {
        seed,
        ablation,
        ..spec.train.clone()
    };
    let mut store = DiskStore { layout, seed, ablation };
    let result = run_continual_with(&config, train, test, spec.num_fg_classes(), &mut store)
        .with_context(|| format!("{} seed {seed}", ablation.name()))?;

    let log_path = layout.log_file(seed, ablation);
    fs::create_dir_all(log_path.parent().expect("log dir"))?;
    let mut out = BufWriter::new(fs::File::create(&log_path).with_context(|| format!("writing {}", log_path.display()))?);
    for s in &result.steps {
        for record in s.batches.iter().chain(&s.epochs) {
            writeln!(out, "{}", serde_json::to_string(record)?)?;
        }
    }
    out.flush()?;

    let metrics = RunMetrics {
        name: spec.name.clone(),
        ablation,
        seed,
        protocol: config.protocol.clone(),
        mode: config.mode.to_string(),
        history: result
            .history()
            .into_iter()
            .map(|(step, report)| StepMetrics {
                step,
                report: report.clone(),
            })
            .collect(),
    };
    write_json(&layout.run_metrics(seed, ablation), &metrics)?;
    Ok(metrics)
}

/// Re-scores stored checkpoints of one run on `test`.
pub fn evaluate_run(
    spec: &ExperimentSpec,
    layout: &Layout,
    test: &[LabeledImage],
    seed: u64,
    ablation: Ablation,
) -> Result<RunMetrics> {
    let task = spec.train.task(spec.num_fg_classes())?;
    let mut history = Vec::new();
    for t in 1..=task.steps() {
        let path = layout.step_file(seed, ablation, t);
        let artifacts: StepArtifacts = read_json(&path).with_context(|| format!("no checkpoint for step {t}; train first"))?;
        let Checkpoint { model, .. } = artifacts.checkpoint;
        history.push(StepMetrics {
            step: t,
            report: evaluate(&model, test, &task, t)?,
        });
    }
    let metrics = RunMetrics {
        name: spec.name.clone(),
        ablation,
        seed,
        protocol: spec.train.protocol.clone(),
        mode: spec.train.mode.to_string(),
        history,
    };
    write_json(&layout.run_metrics(seed, ablation), &metrics)?;
    Ok(metrics)
}

/// Runs `jobs` on up to `workers` threads, keeping the input order in the output.
pub fn parallel<J, T, F>(jobs: Vec<J>, workers: usize, f: F) -> Vec<Result<T>>
where
    J: Send,
    T: Send,
    F: Fn(J) -> Result<T> + Sync,
{
    let workers = workers.max(1).min(jobs.len().max(1));
    if workers == 1 {
        return jobs.into_iter().map(&f).collect();
    }
    let queue = std::sync::Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>().into_iter());
    let results = std::sync::Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let next = queue.lock().expect("queue lock").next();
                let Some((i, job)) = next else { break };
                let r = f(job);
                results.lock().expect("results lock").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(i, _)| *i);
    results.into_iter().map(|(_, r)| r).collect()
}
