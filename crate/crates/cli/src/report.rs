//! Seed-averaged summaries written as JSON and CSV.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use contiseg::trainer::Ablation;
use serde::{Deserialize, Serialize};

use crate::runner::{read_json, write_json, RunMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Initial,
    Incremented,
    All,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Initial, Group::Incremented, Group::All];

    pub fn name(self) -> &'static str {
        match self {
            Group::Initial => "initial",
            Group::Incremented => "incremented",
            Group::All => "all",
        }
    }

    fn pick(self, r: &contiseg::eval::MetricsReport) -> Option<f64> {
        match self {
            Group::Initial => r.initial,
            Group::Incremented => r.incremented,
            Group::All => r.all,
        }
    }
}

/// Mean and sample standard deviation over seeds with a defined value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn stat(values: &[f64]) -> Option<Stat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Some(Stat { mean, std: var.sqrt(), n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
    /// Final-step group mIoU.
    pub groups: BTreeMap<Group, Stat>,
    /// Seed-mean all-class mIoU after each step.
    pub evolution: Vec<(usize, f64)>,
    /// Seed-mean final IoU per class, `None` when never defined.
    pub per_class: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub protocol: String,
    pub mode: String,
    pub rows: Vec<AblationSummary>,
}

pub fn summarize(runs: &[RunMetrics]) -> Result<Summary> {
    let Some(first) = runs.first() else {
        bail!("no run metrics to summarize");
    };
    let mut order: Vec<Ablation> = Vec::new();
    for r in runs {
        if !order.contains(&r.ablation) {
            order.push(r.ablation);
        }
    }
    let rows = order
        .into_iter()
        .map(|ablation| {
            let mine: Vec<&RunMetrics> = runs.iter().filter(|r| r.ablation == ablation).collect();
            let groups = Group::ALL
                .into_iter()
                .filter_map(|g| {
                    let vals: Vec<f64> = mine.iter().filter_map(|r| g.pick(r.final_report())).collect();
                    stat(&vals).map(|s| (g, s))
                })
                .collect();
            let steps = mine.iter().map(|r| r.history.len()).min().unwrap_or(0);
            let evolution = (0..steps)
                .filter_map(|i| {
                    let vals: Vec<f64> = mine.iter().filter_map(|r| r.history[i].report.all).collect();
                    stat(&vals).map(|s| (mine[0].history[i].step, s.mean))
                })
                .collect();
            let k = mine.iter().map(|r| r.final_report().per_class_iou.len()).max().unwrap_or(0);
            let per_class = (0..k)
                .map(|c| {
                    let vals: Vec<f64> = mine
                        .iter()
                        .filter_map(|r| r.final_report().per_class_iou.get(c).copied().flatten())
                        .collect();
                    stat(&vals).map(|s| s.mean)
                })
                .collect();
            AblationSummary {
                ablation,
                seeds: mine.iter().map(|r| r.seed).collect(),
                groups,
                evolution,
                per_class,
            }
        })
        .collect();
    Ok(Summary {
        name: first.name.clone(),
        protocol: first.protocol.clone(),
        mode: first.mode.clone(),
        rows,
    })
}

/// Every `metrics/<ablation>/seed-*.json` under `metrics_dir`, sorted by path.
pub fn collect_runs(metrics_dir: &Path) -> Result<Vec<RunMetrics>> {
    let mut paths = Vec::new();
    let entries = fs::read_dir(metrics_dir).with_context(|| format!("reading {}", metrics_dir.display()))?;
    for entry in entries {
        let dir = entry?.path();
        if !dir.is_dir() {
            continue;
        }
        for f in fs::read_dir(&dir)? {
            let p = f?.path();
            if p.extension().is_some_and(|e| e == "json") {
                paths.push(p);
            }
        }
    }
    paths.sort();
    paths.iter().map(|p| read_json(p)).collect()
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes `summary.json`, `summary.csv` (one row per ablation and group),
/// `table.csv` (one row per ablation, one column per group),
/// `evolution.csv` and `per_class.csv`.
pub fn write_summary(summary: &Summary, metrics_dir: &Path) -> Result<()> {
    write_json(&metrics_dir.join("summary.json"), summary)?;

    let mut w = csv::Writer::from_path(metrics_dir.join("summary.csv"))?;
    w.write_record(["ablation", "group", "miou_mean", "miou_std", "seeds"])?;
    for row in &summary.rows {
        for (g, s) in &row.groups {
            w.write_record([
                row.ablation.name().to_string(),
                g.name().to_string(),
                format!("{:.6}", s.mean),
                format!("{:.6}", s.std),
                s.n.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(metrics_dir.join("table.csv"))?;
    w.write_record(["ablation", "initial", "incremented", "all"])?;
    for row in &summary.rows {
        let cell = |g: Group| fmt(row.groups.get(&g).map(|s| s.mean));
        w.write_record([
            row.ablation.name().to_string(),
            cell(Group::Initial),
            cell(Group::Incremented),
            cell(Group::All),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(metrics_dir.join("evolution.csv"))?;
    w.write_record(["ablation", "step", "miou_all"])?;
    for row in &summary.rows {
        for (step, v) in &row.evolution {
            w.write_record([row.ablation.name().to_string(), step.to_string(), format!("{v:.6}")])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(metrics_dir.join("per_class.csv"))?;
    w.write_record(["ablation", "class", "iou"])?;
    for row in &summary.rows {
        for (c, v) in row.per_class.iter().enumerate() {
            w.write_record([row.ablation.name().to_string(), c.to_string(), fmt(*v)])?;
        }
    }
    w.flush()?;
    Ok(())
}
