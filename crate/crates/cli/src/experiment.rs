//! Experiment spec files and the fixed output tree.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use contiseg::bench::Benchmark;
use contiseg::data::disk::{load_dataset, save_dataset};
use contiseg::data::{generate_dataset, LabeledImage, SceneSpec};
use contiseg::trainer::{Ablation, TrainConfig};
use serde::{Deserialize, Serialize};

/// Ablation rows of the standard comparison table, in order.
pub const TABLE_ROWS: [Ablation; 6] = [
    Ablation::Baseline,
    Ablation::Double,
    Ablation::Duplet,
    Ablation::DupletCtx,
    Ablation::Balance,
    Ablation::Full,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Variants run by `ablate`; the standard table rows when empty.
    #[serde(default)]
    pub ablations: Vec<Ablation>,
    pub train_count: usize,
    pub test_count: usize,
    #[serde(default)]
    pub train: TrainConfig,
    pub scene: SceneSpec,
    /// Test scenes; the training scene with the next generator seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_scene: Option<SceneSpec>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl From<Benchmark> for ExperimentSpec {
    fn from(b: Benchmark) -> Self {
        Self {
            name: b.name,
            seeds: vec![0, 1, 2],
            ablations: Vec::new(),
            train_count: b.train_count,
            test_count: b.test_count,
            train: b.config,
            scene: b.train_spec,
            test_scene: Some(b.test_spec),
        }
    }
}

pub const PRESETS: [&str; 1] = ["biased-context"];

impl ExperimentSpec {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "biased-context" => Ok(Benchmark::biased_context().into()),
            _ => bail!("unknown preset `{name}` (known: {})", PRESETS.join(", ")),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let spec: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        spec.validate().with_context(|| format!("invalid experiment spec {}", path.display()))?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self)?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        if self.train_count == 0 || self.test_count == 0 {
            bail!("train_count and test_count must be positive");
        }
        self.train.validate()?;
        self.scene.validate()?;
        if let Some(t) = &self.test_scene {
            t.validate()?;
            if t.num_fg_classes != self.scene.num_fg_classes {
                bail!("test_scene has {} classes, scene has {}", t.num_fg_classes, self.scene.num_fg_classes);
            }
        }
        self.train.task(self.scene.num_fg_classes)?;
        Ok(())
    }

    pub fn num_fg_classes(&self) -> usize {
        self.scene.num_fg_classes
    }

    pub fn test_scene(&self) -> SceneSpec {
        self.test_scene.clone().unwrap_or_else(|| {
            let mut s = self.scene.clone();
            s.rng_seed = s.rng_seed.wrapping_add(1);
            s
        })
    }

    pub fn ablation_list(&self) -> Vec<Ablation> {
        if self.ablations.is_empty() {
            TABLE_ROWS.to_vec()
        } else {
            self.ablations.clone()
        }
    }
}

/// `datasets/`, `checkpoints/`, `logs/`, `metrics/` and `figures/` under one root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn spec_file(&self) -> PathBuf {
        self.root.join("experiment.toml")
    }

    pub fn dataset(&self, split: &str) -> PathBuf {
        self.root.join("datasets").join(split)
    }

    /// First-step checkpoints do not depend on the ablation and are shared.
    pub fn step_file(&self, seed: u64, ablation: Ablation, step: usize) -> PathBuf {
        let seed_dir = self.root.join("checkpoints").join(format!("seed-{seed}"));
        if step == 1 {
            seed_dir.join("step-1.json")
        } else {
            seed_dir.join(ablation.name()).join(format!("step-{step}.json"))
        }
    }

    pub fn log_file(&self, seed: u64, ablation: Ablation) -> PathBuf {
        self.root.join("logs").join(ablation.name()).join(format!("seed-{seed}.jsonl"))
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn run_metrics(&self, seed: u64, ablation: Ablation) -> PathBuf {
        self.metrics_dir().join(ablation.name()).join(format!("seed-{seed}.json"))
    }

    pub fn figures_dir(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn create(&self) -> Result<()> {
        for d in ["datasets", "checkpoints", "logs", "metrics", "figures"] {
            let p = self.root.join(d);
            fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
        }
        Ok(())
    }
}

/// Writes both splits and the resolved spec.
pub fn generate(spec: &ExperimentSpec, layout: &Layout) -> Result<(usize, usize)> {
    spec.validate()?;
    layout.create()?;
    let train = generate_dataset(&spec.scene, spec.train_count)?;
    let test = generate_dataset(&spec.test_scene(), spec.test_count)?;
    save_dataset(&layout.dataset("train"), &train)?;
    save_dataset(&layout.dataset("test"), &test)?;
    spec.save(&layout.spec_file())?;
    Ok((train.len(), test.len()))
}

/// Loads both splits, generating them first if the manifests are missing.
pub fn datasets(spec: &ExperimentSpec, layout: &Layout) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let manifest = layout.dataset("train").join(contiseg::data::disk::MANIFEST);
    if !manifest.exists() {
        log::info!("no dataset under {}, generating", layout.root.display());
        generate(spec, layout)?;
    }
    Ok((load_dataset(&layout.dataset("train"))?, load_dataset(&layout.dataset("test"))?))
}
