//! Reference experiments on generated scenes.
//!
//! The biased-context benchmark has four old classes learned first and two
//! new classes added in one increment. In the training scenes every new class
//! appears next to a look-alike old class (same colour, different shape), so
//! old-class context is always present while new classes are learned. Test
//! scenes use mild uniform co-occurrence, so old classes are often seen alone.

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, materialize_step, LabeledImage, Mode, SceneSpec, Shape, ShapeKind};
use crate::error::Result;
use crate::eval::MetricsReport;
use crate::trainer::{evaluate, run_continual_with, train_first_step, Ablation, StepArtifacts, StepStore, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub name: String,
    pub train_spec: SceneSpec,
    pub test_spec: SceneSpec,
    pub train_count: usize,
    pub test_count: usize,
    pub config: TrainConfig,
}

impl Benchmark {
    /// Four old classes, then two new ones ("4-2", overlapped).
    pub fn biased_context() -> Self {
        let (h, w) = (32, 32);
        let mut kinds: Vec<ShapeKind> = (1..=4).map(ShapeKind::default_for).collect();
        for k in &mut kinds {
            k.radius = (0.16, 0.28);
        }
        // New class 5 mimics class 1 in colour, new class 6 mimics class 2; both
        // differ from their old twin only by shape and a stripe texture.
        kinds.push(ShapeKind {
            shape: Shape::Square,
            stripe_period: 4,
            ..kinds[0].clone()
        });
        kinds.push(ShapeKind {
            shape: Shape::Disc,
            stripe_period: 4,
            ..kinds[1].clone()
        });

        let mut train_spec = SceneSpec::uniform(h, w, 6, 0.15, 11);
        train_spec.shape_kinds = kinds.clone();
        train_spec.shapes_per_image = (1, 3);
        train_spec.set_cooc(1, 5, 1.0);
        train_spec.set_cooc(2, 6, 1.0);
        train_spec.set_cooc(5, 6, 0.0);

        let mut test_spec = SceneSpec::uniform(h, w, 6, 0.2, 12);
        test_spec.shape_kinds = kinds;
        test_spec.shapes_per_image = (1, 3);

        let config = TrainConfig {
            protocol: "4-2".into(),
            mode: Mode::Overlapped,
            epochs_per_step: 20,
            first_step_epochs: Some(40),
            batch_size: 8,
            learning_rate: 0.01,
            increment_learning_rate: Some(0.01),
            widths: [8, 16, 32],
            // Scaled to the unnormalized distillation and consistency sums.
            alpha: 1e-3,
            gamma: 1e-3,
            grad_clip_norm: Some(5.0),
            ablation: Ablation::Full,
            ..TrainConfig::default()
        };
        Self {
            name: "biased-context-4-2".into(),
            train_spec,
            test_spec,
            train_count: 240,
            test_count: 120,
            config,
        }
    }

    pub fn num_fg_classes(&self) -> usize {
        self.train_spec.num_fg_classes
    }

    pub fn datasets(&self) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
        Ok((
            generate_dataset(&self.train_spec, self.train_count)?,
            generate_dataset(&self.test_spec, self.test_count)?,
        ))
    }
}

/// Result of one variant in an ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub ablation: Ablation,
    pub seed: u64,
    /// Metrics after every step, first step included.
    pub history: Vec<MetricsReport>,
    pub report: MetricsReport,
}

/// Serves a fixed first step and delegates everything else.
struct SharedFirstStep<'a> {
    first: &'a StepArtifacts,
}

impl StepStore for SharedFirstStep<'_> {
    fn load(&mut self, step: usize) -> Result<Option<StepArtifacts>> {
        Ok((step == 1).then(|| self.first.clone()))
    }

    fn save(&mut self, _artifacts: &StepArtifacts) -> Result<()> {
        Ok(())
    }
}

/// Trains the first step once, then every variant in `ablations` from that
/// same starting point.
pub fn run_ablations(
    config: &TrainConfig,
    train: &[LabeledImage],
    test: &[LabeledImage],
    num_fg_classes: usize,
    ablations: &[Ablation],
) -> Result<Vec<AblationOutcome>> {
    let first = first_step(config, train, test, num_fg_classes)?;
    ablations
        .iter()
        .map(|&ablation| {
            let cfg = TrainConfig {
                ablation,
                ..config.clone()
            };
            let result = run_continual_with(&cfg, train, test, num_fg_classes, &mut SharedFirstStep { first: &first })?;
            Ok(AblationOutcome {
                ablation,
                seed: config.seed,
                history: result.steps.iter().filter_map(|s| s.metrics.clone()).collect(),
                report: result.report,
            })
        })
        .collect()
}

/// First step of `config`'s task, trained and evaluated.
pub fn first_step(
    config: &TrainConfig,
    train: &[LabeledImage],
    test: &[LabeledImage],
    num_fg_classes: usize,
) -> Result<StepArtifacts> {
    let task = config.task(num_fg_classes)?;
    let data = materialize_step(train, &task, 1)?;
    let mut first = train_first_step(config, &data)?;
    first.metrics = Some(evaluate(&first.checkpoint.model, test, &task, 1)?);
    Ok(first)
}
