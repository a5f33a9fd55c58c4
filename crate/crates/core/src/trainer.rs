//! Continual training loop: plain cross-entropy at the first step, then
//! pseudo-labelled duplet training against a frozen copy of the previous model.

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_task_sequence, collapse_unseen, materialize_step, LabeledImage, Mode, StepDataset, TaskSequence};
use crate::duplet::{duplet_from_pseudo, epoch_batches, Duplet, FillPolicy};
use crate::error::{Error, Result};
use crate::eval::{miou, ClassGroups, ConfusionMatrix, MetricsReport};
use crate::losses::{evaluate_duplet, mean_cross_entropy, weight_map, BranchOutputs, DupletOutputs, Hyper, LossBreakdown, WeightMap};
use crate::model::{phi_pool, softmax_scores, ArchConfig, Checkpoint, PooledDescriptor, SegModel};
use crate::pseudo::PseudoLabels;

/// Training variants for increment steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Naive fine-tuning: cross-entropy on the step labels, no old model.
    Ft,
    /// Pseudo-label cross-entropy plus feature distillation on originals.
    Baseline,
    /// Baseline with every original duplicated instead of erased.
    Double,
    /// Baseline plus new-class-erased copies.
    Duplet,
    /// Duplet plus the consistency term.
    DupletCtx,
    /// Baseline with class-balance weights on originals.
    Balance,
    /// Duplet, consistency term and class balance.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Partner {
    None,
    Copy,
    Erased,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Ft,
        Ablation::Baseline,
        Ablation::Double,
        Ablation::Duplet,
        Ablation::DupletCtx,
        Ablation::Balance,
        Ablation::Full,
    ];

    fn partner(self) -> Partner {
        match self {
            Ablation::Ft | Ablation::Baseline | Ablation::Balance => Partner::None,
            Ablation::Double => Partner::Copy,
            Ablation::Duplet | Ablation::DupletCtx | Ablation::Full => Partner::Erased,
        }
    }

    pub fn uses_ctx(self) -> bool {
        matches!(self, Ablation::DupletCtx | Ablation::Full)
    }

    pub fn uses_balance(self) -> bool {
        matches!(self, Ablation::Balance | Ablation::Full)
    }

    pub fn uses_old_model(self) -> bool {
        self != Ablation::Ft
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Ft => "ft",
            Ablation::Baseline => "baseline",
            Ablation::Double => "double",
            Ablation::Duplet => "duplet",
            Ablation::DupletCtx => "duplet_ctx",
            Ablation::Balance => "balance",
            Ablation::Full => "full",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '+'], "_");
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == key)
            .or(match key.as_str() {
                "baseline_double" => Some(Ablation::Double),
                "baseline_duplet" => Some(Ablation::Duplet),
                "baseline_duplet_ctx" => Some(Ablation::DupletCtx),
                "baseline_balance" => Some(Ablation::Balance),
                "ours" => Some(Ablation::Full),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub protocol: String,
    pub mode: Mode,
    pub epochs_per_step: usize,
    /// Overrides `epochs_per_step` for the first step.
    pub first_step_epochs: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate for steps after the first; `learning_rate` when absent.
    pub increment_learning_rate: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub ratio_cap: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub fill: FillPolicy,
    pub widths: [usize; 3],
    /// Rescales each batch gradient to at most this global L2 norm.
    pub grad_clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            protocol: "15-1".into(),
            mode: Mode::Overlapped,
            epochs_per_step: 10,
            first_step_epochs: None,
            batch_size: 8,
            learning_rate: 0.01,
            increment_learning_rate: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            alpha: 1.0,
            gamma: 0.01,
            tau: 0.8,
            ratio_cap: crate::losses::DEFAULT_RATIO_CAP,
            seed: 0,
            ablation: Ablation::Full,
            fill: FillPolicy::DatasetMean,
            widths: [16, 32, 64],
            grad_clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::OddBatchSize(self.batch_size));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma {} must be >= 0", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be >= 0", self.alpha));
        }
        let lrs = [Some(self.learning_rate), self.increment_learning_rate];
        if lrs.iter().flatten().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight decay >= 0".into());
        }
        if self.grad_clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip_norm must be positive".into());
        }
        if self.widths.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        Ok(())
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            alpha: self.alpha,
            gamma: self.gamma,
            ratio_cap: self.ratio_cap,
        }
    }

    fn arch(&self, height: usize, width: usize) -> ArchConfig {
        ArchConfig {
            height,
            width,
            widths: self.widths,
            init_seed: self.seed,
        }
    }

    fn epochs_for(&self, t: usize) -> usize {
        match (t, self.first_step_epochs) {
            (1, Some(e)) => e,
            _ => self.epochs_per_step,
        }
    }

    fn lr_for(&self, t: usize) -> f64 {
        if t == 1 {
            self.learning_rate
        } else {
            self.increment_learning_rate.unwrap_or(self.learning_rate)
        }
    }

    pub fn task(&self, num_fg_classes: usize) -> Result<TaskSequence> {
        build_task_sequence(num_fg_classes, &self.protocol, self.mode)
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    velocity: SegModel,
}

impl Sgd {
    pub fn new(model: &SegModel, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            clip_norm: None,
            velocity: model.zeros_like(),
        }
    }

    pub fn step(&mut self, model: &mut SegModel, grads: &SegModel) {
        let (lr, mu, wd) = (self.learning_rate, self.momentum, self.weight_decay);
        let grads = grads.params();
        let norm = grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>().sqrt();
        let k = match self.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let params = model.params_mut();
        let vel = self.velocity.params_mut();
        for ((p, g), v) in params.into_iter().zip(grads).zip(vel) {
            for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + k * gi + wd * *pi;
                *pi -= lr * *vi;
            }
        }
    }
}

/// Mean loss components of one optimizer step or one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    /// Batch index inside the epoch; `None` for epoch summaries.
    pub batch: Option<usize>,
    pub images: usize,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepArtifacts {
    pub step: usize,
    pub checkpoint: Checkpoint,
    /// Step whose checkpoint served as the frozen model.
    pub frozen_step: Option<usize>,
    pub train_images: usize,
    pub epochs: Vec<LogRecord>,
    pub batches: Vec<LogRecord>,
    pub metrics: Option<MetricsReport>,
}

/// Averages breakdowns field by field; optional fields stay `None` only if
/// they are `None` everywhere.
pub fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mean = |f: &dyn Fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    let opt_mean = |f: &dyn Fn(&LossBreakdown) -> Option<f64>| {
        let vals: Vec<f64> = items.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    LossBreakdown {
        l_ps: opt_mean(&|b| b.l_ps),
        l_bps: opt_mean(&|b| b.l_bps),
        l_kd: mean(&|b| b.l_kd),
        l_ps_partner: opt_mean(&|b| b.l_ps_partner),
        l_kd_partner: opt_mean(&|b| b.l_kd_partner),
        l_ctx: opt_mean(&|b| b.l_ctx),
        l_dup: mean(&|b| b.l_dup),
        total: mean(&|b| b.total),
        alpha: items.first().map_or(0.0, |b| b.alpha),
        gamma: items.first().map_or(0.0, |b| b.gamma),
        beta: mean(&|b| b.beta),
        eta_old: opt_mean(&|b| b.eta_old),
        clamped: items.iter().map(|b| b.clamped).sum(),
    }
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

fn scale_grad(mut t: crate::tensor::Tensor3, k: f64) -> crate::tensor::Tensor3 {
    t.scale(k);
    t
}

/// Trains a fresh model on `C_0 ∪ C_1` with mean pixel cross-entropy.
pub fn train_first_step(config: &TrainConfig, data: &StepDataset) -> Result<StepArtifacts> {
    config.validate()?;
    if data.step != 1 {
        return Err(Error::Config(format!("first step expected, got step {}", data.step)));
    }
    let first = data.items.first().ok_or(Error::EmptyDataset)?;
    let num_classes = 1 + data.visible_classes.len();
    let mut model = SegModel::new(config.arch(first.height(), first.width()), num_classes)?;
    let mut classes = vec![0u8];
    classes.extend_from_slice(&data.visible_classes);
    let (epochs, batches) = fit_cross_entropy(config, &mut model, data)?;
    Ok(StepArtifacts {
        step: 1,
        checkpoint: Checkpoint {
            step: 1,
            classes,
            model,
        },
        frozen_step: None,
        train_images: data.len(),
        epochs,
        batches,
        metrics: None,
    })
}

fn fit_cross_entropy(config: &TrainConfig, model: &mut SegModel, data: &StepDataset) -> Result<(Vec<LogRecord>, Vec<LogRecord>)> {
    let t = data.step;
    let mut rng = step_rng(config.seed, t);
    let mut opt = Sgd::new(model, config.lr_for(t), config.momentum, config.weight_decay);
    opt.clip_norm = config.grad_clip_norm;
    let mut epoch_log = Vec::new();
    let mut batch_log = Vec::new();
    for epoch in 0..config.epochs_for(t) {
        // A batch of originals only: `batch_size` of them.
        let batches = epoch_batches(data.len(), config.batch_size * 2, &mut rng)?;
        let mut epoch_items = Vec::new();
        for (bi, batch) in batches.iter().enumerate() {
            let idx: Vec<usize> = batch.originals().collect();
            let mut grads = model.zeros_like();
            let k = 1.0 / idx.len() as f64;
            let mut items = Vec::with_capacity(idx.len());
            for &i in &idx {
                let item = &data.items[i];
                let cache = model.forward_cached(&item.image)?;
                let prob = softmax_scores(&cache.scores);
                let (value, g) = mean_cross_entropy(&prob, &item.mask)?;
                model.backward(&cache, Some(&scale_grad(g, k)), None, &mut grads);
                items.push(LossBreakdown {
                    l_ps: Some(value),
                    l_dup: value,
                    total: value,
                    beta: 1.0,
                    ..Default::default()
                });
            }
            opt.step(model, &grads);
            batch_log.push(LogRecord {
                step: t,
                epoch,
                batch: Some(bi),
                images: idx.len(),
                breakdown: mean_breakdown(&items),
            });
            epoch_items.extend(items);
        }
        let summary = mean_breakdown(&epoch_items);
        debug!("step {t} epoch {epoch}: loss {:.5}", summary.total);
        epoch_log.push(LogRecord {
            step: t,
            epoch,
            batch: None,
            images: epoch_items.len(),
            breakdown: summary,
        });
    }
    Ok((epoch_log, batch_log))
}

/// Per-image data fixed for a whole increment step.
struct Prepared {
    duplet: Duplet,
    eta: Option<WeightMap>,
    frozen_original: Option<PooledDescriptor>,
    frozen_erased: Option<PooledDescriptor>,
}

fn prepare(
    config: &TrainConfig,
    data: &StepDataset,
    frozen: &SegModel,
    old_classes: &[u8],
) -> Result<Vec<Prepared>> {
    let new_classes = &data.visible_classes;
    let fill = config.fill.resolve(&data.items);
    let ablation = config.ablation;
    data.items
        .iter()
        .map(|item| {
            let (feat, scores) = frozen.forward(&item.image)?;
            let pseudo = PseudoLabels::from_scores(&scores);
            let duplet = duplet_from_pseudo(item, &pseudo, new_classes, old_classes, config.tau, fill)?;
            let eta = ablation
                .uses_balance()
                .then(|| weight_map(&duplet.refined, &duplet.old_pixels, new_classes, config.ratio_cap));
            let frozen_erased = if ablation.partner() == Partner::Erased {
                Some(phi_pool(&frozen.forward(&duplet.erased_image)?.0))
            } else {
                None
            };
            Ok(Prepared {
                duplet,
                eta,
                frozen_original: Some(phi_pool(&feat)),
                frozen_erased,
            })
        })
        .collect()
}

/// One increment step: extends the head for `C_t` and trains against the
/// frozen previous model with the objective selected by `config.ablation`.
pub fn train_increment_step(
    config: &TrainConfig,
    data: &StepDataset,
    prev: Option<&Checkpoint>,
    old_classes: &[u8],
) -> Result<StepArtifacts> {
    config.validate()?;
    let t = data.step;
    let prev = prev.ok_or(Error::MissingOldModel(t))?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let frozen = &prev.model;
    let mut model = frozen.clone();
    model.extend_head(data.visible_classes.len());
    let mut classes = prev.classes.clone();
    classes.extend_from_slice(&data.visible_classes);

    let (epochs, batches) = if config.ablation == Ablation::Ft {
        fit_cross_entropy(config, &mut model, data)?
    } else {
        fit_duplets(config, &mut model, frozen, data, old_classes)?
    };
    Ok(StepArtifacts {
        step: t,
        checkpoint: Checkpoint {
            step: t,
            classes,
            model,
        },
        frozen_step: Some(prev.step),
        train_images: data.len(),
        epochs,
        batches,
        metrics: None,
    })
}

fn fit_duplets(
    config: &TrainConfig,
    model: &mut SegModel,
    frozen: &SegModel,
    data: &StepDataset,
    old_classes: &[u8],
) -> Result<(Vec<LogRecord>, Vec<LogRecord>)> {
    let t = data.step;
    let prepared = prepare(config, data, frozen, old_classes)?;
    let hyper = config.hyper();
    let partner = config.ablation.partner();
    let with_ctx = config.ablation.uses_ctx();
    let mut rng = step_rng(config.seed, t);
    let mut opt = Sgd::new(model, config.lr_for(t), config.momentum, config.weight_decay);
    opt.clip_norm = config.grad_clip_norm;
    let mut epoch_log = Vec::new();
    let mut batch_log = Vec::new();

    for epoch in 0..config.epochs_for(t) {
        // Without partners a batch holds `batch_size` originals; with them it
        // holds `batch_size / 2` originals and as many partners.
        let images_per_pair = if partner == Partner::None { 1 } else { 2 };
        let batches = epoch_batches(prepared.len(), config.batch_size * 2 / images_per_pair, &mut rng)?;
        let mut epoch_items = Vec::new();
        for (bi, batch) in batches.iter().enumerate() {
            let idx: Vec<usize> = batch.originals().collect();
            // Objective is averaged over every image in the batch, erased copies included.
            let k = 1.0 / (idx.len() * images_per_pair) as f64;
            let mut grads = model.zeros_like();
            let mut items = Vec::with_capacity(idx.len());
            for &i in &idx {
                let p = &prepared[i];
                let d = &p.duplet;
                let cache_x = model.forward_cached(&d.original.image)?;
                let cache_e = match partner {
                    Partner::Erased => Some(model.forward_cached(&d.erased_image)?),
                    _ => None,
                };
                let original = BranchOutputs {
                    scores: &cache_x.scores,
                    features: &cache_x.features,
                    target: &d.refined.labels,
                    beta: d.refined.beta,
                    eta: p.eta.as_ref(),
                    frozen: p.frozen_original.as_ref(),
                };
                let partner_out = match partner {
                    Partner::None => None,
                    Partner::Copy => Some(BranchOutputs {
                        eta: None,
                        ..original
                    }),
                    Partner::Erased => {
                        let ce = cache_e.as_ref().expect("erased forward");
                        Some(BranchOutputs {
                            scores: &ce.scores,
                            features: &ce.features,
                            target: &d.erased_target,
                            beta: d.refined.beta,
                            eta: None,
                            frozen: p.frozen_erased.as_ref(),
                        })
                    }
                };
                let outputs = DupletOutputs {
                    original,
                    partner: partner_out,
                    ctx: with_ctx.then_some((&d.old_pixels, old_classes)),
                };
                let (bd, g) = evaluate_duplet(&outputs, &hyper, true)?;
                let g = g.expect("gradients requested");
                let mut gs_x = scale_grad(g.original_scores, k);
                let mut gf_x = scale_grad(g.original_features, k);
                match (partner, g.partner_scores, g.partner_features) {
                    (Partner::Copy, Some(ps), Some(pf)) => {
                        // The copy shares the original's forward pass.
                        gs_x.add_assign(&scale_grad(ps, k));
                        gf_x.add_assign(&scale_grad(pf, k));
                    }
                    (Partner::Erased, Some(ps), Some(pf)) => {
                        let ce = cache_e.as_ref().expect("erased forward");
                        model.backward(ce, Some(&scale_grad(ps, k)), Some(&scale_grad(pf, k)), &mut grads);
                    }
                    _ => {}
                }
                model.backward(&cache_x, Some(&gs_x), Some(&gf_x), &mut grads);
                items.push(bd);
            }
            opt.step(model, &grads);
            batch_log.push(LogRecord {
                step: t,
                epoch,
                batch: Some(bi),
                images: idx.len(),
                breakdown: mean_breakdown(&items),
            });
            epoch_items.extend(items);
        }
        let summary = mean_breakdown(&epoch_items);
        debug!("step {t} epoch {epoch}: loss {:.5}", summary.total);
        epoch_log.push(LogRecord {
            step: t,
            epoch,
            batch: None,
            images: epoch_items.len(),
            breakdown: summary,
        });
    }
    Ok((epoch_log, batch_log))
}

/// Scores `model` on `test` after step `t`: classes not learned yet count as background.
pub fn evaluate(model: &SegModel, test: &[LabeledImage], task: &TaskSequence, t: usize) -> Result<MetricsReport> {
    let view = collapse_unseen(test, task, t)?;
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for item in &view {
        let pred = model.predict(&item.image)?;
        cm.accumulate(&pred, &item.mask)?;
    }
    miou(&cm, &ClassGroups::for_step(task, t)?)
}

/// Persists or recalls finished steps so interrupted runs can resume.
pub trait StepStore {
    fn load(&mut self, step: usize) -> Result<Option<StepArtifacts>>;
    fn save(&mut self, artifacts: &StepArtifacts) -> Result<()>;
}

/// Keeps nothing.
pub struct NoStore;

impl StepStore for NoStore {
    fn load(&mut self, _step: usize) -> Result<Option<StepArtifacts>> {
        Ok(None)
    }

    fn save(&mut self, _artifacts: &StepArtifacts) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinualResult {
    pub steps: Vec<StepArtifacts>,
    /// Metrics after the final step over every class.
    pub report: MetricsReport,
}

impl ContinualResult {
    pub fn final_model(&self) -> &SegModel {
        &self.steps.last().expect("at least one step").checkpoint.model
    }

    /// `(step, metrics)` after each step.
    pub fn history(&self) -> Vec<(usize, &MetricsReport)> {
        self.steps
            .iter()
            .filter_map(|s| s.metrics.as_ref().map(|m| (s.step, m)))
            .collect()
    }
}

/// Runs every step of the configured task on `train`, evaluating on `test`
/// after each step.
pub fn run_continual(config: &TrainConfig, train: &[LabeledImage], test: &[LabeledImage], num_fg_classes: usize) -> Result<ContinualResult> {
    run_continual_with(config, train, test, num_fg_classes, &mut NoStore)
}

pub fn run_continual_with(
    config: &TrainConfig,
    train: &[LabeledImage],
    test: &[LabeledImage],
    num_fg_classes: usize,
    store: &mut dyn StepStore,
) -> Result<ContinualResult> {
    config.validate()?;
    let task = config.task(num_fg_classes)?;
    let mut steps: Vec<StepArtifacts> = Vec::with_capacity(task.steps());
    for t in 1..=task.steps() {
        if let Some(done) = store.load(t)? {
            info!("step {t}: resumed from store");
            steps.push(done);
            continue;
        }
        let data = materialize_step(train, &task, t)?;
        info!("step {t}: {} images, classes {:?}", data.len(), data.visible_classes);
        let mut artifacts = if t == 1 {
            train_first_step(config, &data)?
        } else {
            let prev = steps.last().map(|s| &s.checkpoint);
            train_increment_step(config, &data, prev, &task.old_classes(t)?)?
        };
        artifacts.metrics = Some(evaluate(&artifacts.checkpoint.model, test, &task, t)?);
        store.save(&artifacts)?;
        steps.push(artifacts);
    }
    let report = steps
        .last()
        .and_then(|s| s.metrics.clone())
        .expect("every step is evaluated");
    Ok(ContinualResult { steps, report })
}
