//! Loss terms of the duplet objective and their gradients w.r.t. model outputs.
//!
//! All reductions run in row-major pixel order and channel order so values
//! are reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{phi_pool, phi_pool_backward, softmax_scores, FeatureMap, PooledDescriptor, ProbMap, ScoreMap};
use crate::pseudo::{PixelSet, RefinedTarget};
use crate::tensor::{LabelMap, Tensor3, IGNORE_LABEL};

/// Lower clamp applied to probabilities before taking the log.
pub const LOG_EPS: f64 = 1e-12;

/// Default stand-in for `N_old / N_new` when an image has old pixels but no
/// new-class pixels.
pub const DEFAULT_RATIO_CAP: f64 = 20.0;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-pixel loss weights `eta`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMap {
    pub height: usize,
    pub width: usize,
    pub eta: Vec<f64>,
    /// Weight given to old-class pixels, if there are any.
    pub old_weight: Option<f64>,
}

impl WeightMap {
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            eta: vec![1.0; height * width],
            old_weight: None,
        }
    }
}

/// `0.5 + sigmoid(N_old / N_new)` on old pixels, 1 elsewhere. `N_new` counts
/// refined labels in `new_classes`; with no new pixels the ratio is `ratio_cap`.
pub fn weight_map(rt: &RefinedTarget, old_pixels: &PixelSet, new_classes: &[u8], ratio_cap: f64) -> WeightMap {
    let (h, w) = (rt.labels.height(), rt.labels.width());
    let mut map = WeightMap::ones(h, w);
    if old_pixels.is_empty() {
        return map;
    }
    let n_old = old_pixels.len() as f64;
    let n_new = rt.labels.data().iter().filter(|l| new_classes.contains(l)).count();
    let ratio = if n_new == 0 { ratio_cap } else { n_old / n_new as f64 };
    let eta = 0.5 + sigmoid(ratio);
    for &(x, y) in &old_pixels.coords {
        map.eta[y * w + x] = eta;
    }
    map.old_weight = Some(eta);
    map
}

/// Value of a pseudo-label cross-entropy and how many probabilities hit the clamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    pub clamped: usize,
}

fn check_labels(prob: &Tensor3, labels: &LabelMap) -> Result<()> {
    labels.check_extent(prob.height(), prob.width())?;
    let classes = prob.channels();
    if let Some(&bad) = labels
        .data()
        .iter()
        .find(|&&l| l != IGNORE_LABEL && l as usize >= classes)
    {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: classes,
        });
    }
    Ok(())
}

/// `-(beta / WH) * sum_p eta_p * log prob_p[label_p]` over non-ignore pixels.
pub fn pseudo_cross_entropy(prob: &ProbMap, labels: &LabelMap, beta: f64, eta: Option<&WeightMap>) -> Result<CrossEntropy> {
    let p = &prob.0;
    check_labels(p, labels)?;
    if let Some(e) = eta {
        labels.check_extent(e.height, e.width)?;
    }
    let n = p.plane_len();
    let data = p.data();
    let mut sum = 0.0;
    let mut clamped = 0;
    for (i, &l) in labels.data().iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        let mut q = data[l as usize * n + i];
        if q < LOG_EPS {
            q = LOG_EPS;
            clamped += 1;
        }
        let weight = eta.map_or(1.0, |e| e.eta[i]);
        sum += weight * q.ln();
    }
    Ok(CrossEntropy {
        value: -beta / n as f64 * sum,
        clamped,
    })
}

/// Pseudo-label cross-entropy against a refined target.
pub fn ps_loss(prob: &ProbMap, rt: &RefinedTarget) -> Result<f64> {
    Ok(pseudo_cross_entropy(prob, &rt.labels, rt.beta, None)?.value)
}

/// Class-balanced pseudo-label cross-entropy.
pub fn bps_loss(prob: &ProbMap, rt: &RefinedTarget, eta: &WeightMap) -> Result<f64> {
    Ok(pseudo_cross_entropy(prob, &rt.labels, rt.beta, Some(eta))?.value)
}

/// Gradient of [`pseudo_cross_entropy`] w.r.t. the pre-softmax scores.
pub fn pseudo_cross_entropy_grad(prob: &ProbMap, labels: &LabelMap, beta: f64, eta: Option<&WeightMap>) -> Tensor3 {
    let p = &prob.0;
    let (c, h, w) = p.shape();
    let n = h * w;
    let mut grad = Tensor3::zeros(c, h, w);
    let scale = beta / n as f64;
    let src = p.data();
    let dst = grad.data_mut();
    for (i, &l) in labels.data().iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        let k = scale * eta.map_or(1.0, |e| e.eta[i]);
        for ch in 0..c {
            let target = if ch == l as usize { 1.0 } else { 0.0 };
            dst[ch * n + i] = k * (src[ch * n + i] - target);
        }
    }
    grad
}

/// Mean cross-entropy over non-ignore pixels (first-step objective).
pub fn mean_cross_entropy(prob: &ProbMap, labels: &LabelMap) -> Result<(f64, Tensor3)> {
    let valid = labels.data().iter().filter(|&&l| l != IGNORE_LABEL).count();
    if valid == 0 {
        let (c, h, w) = prob.0.shape();
        return Ok((0.0, Tensor3::zeros(c, h, w)));
    }
    // Reuse the pseudo-label form: beta = WH / valid turns the 1/WH into 1/valid.
    let beta = prob.0.plane_len() as f64 / valid as f64;
    let value = pseudo_cross_entropy(prob, labels, beta, None)?.value;
    Ok((value, pseudo_cross_entropy_grad(prob, labels, beta, None)))
}

/// Squared distance between pooled descriptors of the current and frozen features.
pub fn kd_loss(feat_t: &FeatureMap, feat_prev: &FeatureMap) -> Result<f64> {
    feat_t.0.check_shape(&feat_prev.0)?;
    kd_loss_to(feat_t, &phi_pool(feat_prev))
}

/// [`kd_loss`] against a precomputed frozen descriptor.
pub fn kd_loss_to(feat_t: &FeatureMap, prev: &PooledDescriptor) -> Result<f64> {
    let cur = phi_pool(feat_t);
    check_descriptor(&cur, prev)?;
    Ok(cur.data.iter().zip(&prev.data).map(|(a, b)| (a - b) * (a - b)).sum())
}

fn check_descriptor(cur: &PooledDescriptor, prev: &PooledDescriptor) -> Result<()> {
    if (cur.rows, cur.channels) != (prev.rows, prev.channels) {
        return Err(Error::shape(
            format!("{}x{}", prev.rows, prev.channels),
            format!("{}x{}", cur.rows, cur.channels),
        ));
    }
    Ok(())
}

/// Gradient of [`kd_loss_to`] w.r.t. the current feature map.
pub fn kd_loss_grad(feat_t: &FeatureMap, prev: &PooledDescriptor) -> Result<Tensor3> {
    let cur = phi_pool(feat_t);
    check_descriptor(&cur, prev)?;
    let grad = PooledDescriptor {
        rows: cur.rows,
        channels: cur.channels,
        data: cur.data.iter().zip(&prev.data).map(|(a, b)| 2.0 * (a - b)).collect(),
    };
    let (c, h, w) = feat_t.0.shape();
    Ok(phi_pool_backward(&grad, c, h, w))
}

fn check_ctx(score_x: &ScoreMap, score_xbar: &ScoreMap, old_pixels: &PixelSet, old_classes: &[u8]) -> Result<()> {
    score_x.0.check_shape(&score_xbar.0)?;
    let (c, h, w) = score_x.0.shape();
    if let Some(&bad) = old_classes.iter().find(|&&k| k as usize >= c) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: c,
        });
    }
    if old_pixels.coords.iter().any(|&(x, y)| x >= w || y >= h) {
        return Err(Error::shape(format!("pixels inside {h}x{w}"), "out-of-bounds pixel"));
    }
    Ok(())
}

/// Sum over old pixels and old classes of the squared score difference
/// between the erased and the original image.
pub fn ctx_loss(score_x: &ScoreMap, score_xbar: &ScoreMap, old_pixels: &PixelSet, old_classes: &[u8]) -> Result<f64> {
    check_ctx(score_x, score_xbar, old_pixels, old_classes)?;
    let (a, b) = (&score_x.0, &score_xbar.0);
    let mut sum = 0.0;
    for &(x, y) in &old_pixels.coords {
        for &c in old_classes {
            let d = b.get(c as usize, y, x) - a.get(c as usize, y, x);
            sum += d * d;
        }
    }
    Ok(sum)
}

/// Gradients of [`ctx_loss`] w.r.t. `(score_x, score_xbar)`.
pub fn ctx_loss_grad(
    score_x: &ScoreMap,
    score_xbar: &ScoreMap,
    old_pixels: &PixelSet,
    old_classes: &[u8],
) -> Result<(Tensor3, Tensor3)> {
    check_ctx(score_x, score_xbar, old_pixels, old_classes)?;
    let (a, b) = (&score_x.0, &score_xbar.0);
    let (c, h, w) = a.shape();
    let mut ga = Tensor3::zeros(c, h, w);
    let mut gb = Tensor3::zeros(c, h, w);
    for &(x, y) in &old_pixels.coords {
        for &k in old_classes {
            let d = 2.0 * (b.get(k as usize, y, x) - a.get(k as usize, y, x));
            gb.set(k as usize, y, x, d);
            ga.set(k as usize, y, x, -d);
        }
    }
    Ok((ga, gb))
}

/// Weights of the duplet objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub alpha: f64,
    pub gamma: f64,
    pub ratio_cap: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 0.01,
            ratio_cap: DEFAULT_RATIO_CAP,
        }
    }
}

/// Current-model outputs and targets for one member of a duplet.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutputs<'a> {
    pub scores: &'a ScoreMap,
    pub features: &'a FeatureMap,
    pub target: &'a LabelMap,
    pub beta: f64,
    /// Class-balance weights; plain pseudo-label loss when absent.
    pub eta: Option<&'a WeightMap>,
    /// Pooled frozen-model features of the same image.
    pub frozen: Option<&'a PooledDescriptor>,
}

/// Everything needed to evaluate the objective of one original image and
/// its optional partner (erased or duplicated copy).
#[derive(Debug, Clone, Copy)]
pub struct DupletOutputs<'a> {
    pub original: BranchOutputs<'a>,
    pub partner: Option<BranchOutputs<'a>>,
    /// Consistency term between original and partner on these pixels.
    pub ctx: Option<(&'a PixelSet, &'a [u8])>,
}

/// Per-pair loss components. Optional terms are `None` when the active
/// configuration never evaluates them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ps: Option<f64>,
    pub l_bps: Option<f64>,
    pub l_kd: f64,
    pub l_ps_partner: Option<f64>,
    pub l_kd_partner: Option<f64>,
    pub l_ctx: Option<f64>,
    pub l_dup: f64,
    pub total: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub eta_old: Option<f64>,
    pub clamped: usize,
}

/// Gradients of the pair objective w.r.t. each branch's scores and features.
#[derive(Debug, Clone)]
pub struct DupletGrads {
    pub original_scores: Tensor3,
    pub original_features: Tensor3,
    pub partner_scores: Option<Tensor3>,
    pub partner_features: Option<Tensor3>,
}

struct Branch {
    ce: f64,
    kd: f64,
    clamped: usize,
    grad_scores: Option<Tensor3>,
    grad_features: Option<Tensor3>,
}

fn eval_branch(b: &BranchOutputs<'_>, alpha: f64, want_grads: bool) -> Result<Branch> {
    let frozen = b.frozen.ok_or(Error::MissingOldModel(2))?;
    let prob = softmax_scores(b.scores);
    let ce = pseudo_cross_entropy(&prob, b.target, b.beta, b.eta)?;
    let kd = kd_loss_to(b.features, frozen)?;
    let (grad_scores, grad_features) = if want_grads {
        let gs = pseudo_cross_entropy_grad(&prob, b.target, b.beta, b.eta);
        let mut gf = kd_loss_grad(b.features, frozen)?;
        gf.scale(alpha);
        (Some(gs), Some(gf))
    } else {
        (None, None)
    };
    Ok(Branch {
        ce: ce.value,
        kd,
        clamped: ce.clamped,
        grad_scores,
        grad_features,
    })
}

/// Pair objective: `[ce(x) + a kd(x)] + [ce(x') + a kd(x')] + g ctx(x, x')`,
/// where `ce` is the balanced form on the original when `eta` is given.
pub fn evaluate_duplet(out: &DupletOutputs<'_>, hyper: &Hyper, want_grads: bool) -> Result<(LossBreakdown, Option<DupletGrads>)> {
    let orig = eval_branch(&out.original, hyper.alpha, want_grads)?;
    let partner = out
        .partner
        .as_ref()
        .map(|p| eval_branch(p, hyper.alpha, want_grads))
        .transpose()?;

    let mut bd = LossBreakdown {
        alpha: hyper.alpha,
        gamma: hyper.gamma,
        beta: out.original.beta,
        l_kd: orig.kd,
        clamped: orig.clamped,
        ..Default::default()
    };
    if out.original.eta.is_some() {
        bd.l_bps = Some(orig.ce);
        bd.eta_old = out.original.eta.and_then(|e| e.old_weight);
    } else {
        bd.l_ps = Some(orig.ce);
    }
    bd.l_dup = orig.ce + hyper.alpha * orig.kd;
    if let Some(p) = &partner {
        bd.l_ps_partner = Some(p.ce);
        bd.l_kd_partner = Some(p.kd);
        bd.clamped += p.clamped;
        bd.l_dup += p.ce + hyper.alpha * p.kd;
    }

    let mut ctx_grads = None;
    bd.total = bd.l_dup;
    if let Some((pixels, classes)) = out.ctx {
        let partner_out = out
            .partner
            .as_ref()
            .ok_or_else(|| Error::Config("consistency term needs a partner image".into()))?;
        let ctx = ctx_loss(out.original.scores, partner_out.scores, pixels, classes)?;
        bd.l_ctx = Some(ctx);
        bd.total = bd.l_dup + hyper.gamma * ctx;
        if want_grads {
            ctx_grads = Some(ctx_loss_grad(out.original.scores, partner_out.scores, pixels, classes)?);
        }
    }

    let grads = if want_grads {
        let mut original_scores = orig.grad_scores.expect("requested");
        let mut partner_scores = partner.as_ref().map(|p| p.grad_scores.clone().expect("requested"));
        if let Some((mut ga, mut gb)) = ctx_grads {
            ga.scale(hyper.gamma);
            gb.scale(hyper.gamma);
            original_scores.add_assign(&ga);
            if let Some(ps) = partner_scores.as_mut() {
                ps.add_assign(&gb);
            }
        }
        Some(DupletGrads {
            original_scores,
            original_features: orig.grad_features.expect("requested"),
            partner_scores,
            partner_features: partner.and_then(|p| p.grad_features),
        })
    } else {
        None
    };
    Ok((bd, grads))
}

/// Loss breakdown of one pair without gradients.
pub fn total_loss(out: &DupletOutputs<'_>, hyper: &Hyper) -> Result<LossBreakdown> {
    Ok(evaluate_duplet(out, hyper, false)?.0)
}
