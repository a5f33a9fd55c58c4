//! Fusion of ground-truth new-class labels with old-model pseudo labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, softmax_scores, ScoreMap, SegModel};
use crate::tensor::{LabelMap, Tensor3, BACKGROUND_LABEL, IGNORE_LABEL};

/// Old-model argmax labels with their softmax probability.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: LabelMap,
    /// Row-major, one value per pixel.
    pub confidence: Vec<f64>,
}

impl PseudoLabels {
    pub fn from_scores(scores: &ScoreMap) -> Self {
        let probs = softmax_scores(scores);
        let labels = argmax(&probs.0);
        let n = labels.len();
        let data = probs.0.data();
        let confidence = labels
            .data()
            .iter()
            .enumerate()
            .map(|(p, &c)| data[c as usize * n + p])
            .collect();
        Self { labels, confidence }
    }
}

/// Runs the frozen previous-step model. There is no old model at the first
/// step, which is reported as [`Error::MissingOldModel`].
pub fn predict_pseudo(old_model: Option<&SegModel>, image: &Tensor3) -> Result<PseudoLabels> {
    let model = old_model.ok_or(Error::MissingOldModel(1))?;
    let (_, scores) = model.forward(image)?;
    Ok(PseudoLabels::from_scores(&scores))
}

/// Per-pixel training target after fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedTarget {
    pub labels: LabelMap,
    /// Accepted old-class candidates over all old-class candidates.
    pub beta: f64,
    /// Row-major mask of pixels that took an accepted pseudo label.
    pub accepted_mask: Vec<bool>,
    pub candidates: usize,
    pub accepted: usize,
}

impl RefinedTarget {
    /// Target used when no old model exists: the ground truth itself with `beta = 1`.
    pub fn from_ground_truth(gt: &LabelMap) -> Self {
        Self {
            labels: gt.clone(),
            beta: 1.0,
            accepted_mask: vec![false; gt.len()],
            candidates: 0,
            accepted: 0,
        }
    }
}

/// Fuses the step mask with pseudo labels.
///
/// Pixels outside `C_t` whose pseudo label is an old class are candidates.
/// A background candidate with confidence above `tau` takes the pseudo label;
/// any other background candidate becomes ignore. Ignore pixels stay ignore.
pub fn fuse_targets(gt: &LabelMap, pseudo: &PseudoLabels, new_classes: &[u8], tau: f64) -> Result<RefinedTarget> {
    gt.check_extent(pseudo.labels.height(), pseudo.labels.width())?;
    if pseudo.confidence.len() != gt.len() {
        return Err(Error::shape(gt.len(), pseudo.confidence.len()));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau {tau} outside [0, 1]")));
    }
    let mut is_new = [false; 256];
    for &c in new_classes {
        is_new[c as usize] = true;
    }
    let mut labels = gt.clone();
    let mut accepted_mask = vec![false; gt.len()];
    let (mut candidates, mut accepted) = (0usize, 0usize);
    for (p, (&g, slot)) in gt.data().iter().zip(labels.data_mut()).enumerate() {
        if is_new[g as usize] {
            continue;
        }
        let guess = pseudo.labels.data()[p];
        let old_guess = guess != BACKGROUND_LABEL && guess != IGNORE_LABEL && !is_new[guess as usize];
        if !old_guess {
            continue;
        }
        candidates += 1;
        if g != BACKGROUND_LABEL {
            continue;
        }
        if pseudo.confidence[p] > tau {
            *slot = guess;
            accepted_mask[p] = true;
            accepted += 1;
        } else {
            *slot = IGNORE_LABEL;
        }
    }
    let beta = if candidates == 0 {
        0.0
    } else {
        accepted as f64 / candidates as f64
    };
    Ok(RefinedTarget {
        labels,
        beta,
        accepted_mask,
        candidates,
        accepted,
    })
}

/// Pixel locations `(w, h)`, sorted row-major.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelSet {
    pub coords: Vec<(usize, usize)>,
}

impl PixelSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn contains(&self, w: usize, h: usize) -> bool {
        self.coords.binary_search_by(|&(cw, ch)| (ch, cw).cmp(&(h, w))).is_ok()
    }
}

/// Locations whose refined label is one of `old_classes`.
pub fn old_pixel_set(rt: &RefinedTarget, old_classes: &[u8]) -> PixelSet {
    let mut is_old = [false; 256];
    for &c in old_classes {
        is_old[c as usize] = true;
    }
    let w = rt.labels.width();
    let coords = rt
        .labels
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &l)| is_old[l as usize])
        .map(|(p, _)| (p % w, p / w))
        .collect();
    PixelSet { coords }
}
