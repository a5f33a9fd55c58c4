//! Confusion matrices and grouped mIoU.

use serde::{Deserialize, Serialize};

use crate::data::TaskSequence;
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, IGNORE_LABEL};

/// `counts[g][p]`: pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// Matrix over `num_classes` labels (background included).
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image. Ignore pixels in the ground truth are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        gt.check_extent(pred.height(), pred.width())?;
        let k = self.num_classes;
        for (&g, &p) in gt.data().iter().zip(pred.data()) {
            if g == IGNORE_LABEL {
                continue;
            }
            for label in [g, p] {
                if label as usize >= k {
                    return Err(Error::LabelOutOfRange { label, num_classes: k });
                }
            }
        }
        for (&g, &p) in gt.data().iter().zip(pred.data()) {
            if g != IGNORE_LABEL {
                self.counts[g as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape(self.num_classes, other.num_classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class never occurs.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let k = self.num_classes;
        let tp = self.get(class, class);
        let fn_: u64 = (0..k).map(|p| self.get(class, p)).sum::<u64>() - tp;
        let fp: u64 = (0..k).map(|g| self.get(g, class)).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }
}

/// Class groups reported separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassGroups {
    /// Background and `C_1`.
    pub initial: Vec<u8>,
    /// `C_{2:t}`.
    pub incremented: Vec<u8>,
    /// Every class up to step `t`, background included.
    pub all: Vec<u8>,
}

impl ClassGroups {
    pub fn for_step(task: &TaskSequence, t: usize) -> Result<Self> {
        let mut initial = vec![0];
        initial.extend_from_slice(task.classes_at(1)?);
        let seen = task.seen_classes(t)?;
        let incremented = seen[task.classes_at(1)?.len()..].to_vec();
        let all = std::iter::once(0).chain(seen).collect();
        Ok(Self {
            initial,
            incremented,
            all,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub initial: Option<f64>,
    pub incremented: Option<f64>,
    pub all: Option<f64>,
}

fn group_mean(ious: &[Option<f64>], group: &[u8]) -> Option<f64> {
    let defined: Vec<f64> = group.iter().filter_map(|&c| ious[c as usize]).collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Per-class IoU and equal-weight group means over defined classes.
pub fn miou(cm: &ConfusionMatrix, groups: &ClassGroups) -> Result<MetricsReport> {
    let k = cm.num_classes();
    for &c in groups.initial.iter().chain(&groups.incremented).chain(&groups.all) {
        if c as usize >= k {
            return Err(Error::LabelOutOfRange { label: c, num_classes: k });
        }
    }
    let per_class_iou: Vec<Option<f64>> = (0..k).map(|c| cm.iou(c)).collect();
    Ok(MetricsReport {
        initial: group_mean(&per_class_iou, &groups.initial),
        incremented: group_mean(&per_class_iou, &groups.incremented),
        all: group_mean(&per_class_iou, &groups.all),
        per_class_iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_task_sequence, Mode};

    fn groups(initial: &[u8], incremented: &[u8], all: &[u8]) -> ClassGroups {
        ClassGroups {
            initial: initial.to_vec(),
            incremented: incremented.to_vec(),
            all: all.to_vec(),
        }
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let gt = LabelMap::from_rows(&[&[0, 1], &[2, 2]]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(1, 1), cm.get(2, 2), cm.total()), (1, 1, 2, 4));
        let r = miou(&cm, &groups(&[0, 1], &[2], &[0, 1, 2])).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(1.0); 3]);
        assert_eq!((r.initial, r.incremented, r.all), (Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn ignore_pixels_are_skipped() {
        let gt = LabelMap::filled(2, 2, IGNORE_LABEL);
        let pred = LabelMap::filled(2, 2, 1);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(3));
    }

    #[test]
    fn three_entry_example() {
        let gt = LabelMap::from_rows(&[&[1, 1], &[2, 255]]).unwrap();
        let pred = LabelMap::from_rows(&[&[1, 2], &[2, 2]]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!((cm.get(1, 1), cm.get(1, 2), cm.get(2, 2), cm.total()), (1, 1, 1, 3));
        let r = miou(&cm, &groups(&[0, 1], &[2], &[0, 1, 2])).unwrap();
        assert_eq!(r.per_class_iou, vec![None, Some(0.5), Some(0.5)]);
        assert_eq!(r.initial, Some(0.5));
        assert_eq!(r.all, Some(0.5));
    }

    #[test]
    fn out_of_range_labels() {
        let mut cm = ConfusionMatrix::new(2);
        let gt = LabelMap::filled(1, 1, 3);
        assert!(cm.accumulate(&gt, &gt).is_err());
        let gt = LabelMap::filled(1, 1, 1);
        assert!(cm.accumulate(&LabelMap::filled(1, 1, 2), &gt).is_err());
        assert_eq!(cm.total(), 0);
        assert!(miou(&cm, &groups(&[5], &[], &[])).is_err());
    }

    #[test]
    fn empty_matrix_is_undefined() {
        let r = miou(&ConfusionMatrix::new(3), &groups(&[0, 1], &[2], &[0, 1, 2])).unwrap();
        assert!(r.per_class_iou.iter().all(Option::is_none));
        assert_eq!((r.initial, r.incremented, r.all), (None, None, None));
    }

    #[test]
    fn groups_follow_task() {
        let task = build_task_sequence(6, "4-1", Mode::Overlapped).unwrap();
        let g = ClassGroups::for_step(&task, 2).unwrap();
        assert_eq!(g.initial, vec![0, 1, 2, 3, 4]);
        assert_eq!(g.incremented, vec![5]);
        assert_eq!(g.all, vec![0, 1, 2, 3, 4, 5]);
        let g = ClassGroups::for_step(&task, 1).unwrap();
        assert!(g.incremented.is_empty());
    }
}
