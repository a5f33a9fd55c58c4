//! Task sequences (class partitions per learning step) and per-step datasets.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::synth::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::{BACKGROUND_LABEL, IGNORE_LABEL};

/// How images are assigned to learning steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Step `t` only sees images whose classes are old or current.
    Disjoint,
    /// Step `t` sees any image with a current-class pixel; future classes
    /// appear as background.
    Overlapped,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Disjoint => "disjoint",
            Mode::Overlapped => "overlapped",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "disjoint" => Ok(Mode::Disjoint),
            "overlapped" | "overlap" => Ok(Mode::Overlapped),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Ordered partition `C_1..C_T` of the foreground classes.
///
/// Classes are numbered in the order they are learned, so the head channel
/// of class `c` is always `c`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSequence {
    partitions: Vec<Vec<u8>>,
    mode: Mode,
}

impl TaskSequence {
    pub fn new(partitions: Vec<Vec<u8>>, mode: Mode) -> Result<Self> {
        if partitions.is_empty() || partitions.iter().any(Vec::is_empty) {
            return Err(Error::Config("task sequence needs at least one non-empty step".into()));
        }
        let mut seen = BTreeSet::new();
        for &c in partitions.iter().flatten() {
            if c == BACKGROUND_LABEL || c == IGNORE_LABEL || !seen.insert(c) {
                return Err(Error::Config(format!("class {c} is reserved or repeated")));
            }
        }
        let in_order = partitions
            .iter()
            .flatten()
            .enumerate()
            .all(|(i, &c)| c as usize == i + 1);
        if !in_order {
            return Err(Error::Config("partitions must list classes 1..=K in order".into()));
        }
        Ok(Self { partitions, mode })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn steps(&self) -> usize {
        self.partitions.len()
    }

    pub fn partitions(&self) -> &[Vec<u8>] {
        &self.partitions
    }

    pub fn num_fg_classes(&self) -> usize {
        self.partitions.iter().map(Vec::len).sum()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// `C_t` (1-based step index).
    pub fn classes_at(&self, t: usize) -> Result<&[u8]> {
        self.check_step(t)?;
        Ok(&self.partitions[t - 1])
    }

    /// `C_{1:t}`.
    pub fn seen_classes(&self, t: usize) -> Result<Vec<u8>> {
        self.check_step(t)?;
        Ok(self.partitions[..t].iter().flatten().copied().collect())
    }

    /// `C_{1:t-1}`; empty at the first step.
    pub fn old_classes(&self, t: usize) -> Result<Vec<u8>> {
        self.check_step(t)?;
        Ok(self.partitions[..t - 1].iter().flatten().copied().collect())
    }

    /// `C_{t+1:T}`.
    pub fn future_classes(&self, t: usize) -> Result<Vec<u8>> {
        self.check_step(t)?;
        Ok(self.partitions[t..].iter().flatten().copied().collect())
    }
}

/// Builds the partition named by `protocol` (`"a-b"`: `a` classes first, then
/// steps of `b`). `"a-0"` is a single step with all classes.
pub fn build_task_sequence(total_fg_classes: usize, protocol: &str, mode: Mode) -> Result<TaskSequence> {
    let err = |reason: &str| Error::InvalidProtocol {
        protocol: protocol.to_string(),
        classes: total_fg_classes,
        reason: reason.to_string(),
    };
    let (first, step) = protocol
        .split_once('-')
        .ok_or_else(|| err("expected the form `a-b`"))?;
    let first: usize = first.trim().parse().map_err(|_| err("`a` is not an integer"))?;
    let step: usize = step.trim().parse().map_err(|_| err("`b` is not an integer"))?;
    if first == 0 || first > total_fg_classes {
        return Err(err("first step must hold between 1 and K classes"));
    }
    if total_fg_classes >= IGNORE_LABEL as usize {
        return Err(err("too many classes"));
    }
    let remaining = total_fg_classes - first;
    let mut partitions = vec![(1..=first as u8).collect::<Vec<_>>()];
    if step == 0 {
        if remaining != 0 {
            return Err(err("`a-0` requires a = K"));
        }
    } else {
        if remaining == 0 || remaining % step != 0 {
            return Err(err("a + b * (T - 1) must equal K with T >= 2"));
        }
        let mut next = first as u8 + 1;
        for _ in 0..remaining / step {
            partitions.push((next..next + step as u8).collect());
            next += step as u8;
        }
    }
    TaskSequence::new(partitions, mode)
}

/// Images visible at step `t`, with every label outside `C_t` collapsed to background.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDataset {
    pub step: usize,
    pub items: Vec<LabeledImage>,
    pub visible_classes: Vec<u8>,
}

impl StepDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Selects and relabels the images of step `t` according to the task's mode.
pub fn materialize_step(dataset: &[LabeledImage], task: &TaskSequence, t: usize) -> Result<StepDataset> {
    let current = task.classes_at(t)?;
    let seen = task.seen_classes(t)?;
    let mut is_current = [false; 256];
    let mut is_seen = [false; 256];
    for &c in current {
        is_current[c as usize] = true;
    }
    for &c in &seen {
        is_seen[c as usize] = true;
    }

    let items = dataset
        .iter()
        .filter(|item| {
            let fg = item.mask.foreground_classes();
            let has_current = fg.iter().any(|&c| is_current[c as usize]);
            match task.mode() {
                Mode::Overlapped => has_current,
                Mode::Disjoint => has_current && fg.iter().all(|&c| is_seen[c as usize]),
            }
        })
        .map(|item| {
            let mut out = item.clone();
            for v in out.mask.data_mut() {
                if *v != IGNORE_LABEL && !is_current[*v as usize] {
                    *v = BACKGROUND_LABEL;
                }
            }
            out
        })
        .collect();

    Ok(StepDataset {
        step: t,
        items,
        visible_classes: current.to_vec(),
    })
}

/// Test-time view after step `t`: classes not yet learned become background.
pub fn collapse_unseen(dataset: &[LabeledImage], task: &TaskSequence, t: usize) -> Result<Vec<LabeledImage>> {
    let seen = task.seen_classes(t)?;
    let mut is_seen = [false; 256];
    for &c in &seen {
        is_seen[c as usize] = true;
    }
    Ok(dataset
        .iter()
        .map(|item| {
            let mut out = item.clone();
            for v in out.mask.data_mut() {
                if *v != IGNORE_LABEL && !is_seen[*v as usize] {
                    *v = BACKGROUND_LABEL;
                }
            }
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{LabelMap, Tensor3};

    fn item(id: &str, rows: &[&[u8]]) -> LabeledImage {
        let mask = LabelMap::from_rows(rows).unwrap();
        let image = Tensor3::zeros(3, mask.height(), mask.width());
        LabeledImage::new(id, image, mask).unwrap()
    }

    #[test]
    fn named_protocols() {
        let t = build_task_sequence(20, "19-1", Mode::Overlapped).unwrap();
        assert_eq!(t.steps(), 2);
        assert_eq!(t.classes_at(1).unwrap(), (1..=19).collect::<Vec<u8>>().as_slice());
        assert_eq!(t.classes_at(2).unwrap(), &[20]);

        let t = build_task_sequence(20, "15-1", Mode::Disjoint).unwrap();
        let sizes: Vec<_> = t.partitions().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![15, 1, 1, 1, 1, 1]);

        let t = build_task_sequence(20, "15-5", Mode::Disjoint).unwrap();
        assert_eq!(t.steps(), 2);

        let t = build_task_sequence(20, "20-0", Mode::Disjoint).unwrap();
        assert_eq!(t.steps(), 1);
        assert_eq!(t.num_fg_classes(), 20);
    }

    #[test]
    fn protocol_arithmetic_is_checked() {
        for bad in ["15-2", "21-1", "0-5", "19", "x-1", "19-0", "20-1"] {
            assert!(
                matches!(
                    build_task_sequence(20, bad, Mode::Disjoint),
                    Err(Error::InvalidProtocol { .. })
                ),
                "{bad} accepted"
            );
        }
    }

    #[test]
    fn partitions_must_be_ordered() {
        assert!(TaskSequence::new(vec![vec![2], vec![1]], Mode::Disjoint).is_err());
        assert!(TaskSequence::new(vec![vec![1], vec![1]], Mode::Disjoint).is_err());
        assert!(TaskSequence::new(vec![], Mode::Disjoint).is_err());
        assert!(TaskSequence::new(vec![vec![1, 2], vec![3]], Mode::Disjoint).is_ok());
    }

    #[test]
    fn step_views() {
        let t = build_task_sequence(6, "4-1", Mode::Overlapped).unwrap();
        assert_eq!(t.old_classes(1).unwrap(), Vec::<u8>::new());
        assert_eq!(t.old_classes(3).unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(t.future_classes(2).unwrap(), vec![6]);
        assert!(matches!(t.classes_at(4), Err(Error::StepOutOfRange { t: 4, steps: 3 })));
        assert!(t.classes_at(0).is_err());
    }

    #[test]
    fn disjoint_excludes_future_overlapped_relabels() {
        let task = build_task_sequence(20, "15-1", Mode::Disjoint).unwrap();
        let data = vec![item("a", &[&[1, 17], &[0, 255]])];
        let d = materialize_step(&data, &task, 1).unwrap();
        assert!(d.is_empty());

        let task = build_task_sequence(20, "15-1", Mode::Overlapped).unwrap();
        let d = materialize_step(&data, &task, 1).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.items[0].mask, LabelMap::from_rows(&[&[1, 0], &[0, 255]]).unwrap());
    }

    #[test]
    fn no_current_pixel_means_excluded() {
        let data = vec![item("a", &[&[3, 3], &[0, 0]])];
        for mode in [Mode::Disjoint, Mode::Overlapped] {
            let task = build_task_sequence(20, "15-1", mode).unwrap();
            assert!(materialize_step(&data, &task, 2).unwrap().is_empty());
        }
    }

    #[test]
    fn single_step_is_identity() {
        let data = vec![item("a", &[&[1, 2], &[0, 255]]), item("b", &[&[3, 0], &[0, 0]])];
        let task = build_task_sequence(3, "3-0", Mode::Disjoint).unwrap();
        let d = materialize_step(&data, &task, 1).unwrap();
        assert_eq!(d.items, data);
    }

    #[test]
    fn relabeling_is_idempotent() {
        let data = vec![item("a", &[&[1, 5], &[6, 255]]), item("b", &[&[5, 0], &[2, 0]])];
        let task = build_task_sequence(6, "4-2", Mode::Overlapped).unwrap();
        let once = materialize_step(&data, &task, 2).unwrap();
        let twice = materialize_step(&once.items, &task, 2).unwrap();
        assert_eq!(once.items, twice.items);
        assert_eq!(once.items[0].mask, LabelMap::from_rows(&[&[0, 5], &[6, 255]]).unwrap());
    }
}
