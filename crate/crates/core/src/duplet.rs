//! Image duplets: each step image paired with a copy whose new-class pixels
//! are erased, and half-original/half-erased batch composition.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::pseudo::{fuse_targets, old_pixel_set, predict_pseudo, PixelSet, PseudoLabels, RefinedTarget};
use crate::tensor::{LabelMap, Tensor3, IGNORE_LABEL};

/// Value written into erased pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FillPolicy {
    /// Per-channel mean over the step's images.
    DatasetMean,
    Constant { rgb: [f64; 3] },
}

impl Default for FillPolicy {
    fn default() -> Self {
        FillPolicy::DatasetMean
    }
}

impl FillPolicy {
    pub fn resolve(&self, items: &[LabeledImage]) -> [f64; 3] {
        match self {
            FillPolicy::DatasetMean => channel_mean(items),
            FillPolicy::Constant { rgb } => *rgb,
        }
    }
}

/// Per-channel mean pixel value; mid-grey for an empty set.
pub fn channel_mean(items: &[LabeledImage]) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for item in items {
        for (c, s) in sum.iter_mut().enumerate() {
            *s += item.image.plane(c).iter().sum::<f64>();
        }
        n += item.image.plane_len();
    }
    if n == 0 {
        return [0.5; 3];
    }
    sum.map(|s| s / n as f64)
}

/// Replaces every pixel whose ground-truth label is in `new_classes` with
/// `fill`. Returns the erased image and the row-major erase mask.
pub fn erase_new_pixels(image: &Tensor3, gt: &LabelMap, new_classes: &[u8], fill: [f64; 3]) -> Result<(Tensor3, Vec<bool>)> {
    gt.check_extent(image.height(), image.width())?;
    if image.channels() != 3 {
        return Err(Error::shape("3 channels", image.channels()));
    }
    let mut is_new = [false; 256];
    for &c in new_classes {
        is_new[c as usize] = true;
    }
    let mask: Vec<bool> = gt.data().iter().map(|&l| is_new[l as usize]).collect();
    let mut erased = image.clone();
    for (c, &value) in fill.iter().enumerate() {
        for (v, &m) in erased.plane_mut(c).iter_mut().zip(&mask) {
            if m {
                *v = value;
            }
        }
    }
    Ok((erased, mask))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Duplet {
    pub original: LabeledImage,
    pub refined: RefinedTarget,
    pub erased_image: Tensor3,
    /// Refined labels with erased pixels set to ignore.
    pub erased_target: LabelMap,
    pub erase_mask: Vec<bool>,
    pub old_pixels: PixelSet,
    /// Number of ground-truth new-class pixels.
    pub new_pixels: usize,
}

/// Builds a duplet from precomputed pseudo labels.
pub fn duplet_from_pseudo(
    item: &LabeledImage,
    pseudo: &PseudoLabels,
    new_classes: &[u8],
    old_classes: &[u8],
    tau: f64,
    fill: [f64; 3],
) -> Result<Duplet> {
    let refined = fuse_targets(&item.mask, pseudo, new_classes, tau)?;
    let (erased_image, erase_mask) = erase_new_pixels(&item.image, &item.mask, new_classes, fill)?;
    let mut erased_target = refined.labels.clone();
    for (l, &m) in erased_target.data_mut().iter_mut().zip(&erase_mask) {
        if m {
            *l = IGNORE_LABEL;
        }
    }
    let old_pixels = old_pixel_set(&refined, old_classes);
    let new_pixels = erase_mask.iter().filter(|&&m| m).count();
    Ok(Duplet {
        original: item.clone(),
        refined,
        erased_image,
        erased_target,
        erase_mask,
        old_pixels,
        new_pixels,
    })
}

/// Pseudo-labels `item` with the frozen model, fuses targets and erases the
/// new-class pixels.
pub fn make_duplet(
    item: &LabeledImage,
    old_model: Option<&SegModel>,
    new_classes: &[u8],
    old_classes: &[u8],
    tau: f64,
    fill: [f64; 3],
) -> Result<Duplet> {
    let pseudo = predict_pseudo(old_model, &item.image)?;
    duplet_from_pseudo(item, &pseudo, new_classes, old_classes, tau, fill)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchEntry {
    /// Index into the duplet list.
    pub duplet: usize,
    pub erased: bool,
    /// Position of the paired entry inside the batch.
    pub partner: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DupletBatch {
    /// Pairs are adjacent: original at `2k`, erased copy at `2k + 1`.
    pub entries: Vec<BatchEntry>,
}

impl DupletBatch {
    fn from_pairs(indices: &[usize]) -> Self {
        let entries = indices
            .iter()
            .enumerate()
            .flat_map(|(k, &d)| {
                [
                    BatchEntry {
                        duplet: d,
                        erased: false,
                        partner: 2 * k + 1,
                    },
                    BatchEntry {
                        duplet: d,
                        erased: true,
                        partner: 2 * k,
                    },
                ]
            })
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Duplet indices of the originals, in batch order.
    pub fn originals(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().filter(|e| !e.erased).map(|e| e.duplet)
    }
}

fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size < 2 || batch_size % 2 != 0 {
        Err(Error::OddBatchSize(batch_size))
    } else {
        Ok(())
    }
}

/// One batch of `batch_size / 2` randomly drawn duplets (fewer if the pool
/// is smaller) together with their erased copies.
pub fn compose_batch<R: Rng>(num_duplets: usize, batch_size: usize, rng: &mut R) -> Result<DupletBatch> {
    check_batch_size(batch_size)?;
    let pairs = (batch_size / 2).min(num_duplets);
    let picked = rand::seq::index::sample(rng, num_duplets, pairs).into_vec();
    Ok(DupletBatch::from_pairs(&picked))
}

/// Shuffles all duplets once and splits them into batches.
pub fn epoch_batches<R: Rng>(num_duplets: usize, batch_size: usize, rng: &mut R) -> Result<Vec<DupletBatch>> {
    check_batch_size(batch_size)?;
    let mut order: Vec<usize> = (0..num_duplets).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size / 2).map(DupletBatch::from_pairs).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image_with(mask: LabelMap) -> LabeledImage {
        let (h, w) = (mask.height(), mask.width());
        let data = (0..3 * h * w).map(|i| (i % 7) as f64 / 7.0).collect();
        LabeledImage::new("x", Tensor3::from_vec(3, h, w, data).unwrap(), mask).unwrap()
    }

    #[test]
    fn no_new_pixels_means_identity() {
        let item = image_with(LabelMap::from_rows(&[&[0, 1], &[255, 0]]).unwrap());
        let (erased, mask) = erase_new_pixels(&item.image, &item.mask, &[2], [0.5; 3]).unwrap();
        assert_eq!(erased, item.image);
        assert!(mask.iter().all(|m| !m));
    }

    #[test]
    fn full_erase_is_constant() {
        let item = image_with(LabelMap::filled(3, 3, 4));
        let fill = [0.1, 0.2, 0.3];
        let (erased, _) = erase_new_pixels(&item.image, &item.mask, &[4], fill).unwrap();
        for c in 0..3 {
            assert!(erased.plane(c).iter().all(|&v| v == fill[c]));
        }
        let (again, _) = erase_new_pixels(&erased, &item.mask, &[4], fill).unwrap();
        assert_eq!(again, erased);
    }

    #[test]
    fn two_by_two_erased_target() {
        let item = image_with(LabelMap::from_rows(&[&[16, 0], &[0, 255]]).unwrap());
        let pseudo = PseudoLabels {
            labels: LabelMap::from_rows(&[&[3, 5], &[0, 2]]).unwrap(),
            confidence: vec![0.9, 0.9, 0.9, 0.4],
        };
        let old: Vec<u8> = (1..=15).collect();
        let d = duplet_from_pseudo(&item, &pseudo, &[16], &old, 0.5, [0.0; 3]).unwrap();
        assert_eq!(d.erased_target, LabelMap::from_rows(&[&[255, 5], &[0, 255]]).unwrap());
        assert_eq!(d.old_pixels.coords, vec![(1, 0)]);
        assert_eq!(d.new_pixels, 1);
        assert_eq!(d.erased_image.get(0, 0, 0), 0.0);
        assert_eq!(d.erased_image.get(0, 0, 1), item.image.get(0, 0, 1));
    }

    #[test]
    fn all_new_foreground_has_no_old_pixels() {
        let item = image_with(LabelMap::filled(2, 2, 3));
        let pseudo = PseudoLabels {
            labels: LabelMap::filled(2, 2, 1),
            confidence: vec![0.99; 4],
        };
        let d = duplet_from_pseudo(&item, &pseudo, &[3], &[1, 2], 0.5, [0.5; 3]).unwrap();
        assert!(d.old_pixels.is_empty());
        assert_eq!(d.refined.beta, 0.0);
        assert!(d.erased_target.data().iter().all(|&l| l == IGNORE_LABEL));
    }

    #[test]
    fn without_new_pixels_erased_target_is_refined() {
        let item = image_with(LabelMap::filled(2, 2, 0));
        let pseudo = PseudoLabels {
            labels: LabelMap::from_rows(&[&[1, 0], &[0, 0]]).unwrap(),
            confidence: vec![0.99; 4],
        };
        let d = duplet_from_pseudo(&item, &pseudo, &[3], &[1, 2], 0.5, [0.5; 3]).unwrap();
        assert_eq!(d.erased_image, item.image);
        assert_eq!(d.erased_target, d.refined.labels);
    }

    #[test]
    fn make_duplet_needs_old_model() {
        let item = image_with(LabelMap::filled(4, 4, 0));
        assert!(matches!(
            make_duplet(&item, None, &[2], &[1], 0.5, [0.5; 3]),
            Err(Error::MissingOldModel(_))
        ));
    }

    #[test]
    fn batch_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = compose_batch(10, 2, &mut rng).unwrap();
        assert_eq!(b.len(), 2);
        assert!(!b.entries[0].erased && b.entries[1].erased);
        assert_eq!(b.entries[0].duplet, b.entries[1].duplet);

        let b = compose_batch(40, 24, &mut rng).unwrap();
        assert_eq!(b.entries.iter().filter(|e| e.erased).count(), 12);
        assert_eq!(b.entries.iter().filter(|e| !e.erased).count(), 12);
        for (i, e) in b.entries.iter().enumerate() {
            let p = b.entries[e.partner];
            assert_eq!(p.partner, i);
            assert_eq!(p.duplet, e.duplet);
            assert_ne!(p.erased, e.erased);
        }

        let a = compose_batch(40, 24, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = compose_batch(40, 24, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, c);

        assert!(matches!(compose_batch(10, 3, &mut rng), Err(Error::OddBatchSize(3))));
        assert!(compose_batch(10, 0, &mut rng).is_err());
    }

    #[test]
    fn epoch_covers_every_duplet_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batches = epoch_batches(11, 4, &mut rng).unwrap();
        assert_eq!(batches.len(), 6);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.originals().collect::<Vec<_>>()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..11).collect::<Vec<_>>());
    }

    #[test]
    fn mean_fill() {
        let item = image_with(LabelMap::filled(1, 2, 0));
        let m = channel_mean(std::slice::from_ref(&item));
        assert!((m[0] - (0.0 + 1.0 / 7.0) / 2.0).abs() < 1e-15);
        assert_eq!(channel_mean(&[]), [0.5; 3]);
        assert_eq!(FillPolicy::Constant { rgb: [0.2; 3] }.resolve(&[]), [0.2; 3]);
    }
}
