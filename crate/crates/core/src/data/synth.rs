//! Synthetic shape scenes with a controllable class co-occurrence matrix.
//!
//! Every image is built from its own random stream, derived from the spec
//! seed and the image index, so the output for a given index does not depend
//! on how many images are generated or in which order.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor3, BACKGROUND_LABEL, IGNORE_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    Square,
    Triangle,
}

/// Appearance of one foreground class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeKind {
    pub shape: Shape,
    /// Base RGB colour in `[0, 1]`.
    pub color: [f64; 3],
    /// Period in pixels of a horizontal brightness stripe; 0 means solid.
    pub stripe_period: usize,
    /// Radius range as a fraction of the shorter image side.
    pub radius: (f64, f64),
}

impl ShapeKind {
    /// A distinguishable default appearance for class `class` (1-based).
    pub fn default_for(class: usize) -> Self {
        const PALETTE: [[f64; 3]; 8] = [
            [0.85, 0.20, 0.20],
            [0.20, 0.75, 0.25],
            [0.20, 0.35, 0.90],
            [0.90, 0.80, 0.15],
            [0.75, 0.25, 0.80],
            [0.15, 0.80, 0.80],
            [0.95, 0.55, 0.15],
            [0.55, 0.40, 0.25],
        ];
        let i = class.saturating_sub(1);
        let shape = match i % 3 {
            0 => Shape::Disc,
            1 => Shape::Square,
            _ => Shape::Triangle,
        };
        Self {
            shape,
            color: PALETTE[i % PALETTE.len()],
            stripe_period: if (i / PALETTE.len()) % 2 == 1 { 4 } else { 0 },
            radius: (0.12, 0.25),
        }
    }

    fn covers(&self, cy: f64, cx: f64, r: f64, y: f64, x: f64) -> bool {
        let dy = y - cy;
        let dx = x - cx;
        match self.shape {
            Shape::Disc => dy * dy + dx * dx <= r * r,
            Shape::Square => dy.abs() <= r && dx.abs() <= r,
            Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

/// Parameters of the scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_fg_classes: usize,
    /// `K x K` symmetric matrix; entry `[a-1][b-1]` is the probability that
    /// class `b` joins a scene already containing class `a`.
    pub cooccurrence: Vec<Vec<f64>>,
    /// Inclusive range for the number of shapes drawn per image.
    pub shapes_per_image: (usize, usize),
    pub shape_kinds: Vec<ShapeKind>,
    /// Relative frequency of each class being the first class of a scene.
    /// Uniform when absent.
    #[serde(default)]
    pub primary_weights: Option<Vec<f64>>,
    /// Amplitude of the uniform pixel noise added to background and shapes.
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub rng_seed: u64,
}

fn default_noise() -> f64 {
    0.08
}

impl SceneSpec {
    /// `num_fg_classes` classes that may all co-occur with probability `p`.
    pub fn uniform(height: usize, width: usize, num_fg_classes: usize, p: f64, seed: u64) -> Self {
        let cooccurrence = (0..num_fg_classes)
            .map(|a| {
                (0..num_fg_classes)
                    .map(|b| if a == b { 1.0 } else { p })
                    .collect()
            })
            .collect();
        Self {
            height,
            width,
            num_fg_classes,
            cooccurrence,
            shapes_per_image: (1, 3),
            shape_kinds: (1..=num_fg_classes).map(ShapeKind::default_for).collect(),
            primary_weights: None,
            noise: default_noise(),
            rng_seed: seed,
        }
    }

    /// Co-occurrence probability between foreground classes `a` and `b` (1-based).
    pub fn cooc(&self, a: u8, b: u8) -> f64 {
        self.cooccurrence[a as usize - 1][b as usize - 1]
    }

    pub fn set_cooc(&mut self, a: u8, b: u8, p: f64) {
        self.cooccurrence[a as usize - 1][b as usize - 1] = p;
        self.cooccurrence[b as usize - 1][a as usize - 1] = p;
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_fg_classes;
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if k == 0 {
            return bad("at least one foreground class is required".into());
        }
        if k >= IGNORE_LABEL as usize {
            return bad(format!("{k} classes do not fit below the ignore label"));
        }
        if self.height < 4 || self.width < 4 {
            return bad(format!("image size {}x{} too small", self.height, self.width));
        }
        if self.cooccurrence.len() != k || self.cooccurrence.iter().any(|r| r.len() != k) {
            return bad(format!("co-occurrence matrix must be {k}x{k}"));
        }
        for a in 0..k {
            for b in 0..k {
                let v = self.cooccurrence[a][b];
                if !(0.0..=1.0).contains(&v) {
                    return bad(format!("co-occurrence [{a}][{b}] = {v} outside [0, 1]"));
                }
                if (v - self.cooccurrence[b][a]).abs() > 1e-12 {
                    return bad(format!("co-occurrence matrix not symmetric at [{a}][{b}]"));
                }
            }
        }
        let (lo, hi) = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return bad(format!("shapes_per_image range ({lo}, {hi}) invalid"));
        }
        if self.shape_kinds.len() != k {
            return bad(format!("{} shape kinds for {k} classes", self.shape_kinds.len()));
        }
        for (i, kind) in self.shape_kinds.iter().enumerate() {
            let (rlo, rhi) = kind.radius;
            if !(rlo > 0.0 && rlo <= rhi) {
                return bad(format!("class {} radius range ({rlo}, {rhi}) invalid", i + 1));
            }
        }
        if let Some(w) = &self.primary_weights {
            if w.len() != k || w.iter().any(|v| *v < 0.0 || !v.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
                return bad("primary_weights must be k non-negative values with positive sum".into());
            }
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return bad(format!("noise amplitude {} outside [0, 0.5]", self.noise));
        }
        Ok(())
    }
}

/// An RGB image in `[0, 1]` with its segmentation mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub id: String,
    pub image: Tensor3,
    pub mask: LabelMap,
}

impl LabeledImage {
    pub fn new(id: impl Into<String>, image: Tensor3, mask: LabelMap) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::shape("3 channels", image.channels()));
        }
        mask.check_extent(image.height(), image.width())?;
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

/// Generates `count` scenes; image `i` depends only on `(spec, i)`.
pub fn generate_dataset(spec: &SceneSpec, count: usize) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::InvalidSpec("count must be at least 1".into()));
    }
    Ok((0..count).map(|i| generate_image(spec, i)).collect())
}

/// Generates the scene with index `index` without validating `spec`.
pub fn generate_image(spec: &SceneSpec, index: usize) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(index as u64);

    let classes = sample_classes(spec, &mut rng);
    let (lo, hi) = spec.shapes_per_image;
    let n_shapes = rng.gen_range(lo..=hi).max(classes.len());
    let mut draws: Vec<u8> = classes.clone();
    while draws.len() < n_shapes {
        draws.push(*classes.choose(&mut rng).expect("at least one class"));
    }
    draws.shuffle(&mut rng);

    let (h, w) = (spec.height, spec.width);
    let side = h.min(w) as f64;
    let mut image = Tensor3::zeros(3, h, w);
    let mut mask = LabelMap::filled(h, w, BACKGROUND_LABEL);
    let bg = 0.45 + rng.gen_range(-0.05..0.05);
    for c in 0..3 {
        for v in image.plane_mut(c) {
            *v = bg + noise(&mut rng, spec.noise);
        }
    }

    for &class in &draws {
        let kind = &spec.shape_kinds[class as usize - 1];
        let r = (rng.gen_range(kind.radius.0..=kind.radius.1) * side).max(1.0);
        let cy = rng.gen_range(0..h) as f64;
        let cx = rng.gen_range(0..w) as f64;
        let phase = rng.gen_range(0..kind.stripe_period.max(1));
        for y in 0..h {
            for x in 0..w {
                if !kind.covers(cy, cx, r, y as f64, x as f64) {
                    continue;
                }
                mask.set(y, x, class);
                let stripe = kind.stripe_period > 0 && ((y + phase) / (kind.stripe_period / 2).max(1)) % 2 == 1;
                let shade = if stripe { -0.25 } else { 0.0 };
                for c in 0..3 {
                    let v = kind.color[c] + shade + noise(&mut rng, spec.noise);
                    image.set(c, y, x, v);
                }
            }
        }
    }

    for v in image.data_mut() {
        *v = quantize(*v);
    }
    LabeledImage {
        id: format!("img{index:06}"),
        image,
        mask,
    }
}

/// Clamps to `[0, 1]` and snaps to the nearest 8-bit level, so images survive
/// a round trip through 8-bit raster files unchanged.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn noise(rng: &mut ChaCha8Rng, amp: f64) -> f64 {
    if amp > 0.0 {
        rng.gen_range(-amp..=amp)
    } else {
        0.0
    }
}

fn sample_classes(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let k = spec.num_fg_classes;
    let primary = match &spec.primary_weights {
        Some(weights) => {
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen_range(0.0..total);
            let mut pick = k;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = i + 1;
                    break;
                }
                u -= w;
            }
            pick as u8
        }
        None => rng.gen_range(1..=k) as u8,
    };
    let max_classes = spec.shapes_per_image.1;
    let mut chosen = vec![primary];
    let mut rest: Vec<u8> = (1..=k as u8).filter(|&c| c != primary).collect();
    rest.shuffle(rng);
    for b in rest {
        if chosen.len() >= max_classes {
            break;
        }
        let p: f64 = chosen.iter().map(|&a| spec.cooc(a, b)).product();
        if p > 0.0 && rng.gen_bool(p.min(1.0)) {
            chosen.push(b);
        }
    }
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class(p: f64) -> SceneSpec {
        let mut spec = SceneSpec::uniform(16, 16, 2, p, 7);
        spec.shapes_per_image = (1, 2);
        spec
    }

    #[test]
    fn zero_cooccurrence_never_mixes() {
        let data = generate_dataset(&two_class(0.0), 50).unwrap();
        for item in &data {
            let fg = item.mask.foreground_classes();
            assert!(!(fg.contains(&1) && fg.contains(&2)), "{} has both", item.id);
        }
    }

    #[test]
    fn full_cooccurrence_joint_rate() {
        let data = generate_dataset(&two_class(1.0), 100).unwrap();
        let joint = data
            .iter()
            .filter(|d| d.mask.foreground_classes() == vec![1, 2])
            .count();
        assert!(joint as f64 / 100.0 >= 0.95, "joint rate {joint}/100");
    }

    #[test]
    fn deterministic_and_index_stable() {
        let spec = SceneSpec::uniform(16, 16, 3, 0.5, 11);
        let a = generate_dataset(&spec, 10).unwrap();
        let b = generate_dataset(&spec, 10).unwrap();
        assert_eq!(a, b);
        let longer = generate_dataset(&spec, 20).unwrap();
        assert_eq!(&longer[..10], &a[..]);
        assert_eq!(generate_image(&spec, 5), a[5]);
    }

    #[test]
    fn every_image_has_foreground_and_valid_labels() {
        let spec = SceneSpec::uniform(12, 20, 5, 0.3, 3);
        for item in generate_dataset(&spec, 40).unwrap() {
            assert!(!item.mask.foreground_classes().is_empty());
            assert!(item.mask.labels().iter().all(|&l| l <= 5));
            assert!(item.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!((item.height(), item.width()), (12, 20));
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut spec = SceneSpec::uniform(16, 16, 3, 0.5, 0);
        spec.cooccurrence[0][1] = 0.2;
        assert!(matches!(generate_dataset(&spec, 1), Err(Error::InvalidSpec(_))));

        let spec = SceneSpec::uniform(16, 16, 0, 0.5, 0);
        assert!(generate_dataset(&spec, 1).is_err());

        let spec = SceneSpec::uniform(16, 16, 2, 0.5, 0);
        assert!(generate_dataset(&spec, 0).is_err());

        let mut spec = SceneSpec::uniform(16, 16, 2, 0.5, 0);
        spec.set_cooc(1, 2, 1.5);
        assert!(generate_dataset(&spec, 1).is_err());
    }

    #[test]
    fn empirical_cooccurrence_tracks_matrix() {
        let mut spec = SceneSpec::uniform(16, 16, 3, 0.0, 5);
        spec.shapes_per_image = (1, 3);
        spec.set_cooc(1, 2, 0.5);
        let data = generate_dataset(&spec, 600).unwrap();
        let with_1: Vec<_> = data
            .iter()
            .filter(|d| d.mask.foreground_classes().contains(&1))
            .collect();
        let both = with_1
            .iter()
            .filter(|d| d.mask.foreground_classes().contains(&2))
            .count();
        let rate = both as f64 / with_1.len() as f64;
        assert!((0.3..0.8).contains(&rate), "rate {rate}");
        assert!(data.iter().all(|d| {
            let fg = d.mask.foreground_classes();
            !(fg.contains(&3) && fg.len() > 1)
        }));
    }
}
