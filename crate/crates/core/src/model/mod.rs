//! Small encoder-decoder segmentation network with an expandable 1x1 head.
//!
//! Layout (widths `c1 < c2 < c3`, `H` and `W` divisible by 4):
//!
//! ```text
//! e1 = relu(conv(x))            c1, H
//! e2 = relu(conv(pool(e1)))     c2, H/2
//! e3 = relu(conv(pool(e2)))     c3, H/4
//! d2 = relu(conv(e3))           c2, H/4
//! d1 = relu(conv(up(d2) + e2))  c1, H/2
//! F  = relu(conv(up(d1) + e1))  c1, H     backbone features
//! S  = head(F)                  1+K, H    1x1 conv, one channel per known class
//! ```

pub mod layers;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;
use layers::{avg_pool2, avg_pool2_backward, relu, relu_backward, upsample2, upsample2_backward, Conv2d};

/// Pre-softmax scores, one channel per known class (background first).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap(pub Tensor3);

/// Per-pixel class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap(pub Tensor3);

/// Output of the final backbone stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(pub Tensor3);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    /// Channel widths of the three encoder stages.
    pub widths: [usize; 3],
    pub init_seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            widths: [16, 32, 64],
            init_seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!(
                "input size {}x{} must be positive multiples of 4",
                self.height, self.width
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegModel {
    pub arch: ArchConfig,
    pub enc1: Conv2d,
    pub enc2: Conv2d,
    pub enc3: Conv2d,
    pub dec2: Conv2d,
    pub dec1: Conv2d,
    pub fuse: Conv2d,
    pub head: Conv2d,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Tensor3,
    e1: Tensor3,
    p1: Tensor3,
    e2: Tensor3,
    p2: Tensor3,
    e3: Tensor3,
    d2: Tensor3,
    u2: Tensor3,
    d1: Tensor3,
    u1: Tensor3,
    pub features: FeatureMap,
    pub scores: ScoreMap,
}

impl SegModel {
    /// A model predicting `num_classes` channels (background included).
    pub fn new(arch: ArchConfig, num_classes: usize) -> Result<Self> {
        arch.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("at least the background class is required".into()));
        }
        let [c1, c2, c3] = arch.widths;
        let mut rng = ChaCha8Rng::seed_from_u64(arch.init_seed);
        Ok(Self {
            arch,
            enc1: Conv2d::he_init(3, c1, 3, &mut rng),
            enc2: Conv2d::he_init(c1, c2, 3, &mut rng),
            enc3: Conv2d::he_init(c2, c3, 3, &mut rng),
            dec2: Conv2d::he_init(c3, c2, 3, &mut rng),
            dec1: Conv2d::he_init(c2, c1, 3, &mut rng),
            fuse: Conv2d::he_init(c1, c1, 3, &mut rng),
            head: Conv2d::he_init(c1, num_classes, 1, &mut rng),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_channels
    }

    pub fn feature_channels(&self) -> usize {
        self.arch.widths[0]
    }

    /// Same architecture with every parameter zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            enc1: self.enc1.zeros_like(),
            enc2: self.enc2.zeros_like(),
            enc3: self.enc3.zeros_like(),
            dec2: self.dec2.zeros_like(),
            dec1: self.dec1.zeros_like(),
            fuse: self.fuse.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    fn layers(&self) -> [&Conv2d; 7] {
        [&self.enc1, &self.enc2, &self.enc3, &self.dec2, &self.dec1, &self.fuse, &self.head]
    }

    fn layers_mut(&mut self) -> [&mut Conv2d; 7] {
        [
            &mut self.enc1,
            &mut self.enc2,
            &mut self.enc3,
            &mut self.dec2,
            &mut self.dec1,
            &mut self.fuse,
            &mut self.head,
        ]
    }

    /// Parameter arrays in a fixed order (weights then bias, layer by layer).
    pub fn params(&self) -> Vec<&[f64]> {
        self.layers()
            .into_iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    pub fn check_input(&self, image: &Tensor3) -> Result<()> {
        let want = (3, self.arch.height, self.arch.width);
        if image.shape() != want {
            return Err(Error::shape(format!("{want:?}"), format!("{:?}", image.shape())));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Tensor3) -> Result<(FeatureMap, ScoreMap)> {
        let cache = self.forward_cached(image)?;
        Ok((cache.features, cache.scores))
    }

    pub fn forward_cached(&self, image: &Tensor3) -> Result<ForwardCache> {
        self.check_input(image)?;
        let e1 = relu(self.enc1.forward(image));
        let p1 = avg_pool2(&e1);
        let e2 = relu(self.enc2.forward(&p1));
        let p2 = avg_pool2(&e2);
        let e3 = relu(self.enc3.forward(&p2));
        let d2 = relu(self.dec2.forward(&e3));
        let mut u2 = upsample2(&d2);
        u2.add_assign(&e2);
        let d1 = relu(self.dec1.forward(&u2));
        let mut u1 = upsample2(&d1);
        u1.add_assign(&e1);
        let f = relu(self.fuse.forward(&u1));
        let s = self.head.forward(&f);
        Ok(ForwardCache {
            input: image.clone(),
            e1,
            p1,
            e2,
            p2,
            e3,
            d2,
            u2,
            d1,
            u1,
            features: FeatureMap(f),
            scores: ScoreMap(s),
        })
    }

    /// Backpropagates gradients w.r.t. the score map and, optionally, the
    /// feature map, accumulating parameter gradients into `grads`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_scores: Option<&Tensor3>,
        grad_features: Option<&Tensor3>,
        grads: &mut SegModel,
    ) {
        let f = &cache.features.0;
        let mut g_f = match grad_scores {
            Some(gs) => self
                .head
                .backward(f, gs, &mut grads.head, true)
                .expect("input gradient requested"),
            None => Tensor3::zeros(f.channels(), f.height(), f.width()),
        };
        if let Some(gf) = grad_features {
            g_f.add_assign(gf);
        }
        let g_u1 = self
            .fuse
            .backward(&cache.u1, &relu_backward(f, g_f), &mut grads.fuse, true)
            .expect("input gradient requested");
        let mut g_e1 = g_u1.clone();
        let g_d1 = upsample2_backward(&g_u1);
        let g_u2 = self
            .dec1
            .backward(&cache.u2, &relu_backward(&cache.d1, g_d1), &mut grads.dec1, true)
            .expect("input gradient requested");
        let mut g_e2 = g_u2.clone();
        let g_d2 = upsample2_backward(&g_u2);
        let g_e3 = self
            .dec2
            .backward(&cache.e3, &relu_backward(&cache.d2, g_d2), &mut grads.dec2, true)
            .expect("input gradient requested");
        let g_p2 = self
            .enc3
            .backward(&cache.p2, &relu_backward(&cache.e3, g_e3), &mut grads.enc3, true)
            .expect("input gradient requested");
        g_e2.add_assign(&avg_pool2_backward(&g_p2));
        let g_p1 = self
            .enc2
            .backward(&cache.p1, &relu_backward(&cache.e2, g_e2), &mut grads.enc2, true)
            .expect("input gradient requested");
        g_e1.add_assign(&avg_pool2_backward(&g_p1));
        self.enc1
            .backward(&cache.input, &relu_backward(&cache.e1, g_e1), &mut grads.enc1, false);
    }

    /// Adds `new_classes` head channels: zero weights, bias copied from the
    /// background channel. Existing channels and the backbone are untouched.
    pub fn extend_head(&mut self, new_classes: usize) {
        if new_classes == 0 {
            return;
        }
        let head = &mut self.head;
        let per_channel = head.in_channels;
        let bg_bias = head.bias[0];
        head.weight.extend(std::iter::repeat(0.0).take(new_classes * per_channel));
        head.bias.extend(std::iter::repeat(bg_bias).take(new_classes));
        head.out_channels += new_classes;
    }

    /// Per-pixel argmax over the score map.
    pub fn predict(&self, image: &Tensor3) -> Result<crate::tensor::LabelMap> {
        let (_, scores) = self.forward(image)?;
        Ok(argmax(&scores.0))
    }
}

/// Channel argmax per pixel; ties resolve to the lowest class index.
pub fn argmax(t: &Tensor3) -> crate::tensor::LabelMap {
    let (c, h, w) = t.shape();
    let n = h * w;
    let mut out = vec![0u8; n];
    let data = t.data();
    for (p, slot) in out.iter_mut().enumerate() {
        let mut best = 0;
        let mut best_v = data[p];
        for ch in 1..c {
            let v = data[ch * n + p];
            if v > best_v {
                best = ch;
                best_v = v;
            }
        }
        *slot = best as u8;
    }
    crate::tensor::LabelMap::from_vec(h, w, out).expect("sizes agree")
}

/// Numerically stable per-pixel softmax over channels.
pub fn softmax_scores(s: &ScoreMap) -> ProbMap {
    let t = &s.0;
    let (c, h, w) = t.shape();
    let n = h * w;
    let src = t.data();
    let mut out = Tensor3::zeros(c, h, w);
    let dst = out.data_mut();
    for p in 0..n {
        let max = (0..c).map(|ch| src[ch * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for ch in 0..c {
            let e = (src[ch * n + p] - max).exp();
            dst[ch * n + p] = e;
            total += e;
        }
        for ch in 0..c {
            dst[ch * n + p] /= total;
        }
    }
    ProbMap(out)
}

/// `(h + w) x C` descriptor: `h` width-averaged rows followed by `w`
/// height-averaged columns, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledDescriptor {
    pub rows: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

pub fn phi_pool(f: &FeatureMap) -> PooledDescriptor {
    let t = &f.0;
    let (c, h, w) = t.shape();
    let mut data = vec![0.0; (h + w) * c];
    for ch in 0..c {
        let plane = t.plane(ch);
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            data[y * c + ch] = row.iter().sum::<f64>() / w as f64;
        }
        for x in 0..w {
            let col: f64 = (0..h).map(|y| plane[y * w + x]).sum();
            data[(h + x) * c + ch] = col / h as f64;
        }
    }
    PooledDescriptor {
        rows: h + w,
        channels: c,
        data,
    }
}

/// Gradient w.r.t. the feature map given the gradient w.r.t. its descriptor.
pub fn phi_pool_backward(grad: &PooledDescriptor, channels: usize, height: usize, width: usize) -> Tensor3 {
    let mut out = Tensor3::zeros(channels, height, width);
    for ch in 0..channels {
        let plane = out.plane_mut(ch);
        for y in 0..height {
            let gr = grad.data[y * channels + ch] / width as f64;
            for x in 0..width {
                plane[y * width + x] = gr + grad.data[(height + x) * channels + ch] / height as f64;
            }
        }
    }
    out
}

/// Model snapshot plus the class inventory it was trained for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    /// `C_{0:t}`: background followed by every learned class, in head order.
    pub classes: Vec<u8>,
    pub model: SegModel,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_vec(self).map_err(|e| Error::json(path, e))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        if ck.classes.len() != ck.model.num_classes() {
            return Err(Error::shape(
                format!("{} head channels", ck.classes.len()),
                ck.model.num_classes(),
            ));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SegModel {
        SegModel::new(
            ArchConfig {
                height: 8,
                width: 8,
                widths: [3, 4, 5],
                init_seed: 1,
            },
            3,
        )
        .unwrap()
    }

    fn image(h: usize, w: usize) -> Tensor3 {
        let data = (0..3 * h * w).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        Tensor3::from_vec(3, h, w, data).unwrap()
    }

    #[test]
    fn output_matches_input_extent() {
        let m = tiny();
        let (f, s) = m.forward(&image(8, 8)).unwrap();
        assert_eq!(s.0.shape(), (3, 8, 8));
        assert_eq!(f.0.shape(), (3, 8, 8));
        assert!(s.0.is_finite());
        assert!(m.forward(&image(4, 8)).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let mut m = tiny();
        m.head = m.head.zeros_like();
        let (_, s) = m.forward(&image(8, 8)).unwrap();
        assert!(s.0.data().iter().all(|&v| v == 0.0));
        let p = softmax_scores(&s);
        assert!(p.0.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn forward_is_deterministic() {
        let a = tiny().forward(&image(8, 8)).unwrap();
        let b = tiny().forward(&image(8, 8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_examples() {
        let s = ScoreMap(Tensor3::from_vec(3, 1, 1, vec![0.0, 0.0, 0.0]).unwrap());
        for v in softmax_scores(&s).0.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = ScoreMap(Tensor3::from_vec(3, 1, 1, vec![2f64.ln(), 0.0, 0.0]).unwrap());
        let p = softmax_scores(&s);
        assert!((p.0.data()[0] - 0.5).abs() < 1e-15);
        assert!((p.0.data()[1] - 0.25).abs() < 1e-15);
        let shifted = ScoreMap(Tensor3::from_vec(3, 1, 1, vec![2f64.ln() + 7.0, 7.0, 7.0]).unwrap());
        let q = softmax_scores(&shifted);
        for (a, b) in p.0.data().iter().zip(q.0.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn phi_pool_examples() {
        let f = FeatureMap(Tensor3::filled(1, 1, 1, 2.0));
        assert_eq!(phi_pool(&f).data, vec![2.0, 2.0]);
        let f = FeatureMap(Tensor3::from_vec(1, 2, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let d = phi_pool(&f);
        assert_eq!((d.rows, d.channels), (4, 1));
        assert_eq!(d.data, vec![2.0, 6.0, 3.0, 5.0]);
        let f = FeatureMap(Tensor3::filled(3, 4, 5, 1.5));
        assert!(phi_pool(&f).data.iter().all(|&v| v == 1.5));
    }

    #[test]
    fn extend_head_preserves_old_channels() {
        let mut m = tiny();
        let img = image(8, 8);
        let (_, before) = m.forward(&img).unwrap();
        let snapshot = m.clone();
        m.extend_head(0);
        assert_eq!(m, snapshot);
        m.extend_head(1);
        assert_eq!(m.num_classes(), 4);
        let (_, after) = m.forward(&img).unwrap();
        for c in 0..3 {
            assert_eq!(before.0.plane(c), after.0.plane(c));
        }
        assert_eq!(after.0.plane(3), after.0.plane(3));
        assert_eq!(m.enc1, snapshot.enc1);

        let mut m = SegModel::new(ArchConfig { height: 8, width: 8, widths: [3, 4, 5], init_seed: 1 }, 16).unwrap();
        m.extend_head(5);
        assert_eq!(m.num_classes(), 21);
    }

    #[test]
    fn new_channel_score_equals_background_bias() {
        let mut m = tiny();
        m.head.bias[0] = 0.7;
        m.extend_head(2);
        let (_, s) = m.forward(&image(8, 8)).unwrap();
        assert!(s.0.plane(4).iter().all(|&v| v == 0.7));
    }

    #[test]
    fn default_arch_is_about_fifty_thousand_params() {
        let m = SegModel::new(ArchConfig::default(), 21).unwrap();
        assert!((40_000..60_000).contains(&m.param_count()), "{}", m.param_count());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("step1.json");
        let ck = Checkpoint {
            step: 1,
            classes: vec![0, 1, 2],
            model: tiny(),
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
    }
}
