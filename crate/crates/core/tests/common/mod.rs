#![allow(dead_code)]

use contiseg::model::{ArchConfig, SegModel};
use contiseg::{LabelMap, Tensor3};

pub const FD_STEP: f64 = 1e-6;
/// Central differences of an O(1) loss carry ~1e-10 of round-off.
pub const GRAD_FLOOR: f64 = 1e-6;

/// 4x4 input, three classes (background, one old, one new).
pub fn toy_model(seed: u64) -> SegModel {
    let arch = ArchConfig {
        height: 4,
        width: 4,
        widths: [3, 4, 5],
        init_seed: seed,
    };
    let mut m = SegModel::new(arch, 3).unwrap();
    // Non-zero biases so every parameter has a visible effect.
    for (i, p) in m.params_mut().into_iter().enumerate() {
        if p.len() <= 5 {
            for (j, v) in p.iter_mut().enumerate() {
                *v = 0.05 * ((i + j) % 5) as f64 - 0.07;
            }
        }
    }
    m
}

pub fn toy_image(seed: u64) -> Tensor3 {
    let data = (0..48)
        .map(|i| (((i as u64 * 7919 + seed * 104_729) % 997) as f64) / 997.0)
        .collect();
    Tensor3::from_vec(3, 4, 4, data).unwrap()
}

pub fn toy_labels() -> LabelMap {
    LabelMap::from_rows(&[&[0, 1, 1, 2], &[0, 1, 2, 2], &[255, 0, 2, 2], &[0, 0, 1, 255]]).unwrap()
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter. Gradients below `GRAD_FLOOR` in magnitude are compared
/// against that floor instead of their own size.
pub fn max_rel_error(model: &SegModel, analytic: &SegModel, loss: impl Fn(&SegModel) -> f64) -> (f64, usize) {
    let mut probe = model.clone();
    let analytic: Vec<f64> = analytic.params().into_iter().flatten().copied().collect();
    let mut worst = 0.0f64;
    let mut k = 0;
    let n_slices = probe.params().len();
    for s in 0..n_slices {
        let len = probe.params()[s].len();
        for j in 0..len {
            let orig = probe.params()[s][j];
            probe.params_mut()[s][j] = orig + FD_STEP;
            let up = loss(&probe);
            probe.params_mut()[s][j] = orig - FD_STEP;
            let down = loss(&probe);
            probe.params_mut()[s][j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
            k += 1;
        }
    }
    (worst, k)
}
