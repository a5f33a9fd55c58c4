//! On-disk dataset layout: `images/<id>.png` (8-bit RGB), `masks/<id>.png`
//! (8-bit single-channel index map) and `manifest.jsonl`, one record per image.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::synth::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor3};

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    /// Foreground classes present in the mask.
    pub classes: Vec<u8>,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_rgb(path: &Path, image: &Tensor3) -> Result<()> {
    let (h, w) = (image.height() as u32, image.width() as u32);
    let raster = RgbImage::from_fn(w, h, |x, y| {
        let px = |c| (image.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    raster.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_mask(path: &Path, mask: &LabelMap) -> Result<()> {
    let raster = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([mask.get(y as usize, x as usize)])
    });
    raster.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_rgb(path: &Path) -> Result<Tensor3> {
    let raster = open(path)?.to_rgb8();
    let (w, h) = (raster.width() as usize, raster.height() as usize);
    let mut t = Tensor3::zeros(3, h, w);
    for (x, y, px) in raster.enumerate_pixels() {
        for c in 0..3 {
            t.set(c, y as usize, x as usize, px.0[c] as f64 / 255.0);
        }
    }
    Ok(t)
}

pub fn read_mask(path: &Path) -> Result<LabelMap> {
    let raster = open(path)?.to_luma8();
    let (w, h) = (raster.width() as usize, raster.height() as usize);
    LabelMap::from_vec(h, w, raster.into_raw())
}

/// Writes `items` under `dir`, replacing any previous manifest.
pub fn save_dataset(dir: &Path, items: &[LabeledImage]) -> Result<()> {
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("masks"))?;
    let manifest_path = dir.join(MANIFEST);
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        let entry = ManifestEntry {
            id: item.id.clone(),
            image: format!("images/{}.png", item.id),
            mask: format!("masks/{}.png", item.id),
            classes: item.mask.foreground_classes(),
        };
        write_rgb(&dir.join(&entry.image), &item.image)?;
        write_mask(&dir.join(&entry.mask), &item.mask)?;
        let line = serde_json::to_string(&entry).map_err(|e| Error::json(&manifest_path, e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line).map_err(|e| Error::json(&path, e))?);
    }
    Ok(entries)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledImage>> {
    read_manifest(dir)?
        .into_iter()
        .map(|entry| {
            let image = read_rgb(&dir.join(&entry.image))?;
            let mask = read_mask(&dir.join(&entry.mask))?;
            LabeledImage::new(entry.id, image, mask)
        })
        .collect()
}

/// Directory holding split `name` inside a dataset root.
pub fn split_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_dataset, SceneSpec};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::uniform(12, 16, 3, 0.5, 9);
        let data = generate_dataset(&spec, 5).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
        let manifest = read_manifest(dir.path()).unwrap();
        assert_eq!(manifest.len(), 5);
        assert_eq!(manifest[2].classes, data[2].mask.foreground_classes());
    }

    #[test]
    fn missing_manifest_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains(MANIFEST), "{err}");
    }
}
