//! Paired moiré/clean images: ingestion, splits, geometric augmentation and
//! patch sampling.
//!
//! All randomness is derived from a [`SampleKey`] `(seed, epoch, index)`, so a
//! sample's augmentation and crop do not depend on the order in which samples
//! are prepared.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::SIZE_MULTIPLE;
use crate::tensor::Tensor;

/// File extensions picked up by [`load_pairs`].
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "bmp", "tif", "tiff"];

/// A moiré-corrupted image and its clean counterpart, both 1×3×H×W in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub moire: Tensor,
    pub clean: Tensor,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, moire: Tensor, clean: Tensor) -> Result<Self> {
        let id = id.into();
        if moire.shape() != clean.shape() || moire.batch() != 1 || moire.channels() != 3 {
            return Err(Error::Ingest(format!(
                "{id}: moire {:?} and clean {:?} must both be 1x3xHxW and equal",
                moire.shape(),
                clean.shape()
            )));
        }
        Ok(SamplePair { id, moire, clean })
    }

    pub fn height(&self) -> usize {
        self.moire.height()
    }

    pub fn width(&self) -> usize {
        self.moire.width()
    }
}

pub type Dataset = Vec<SamplePair>;

// ---------------------------------------------------------------------------
// Image codec

/// Decodes any supported raster into a 1×3×H×W tensor with 8-bit values mapped to `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Ingest(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    Tensor::from_fn([1, 3, h as usize, w as usize], |_, c, y, x| {
        img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    })
}

/// Converts batch item 0 to 8-bit RGB, clamping to `[0, 1]` and rounding.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    if t.channels() != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {:?}", t.shape())));
    }
    let (h, w) = (t.height(), t.width());
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (t.get(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

pub fn write_png(t: &Tensor, path: &Path) -> Result<()> {
    tensor_to_rgb(t)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Ingest(format!("cannot encode {}: {other}", path.display())),
        })
}

// ---------------------------------------------------------------------------
// Ingestion

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            files.insert(stem.to_string(), path.clone());
        }
    }
    Ok(files)
}

/// Loads `root/input/*` and `root/gt/*`, matched by file stem and sorted by id.
pub fn load_pairs(root: &Path) -> Result<Dataset> {
    load_pairs_from(&root.join("input"), &root.join("gt"))
}

/// Like [`load_pairs`] with explicit moiré and ground-truth directories.
pub fn load_pairs_from(input_dir: &Path, gt_dir: &Path) -> Result<Dataset> {
    let inputs = image_files(input_dir)?;
    let gts = image_files(gt_dir)?;
    if let Some(orphan) = inputs.keys().find(|k| !gts.contains_key(*k)) {
        return Err(Error::Ingest(format!(
            "\"{orphan}\" has no ground truth in {}",
            gt_dir.display()
        )));
    }
    if let Some(orphan) = gts.keys().find(|k| !inputs.contains_key(*k)) {
        return Err(Error::Ingest(format!(
            "\"{orphan}\" has no moire input in {}",
            input_dir.display()
        )));
    }
    let mut out = Vec::with_capacity(inputs.len());
    for (id, path) in &inputs {
        let moire = read_image(path)?;
        let clean = read_image(&gts[id])?;
        if moire.shape() != clean.shape() {
            return Err(Error::Ingest(format!(
                "\"{id}\": input is {}x{} but ground truth is {}x{}",
                moire.width(),
                moire.height(),
                clean.width(),
                clean.height()
            )));
        }
        out.push(SamplePair::new(id.clone(), moire, clean)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Keyed randomness

/// What a keyed random stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split,
    Shuffle,
    Augment,
    Patch,
}

/// Identifies one sample draw: global seed, epoch and sample index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleKey {
    pub seed: u64,
    pub epoch: u64,
    pub index: u64,
}

impl SampleKey {
    pub fn new(seed: u64, epoch: u64, index: u64) -> Self {
        SampleKey { seed, epoch, index }
    }

    /// An independent generator for `stream`, fully determined by the key.
    pub fn rng(&self, stream: Stream) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update([stream as u8]);
        h.update(self.seed.to_le_bytes());
        h.update(self.epoch.to_le_bytes());
        h.update(self.index.to_le_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

/// Seeded shuffle, then the first `train_n` ids go to train and the next `val_n` to validation.
pub fn split_dataset(dataset: &[SamplePair], train_n: usize, val_n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if train_n + val_n > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "split {train_n}+{val_n} exceeds dataset size {}",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut SampleKey::new(seed, 0, 0).rng(Stream::Split));
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset[i].clone()).collect::<Dataset>();
    Ok((pick(&order[..train_n]), pick(&order[train_n..train_n + val_n])))
}

// ---------------------------------------------------------------------------
// Augmentation

/// Quarter-turn rotation count plus optional flips, applied in that order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub rot_quarters: u8,
    pub hflip: bool,
    pub vflip: bool,
}

/// Rotates each plane 90° counter-clockwise.
pub fn rot90(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, w, h], |b, ch, i, j| x.get(b, ch, j, w - 1 - i))
}

pub fn hflip(x: &Tensor) -> Tensor {
    let w = x.width();
    Tensor::from_fn(x.shape(), |b, c, i, j| x.get(b, c, i, w - 1 - j))
}

pub fn vflip(x: &Tensor) -> Tensor {
    let h = x.height();
    Tensor::from_fn(x.shape(), |b, c, i, j| x.get(b, c, h - 1 - i, j))
}

/// Applies `spec` to one tensor: rotation, then horizontal flip, then vertical flip.
pub fn augment_tensor(x: &Tensor, spec: AugmentSpec) -> Tensor {
    let mut out = x.clone();
    for _ in 0..spec.rot_quarters % 4 {
        out = rot90(&out);
    }
    if spec.hflip {
        out = hflip(&out);
    }
    if spec.vflip {
        out = vflip(&out);
    }
    out
}

/// The same geometric transform on both images of the pair.
pub fn apply_augment(pair: &SamplePair, spec: AugmentSpec) -> SamplePair {
    SamplePair {
        id: pair.id.clone(),
        moire: augment_tensor(&pair.moire, spec),
        clean: augment_tensor(&pair.clean, spec),
    }
}

/// Uniform rotation in `0..4`, each flip with probability 1/2.
pub fn sample_augment<R: Rng>(rng: &mut R) -> AugmentSpec {
    AugmentSpec {
        rot_quarters: rng.gen_range(0..4),
        hflip: rng.gen_bool(0.5),
        vflip: rng.gen_bool(0.5),
    }
}

/// A `size × size` crop at the same uniformly drawn offset in both images.
pub fn extract_patch<R: Rng>(pair: &SamplePair, size: usize, rng: &mut R) -> Result<SamplePair> {
    let (h, w) = (pair.height(), pair.width());
    if size == 0 || !size.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::InvalidArgument(format!(
            "patch size {size} is not a positive multiple of {SIZE_MULTIPLE}"
        )));
    }
    if size > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "patch size {size} exceeds image {h}x{w} of \"{}\"",
            pair.id
        )));
    }
    let top = rng.gen_range(0..=h - size);
    let left = rng.gen_range(0..=w - size);
    Ok(SamplePair {
        id: pair.id.clone(),
        moire: pair.moire.crop(top, left, size, size)?,
        clean: pair.clean.crop(top, left, size, size)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(h: usize, w: usize) -> SamplePair {
        let m = Tensor::from_fn([1, 3, h, w], |_, c, y, x| (c * 1000 + y * w + x) as f64);
        let c = m.map(|v| -v);
        SamplePair::new("p", m, c).unwrap()
    }

    #[test]
    fn hflip_example() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(hflip(&x).data(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(vflip(&x).data(), &[3.0, 4.0, 1.0, 2.0]);
        assert_eq!(rot90(&x).data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn rotation_changes_aspect() {
        let p = pair(4, 6);
        let r = apply_augment(&p, AugmentSpec { rot_quarters: 1, ..Default::default() });
        assert_eq!(r.moire.shape(), [1, 3, 6, 4]);
    }

    #[test]
    fn keyed_streams_differ() {
        let k = SampleKey::new(1, 2, 3);
        let a: u64 = k.rng(Stream::Augment).gen();
        let b: u64 = k.rng(Stream::Patch).gen();
        let again: u64 = k.rng(Stream::Augment).gen();
        assert_ne!(a, b);
        assert_eq!(a, again);
    }

    #[test]
    fn patch_bounds() {
        let p = pair(32, 24);
        let mut rng = SampleKey::new(0, 0, 0).rng(Stream::Patch);
        for _ in 0..50 {
            let q = extract_patch(&p, 16, &mut rng).unwrap();
            assert_eq!(q.moire.shape(), [1, 3, 16, 16]);
            let v = q.moire.get(0, 0, 0, 0) as usize;
            let (top, left) = (v / 24, v % 24);
            assert!(top <= 16 && left <= 8);
        }
        assert!(extract_patch(&p, 12, &mut rng).is_err());
        assert!(extract_patch(&p, 32, &mut rng).is_err());
        assert_eq!(extract_patch(&pair(16, 16), 16, &mut rng).unwrap(), pair(16, 16));
    }

    #[test]
    fn split_rejects_oversized_requests() {
        let d: Dataset = (0..5).map(|_| pair(8, 8)).collect();
        assert!(matches!(split_dataset(&d, 4, 2, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let a = Tensor::zeros([1, 3, 8, 8]);
        let b = Tensor::zeros([1, 3, 8, 16]);
        assert!(matches!(SamplePair::new("x", a, b), Err(Error::Ingest(_))));
    }
}
