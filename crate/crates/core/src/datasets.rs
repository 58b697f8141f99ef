//! Multi-object scene datasets with instance labels.
//!
//! Four synthetic variants place three digits on a 64x64 canvas:
//!
//! * `independent_mm`: white digits drawn additively, classes independent
//! * `triplet_mm`: white digits, all three of one class
//! * `rgb_occluded_mm`: one red, one green, one blue digit; later draws
//!   occlude earlier ones
//! * `cifar10_mm`: rgb digits over a resized photographic background
//!
//! The fifth variant, `clevr`, ingests rendered photographs (downsample to
//! 160x240, center-crop to 128x128) and carries no labels.
//!
//! A built bundle lives in one directory: `images/NNNNNNN.png`,
//! `labels/NNNNNNN.png` (labeled variants), `manifest.txt` with one record
//! per scene, and `spec.txt`. Scene content is a pure function of
//! (spec, scene index, corpus), so rebuilding a bundle reproduces it
//! byte for byte, and parallel builds equal serial ones.

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::scalar::Scalar;
use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// A digit claims a pixel when its scaled intensity exceeds this.
pub const INK_THRESHOLD: f64 = 0.1;

/// Label-PNG code for pixels claimed by two or more instances.
pub const OVERLAP_CODE: u8 = 255;

/// Digits are cropped to this box before rescaling.
const DIGIT_CROP: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    IndependentMm,
    TripletMm,
    RgbOccludedMm,
    Cifar10Mm,
    Clevr,
}

impl Variant {
    pub fn canvas(self) -> (usize, usize) {
        match self {
            Variant::Clevr => (128, 128),
            _ => (64, 64),
        }
    }

    pub fn objects_per_scene(self) -> usize {
        match self {
            Variant::Clevr => 0,
            _ => 3,
        }
    }

    pub fn is_multi_mnist(self) -> bool {
        matches!(
            self,
            Variant::IndependentMm | Variant::TripletMm | Variant::RgbOccludedMm
        )
    }

    /// Additive white drawing (as opposed to colored overwrite).
    pub fn is_additive(self) -> bool {
        matches!(self, Variant::IndependentMm | Variant::TripletMm)
    }

    pub fn has_labels(self) -> bool {
        self != Variant::Clevr
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::IndependentMm => "independent_mm",
            Variant::TripletMm => "triplet_mm",
            Variant::RgbOccludedMm => "rgb_occluded_mm",
            Variant::Cifar10Mm => "cifar10_mm",
            Variant::Clevr => "clevr",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent_mm" => Ok(Variant::IndependentMm),
            "triplet_mm" => Ok(Variant::TripletMm),
            "rgb_occluded_mm" => Ok(Variant::RgbOccludedMm),
            "cifar10_mm" => Ok(Variant::Cifar10Mm),
            "clevr" => Ok(Variant::Clevr),
            other => Err(Error::config(format!("unknown dataset variant '{other}'"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub variant: Variant,
    pub canvas: (usize, usize),
    pub objects_per_scene: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(variant: Variant, seed: u64) -> Self {
        SceneSpec {
            variant,
            canvas: variant.canvas(),
            objects_per_scene: variant.objects_per_scene(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas != self.variant.canvas() {
            return Err(Error::config(format!(
                "variant {} requires a {:?} canvas",
                self.variant,
                self.variant.canvas()
            )));
        }
        if self.objects_per_scene != self.variant.objects_per_scene() {
            return Err(Error::config(format!(
                "variant {} places exactly {} objects",
                self.variant,
                self.variant.objects_per_scene()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorTag {
    White,
    Red,
    Green,
    Blue,
}

impl ColorTag {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            ColorTag::White => [1.0, 1.0, 1.0],
            ColorTag::Red => [1.0, 0.0, 0.0],
            ColorTag::Green => [0.0, 1.0, 0.0],
            ColorTag::Blue => [0.0, 0.0, 1.0],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ColorTag::White => "white",
            ColorTag::Red => "red",
            ColorTag::Green => "green",
            ColorTag::Blue => "blue",
        }
    }
}

impl FromStr for ColorTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(ColorTag::White),
            "red" => Ok(ColorTag::Red),
            "green" => Ok(ColorTag::Green),
            "blue" => Ok(ColorTag::Blue),
            other => Err(Error::data(format!("unknown color tag '{other}'"))),
        }
    }
}

/// Per-instance record: digit class, draw color, and placement box
/// (row, col, side length). List order is draw order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectMeta {
    pub class: u8,
    pub color: ColorTag,
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

/// One dataset image with its instance labels.
///
/// `labels` holds 0 for background and 1..=N for instances. `overlap` marks
/// pixels claimed by two or more instances in the additive variants; such
/// pixels keep the strongest claimant's label but are excluded from
/// segmentation scoring.
#[derive(Debug, Clone)]
pub struct LabeledScene<F: Scalar> {
    /// `[H,W,3]`, values in [0,1].
    pub image: Array3<F>,
    pub labels: Array2<u8>,
    pub overlap: Array2<bool>,
    pub objects: Vec<ObjectMeta>,
}

impl<F: Scalar> LabeledScene<F> {
    /// Image as `[3,H,W]`.
    pub fn image_chw(&self) -> Array3<F> {
        self.image.clone().permuted_axes([2, 0, 1]).as_standard_layout().to_owned()
    }

    /// Ground-truth digit pixels minus overlap flags: the domain on which
    /// segmentations of this scene are scored.
    pub fn eval_mask(&self) -> Array2<bool> {
        let mut m = self.labels.mapv(|l| l > 0);
        m.zip_mut_with(&self.overlap, |v, &o| *v = *v && !o);
        m
    }
}

// ---------------------------------------------------------------------------
// corpora

/// Grayscale digit images with class labels, the raw material for the
/// multi-digit variants.
#[derive(Debug, Clone)]
pub struct DigitCorpus<F: Scalar> {
    images: Vec<Array2<F>>,
    labels: Vec<u8>,
    by_class: Vec<Vec<usize>>,
    pub fingerprint: String,
}

fn idx_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::data("idx file truncated"))
}

impl<F: Scalar> DigitCorpus<F> {
    /// Parse the classic idx image/label pair (magic 2051 / 2049).
    pub fn from_idx_bytes(images: &[u8], labels: &[u8]) -> Result<Self> {
        if idx_u32(images, 0)? != 2051 {
            return Err(Error::data("bad magic in idx image file"));
        }
        if idx_u32(labels, 0)? != 2049 {
            return Err(Error::data("bad magic in idx label file"));
        }
        let n = idx_u32(images, 4)? as usize;
        if idx_u32(labels, 4)? as usize != n {
            return Err(Error::data("idx image/label counts differ"));
        }
        let h = idx_u32(images, 8)? as usize;
        let w = idx_u32(images, 12)? as usize;
        if images.len() != 16 + n * h * w || labels.len() != 8 + n {
            return Err(Error::data("idx payload length mismatch"));
        }
        let mut imgs = Vec::with_capacity(n);
        let mut labs = Vec::with_capacity(n);
        for i in 0..n {
            let px = &images[16 + i * h * w..16 + (i + 1) * h * w];
            imgs.push(Array2::from_shape_fn((h, w), |(r, c)| {
                F::c(px[r * w + c] as f64 / 255.0)
            }));
            let class = labels[8 + i];
            if class > 9 {
                return Err(Error::data(format!("digit label {class} out of range")));
            }
            labs.push(class);
        }
        let mut hasher = Sha256::new();
        hasher.update(images);
        hasher.update(labels);
        Self::assemble(imgs, labs, hex16(hasher))
    }

    pub fn from_idx_files(images: &Path, labels: &Path) -> Result<Self> {
        let ib = fs::read(images).map_err(|e| Error::io(images, e))?;
        let lb = fs::read(labels).map_err(|e| Error::io(labels, e))?;
        Self::from_idx_bytes(&ib, &lb)
    }

    /// Procedural stand-in corpus: a 5x7 bitmap font rendered at 28x28 with
    /// per-sample size and position jitter. Ten classes, `per_class`
    /// samples each.
    pub fn synthetic(per_class: usize, seed: u64) -> Result<Self> {
        if per_class == 0 {
            return Err(Error::config("synthetic corpus needs per_class >= 1"));
        }
        let mut imgs = Vec::with_capacity(per_class * 10);
        let mut labs = Vec::with_capacity(per_class * 10);
        for class in 0..10u8 {
            let glyph = glyph_bitmap(class);
            for copy in 0..per_class {
                let mut rng = stream(seed, "glyph", class as u64 * 1_000_003 + copy as u64);
                let gh = 18 + rng.gen_range(0..5);
                let gw = 12 + rng.gen_range(0..5);
                let scaled = bilinear_resize2(&glyph, gh, gw);
                let r0 = (28 - gh) / 2 + rng.gen_range(0..3) - 1;
                let c0 = (28 - gw) / 2 + rng.gen_range(0..3) - 1;
                let mut canvas = Array2::zeros((28, 28));
                for i in 0..gh {
                    for j in 0..gw {
                        canvas[[r0 + i, c0 + j]] = scaled[[i, j]];
                    }
                }
                imgs.push(canvas);
                labs.push(class);
            }
        }
        Self::assemble(imgs, labs, format!("synthetic-digits-{per_class}-{seed}"))
    }

    fn assemble(images: Vec<Array2<F>>, labels: Vec<u8>, fingerprint: String) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::data("digit corpus is empty"));
        }
        let mut by_class = vec![Vec::new(); 10];
        for (i, &c) in labels.iter().enumerate() {
            by_class[c as usize].push(i);
        }
        Ok(DigitCorpus { images, labels, by_class, fingerprint })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_of(&self, i: usize) -> u8 {
        self.labels[i]
    }

    /// Classes with at least one sample.
    fn present_classes(&self) -> Vec<u8> {
        (0..10u8).filter(|&c| !self.by_class[c as usize].is_empty()).collect()
    }

    /// Central crop used as the drawing stamp.
    fn stamp(&self, i: usize) -> Array2<F> {
        let img = &self.images[i];
        let (h, w) = img.dim();
        if h <= DIGIT_CROP || w <= DIGIT_CROP {
            return img.clone();
        }
        let r0 = (h - DIGIT_CROP) / 2;
        let c0 = (w - DIGIT_CROP) / 2;
        img.slice(ndarray::s![r0..r0 + DIGIT_CROP, c0..c0 + DIGIT_CROP]).to_owned()
    }
}

/// 5x7 bitmap of a digit glyph as a float image.
fn glyph_bitmap<F: Scalar>(class: u8) -> Array2<F> {
    // row-major, 5 bits per row, msb = leftmost column
    const FONT: [[u8; 7]; 10] = [
        [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E], // 0
        [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E], // 1
        [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F], // 2
        [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E], // 3
        [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02], // 4
        [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E], // 5
        [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E], // 6
        [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08], // 7
        [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E], // 8
        [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C], // 9
    ];
    let rows = FONT[class as usize];
    Array2::from_shape_fn((7, 5), |(r, c)| {
        if rows[r] & (1 << (4 - c)) != 0 {
            F::one()
        } else {
            F::zero()
        }
    })
}

/// Color images serving as photographic backdrops.
#[derive(Debug, Clone)]
pub struct ImageCorpus<F: Scalar> {
    images: Vec<Array3<F>>,
    pub fingerprint: String,
}

impl<F: Scalar> ImageCorpus<F> {
    /// Parse CIFAR-10 binary batches (per record: 1 label byte + 3x1024
    /// plane bytes, 32x32).
    pub fn from_cifar_bins(paths: &[PathBuf]) -> Result<Self> {
        const REC: usize = 1 + 3 * 1024;
        let mut images = Vec::new();
        let mut hasher = Sha256::new();
        for path in paths {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            if bytes.is_empty() || bytes.len() % REC != 0 {
                return Err(Error::data(format!(
                    "{} is not a cifar10 binary batch",
                    path.display()
                )));
            }
            hasher.update(&bytes);
            for rec in bytes.chunks_exact(REC) {
                let px = &rec[1..];
                images.push(Array3::from_shape_fn((32, 32, 3), |(r, c, ch)| {
                    F::c(px[ch * 1024 + r * 32 + c] as f64 / 255.0)
                }));
            }
        }
        if images.is_empty() {
            return Err(Error::data("no cifar10 batches supplied"));
        }
        Ok(ImageCorpus { images, fingerprint: hex16(hasher) })
    }

    /// Procedural stand-in: smooth two-corner color gradients at 32x32.
    pub fn synthetic(count: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::config("synthetic backdrop corpus needs count >= 1"));
        }
        let mut images = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = stream(seed, "backdrop", i as u64);
            let a: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            let b: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            let horizontal = rng.gen::<bool>();
            images.push(Array3::from_shape_fn((32, 32, 3), |(r, c, ch)| {
                let t = if horizontal { c as f64 / 31.0 } else { r as f64 / 31.0 };
                F::c(a[ch] * (1.0 - t) + b[ch] * t)
            }));
        }
        Ok(ImageCorpus { images, fingerprint: format!("synthetic-backdrops-{count}-{seed}") })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn hex16(hasher: Sha256) -> String {
    let digest = hasher.finalize();
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// resampling

/// Bilinear resample with half-pixel centers, clamped at the borders.
pub fn bilinear_resize2<F: Scalar>(src: &Array2<F>, h: usize, w: usize) -> Array2<F> {
    let (sh, sw) = src.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (r0, r1, fr) = sample_coords(i, h, sh);
        let (c0, c1, fc) = sample_coords(j, w, sw);
        let top = src[[r0, c0]] * (F::one() - fc) + src[[r0, c1]] * fc;
        let bot = src[[r1, c0]] * (F::one() - fc) + src[[r1, c1]] * fc;
        top * (F::one() - fr) + bot * fr
    })
}

/// Channel-wise bilinear resample of an `[H,W,C]` image.
pub fn bilinear_resize3<F: Scalar>(src: &Array3<F>, h: usize, w: usize) -> Array3<F> {
    let (sh, sw, ch) = src.dim();
    Array3::from_shape_fn((h, w, ch), |(i, j, c)| {
        let (r0, r1, fr) = sample_coords(i, h, sh);
        let (c0, c1, fc) = sample_coords(j, w, sw);
        let top = src[[r0, c0, c]] * (F::one() - fc) + src[[r0, c1, c]] * fc;
        let bot = src[[r1, c0, c]] * (F::one() - fc) + src[[r1, c1, c]] * fc;
        top * (F::one() - fr) + bot * fr
    })
}

fn sample_coords<F: Scalar>(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, F) {
    let pos = (dst as f64 + 0.5) * (src_len as f64 / dst_len as f64) - 0.5;
    let pos = pos.clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, F::c(pos - lo as f64))
}

fn center_crop3<F: Scalar>(src: &Array3<F>, h: usize, w: usize) -> Array3<F> {
    let (sh, sw, _) = src.dim();
    let r0 = (sh - h) / 2;
    let c0 = (sw - w) / 2;
    src.slice(ndarray::s![r0..r0 + h, c0..c0 + w, ..]).to_owned()
}

// ---------------------------------------------------------------------------
// scene rendering

struct Placement {
    corpus_index: usize,
    row: usize,
    col: usize,
    stamp: usize,
}

fn draw_placements<F: Scalar>(
    spec: &SceneSpec,
    index: u64,
    digits: &DigitCorpus<F>,
    backdrops: Option<&ImageCorpus<F>>,
) -> Result<(Vec<Placement>, Option<usize>)> {
    let mut rng = stream(spec.seed, "scene", index);
    let backdrop = match backdrops {
        Some(b) => Some(rng.gen_range(0..b.len())),
        None => None,
    };
    let triplet_class = if spec.variant == Variant::TripletMm {
        let present = digits.present_classes();
        if present.is_empty() {
            return Err(Error::data("digit corpus has no classes"));
        }
        Some(present[rng.gen_range(0..present.len())])
    } else {
        None
    };
    let (ch, cw) = spec.canvas;
    let mut out = Vec::with_capacity(spec.objects_per_scene);
    for _ in 0..spec.objects_per_scene {
        let corpus_index = match triplet_class {
            Some(c) => {
                let pool = &digits.by_class[c as usize];
                pool[rng.gen_range(0..pool.len())]
            }
            None => rng.gen_range(0..digits.len()),
        };
        let scale: f64 = rng.gen_range(0.8..1.2);
        let stamp = ((DIGIT_CROP as f64) * scale).round() as usize;
        let row = rng.gen_range(0..=ch - stamp);
        let col = rng.gen_range(0..=cw - stamp);
        out.push(Placement { corpus_index, row, col, stamp });
    }
    Ok((out, backdrop))
}

/// Render scene `index` of a bundle-in-the-making. Pure in
/// (spec, index, corpora).
pub fn render_scene<F: Scalar>(
    spec: &SceneSpec,
    index: u64,
    digits: &DigitCorpus<F>,
    backdrops: Option<&ImageCorpus<F>>,
) -> Result<LabeledScene<F>> {
    spec.validate()?;
    if spec.variant == Variant::Clevr {
        return Err(Error::config("clevr scenes are ingested, not rendered"));
    }
    if spec.variant == Variant::Cifar10Mm && backdrops.is_none() {
        return Err(Error::config("cifar10_mm needs a backdrop corpus"));
    }
    let (placements, backdrop) = draw_placements(spec, index, digits, backdrops)?;
    let (h, w) = spec.canvas;
    let ink = F::c(INK_THRESHOLD);

    let stamps: Vec<Array2<F>> = placements
        .iter()
        .map(|p| bilinear_resize2(&digits.stamp(p.corpus_index), p.stamp, p.stamp))
        .collect();

    let mut objects = Vec::with_capacity(placements.len());
    let mut image;
    let mut labels = Array2::<u8>::zeros((h, w));
    let mut overlap = Array2::from_elem((h, w), false);

    if spec.variant.is_additive() {
        let mut gray = Array2::<F>::zeros((h, w));
        // strongest claim and claim count per pixel
        let mut best = Array2::<F>::zeros((h, w));
        let mut claims = Array2::<u8>::zeros((h, w));
        for (slot, (p, stamp)) in placements.iter().zip(&stamps).enumerate() {
            for i in 0..p.stamp {
                for j in 0..p.stamp {
                    let v = stamp[[i, j]];
                    let (r, c) = (p.row + i, p.col + j);
                    gray[[r, c]] = gray[[r, c]] + v;
                    if v > ink {
                        claims[[r, c]] += 1;
                        if v > best[[r, c]] {
                            best[[r, c]] = v;
                            labels[[r, c]] = slot as u8 + 1;
                        }
                    }
                }
            }
            objects.push(ObjectMeta {
                class: digits.class_of(p.corpus_index),
                color: ColorTag::White,
                row: p.row,
                col: p.col,
                size: p.stamp,
            });
        }
        overlap.zip_mut_with(&claims, |o, &n| *o = n >= 2);
        let one = F::one();
        image = Array3::from_shape_fn((h, w, 3), |(r, c, _)| gray[[r, c]].min(one));
    } else {
        image = match (backdrop, backdrops) {
            (Some(b), Some(corp)) => bilinear_resize3(&corp.images[b], h, w),
            _ => Array3::zeros((h, w, 3)),
        };
        const SLOT_COLORS: [ColorTag; 3] = [ColorTag::Red, ColorTag::Green, ColorTag::Blue];
        for (slot, (p, stamp)) in placements.iter().zip(&stamps).enumerate() {
            let color = SLOT_COLORS[slot];
            let rgb = color.rgb().map(F::c);
            for i in 0..p.stamp {
                for j in 0..p.stamp {
                    let v = stamp[[i, j]];
                    if v > ink {
                        let (r, c) = (p.row + i, p.col + j);
                        for ch in 0..3 {
                            image[[r, c, ch]] = rgb[ch] * v;
                        }
                        labels[[r, c]] = slot as u8 + 1;
                    }
                }
            }
            objects.push(ObjectMeta {
                class: digits.class_of(p.corpus_index),
                color,
                row: p.row,
                col: p.col,
                size: p.stamp,
            });
        }
    }

    Ok(LabeledScene { image, labels, overlap, objects })
}

// ---------------------------------------------------------------------------
// png i/o

fn quantize<F: Scalar>(v: F) -> u8 {
    (v.to_f64().unwrap_or(0.0).clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb_png<F: Scalar>(path: &Path, image: &Array3<F>) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::shape("save_rgb_png expects [H,W,3]"));
    }
    let mut buf = Vec::with_capacity(h * w * 3);
    for px in image.iter() {
        buf.push(quantize(*px));
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::shape("png buffer size mismatch"))?;
    img.save(path)
        .map_err(|e| Error::data(format!("writing {}: {e}", path.display())))
}

pub fn load_rgb_png<F: Scalar>(path: &Path) -> Result<Array3<F>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("reading {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, ch)| {
        F::c(raw[(r * w as usize + c) * 3 + ch] as f64 / 255.0)
    }))
}

pub fn save_gray_png(path: &Path, map: &Array2<u8>) -> Result<()> {
    let (h, w) = map.dim();
    let buf: Vec<u8> = map.iter().copied().collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::shape("png buffer size mismatch"))?;
    img.save(path)
        .map_err(|e| Error::data(format!("writing {}: {e}", path.display())))
}

pub fn load_gray_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("reading {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| raw[r * w as usize + c]))
}

/// Color layer plus alpha as one RGBA file.
pub fn save_rgba_png<F: Scalar>(path: &Path, color: &Array3<F>, alpha: &Array2<F>) -> Result<()> {
    let (h, w, c) = color.dim();
    if c != 3 || alpha.dim() != (h, w) {
        return Err(Error::shape("save_rgba_png expects [H,W,3] color and [H,W] alpha"));
    }
    let mut buf = Vec::with_capacity(h * w * 4);
    for r in 0..h {
        for cc in 0..w {
            for ch in 0..3 {
                buf.push(quantize(color[[r, cc, ch]]));
            }
            buf.push(quantize(alpha[[r, cc]]));
        }
    }
    let img = image::RgbaImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::shape("png buffer size mismatch"))?;
    img.save(path)
        .map_err(|e| Error::data(format!("writing {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// bundles

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Holdout,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "holdout" => Ok(Split::Holdout),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split '{other}'"))),
        }
    }
}

/// Scene counts per split: a fifth of the bundle is held out (FID
/// reference), a tenth is the test split, the rest trains.
pub fn split_counts(count: u64) -> (u64, u64, u64) {
    let holdout = count / 5;
    let test = count / 10;
    (count - holdout - test, holdout, test)
}

fn split_of(index: u64, counts: (u64, u64, u64)) -> Split {
    if index < counts.0 {
        Split::Train
    } else if index < counts.0 + counts.1 {
        Split::Holdout
    } else {
        Split::Test
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleSpec {
    pub scene: SceneSpec,
    pub count: u64,
    pub fingerprint: String,
}

#[derive(Debug, Clone)]
pub struct SceneEntry {
    pub index: u64,
    pub split: Split,
    pub objects: Vec<ObjectMeta>,
}

/// An on-disk dataset directory plus its parsed manifest.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub root: PathBuf,
    pub spec: BundleSpec,
    pub entries: Vec<SceneEntry>,
}

const MANIFEST_HEADER: &str = "kgan-bundle v1";

fn scene_name(index: u64) -> String {
    format!("{index:07}")
}

impl DatasetBundle {
    pub fn image_size(&self) -> usize {
        self.spec.scene.canvas.0
    }

    pub fn entries_of(&self, split: Split) -> Vec<&SceneEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn count_of(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn image_path(&self, index: u64) -> PathBuf {
        self.root.join("images").join(format!("{}.png", scene_name(index)))
    }

    pub fn label_path(&self, index: u64) -> PathBuf {
        self.root.join("labels").join(format!("{}.png", scene_name(index)))
    }

    pub fn load_scene<F: Scalar>(&self, entry: &SceneEntry) -> Result<LabeledScene<F>> {
        let image = load_rgb_png(&self.image_path(entry.index))?;
        let (h, w, _) = image.dim();
        let (labels, overlap) = if self.spec.scene.variant.has_labels() {
            let raw = load_gray_png(&self.label_path(entry.index))?;
            let overlap = raw.mapv(|v| v == OVERLAP_CODE);
            let labels = raw.mapv(|v| if v == OVERLAP_CODE { 0 } else { v });
            (labels, overlap)
        } else {
            (Array2::zeros((h, w)), Array2::from_elem((h, w), false))
        };
        Ok(LabeledScene { image, labels, overlap, objects: entry.objects.clone() })
    }

    /// Uniform sample with replacement from one split.
    pub fn sample_batch<F: Scalar>(
        &self,
        split: Split,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<LabeledScene<F>>> {
        if batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        let pool = self.entries_of(split);
        if pool.is_empty() {
            return Err(Error::data(format!("split {} is empty", split.as_str())));
        }
        (0..batch_size)
            .map(|_| self.load_scene(pool[rng.gen_range(0..pool.len())]))
            .collect()
    }

    /// Every image of a split as one `[N,3,S,S]` tensor.
    pub fn split_images<F: Scalar>(&self, split: Split) -> Result<Array4<F>> {
        let pool = self.entries_of(split);
        if pool.is_empty() {
            return Err(Error::data(format!("split {} is empty", split.as_str())));
        }
        let s = self.image_size();
        let mut out = Array4::zeros((pool.len(), 3, s, s));
        for (i, entry) in pool.iter().enumerate() {
            let scene: LabeledScene<F> = self.load_scene(entry)?;
            out.index_axis_mut(Axis(0), i).assign(&scene.image_chw());
        }
        Ok(out)
    }

    /// Per-object crops of a split resized to `size`, with their class ids.
    /// `[N,3,size,size]` in draw order within each scene.
    pub fn object_crops<F: Scalar>(
        &self,
        split: Split,
        size: usize,
    ) -> Result<(Array4<F>, Vec<u8>)> {
        let pool = self.entries_of(split);
        let total: usize = pool.iter().map(|e| e.objects.len()).sum();
        if total == 0 {
            return Err(Error::data("no object records to crop"));
        }
        let mut out = Array4::zeros((total, 3, size, size));
        let mut classes = Vec::with_capacity(total);
        let mut at = 0;
        for entry in pool {
            let scene: LabeledScene<F> = self.load_scene(entry)?;
            for meta in &entry.objects {
                let crop = scene
                    .image
                    .slice(ndarray::s![
                        meta.row..meta.row + meta.size,
                        meta.col..meta.col + meta.size,
                        ..
                    ])
                    .to_owned();
                let resized = bilinear_resize3(&crop, size, size);
                out.index_axis_mut(Axis(0), at)
                    .assign(&resized.permuted_axes([2, 0, 1]));
                classes.push(meta.class);
                at += 1;
            }
        }
        Ok((out, classes))
    }

    fn write_manifest(&self) -> Result<()> {
        let mut text = String::new();
        text.push_str(MANIFEST_HEADER);
        text.push('\n');
        text.push_str(&format!("variant {}\n", self.spec.scene.variant));
        text.push_str(&format!(
            "canvas {} {}\n",
            self.spec.scene.canvas.0, self.spec.scene.canvas.1
        ));
        text.push_str(&format!("objects_per_scene {}\n", self.spec.scene.objects_per_scene));
        text.push_str(&format!("seed {}\n", self.spec.scene.seed));
        text.push_str(&format!("count {}\n", self.spec.count));
        text.push_str(&format!("fingerprint {}\n", self.spec.fingerprint));
        for e in &self.entries {
            let objects = if e.objects.is_empty() {
                "-".to_string()
            } else {
                e.objects
                    .iter()
                    .map(|o| {
                        format!("{}:{}:{}:{}:{}", o.class, o.color.as_str(), o.row, o.col, o.size)
                    })
                    .collect::<Vec<_>>()
                    .join(";")
            };
            text.push_str(&format!(
                "scene {} {} {objects}\n",
                scene_name(e.index),
                e.split.as_str()
            ));
        }
        let path = self.root.join("manifest.txt");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let spec_path = self.root.join("spec.txt");
        let spec_text = toml::to_string_pretty(&self.spec)
            .map_err(|e| Error::data(format!("bundle spec serialization: {e}")))?;
        fs::write(&spec_path, spec_text).map_err(|e| Error::io(&spec_path, e))
    }

    /// Parse a bundle directory written by one of the builders.
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::data(format!("{} is not a bundle manifest", path.display())));
        }
        let mut variant = None;
        let mut canvas = None;
        let mut objects_per_scene = None;
        let mut seed = None;
        let mut count = None;
        let mut fingerprint = None;
        let mut entries = Vec::new();
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let rest: Vec<&str> = parts.collect();
            let bad = || Error::data(format!("malformed manifest line '{line}'"));
            match key {
                "variant" => variant = Some(rest.first().ok_or_else(bad)?.parse::<Variant>()?),
                "canvas" => {
                    let h = rest.first().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                    let w = rest.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?;
                    canvas = Some((h, w));
                }
                "objects_per_scene" => {
                    objects_per_scene =
                        Some(rest.first().ok_or_else(bad)?.parse().map_err(|_| bad())?)
                }
                "seed" => seed = Some(rest.first().ok_or_else(bad)?.parse().map_err(|_| bad())?),
                "count" => count = Some(rest.first().ok_or_else(bad)?.parse().map_err(|_| bad())?),
                "fingerprint" => fingerprint = Some(rest.first().ok_or_else(bad)?.to_string()),
                "scene" => {
                    let index: u64 = rest.first().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                    let split: Split = rest.get(1).ok_or_else(bad)?.parse()?;
                    let objects = match rest.get(2) {
                        None | Some(&"-") => Vec::new(),
                        Some(blob) => blob
                            .split(';')
                            .map(|o| {
                                let f: Vec<&str> = o.split(':').collect();
                                if f.len() != 5 {
                                    return Err(bad());
                                }
                                Ok(ObjectMeta {
                                    class: f[0].parse().map_err(|_| bad())?,
                                    color: f[1].parse()?,
                                    row: f[2].parse().map_err(|_| bad())?,
                                    col: f[3].parse().map_err(|_| bad())?,
                                    size: f[4].parse().map_err(|_| bad())?,
                                })
                            })
                            .collect::<Result<Vec<_>>>()?,
                    };
                    entries.push(SceneEntry { index, split, objects });
                }
                _ => return Err(bad()),
            }
        }
        let missing = || Error::data(format!("{} is missing header fields", path.display()));
        let scene = SceneSpec {
            variant: variant.ok_or_else(missing)?,
            canvas: canvas.ok_or_else(missing)?,
            objects_per_scene: objects_per_scene.ok_or_else(missing)?,
            seed: seed.ok_or_else(missing)?,
        };
        let spec = BundleSpec {
            scene,
            count: count.ok_or_else(missing)?,
            fingerprint: fingerprint.ok_or_else(missing)?,
        };
        if entries.len() as u64 != spec.count {
            return Err(Error::data(format!(
                "manifest lists {} scenes but count says {}",
                entries.len(),
                spec.count
            )));
        }
        Ok(DatasetBundle { root: root.to_path_buf(), spec, entries })
    }
}

fn bundle_dirs(root: &Path, labeled: bool) -> Result<()> {
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    if labeled {
        let labels = root.join("labels");
        fs::create_dir_all(&labels).map_err(|e| Error::io(&labels, e))?;
    }
    Ok(())
}

fn encode_labels(scene: &LabeledScene<impl Scalar>) -> Array2<u8> {
    let mut raw = scene.labels.clone();
    raw.zip_mut_with(&scene.overlap, |l, &o| {
        if o {
            *l = OVERLAP_CODE;
        }
    });
    raw
}

fn build_rendered<F: Scalar>(
    spec: &SceneSpec,
    count: u64,
    digits: &DigitCorpus<F>,
    backdrops: Option<&ImageCorpus<F>>,
    fingerprint: String,
    out: &Path,
) -> Result<DatasetBundle> {
    spec.validate()?;
    bundle_dirs(out, true)?;
    let counts = split_counts(count);
    let bundle_spec = BundleSpec { scene: *spec, count, fingerprint };
    let shell = DatasetBundle {
        root: out.to_path_buf(),
        spec: bundle_spec.clone(),
        entries: Vec::new(),
    };
    let entries: Vec<SceneEntry> = (0..count)
        .into_par_iter()
        .map(|index| -> Result<SceneEntry> {
            let scene = render_scene(spec, index, digits, backdrops)?;
            save_rgb_png(&shell.image_path(index), &scene.image)?;
            save_gray_png(&shell.label_path(index), &encode_labels(&scene))?;
            Ok(SceneEntry { index, split: split_of(index, counts), objects: scene.objects })
        })
        .collect::<Result<Vec<_>>>()?;
    let bundle = DatasetBundle { root: out.to_path_buf(), spec: bundle_spec, entries };
    bundle.write_manifest()?;
    Ok(bundle)
}

/// Build one of the three digit-only variants.
pub fn build_multi_mnist<F: Scalar>(
    spec: &SceneSpec,
    count: u64,
    digits: &DigitCorpus<F>,
    out: &Path,
) -> Result<DatasetBundle> {
    if !spec.variant.is_multi_mnist() {
        return Err(Error::config(format!(
            "build_multi_mnist does not handle variant {}",
            spec.variant
        )));
    }
    let mut hasher = Sha256::new();
    hasher.update(digits.fingerprint.as_bytes());
    hasher.update(spec.seed.to_le_bytes());
    build_rendered(spec, count, digits, None, hex16(hasher), out)
}

/// Build the digits-over-photographs variant.
pub fn build_cifar_mm<F: Scalar>(
    spec: &SceneSpec,
    count: u64,
    digits: &DigitCorpus<F>,
    backdrops: &ImageCorpus<F>,
    out: &Path,
) -> Result<DatasetBundle> {
    if spec.variant != Variant::Cifar10Mm {
        return Err(Error::config("build_cifar_mm handles only variant cifar10_mm"));
    }
    let mut hasher = Sha256::new();
    hasher.update(digits.fingerprint.as_bytes());
    hasher.update(backdrops.fingerprint.as_bytes());
    hasher.update(spec.seed.to_le_bytes());
    build_rendered(spec, count, digits, Some(backdrops), hex16(hasher), out)
}

pub struct ClevrReport {
    pub bundle: DatasetBundle,
    /// Unreadable files that were skipped, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Ingest a directory of rendered photographs: downsample to 160x240,
/// center-crop to 128x128. Files are processed in name order; unreadable
/// files are skipped, undersized ones are an error.
pub fn ingest_clevr(src: &Path, out: &Path) -> Result<ClevrReport> {
    const DOWN_H: usize = 160;
    const DOWN_W: usize = 240;
    let mut files: Vec<PathBuf> = fs::read_dir(src)
        .map_err(|e| Error::io(src, e))?
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::io(src, e))?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();

    bundle_dirs(out, false)?;
    let spec_scene = SceneSpec::new(Variant::Clevr, 0);
    let mut hasher = Sha256::new();
    let mut kept: Vec<Array3<f32>> = Vec::new();
    let mut skipped = Vec::new();
    for path in &files {
        let img = match image::open(path) {
            Ok(i) => i.to_rgb8(),
            Err(e) => {
                skipped.push((path.clone(), e.to_string()));
                continue;
            }
        };
        let (w, h) = img.dimensions();
        if (w as usize) < DOWN_W || (h as usize) < DOWN_H {
            return Err(Error::data(format!(
                "{} is {w}x{h}, smaller than the {DOWN_W}x{DOWN_H} downsample target",
                path.display()
            )));
        }
        hasher.update(path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        hasher.update((img.len() as u64).to_le_bytes());
        let raw = img.into_raw();
        let arr = Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, ch)| {
            raw[(r * w as usize + c) * 3 + ch] as f32 / 255.0
        });
        let down = bilinear_resize3(&arr, DOWN_H, DOWN_W);
        kept.push(center_crop3(&down, 128, 128));
    }
    if kept.is_empty() {
        return Err(Error::data(format!("{} has no usable images", src.display())));
    }

    let count = kept.len() as u64;
    let counts = split_counts(count);
    let spec = BundleSpec { scene: spec_scene, count, fingerprint: hex16(hasher) };
    let bundle = DatasetBundle {
        root: out.to_path_buf(),
        spec,
        entries: (0..count)
            .map(|index| SceneEntry { index, split: split_of(index, counts), objects: Vec::new() })
            .collect(),
    };
    for (index, image) in kept.iter().enumerate() {
        save_rgb_png(&bundle.image_path(index as u64), image)?;
    }
    bundle.write_manifest()?;
    Ok(ClevrReport { bundle, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn corpus() -> DigitCorpus<f64> {
        DigitCorpus::synthetic(5, 11).unwrap()
    }

    #[test]
    fn bilinear_identity_and_known_upsample() {
        let src = arr2(&[[0.0, 1.0], [2.0, 3.0]]);
        let same = bilinear_resize2(&src, 2, 2);
        assert_eq!(same, src);

        let up = bilinear_resize2(&src, 4, 4);
        // row positions map to source coords [0, 0.25, 0.75, 1]
        let expect = |r: f64, c: f64| {
            let top = 0.0 * (1.0 - c) + 1.0 * c;
            let bot = 2.0 * (1.0 - c) + 3.0 * c;
            top * (1.0 - r) + bot * r
        };
        let coords = [0.0, 0.25, 0.75, 1.0];
        for (i, &r) in coords.iter().enumerate() {
            for (j, &c) in coords.iter().enumerate() {
                assert!((up[[i, j]] - expect(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn independent_scenes_have_three_instances() {
        let spec = SceneSpec::new(Variant::IndependentMm, 0);
        for index in 0..4 {
            let scene = render_scene(&spec, index, &corpus(), None).unwrap();
            assert_eq!(scene.image.dim(), (64, 64, 3));
            assert_eq!(scene.objects.len(), 3);
            for slot in 1..=3u8 {
                let px = scene.labels.iter().filter(|&&l| l == slot).count();
                let overlapped = scene
                    .labels
                    .iter()
                    .zip(scene.overlap.iter())
                    .filter(|(_, &o)| o)
                    .count();
                assert!(
                    px > 0 || overlapped > 0,
                    "instance {slot} has no pixels in scene {index}"
                );
            }
            assert!(scene.labels.iter().all(|&l| l <= 3));
            // grayscale means equal channels
            for r in 0..64 {
                for c in 0..64 {
                    assert_eq!(scene.image[[r, c, 0]], scene.image[[r, c, 1]]);
                    assert_eq!(scene.image[[r, c, 0]], scene.image[[r, c, 2]]);
                }
            }
        }
    }

    #[test]
    fn triplet_scenes_share_one_class() {
        let spec = SceneSpec::new(Variant::TripletMm, 7);
        for index in 0..6 {
            let scene = render_scene(&spec, index, &corpus(), None).unwrap();
            let class = scene.objects[0].class;
            assert!(scene.objects.iter().all(|o| o.class == class));
        }
    }

    #[test]
    fn rgb_instances_cover_exactly_the_nonblack_pixels() {
        let spec = SceneSpec::new(Variant::RgbOccludedMm, 1);
        for index in 0..100 {
            let scene = render_scene(&spec, index, &corpus(), None).unwrap();
            let ids: std::collections::HashSet<u8> =
                scene.labels.iter().copied().filter(|&l| l > 0).collect();
            assert!(ids.len() <= 3);
            for r in 0..64 {
                for c in 0..64 {
                    let nonblack = (0..3).any(|ch| scene.image[[r, c, ch]] > 0.0);
                    assert_eq!(
                        scene.labels[[r, c]] > 0,
                        nonblack,
                        "scene {index} pixel ({r},{c})"
                    );
                }
            }
            assert!(!scene.overlap.iter().any(|&o| o));
        }
    }

    #[test]
    fn rgb_pixel_colors_match_their_instance_tag() {
        let spec = SceneSpec::new(Variant::RgbOccludedMm, 3);
        let scene = render_scene(&spec, 0, &corpus(), None).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                let l = scene.labels[[r, c]];
                if l == 0 {
                    continue;
                }
                let tag = scene.objects[l as usize - 1].color.rgb();
                for ch in 0..3 {
                    if tag[ch] == 0.0 {
                        assert_eq!(scene.image[[r, c, ch]], 0.0);
                    } else {
                        assert!(scene.image[[r, c, ch]] > INK_THRESHOLD);
                    }
                }
            }
        }
    }

    #[test]
    fn cifar_label_zero_is_exactly_the_untouched_backdrop() {
        let spec = SceneSpec::new(Variant::Cifar10Mm, 3);
        let backdrops = ImageCorpus::<f64>::synthetic(4, 2).unwrap();
        for index in 0..50 {
            let scene = render_scene(&spec, index, &corpus(), Some(&backdrops)).unwrap();
            // re-derive the backdrop to compare untouched pixels
            let mut rng = stream(spec.seed, "scene", index);
            let b = rng.gen_range(0..backdrops.len());
            let bg = bilinear_resize3(&backdrops.images[b], 64, 64);
            for r in 0..64 {
                for c in 0..64 {
                    if scene.labels[[r, c]] == 0 {
                        for ch in 0..3 {
                            assert_eq!(scene.image[[r, c, ch]], bg[[r, c, ch]]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn additive_overlap_pixels_are_flagged_and_keep_the_strongest_claim() {
        let spec = SceneSpec::new(Variant::IndependentMm, 0);
        let corpus = corpus();
        let mut saw_overlap = false;
        for index in 0..60 {
            let scene = render_scene(&spec, index, &corpus, None).unwrap();
            if scene.overlap.iter().any(|&o| o) {
                saw_overlap = true;
                // overlapped pixels still carry a valid instance id
                for (l, &o) in scene.labels.iter().zip(scene.overlap.iter()) {
                    if o {
                        assert!((1..=3).contains(l));
                    }
                }
                break;
            }
        }
        assert!(saw_overlap, "no overlapping scene found in 60 tries");
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = SceneSpec::new(Variant::IndependentMm, 5);
        let corpus = corpus();
        let a = render_scene(&spec, 2, &corpus, None).unwrap();
        let b = render_scene(&spec, 2, &corpus, None).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.overlap, b.overlap);
        assert_eq!(a.objects, b.objects);
    }

    #[test]
    fn bundle_roundtrip_preserves_scenes_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::new(Variant::IndependentMm, 0);
        let built =
            build_multi_mnist::<f64>(&spec, 12, &corpus(), dir.path()).unwrap();
        assert_eq!(built.entries.len(), 12);
        let (tr, ho, te) = split_counts(12);
        assert_eq!((tr, ho, te), (9, 2, 1));
        assert_eq!(built.count_of(Split::Train), 9);
        assert_eq!(built.count_of(Split::Holdout), 2);
        assert_eq!(built.count_of(Split::Test), 1);

        let opened = DatasetBundle::open(dir.path()).unwrap();
        assert_eq!(opened.spec, built.spec);
        assert_eq!(opened.entries.len(), built.entries.len());
        for (a, b) in opened.entries.iter().zip(&built.entries) {
            assert_eq!(a.index, b.index);
            assert_eq!(a.split, b.split);
            assert_eq!(a.objects, b.objects);
        }

        // loaded scene content equals the rendered scene after quantization;
        // on disk, overlap pixels carry the reserved code instead of an id
        let scene = render_scene::<f64>(&spec, 0, &corpus(), None).unwrap();
        let loaded: LabeledScene<f64> = opened.load_scene(&opened.entries[0]).unwrap();
        for (a, b) in scene.image.iter().zip(loaded.image.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
        assert_eq!(scene.overlap, loaded.overlap);
        for ((l, &o), &ld) in scene.labels.iter().zip(scene.overlap.iter()).zip(loaded.labels.iter()) {
            if o {
                assert_eq!(ld, 0);
            } else {
                assert_eq!(*l, ld);
            }
        }
    }

    #[test]
    fn rebuilding_gives_bit_identical_files() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = SceneSpec::new(Variant::RgbOccludedMm, 9);
        let corpus = corpus();
        build_multi_mnist::<f64>(&spec, 6, &corpus, d1.path()).unwrap();
        build_multi_mnist::<f64>(&spec, 6, &corpus, d2.path()).unwrap();
        for name in ["manifest.txt", "spec.txt", "images/0000003.png", "labels/0000003.png"] {
            let a = fs::read(d1.path().join(name)).unwrap();
            let b = fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical builds");
        }
    }

    #[test]
    fn empty_bundle_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::new(Variant::TripletMm, 1);
        let bundle = build_multi_mnist::<f64>(&spec, 0, &corpus(), dir.path()).unwrap();
        assert!(bundle.entries.is_empty());
        let opened = DatasetBundle::open(dir.path()).unwrap();
        assert_eq!(opened.spec.count, 0);
        assert!(opened.sample_batch::<f64>(Split::Train, 1, &mut stream(0, "t", 0)).is_err());
    }

    #[test]
    fn sample_batch_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::new(Variant::IndependentMm, 4);
        let bundle = build_multi_mnist::<f64>(&spec, 10, &corpus(), dir.path()).unwrap();
        let a = bundle.sample_batch::<f64>(Split::Train, 5, &mut stream(3, "b", 0)).unwrap();
        let b = bundle.sample_batch::<f64>(Split::Train, 5, &mut stream(3, "b", 0)).unwrap();
        assert_eq!(a.len(), 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.labels, y.labels);
        }
    }

    #[test]
    fn split_images_shape_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::new(Variant::Cifar10Mm, 0);
        let backdrops = ImageCorpus::<f64>::synthetic(3, 0).unwrap();
        let bundle =
            build_cifar_mm::<f64>(&spec, 10, &corpus(), &backdrops, dir.path()).unwrap();
        let imgs: Array4<f64> = bundle.split_images(Split::Holdout).unwrap();
        assert_eq!(imgs.dim(), (2, 3, 64, 64));
        assert!(imgs.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn object_crops_carry_classes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::new(Variant::IndependentMm, 2);
        let bundle = build_multi_mnist::<f64>(&spec, 5, &corpus(), dir.path()).unwrap();
        assert_eq!(bundle.count_of(Split::Train), 4);
        let (crops, classes): (Array4<f64>, Vec<u8>) =
            bundle.object_crops(Split::Train, 16).unwrap();
        assert_eq!(crops.dim(), (12, 3, 16, 16));
        assert_eq!(classes.len(), 12);
        assert!(classes.iter().all(|&c| c < 10));
    }

    #[test]
    fn idx_parser_roundtrip() {
        // two 3x2 images, classes 7 and 1
        let mut img = vec![0u8; 16];
        img[3] = 3; // magic 2051
        img[2] = 8;
        img[7] = 2; // count
        img[11] = 3; // rows
        img[15] = 2; // cols
        img.extend_from_slice(&[0, 51, 102, 153, 204, 255, 255, 204, 153, 102, 51, 0]);
        let mut lab = vec![0u8; 8];
        lab[3] = 1; // magic 2049
        lab[2] = 8;
        lab[7] = 2;
        lab.extend_from_slice(&[7, 1]);
        let corpus = DigitCorpus::<f64>::from_idx_bytes(&img, &lab).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.class_of(0), 7);
        assert_eq!(corpus.class_of(1), 1);
        assert!((corpus.images[0][[0, 1]] - 51.0 / 255.0).abs() < 1e-12);
        assert!((corpus.images[1][[2, 1]] - 0.0).abs() < 1e-12);

        let bad_magic = DigitCorpus::<f64>::from_idx_bytes(&lab, &lab);
        assert!(bad_magic.is_err());
    }

    #[test]
    fn clevr_ingest_resizes_and_rejects_small_inputs() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        // a 480x320 gradient
        let big = Array3::<f32>::from_shape_fn((320, 480, 3), |(r, c, ch)| {
            (r as f32 / 319.0 + c as f32 / 479.0 + ch as f32) / 3.0
        });
        save_rgb_png(&src.path().join("a.png"), &big).unwrap();
        fs::write(src.path().join("junk.png"), b"not a png").unwrap();
        let report = ingest_clevr(src.path(), out.path()).unwrap();
        assert_eq!(report.bundle.entries.len(), 1);
        assert_eq!(report.skipped.len(), 1);
        let img: Array3<f64> = load_rgb_png(&report.bundle.image_path(0)).unwrap();
        assert_eq!(img.dim(), (128, 128, 3));

        let src2 = tempfile::tempdir().unwrap();
        let out2 = tempfile::tempdir().unwrap();
        let small = Array3::<f32>::from_elem((128, 128, 3), 0.5);
        save_rgb_png(&src2.path().join("small.png"), &small).unwrap();
        assert!(ingest_clevr(src2.path(), out2.path()).is_err());
    }

    #[test]
    fn clevr_ingest_is_deterministic() {
        let src = tempfile::tempdir().unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let img = Array3::<f32>::from_shape_fn((200, 300, 3), |(r, c, ch)| {
            ((r * 7 + c * 3 + ch * 11) % 256) as f32 / 255.0
        });
        save_rgb_png(&src.path().join("x.png"), &img).unwrap();
        ingest_clevr(src.path(), a.path()).unwrap();
        ingest_clevr(src.path(), b.path()).unwrap();
        let pa = fs::read(a.path().join("images/0000000.png")).unwrap();
        let pb = fs::read(b.path().join("images/0000000.png")).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn parallel_build_equals_serial_rendering() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::new(Variant::IndependentMm, 13);
        let corpus = corpus();
        let bundle = build_multi_mnist::<f64>(&spec, 8, &corpus, dir.path()).unwrap();
        for entry in &bundle.entries {
            let direct = render_scene::<f64>(&spec, entry.index, &corpus, None).unwrap();
            assert_eq!(direct.objects, entry.objects);
        }
    }

    #[test]
    fn wrong_variant_builders_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::new(Variant::Cifar10Mm, 0);
        assert!(build_multi_mnist::<f64>(&spec, 1, &corpus(), dir.path()).is_err());
        let spec2 = SceneSpec::new(Variant::IndependentMm, 0);
        let backdrops = ImageCorpus::<f64>::synthetic(2, 0).unwrap();
        assert!(build_cifar_mm::<f64>(&spec2, 1, &corpus(), &backdrops, dir.path()).is_err());
    }

    #[test]
    fn synthetic_corpus_has_all_classes_and_distinct_samples() {
        let c = DigitCorpus::<f64>::synthetic(3, 0).unwrap();
        assert_eq!(c.len(), 30);
        for class in 0..10u8 {
            assert_eq!(c.by_class[class as usize].len(), 3);
        }
        let a = &c.images[c.by_class[0][0]];
        let b = &c.images[c.by_class[0][1]];
        assert_ne!(a, b, "jitter should differentiate same-class samples");
    }
}
