//! Replayable batch augmentation: random resized crop, horizontal flip and CutMix / Mixup.
//!
//! Every random choice lands in an [`AugmentationRecord`], so applying the
//! record again reproduces the batch exactly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::digest::{Digest32, Hasher};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixKind {
    None,
    CutMix,
    Mixup,
}

impl MixKind {
    pub fn code(self) -> u8 {
        match self {
            MixKind::None => 0,
            MixKind::CutMix => 1,
            MixKind::Mixup => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(MixKind::None),
            1 => Ok(MixKind::CutMix),
            2 => Ok(MixKind::Mixup),
            _ => Err(Error::invalid(format!("unknown mix kind {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub crop: bool,
    pub crop_scale: (f32, f32),
    pub crop_ratio: (f32, f32),
    pub flip_prob: f32,
    pub mix: MixKind,
    /// λ ~ Beta(α, α).
    pub mix_alpha: f32,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            crop: true,
            crop_scale: (0.08, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            mix: MixKind::CutMix,
            mix_alpha: 1.0,
        }
    }
}

impl AugConfig {
    pub fn identity() -> Self {
        AugConfig { crop: false, flip_prob: 0.0, mix: MixKind::None, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.crop_scale;
        let (r0, r1) = self.crop_ratio;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) || !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::invalid(format!("crop scale {:?} / ratio {:?}", self.crop_scale, self.crop_ratio)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(self.mix_alpha > 0.0) {
            return Err(Error::invalid("flip probability must lie in [0, 1] and mix alpha be positive"));
        }
        Ok(())
    }

    pub fn hash(&self) -> Digest32 {
        let mut h = Hasher::new();
        h.bytes(b"aug-config");
        h.u64(self.crop as u64);
        h.f32s(&[self.crop_scale.0, self.crop_scale.1, self.crop_ratio.0, self.crop_ratio.1, self.flip_prob, self.mix_alpha]);
        h.u64(self.mix.code() as u64);
        h.finish()
    }
}

/// Axis-aligned box in pixels: top-left `(x, y)` and size `(w, h)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: u16,
    pub y: u16,
    pub w: u16,
    pub h: u16,
}

impl PixelBox {
    pub fn full(height: usize, width: usize) -> Self {
        PixelBox { x: 0, y: 0, w: width as u16, h: height as u16 }
    }

    pub fn area(&self) -> usize {
        self.w as usize * self.h as usize
    }

    pub fn within(&self, height: usize, width: usize) -> bool {
        self.x as usize + self.w as usize <= width && self.y as usize + self.h as usize <= height
    }
}

/// Augmentation parameters of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationRecord {
    pub crops: Vec<PixelBox>,
    pub flips: Vec<bool>,
    /// Batch position of each sample's mixing partner.
    pub partner: Vec<u16>,
    /// Share of the primary image: `1 − area(bbox)/area(image)` for CutMix, the drawn λ for Mixup.
    pub lambda: f32,
    pub bbox: PixelBox,
    pub mix: MixKind,
}

impl AugmentationRecord {
    pub fn identity(batch: usize, height: usize, width: usize) -> Self {
        AugmentationRecord {
            crops: vec![PixelBox::full(height, width); batch],
            flips: vec![false; batch],
            partner: (0..batch as u16).collect(),
            lambda: 1.0,
            bbox: PixelBox::default(),
            mix: MixKind::None,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.crops.len()
    }

    /// Checks boxes, the partner permutation and the λ/bbox relation.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let b = self.crops.len();
        if self.flips.len() != b || self.partner.len() != b {
            return Err(Error::shape("augmentation record", format!("{b} crops, {} flips, {} partners", self.flips.len(), self.partner.len())));
        }
        if let Some(i) = self.crops.iter().position(|c| c.w == 0 || c.h == 0 || !c.within(height, width)) {
            return Err(Error::invalid(format!("crop {i} {:?} outside {height}x{width}", self.crops[i])));
        }
        let mut seen = vec![false; b];
        for &p in &self.partner {
            if p as usize >= b || seen[p as usize] {
                return Err(Error::invalid("partner list is not a permutation of the batch"));
            }
            seen[p as usize] = true;
        }
        if !self.bbox.within(height, width) {
            return Err(Error::invalid(format!("mix bbox {:?} outside image", self.bbox)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.mix == MixKind::CutMix && self.lambda != cutmix_lambda(&self.bbox, height, width) {
            return Err(Error::invalid("CutMix lambda does not match its bounding box"));
        }
        Ok(())
    }
}

/// `1 − area(bbox)/area(image)`.
pub fn cutmix_lambda(bbox: &PixelBox, height: usize, width: usize) -> f32 {
    (1.0 - bbox.area() as f64 / (height * width) as f64) as f32
}

/// Random resized crop box, following the usual ten-attempt rejection sampler
/// with a centre-crop fallback.
pub fn sample_crop(rng: &mut StreamRng, height: usize, width: usize, scale: (f32, f32), ratio: (f32, f32)) -> PixelBox {
    let area = (height * width) as f64;
    let (lr0, lr1) = (libm::log(ratio.0 as f64), libm::log(ratio.1 as f64));
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0 as f64..=scale.1 as f64);
        let aspect = libm::exp(if lr1 > lr0 { rng.random_range(lr0..lr1) } else { lr0 });
        let w = libm::round(libm::sqrt(target * aspect)) as usize;
        let h = libm::round(libm::sqrt(target / aspect)) as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let y = rng.random_range(0..=height - h);
            let x = rng.random_range(0..=width - w);
            return PixelBox { x: x as u16, y: y as u16, w: w as u16, h: h as u16 };
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < ratio.0 as f64 {
        (width, (libm::round(width as f64 / ratio.0 as f64) as usize).clamp(1, height))
    } else if in_ratio > ratio.1 as f64 {
        ((libm::round(height as f64 * ratio.1 as f64) as usize).clamp(1, width), height)
    } else {
        (width, height)
    };
    PixelBox { x: ((width - w) / 2) as u16, y: ((height - h) / 2) as u16, w: w as u16, h: h as u16 }
}

/// CutMix box for a drawn λ: side lengths `√(1−λ)` of the image around a uniform centre, clipped.
pub fn cutmix_box(rng: &mut StreamRng, lambda: f64, height: usize, width: usize) -> PixelBox {
    let cut = libm::sqrt(1.0 - lambda);
    let cut_w = (width as f64 * cut) as usize;
    let cut_h = (height as f64 * cut) as usize;
    let cx = rng.random_range(0..width);
    let cy = rng.random_range(0..height);
    let x1 = cx.saturating_sub(cut_w / 2);
    let y1 = cy.saturating_sub(cut_h / 2);
    let x2 = (cx + cut_w / 2).min(width);
    let y2 = (cy + cut_h / 2).min(height);
    PixelBox { x: x1 as u16, y: y1 as u16, w: (x2 - x1) as u16, h: (y2 - y1) as u16 }
}

/// Draws the augmentation of one batch.
pub fn sample_augmentation(rng: &mut StreamRng, batch: usize, height: usize, width: usize, cfg: &AugConfig) -> Result<AugmentationRecord> {
    cfg.validate()?;
    if batch > u16::MAX as usize + 1 || height > u16::MAX as usize || width > u16::MAX as usize {
        return Err(Error::invalid("batch and image sizes must fit in u16"));
    }
    let mut rec = AugmentationRecord::identity(batch, height, width);
    for i in 0..batch {
        if cfg.crop {
            rec.crops[i] = sample_crop(rng, height, width, cfg.crop_scale, cfg.crop_ratio);
        }
        if cfg.flip_prob > 0.0 {
            rec.flips[i] = rng.random::<f32>() < cfg.flip_prob;
        }
    }
    if cfg.mix != MixKind::None {
        let beta = Beta::new(cfg.mix_alpha as f64, cfg.mix_alpha as f64).map_err(|e| Error::invalid(format!("{e}")))?;
        let lambda = beta.sample(rng);
        rec.partner = rng::permutation(batch, rng).into_iter().map(|p| p as u16).collect();
        rec.mix = cfg.mix;
        match cfg.mix {
            MixKind::CutMix => {
                rec.bbox = cutmix_box(rng, lambda, height, width);
                rec.lambda = cutmix_lambda(&rec.bbox, height, width);
            }
            MixKind::Mixup => rec.lambda = lambda as f32,
            MixKind::None => unreachable!(),
        }
    }
    Ok(rec)
}

/// Bilinear resize of one `[h, w]` plane with half-pixel centres and edge clamping.
fn resize_plane(src: &[f32], sh: usize, sw: usize, dst: &mut [f32], dh: usize, dw: usize) {
    let (fy, fx) = (sh as f64 / dh as f64, sw as f64 / dw as f64);
    let coords = |d: usize, f: f64, n: usize| {
        let s = ((d as f64 + 0.5) * f - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let xs: Vec<(usize, usize, f32)> = (0..dw).map(|x| coords(x, fx, sw)).collect();
    for y in 0..dh {
        let (y0, y1, wy) = coords(y, fy, sh);
        for (x, &(x0, x1, wx)) in xs.iter().enumerate() {
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bottom = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            dst[y * dw + x] = top * (1.0 - wy) + bottom * wy;
        }
    }
}

/// Crop, resize back to the input size and optionally mirror one `[C, H, W]` image.
fn crop_flip(img: &[f32], c: usize, h: usize, w: usize, crop: &PixelBox, flip: bool, out: &mut [f32]) {
    let full = crop.x == 0 && crop.y == 0 && crop.w as usize == w && crop.h as usize == h;
    let (cx, cy, cw, ch) = (crop.x as usize, crop.y as usize, crop.w as usize, crop.h as usize);
    let mut patch = vec![0.0f32; cw * ch];
    for k in 0..c {
        let plane = &img[k * h * w..(k + 1) * h * w];
        let dst = &mut out[k * h * w..(k + 1) * h * w];
        if full {
            dst.copy_from_slice(plane);
        } else {
            for y in 0..ch {
                patch[y * cw..(y + 1) * cw].copy_from_slice(&plane[(cy + y) * w + cx..(cy + y) * w + cx + cw]);
            }
            resize_plane(&patch, ch, cw, dst, h, w);
        }
        if flip {
            for row in dst.chunks_mut(w) {
                row.reverse();
            }
        }
    }
}

/// Replays `record` on a batch `[B, C, H, W]`.
pub fn apply_augmentation(record: &AugmentationRecord, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = images.shape();
    if s.len() != 4 || s[0] != record.batch_size() {
        return Err(Error::shape("apply_augmentation", format!("images {s:?} for a batch of {}", record.batch_size())));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    record.validate(h, w)?;
    let per = c * h * w;
    let mut views = vec![0.0f32; b * per];
    for i in 0..b {
        crop_flip(&images.data()[i * per..(i + 1) * per], c, h, w, &record.crops[i], record.flips[i], &mut views[i * per..(i + 1) * per]);
    }
    let out = match record.mix {
        MixKind::None => views,
        MixKind::CutMix => {
            let mut out = views.clone();
            let bb = record.bbox;
            for i in 0..b {
                let p = record.partner[i] as usize;
                for k in 0..c {
                    for y in bb.y as usize..(bb.y + bb.h) as usize {
                        let row = i * per + k * h * w + y * w;
                        let prow = p * per + k * h * w + y * w;
                        let (x0, x1) = (bb.x as usize, (bb.x + bb.w) as usize);
                        out[row + x0..row + x1].copy_from_slice(&views[prow + x0..prow + x1]);
                    }
                }
            }
            out
        }
        MixKind::Mixup => {
            let lam = record.lambda;
            let mut out = vec![0.0f32; b * per];
            for i in 0..b {
                let p = record.partner[i] as usize;
                for j in 0..per {
                    out[i * per + j] = lam * views[i * per + j] + (1.0 - lam) * views[p * per + j];
                }
            }
            out
        }
    };
    Tensor::new(s.to_vec(), out)
}

/// λ-mixed one-hot targets matching an applied record.
pub fn mixed_targets(record: &AugmentationRecord, labels: &[usize], num_classes: usize) -> Result<Vec<f32>> {
    if labels.len() != record.batch_size() {
        return Err(Error::shape("mixed_targets", format!("{} labels for a batch of {}", labels.len(), record.batch_size())));
    }
    let mut t = vec![0.0f32; labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::ClassOutOfRange { class: y, num_classes });
        }
        let p = labels[record.partner[i] as usize];
        let lam = if record.mix == MixKind::None { 1.0 } else { record.lambda };
        t[i * num_classes + y] += lam;
        t[i * num_classes + p] += 1.0 - lam;
    }
    Ok(t)
}
