//! Condensed datasets on disk (one PNG per sample plus a manifest) and
//! class-per-subdirectory image folders.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use lpld_core::digest::{sha256, to_hex};
use lpld_core::recover::{CondensedDataset, RecoverMode};
use lpld_core::relabel::data_checksum;
use lpld_core::{LabeledDataset, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{read_file, write_file, Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub class: usize,
    pub file: String,
    /// SHA-256 of the sample's planar 8-bit pixels.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondensedManifest {
    pub num_classes: usize,
    pub ipc: usize,
    pub mode: RecoverMode,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Checksum of the decoded tensor, as recorded in label stores.
    pub data_checksum: String,
    pub samples: Vec<SampleEntry>,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

/// Planar `[C, H, W]` u8 pixels to PNG bytes.
pub fn encode_png(pixels: &[u8], c: usize, h: usize, w: usize) -> Result<Vec<u8>> {
    let img = match c {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, pixels.to_vec()).ok_or_else(|| Error::format("png", "pixel count"))?),
        3 => {
            let mut inter = vec![0u8; h * w * 3];
            for ch in 0..3 {
                for p in 0..h * w {
                    inter[p * 3 + ch] = pixels[ch * h * w + p];
                }
            }
            DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, inter).ok_or_else(|| Error::format("png", "pixel count"))?)
        }
        _ => return Err(Error::format("png", format!("{c} channels; only 1 or 3 are supported"))),
    };
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::format("png", e.to_string()))?;
    Ok(out.into_inner())
}

/// PNG bytes to planar u8 pixels with `c` channels, returning `(pixels, h, w)`.
pub fn decode_png(bytes: &[u8], c: usize, path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = match c {
        1 => img.into_luma8().into_raw(),
        3 => {
            let inter = img.into_rgb8().into_raw();
            let mut planar = vec![0u8; h * w * 3];
            for ch in 0..3 {
                for p in 0..h * w {
                    planar[ch * h * w + p] = inter[p * 3 + ch];
                }
            }
            planar
        }
        _ => return Err(Error::Image { path: path.to_path_buf(), msg: format!("{c} channels unsupported") }),
    };
    Ok((pixels, h, w))
}

fn sample_file(class: usize, slot: usize) -> String {
    format!("class_{class:04}/img_{slot:05}.png")
}

/// Writes one PNG per sample and the manifest; returns the manifest.
pub fn export_condensed(ds: &CondensedDataset, dir: &Path) -> Result<CondensedManifest> {
    ds.validate()?;
    let s = ds.images.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut samples = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let px: Vec<u8> = ds.images.row(i).iter().map(|&v| to_u8(v)).collect();
        let file = sample_file(ds.labels[i], i % ds.ipc);
        write_file(&dir.join(&file), &encode_png(&px, c, h, w)?)?;
        samples.push(SampleEntry { index: i, class: ds.labels[i], file, sha256: to_hex(&sha256(&px)) });
    }
    let manifest = CondensedManifest {
        num_classes: ds.num_classes,
        ipc: ds.ipc,
        mode: ds.mode,
        channels: c,
        height: h,
        width: w,
        data_checksum: to_hex(&data_checksum(&ds.to_dataset()?)),
        samples,
    };
    write_file(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CondensedManifest> {
    Ok(serde_json::from_slice(&read_file(&dir.join(MANIFEST))?)?)
}

/// Reads an exported condensed set, verifying every sample checksum.
pub fn import_condensed(dir: &Path) -> Result<CondensedDataset> {
    let m = read_manifest(dir)?;
    let (c, h, w) = (m.channels, m.height, m.width);
    if m.samples.len() != m.num_classes * m.ipc {
        return Err(Error::format("manifest", format!("{} samples for {} classes × {} ipc", m.samples.len(), m.num_classes, m.ipc)));
    }
    let mut data = Vec::with_capacity(m.samples.len() * c * h * w);
    let mut labels = Vec::with_capacity(m.samples.len());
    for (i, s) in m.samples.iter().enumerate() {
        if s.index != i {
            return Err(Error::format("manifest", format!("sample {i} listed as {}", s.index)));
        }
        let path = dir.join(&s.file);
        let (px, ph, pw) = decode_png(&read_file(&path)?, c, &path)?;
        if (ph, pw) != (h, w) {
            return Err(Error::Image { path, msg: format!("{ph}x{pw}, manifest says {h}x{w}") });
        }
        let found = to_hex(&sha256(&px));
        if found != s.sha256 {
            return Err(Error::Checksum { path, expected: s.sha256.clone(), found });
        }
        data.extend(px.into_iter().map(from_u8));
        labels.push(s.class);
    }
    let ds = CondensedDataset { images: Tensor::new(vec![labels.len(), c, h, w], data)?, labels, ipc: m.ipc, num_classes: m.num_classes, mode: m.mode };
    ds.validate()?;
    let found = to_hex(&data_checksum(&ds.to_dataset()?));
    if found != m.data_checksum {
        return Err(Error::Checksum { path: dir.join(MANIFEST), expected: m.data_checksum, found });
    }
    Ok(ds)
}

/// One grid image of all samples of `class`, `cols` per row.
pub fn contact_sheet(ds: &CondensedDataset, class: usize, cols: usize) -> Result<Vec<u8>> {
    let s = ds.images.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
    let cols = cols.max(1).min(rows.len().max(1));
    let grid_rows = rows.len().div_ceil(cols).max(1);
    let (gh, gw) = (grid_rows * h, cols * w);
    let mut px = vec![0u8; c * gh * gw];
    for (n, &i) in rows.iter().enumerate() {
        let (oy, ox) = ((n / cols) * h, (n % cols) * w);
        let src = ds.images.row(i);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    px[ch * gh * gw + (oy + y) * gw + ox + x] = to_u8(src[ch * h * w + y * w + x]);
                }
            }
        }
    }
    encode_png(&px, c, gh, gw)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    v.sort();
    Ok(v)
}

/// Channel count of a PNG: 1 for grayscale, 3 otherwise (alpha is dropped).
pub fn png_channels(bytes: &[u8], path: &Path) -> Result<usize> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })?;
    Ok(if img.color().has_color() { 3 } else { 1 })
}

/// Labeled images from `dir/<class>/*.png`; class ids follow the sorted
/// subdirectory names. All images must share one size. `channels` defaults
/// to that of the first image.
pub fn load_image_dir(dir: &Path, channels: Option<usize>) -> Result<(LabeledDataset, Vec<String>)> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(dir.to_path_buf()));
    }
    let classes: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(Error::format("image folder", format!("{} has no class subdirectories", dir.display())));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut size = None;
    let mut channels = channels;
    for (k, cdir) in classes.iter().enumerate() {
        for f in sorted_entries(cdir)?.into_iter().filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))) {
            let bytes = read_file(&f)?;
            let c = match channels {
                Some(c) => c,
                None => *channels.insert(png_channels(&bytes, &f)?),
            };
            let (px, h, w) = decode_png(&bytes, c, &f)?;
            match size {
                None => size = Some((h, w)),
                Some(s) if s != (h, w) => return Err(Error::Image { path: f, msg: format!("{h}x{w}, expected {}x{}", s.0, s.1) }),
                _ => {}
            }
            data.extend(px.into_iter().map(from_u8));
            labels.push(k);
        }
    }
    let (h, w) = size.ok_or_else(|| Error::format("image folder", format!("{} holds no PNG files", dir.display())))?;
    let names = classes.iter().map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()).collect();
    let ds = LabeledDataset::new(Tensor::new(vec![labels.len(), channels.unwrap_or(1), h, w], data)?, labels, classes.len())?;
    Ok((ds, names))
}

/// Writes a labeled dataset as a class-per-subdirectory PNG folder.
pub fn save_image_dir(ds: &LabeledDataset, dir: &Path) -> Result<()> {
    let [c, h, w] = ds.sample_shape();
    let mut slot = vec![0usize; ds.num_classes];
    for i in 0..ds.len() {
        let y = ds.labels[i];
        let px: Vec<u8> = ds.images.row(i).iter().map(|&v| to_u8(v)).collect();
        write_file(&dir.join(format!("class_{y:04}/img_{:05}.png", slot[y])), &encode_png(&px, c, h, w)?)?;
        slot[y] += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_rgb_and_gray() {
        let px: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 7 % 256) as u8).collect();
        let p = Path::new("x.png");
        assert_eq!(decode_png(&encode_png(&px, 3, 4, 5).unwrap(), 3, p).unwrap(), (px.clone(), 4, 5));
        assert_eq!(decode_png(&encode_png(&px[..20], 1, 4, 5).unwrap(), 1, p).unwrap(), (px[..20].to_vec(), 4, 5));
        assert!(encode_png(&px, 2, 4, 5).is_err());
    }

    #[test]
    fn u8_codec_is_exact_on_quantized_pixels() {
        for u in 0..=255u8 {
            let v = lpld_core::recover::quantize_pixel(u as f32 / 255.0);
            assert_eq!(to_u8(v), u);
            assert_eq!(from_u8(u).to_bits(), v.to_bits());
        }
    }
}
