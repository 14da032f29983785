//! Pre-generated augmentation records and teacher soft labels.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_augmentation, sample_augmentation, AugConfig, AugmentationRecord, MixKind, PixelBox};
use crate::classwise_bn::StatsMode;
use crate::data::LabeledDataset;
use crate::digest::{sha256, Digest32, Hasher};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::rng;
use crate::tensor::Tensor;

pub const STORE_MAGIC: &[u8; 8] = b"LPLDLBL1";
pub const STORE_VERSION: u16 = 1;
/// Encoded size of [`StoreHeader`].
pub const HEADER_BYTES: usize = 8 + 2 + 4 * 5 + 32 * 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelabelConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub aug: AugConfig,
    pub seed: u64,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        RelabelConfig { epochs: 30, batch_size: 10, aug: AugConfig::default(), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub num_classes: u32,
    pub ipc: u32,
    pub batch_size: u32,
    pub epochs: u32,
    pub batches_per_epoch: u32,
    pub aug_hash: Digest32,
    pub teacher_checksum: Digest32,
    /// SHA-256 of the condensed images and labels the records index into.
    pub data_checksum: Digest32,
}

impl StoreHeader {
    pub fn num_records(&self) -> u64 {
        self.epochs as u64 * self.batches_per_epoch as u64
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        for v in [self.num_classes, self.ipc, self.batch_size, self.epochs, self.batches_per_epoch] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.aug_hash);
        out.extend_from_slice(&self.teacher_checksum);
        out.extend_from_slice(&self.data_checksum);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::invalid(format!("label store header needs {HEADER_BYTES} bytes, got {}", bytes.len())));
        }
        if &bytes[..8] != STORE_MAGIC {
            return Err(Error::invalid("not a label store (bad magic)"));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != STORE_VERSION {
            return Err(Error::invalid(format!("unsupported label store version {version}")));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[10 + 4 * i..14 + 4 * i].try_into().expect("4 bytes"));
        let digest = |at: usize| -> Digest32 { bytes[at..at + 32].try_into().expect("32 bytes") };
        let h = StoreHeader {
            num_classes: u(0),
            ipc: u(1),
            batch_size: u(2),
            epochs: u(3),
            batches_per_epoch: u(4),
            aug_hash: digest(30),
            teacher_checksum: digest(62),
            data_checksum: digest(94),
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.batch_size == 0 || self.batch_size > u16::MAX as u32 + 1 {
            return Err(Error::invalid(format!("header with {} classes and batch size {}", self.num_classes, self.batch_size)));
        }
        if (self.batch_size as u64).saturating_mul(self.num_classes as u64) > 1 << 28 {
            return Err(Error::invalid("record size exceeds the supported limit"));
        }
        Ok(())
    }

    /// SHA-256 of the encoded header; pools and training runs refer to a store by it.
    pub fn hash(&self) -> Digest32 {
        sha256(&self.encode())
    }

    pub fn record_bytes(&self) -> usize {
        record_bytes(self.batch_size as usize, self.num_classes as usize)
    }
}

/// One stored batch: which images, how they were augmented, and the teacher logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelBatch {
    pub epoch: u32,
    pub batch_index: u32,
    pub image_indices: Vec<u32>,
    pub aug: AugmentationRecord,
    /// `[batch × num_classes]`, row-major.
    pub logits: Vec<f16>,
}

/// Size of an encoded [`SoftLabelBatch`].
pub fn record_bytes(batch: usize, num_classes: usize) -> usize {
    9 + batch * (4 + 8 + 2) + batch.div_ceil(8) + 4 + 8 + 2 * batch * num_classes
}

/// Bytes of augmentation components in a record: crops, flips, partners, λ and bbox.
pub fn augmentation_bytes(batch: usize) -> usize {
    batch * (8 + 2) + batch.div_ceil(8) + 4 + 8
}

pub fn logit_bytes(batch: usize, num_classes: usize) -> usize {
    2 * batch * num_classes
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::invalid("record truncated"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn pixel_box(&mut self) -> Result<PixelBox> {
        Ok(PixelBox { x: self.u16()?, y: self.u16()?, w: self.u16()?, h: self.u16()? })
    }
}

impl SoftLabelBatch {
    pub fn batch_size(&self) -> usize {
        self.image_indices.len()
    }

    pub fn logits_f32(&self) -> Vec<f32> {
        self.logits.iter().map(|v| v.to_f32()).collect()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.batch_index.to_le_bytes());
        out.push(self.aug.mix.code());
        for &i in &self.image_indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        let put_box = |out: &mut Vec<u8>, b: &PixelBox| {
            for v in [b.x, b.y, b.w, b.h] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for c in &self.aug.crops {
            put_box(out, c);
        }
        for &p in &self.aug.partner {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let mut bits = vec![0u8; self.aug.flips.len().div_ceil(8)];
        for (i, &f) in self.aug.flips.iter().enumerate() {
            if f {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bits);
        out.extend_from_slice(&self.aug.lambda.to_le_bytes());
        put_box(out, &self.aug.bbox);
        for v in &self.logits {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }

    /// Decodes one record of a store with the given batch size and class count.
    /// Structural problems come back as errors, never panics.
    pub fn decode(bytes: &[u8], batch: usize, num_classes: usize) -> Result<Self> {
        if bytes.len() != record_bytes(batch, num_classes) {
            return Err(Error::invalid(format!("record of {} bytes, expected {}", bytes.len(), record_bytes(batch, num_classes))));
        }
        let mut r = Reader { bytes, at: 0 };
        let epoch = r.u32()?;
        let batch_index = r.u32()?;
        let mix = MixKind::from_code(r.take(1)?[0])?;
        let image_indices = (0..batch).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let crops = (0..batch).map(|_| r.pixel_box()).collect::<Result<Vec<_>>>()?;
        let partner = (0..batch).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
        let bits = r.take(batch.div_ceil(8))?;
        let flips = (0..batch).map(|i| bits[i / 8] & (1 << (i % 8)) != 0).collect();
        let lambda = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        let bbox = r.pixel_box()?;
        let logits = (0..batch * num_classes).map(|_| r.u16().map(f16::from_bits)).collect::<Result<Vec<_>>>()?;
        Ok(SoftLabelBatch { epoch, batch_index, image_indices, aug: AugmentationRecord { crops, flips, partner, lambda, bbox, mix }, logits })
    }
}

/// The complete label corpus, records ordered by `(epoch, batch)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelStore {
    pub header: StoreHeader,
    pub records: Vec<SoftLabelBatch>,
}

impl LabelStore {
    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    pub fn record_id(&self, epoch: usize, batch: usize) -> usize {
        epoch * self.header.batches_per_epoch as usize + batch
    }

    pub fn get(&self, epoch: usize, batch: usize) -> Result<&SoftLabelBatch> {
        if batch >= self.header.batches_per_epoch as usize {
            return Err(Error::IndexOutOfRange { what: "batch", index: batch, len: self.header.batches_per_epoch as usize });
        }
        let id = self.record_id(epoch, batch);
        self.records.get(id).ok_or(Error::IndexOutOfRange { what: "record", index: id, len: self.records.len() })
    }

    /// Source epoch of a record id.
    pub fn epoch_of(&self, id: usize) -> usize {
        id / self.header.batches_per_epoch.max(1) as usize
    }

    /// Checks record count, order, sizes and augmentation validity against the header.
    pub fn validate(&self, image_hw: Option<(usize, usize)>) -> Result<()> {
        self.header.validate()?;
        if self.records.len() as u64 != self.header.num_records() {
            return Err(Error::invalid(format!("{} records, header says {}", self.records.len(), self.header.num_records())));
        }
        let (b, k) = (self.header.batch_size as usize, self.header.num_classes as usize);
        let n_images = self.header.num_classes as u64 * self.header.ipc as u64;
        for (id, r) in self.records.iter().enumerate() {
            let bpe = self.header.batches_per_epoch as usize;
            if r.epoch as usize != id / bpe || r.batch_index as usize != id % bpe {
                return Err(Error::invalid(format!("record {id} is out of (epoch, batch) order")));
            }
            if r.image_indices.len() != b || r.logits.len() != b * k || r.aug.batch_size() != b {
                return Err(Error::invalid(format!("record {id} has the wrong batch size")));
            }
            if let Some(&bad) = r.image_indices.iter().find(|&&i| i as u64 >= n_images) {
                return Err(Error::IndexOutOfRange { what: "image", index: bad as usize, len: n_images as usize });
            }
            if let Some((h, w)) = image_hw {
                r.aug.validate(h, w)?;
            }
        }
        Ok(())
    }
}

/// SHA-256 over pixel data and labels of a condensed set.
pub fn data_checksum(data: &LabeledDataset) -> Digest32 {
    let mut h = Hasher::new();
    h.bytes(b"condensed");
    for &d in data.images.shape() {
        h.u64(d as u64);
    }
    h.f32s(data.images.data());
    for &y in &data.labels {
        h.u64(y as u64);
    }
    h.finish()
}

/// Replays the augmentation of `record` on the condensed images it references.
pub fn replay_batch(record: &SoftLabelBatch, data: &LabeledDataset) -> Result<(Tensor<f32>, Vec<usize>)> {
    let rows: Vec<usize> = record.image_indices.iter().map(|&i| i as usize).collect();
    if let Some(&bad) = rows.iter().find(|&&i| i >= data.len()) {
        return Err(Error::IndexOutOfRange { what: "image", index: bad, len: data.len() });
    }
    let (x, labels) = data.batch(&rows)?;
    Ok((apply_augmentation(&record.aug, &x)?, labels))
}

/// Teacher logits of a replayed batch (eval mode, global statistics).
pub fn teacher_logits(teacher: &Model, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    teacher.logits(&teacher.normalize(images), StatsMode::Global)
}

/// Generates one epoch's records.
pub fn generate_epoch(teacher: &Model, data: &LabeledDataset, cfg: &RelabelConfig, epoch: usize) -> Result<Vec<SoftLabelBatch>> {
    let [_, h, w] = data.sample_shape();
    let mut order = rng::stream(cfg.seed, &[rng::TAG_RELABEL, epoch as u64]);
    let batches = rng::epoch_batches(data.len(), cfg.batch_size, true, &mut order);
    let mut out = Vec::with_capacity(batches.len());
    for (bi, rows) in batches.into_iter().enumerate() {
        let mut ar = rng::stream(cfg.seed, &[rng::TAG_AUGMENT, epoch as u64, bi as u64]);
        let aug = sample_augmentation(&mut ar, rows.len(), h, w, &cfg.aug)?;
        let (x, _) = data.batch(&rows)?;
        let logits = teacher_logits(teacher, &apply_augmentation(&aug, &x)?)?;
        if !logits.is_finite() {
            return Err(Error::NonFinite { context: format!("teacher logits at epoch {epoch}, batch {bi}") });
        }
        out.push(SoftLabelBatch {
            epoch: epoch as u32,
            batch_index: bi as u32,
            image_indices: rows.iter().map(|&r| r as u32).collect(),
            aug,
            logits: logits.data().iter().map(|&v| f16::from_f32(v)).collect(),
        });
    }
    Ok(out)
}

pub fn store_header(teacher: &Model, data: &LabeledDataset, cfg: &RelabelConfig, ipc: usize) -> Result<StoreHeader> {
    if cfg.batch_size == 0 || data.len() < cfg.batch_size {
        return Err(Error::invalid(format!("{} images cannot fill one batch of {}", data.len(), cfg.batch_size)));
    }
    if data.num_classes != teacher.num_classes() || data.sample_shape() != teacher.spec.input {
        return Err(Error::shape("generate_labels", "condensed data does not match the teacher"));
    }
    cfg.aug.validate()?;
    let header = StoreHeader {
        num_classes: data.num_classes as u32,
        ipc: ipc as u32,
        batch_size: cfg.batch_size as u32,
        epochs: cfg.epochs as u32,
        batches_per_epoch: (data.len() / cfg.batch_size) as u32,
        aug_hash: cfg.aug.hash(),
        teacher_checksum: teacher.fingerprint(),
        data_checksum: data_checksum(data),
    };
    header.validate()?;
    Ok(header)
}

/// Every epoch shuffles the condensed set, forms full batches (the last
/// incomplete one is dropped), samples the augmentation from
/// `(seed, epoch, batch)` and stores the teacher logits as f16.
pub fn generate_labels(teacher: &Model, data: &LabeledDataset, cfg: &RelabelConfig, ipc: usize) -> Result<LabelStore> {
    let header = store_header(teacher, data, cfg, ipc)?;
    let mut records = Vec::with_capacity(header.num_records() as usize);
    for epoch in 0..cfg.epochs {
        records.extend(generate_epoch(teacher, data, cfg, epoch)?);
    }
    Ok(LabelStore { header, records })
}

/// `|stored − fresh| ≤ 2⁻¹⁰ · max(|fresh|, 2⁻¹⁴)`: the f16 rounding bound, with the
/// subnormal floor for values near zero.
pub fn within_f16_bound(stored: f32, fresh: f32) -> bool {
    (stored - fresh).abs() <= libm::ldexpf(1.0, -10) * fresh.abs().max(libm::ldexpf(1.0, -14))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkSpec;
    use rand::Rng;

    fn setup() -> (Model, LabeledDataset) {
        let spec = NetworkSpec::small_cnn([3, 8, 8], &[4], 3);
        let m = Model::new(spec, 1).unwrap();
        let mut r = rng::stream(2, &[]);
        let x = Tensor::new(vec![6, 3, 8, 8], (0..6 * 192).map(|_| r.random::<f32>()).collect()).unwrap();
        (m, LabeledDataset::new(x, vec![0, 0, 1, 1, 2, 2], 3).unwrap())
    }

    #[test]
    fn one_full_batch_one_record() {
        let (m, d) = setup();
        let s = generate_labels(&m, &d, &RelabelConfig { epochs: 1, batch_size: 6, ..Default::default() }, 2).unwrap();
        assert_eq!(s.num_records(), 1);
        s.validate(Some((8, 8))).unwrap();
    }

    #[test]
    fn last_partial_batch_dropped() {
        let (m, d) = setup();
        let s = generate_labels(&m, &d, &RelabelConfig { epochs: 3, batch_size: 4, ..Default::default() }, 2).unwrap();
        assert_eq!(s.header.batches_per_epoch, 1);
        assert_eq!(s.num_records(), 3);
    }

    #[test]
    fn stored_logits_match_replay() {
        let (m, d) = setup();
        let s = generate_labels(&m, &d, &RelabelConfig { epochs: 2, batch_size: 3, ..Default::default() }, 2).unwrap();
        for r in &s.records {
            let (x, _) = replay_batch(r, &d).unwrap();
            let fresh = teacher_logits(&m, &x).unwrap();
            for (a, b) in r.logits_f32().iter().zip(fresh.data()) {
                assert!(within_f16_bound(*a, *b), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn record_codec_round_trip() {
        let (m, d) = setup();
        let s = generate_labels(&m, &d, &RelabelConfig { epochs: 2, batch_size: 3, ..Default::default() }, 2).unwrap();
        for r in &s.records {
            let mut buf = Vec::new();
            r.encode_into(&mut buf);
            assert_eq!(buf.len(), s.header.record_bytes());
            let back = SoftLabelBatch::decode(&buf, 3, 3).unwrap();
            assert_eq!(&back, r);
            let mut again = Vec::new();
            back.encode_into(&mut again);
            assert_eq!(buf, again);
        }
        let h = StoreHeader::decode(&s.header.encode()).unwrap();
        assert_eq!(h, s.header);
        assert_eq!(s.header.encode().len(), HEADER_BYTES);
    }

    #[test]
    fn metadata_is_small_next_to_logits() {
        for (b, k) in [(128, 100), (128, 1000), (32, 100)] {
            assert!((augmentation_bytes(b) as f64) < 0.05 * record_bytes(b, k) as f64, "b={b} k={k}");
        }
    }

    #[test]
    fn f16_bound() {
        assert!(within_f16_bound(f16::from_f32(3.14159).to_f32(), 3.14159));
        assert!(within_f16_bound(f16::from_f32(1e-6).to_f32(), 1e-6));
        assert!(!within_f16_bound(1.01, 1.0));
    }
}
