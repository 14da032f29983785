//! Label store files (`LPLDLBL1`).
//!
//! Layout: the encoded [`StoreHeader`], record count u64, index table of
//! absolute record offsets (u64 each), the fixed-size records in
//! `(epoch, batch)` order, and a SHA-256 footer over everything before it.

use std::path::Path;

use lpld_core::relabel::{LabelStore, SoftLabelBatch, StoreHeader, HEADER_BYTES};

use super::{seal, unseal, Reader};
use crate::error::{read_file, write_file, Error, Result};

const WHAT: &str = "label store";

pub fn encode(store: &LabelStore) -> Result<Vec<u8>> {
    store.validate(None)?;
    let n = store.records.len();
    let rb = store.header.record_bytes();
    let table_start = HEADER_BYTES + 8;
    let data_start = table_start + 8 * n;
    let mut out = Vec::with_capacity(data_start + n * rb + 32);
    out.extend_from_slice(&store.header.encode());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for i in 0..n {
        out.extend_from_slice(&((data_start + i * rb) as u64).to_le_bytes());
    }
    for r in &store.records {
        r.encode_into(&mut out);
    }
    Ok(seal(out))
}

/// A verified store file with random access to its records.
pub struct StoreFile {
    bytes: Vec<u8>,
    pub header: StoreHeader,
    offsets: Vec<u64>,
}

impl StoreFile {
    pub fn parse(mut bytes: Vec<u8>) -> Result<Self> {
        let body_len = unseal(WHAT, &bytes)?.len();
        bytes.truncate(body_len);
        let header = StoreHeader::decode(&bytes).map_err(|e| Error::format(WHAT, e.to_string()))?;
        let mut r = Reader::new(WHAT, &bytes);
        r.take(HEADER_BYTES)?;
        let n = r.u64()?;
        if n != header.num_records() {
            return Err(Error::format(WHAT, format!("{n} records, header implies {}", header.num_records())));
        }
        let rb = header.record_bytes() as u64;
        let data_start = HEADER_BYTES as u64 + 8 + 8u64.checked_mul(n).ok_or_else(|| Error::format(WHAT, "record count overflow"))?;
        let expected_len = n.checked_mul(rb).and_then(|v| v.checked_add(data_start));
        if expected_len != Some(bytes.len() as u64) {
            return Err(Error::format(WHAT, format!("file holds {} bytes, layout needs {expected_len:?}", bytes.len())));
        }
        let mut offsets = Vec::with_capacity(n as usize);
        for i in 0..n {
            let off = r.u64()?;
            if off != data_start + i * rb {
                return Err(Error::format(WHAT, format!("index entry {i} points to {off}")));
            }
            offsets.push(off);
        }
        Ok(StoreFile { bytes, header, offsets })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn record(&self, id: usize) -> Result<SoftLabelBatch> {
        let off = *self.offsets.get(id).ok_or_else(|| Error::format(WHAT, format!("record {id} of {}", self.offsets.len())))? as usize;
        let (b, k) = (self.header.batch_size as usize, self.header.num_classes as usize);
        let rec = SoftLabelBatch::decode(&self.bytes[off..off + self.header.record_bytes()], b, k).map_err(|e| Error::format(WHAT, format!("record {id}: {e}")))?;
        let bpe = self.header.batches_per_epoch as usize;
        if rec.epoch as usize != id / bpe || rec.batch_index as usize != id % bpe {
            return Err(Error::format(WHAT, format!("record {id} carries (epoch {}, batch {})", rec.epoch, rec.batch_index)));
        }
        if rec.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(WHAT, format!("record {id} has non-finite logits")));
        }
        Ok(rec)
    }

    /// Random access through the index table.
    pub fn get(&self, epoch: usize, batch: usize) -> Result<SoftLabelBatch> {
        let bpe = self.header.batches_per_epoch as usize;
        if batch >= bpe {
            return Err(Error::format(WHAT, format!("batch {batch} of {bpe}")));
        }
        self.record(epoch * bpe + batch)
    }

    pub fn into_store(self) -> Result<LabelStore> {
        let records = (0..self.len()).map(|i| self.record(i)).collect::<Result<Vec<_>>>()?;
        let store = LabelStore { header: self.header, records };
        store.validate(None).map_err(|e| Error::format(WHAT, e.to_string()))?;
        Ok(store)
    }
}

pub fn decode(bytes: &[u8]) -> Result<LabelStore> {
    StoreFile::parse(bytes.to_vec())?.into_store()
}

pub fn save(store: &LabelStore, path: &Path) -> Result<()> {
    write_file(path, &encode(store)?)
}

pub fn open(path: &Path) -> Result<StoreFile> {
    StoreFile::parse(read_file(path)?)
}

pub fn load(path: &Path) -> Result<LabelStore> {
    open(path)?.into_store()
}
