//! Pool files (`LPLDPOOL`).
//!
//! Layout: magic, version u16, store header hash (32 bytes), granularity u8,
//! seed u64, keep ratio f64, batches per epoch u32, total records u64, kept
//! count u64, kept ids u64 each, SHA-256 footer.

use std::path::Path;

use lpld_core::labelpool::{Granularity, LabelPool};

use super::{seal, unseal, Reader};
use crate::error::{read_file, write_file, Error, Result};

pub const MAGIC: &[u8; 8] = b"LPLDPOOL";
pub const VERSION: u16 = 1;
const WHAT: &str = "pool";

pub fn encode(pool: &LabelPool) -> Result<Vec<u8>> {
    pool.validate()?;
    let mut out = Vec::with_capacity(8 + 2 + 32 + 1 + 8 + 8 + 4 + 16 + 8 * pool.kept.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&pool.store_hash);
    out.push(pool.granularity.code());
    out.extend_from_slice(&pool.seed.to_le_bytes());
    out.extend_from_slice(&pool.keep_ratio.to_le_bytes());
    out.extend_from_slice(&pool.batches_per_epoch.to_le_bytes());
    out.extend_from_slice(&pool.total_records.to_le_bytes());
    out.extend_from_slice(&(pool.kept.len() as u64).to_le_bytes());
    for id in &pool.kept {
        out.extend_from_slice(&id.to_le_bytes());
    }
    Ok(seal(out))
}

pub fn decode(bytes: &[u8]) -> Result<LabelPool> {
    let body = unseal(WHAT, bytes)?;
    let mut r = Reader::new(WHAT, body);
    r.magic(MAGIC)?;
    let v = r.u16()?;
    if v != VERSION {
        return Err(Error::format(WHAT, format!("unsupported version {v}")));
    }
    let store_hash = r.digest()?;
    let granularity = Granularity::from_code(r.u8()?).map_err(|e| Error::format(WHAT, e.to_string()))?;
    let seed = r.u64()?;
    let keep_ratio = r.f64()?;
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::format(WHAT, format!("keep ratio {keep_ratio}")));
    }
    let batches_per_epoch = r.u32()?;
    let total_records = r.u64()?;
    let n = r.u64()?;
    if n.checked_mul(8) != Some(r.remaining() as u64) {
        return Err(Error::format(WHAT, format!("{n} ids in {} bytes", r.remaining())));
    }
    let kept = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let pool = LabelPool { store_hash, granularity, keep_ratio, seed, batches_per_epoch, total_records, kept };
    pool.validate().map_err(|e| Error::format(WHAT, e.to_string()))?;
    Ok(pool)
}

pub fn save(pool: &LabelPool, path: &Path) -> Result<()> {
    write_file(path, &encode(pool)?)
}

pub fn load(path: &Path) -> Result<LabelPool> {
    decode(&read_file(path)?)
}
