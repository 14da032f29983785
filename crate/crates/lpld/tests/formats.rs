//! Binary artifact round trips and robustness against corrupt files.

mod common;

use lpld::formats::stats::ClassStatsTable;
use lpld::formats::{checkpoint, pool, stats, store};
use lpld::Error;
use lpld_core::digest::sha256;
use lpld_core::rng;
use rand::Rng;

#[test]
fn store_round_trip_is_byte_identical() {
    let f = common::fixture();
    let bytes = store::encode(&f.store).unwrap();
    let back = store::decode(&bytes).unwrap();
    assert_eq!(back, f.store);
    assert_eq!(store::encode(&back).unwrap(), bytes);
    assert_eq!(bytes.len() as u64, lpld_core::labelpool::store_file_bytes(&f.store.header, f.store.records.len() as u64));
}

#[test]
fn store_random_access_matches_sequential() {
    let f = common::fixture();
    let file = store::StoreFile::parse(store::encode(&f.store).unwrap()).unwrap();
    let bpe = f.store.header.batches_per_epoch as usize;
    for (id, rec) in f.store.records.iter().enumerate().rev() {
        assert_eq!(&file.get(id / bpe, id % bpe).unwrap(), rec);
    }
    assert!(file.get(0, bpe).is_err());
    assert!(file.record(f.store.records.len()).is_err());
}

#[test]
fn pool_round_trip_is_byte_identical() {
    let f = common::fixture();
    let bytes = pool::encode(&f.pool).unwrap();
    let back = pool::decode(&bytes).unwrap();
    assert_eq!(back, f.pool);
    assert_eq!(pool::encode(&back).unwrap(), bytes);
}

#[test]
fn teacher_files_round_trip() {
    let f = common::fixture();
    let ck = checkpoint::encode_model(&f.teacher).unwrap();
    let table = ClassStatsTable::from_model(&f.teacher).unwrap();
    let st = table.encode();
    let mut m = checkpoint::decode_model(&ck).unwrap();
    ClassStatsTable::decode(&st).unwrap().apply(&mut m).unwrap();
    assert_eq!(m.fingerprint(), f.teacher.fingerprint());
    assert_eq!(checkpoint::encode_model(&m).unwrap(), ck);
}

#[test]
fn file_io_reports_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.lpld");
    assert!(matches!(store::load(&missing), Err(Error::MissingArtifact(p)) if p == missing));
    let f = common::fixture();
    let p = dir.path().join("pool.lpldp");
    pool::save(&f.pool, &p).unwrap();
    assert_eq!(pool::load(&p).unwrap(), f.pool);
}

fn reseal(mut body: Vec<u8>) -> Vec<u8> {
    let d = sha256(&body);
    body.extend_from_slice(&d);
    body
}

/// Truncation, bit flips, or bit flips in the body with a recomputed footer
/// (which exercises the structural checks behind the checksum).
fn mutate(base: &[u8], sealed: bool, r: &mut impl Rng) -> (Vec<u8>, bool) {
    let kind = r.random_range(0..3);
    let bytes = match kind {
        0 => base[..r.random_range(0..base.len())].to_vec(),
        1 => {
            let mut b = base.to_vec();
            for _ in 0..r.random_range(1..=4) {
                let i = r.random_range(0..b.len());
                b[i] ^= 1 << r.random_range(0..8);
            }
            b
        }
        _ => {
            let body_len = if sealed { base.len() - 32 } else { base.len() };
            let mut b = base[..body_len].to_vec();
            for _ in 0..r.random_range(1..=3) {
                let i = r.random_range(0..b.len());
                b[i] ^= 1 << r.random_range(0..8);
            }
            if r.random_bool(0.3) {
                b.truncate(r.random_range(0..b.len()));
            }
            if sealed {
                reseal(b)
            } else {
                b
            }
        }
    };
    (bytes, kind == 0)
}

#[test]
fn fuzzed_files_yield_structured_errors() {
    let f = common::fixture();
    let bases = [
        (store::encode(&f.store).unwrap(), true),
        (pool::encode(&f.pool).unwrap(), true),
        (ClassStatsTable::from_model(&f.teacher).unwrap().encode(), false),
        (checkpoint::encode_model(&f.teacher).unwrap(), false),
    ];
    let mut r = rng::stream(2024, &[0]);
    let mut rejected = 0;
    for case in 0..10_000 {
        let which = case % bases.len();
        let (base, sealed) = &bases[which];
        let (bytes, truncated) = mutate(base, *sealed, &mut r);
        let ok = match which {
            0 => store::StoreFile::parse(bytes.clone()).and_then(|s| s.into_store()).is_ok(),
            1 => pool::decode(&bytes).is_ok(),
            2 => stats::ClassStatsTable::decode(&bytes).is_ok(),
            _ => checkpoint::decode_model(&bytes).is_ok(),
        };
        assert!(!(ok && truncated), "case {case}: truncated file accepted");
        if !ok {
            rejected += 1;
        }
    }
    // flips inside payloads of resealed or unsealed files may still decode
    assert!(rejected > 5_000, "{rejected} of 10000 rejected");
}
