//! `LPLDSTAT` class-wise BN statistics.
//!
//! Layout: magic, version u16, num_layers u16, num_classes u32, then per layer:
//! channels u32, global RM, global RV, class-wise RM and RV (row-major
//! `num_classes × channels`), all f32.

use std::path::Path;

use lpld_core::{BnLayerState, Model};

use super::{put_f32s, Reader};
use crate::error::{read_file, write_file, Error, Result};

pub const MAGIC: &[u8; 8] = b"LPLDSTAT";
pub const VERSION: u16 = 1;
const WHAT: &str = "class statistics";

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub channels: usize,
    pub global_rm: Vec<f32>,
    pub global_rv: Vec<f32>,
    pub classwise_rm: Vec<f32>,
    pub classwise_rv: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassStatsTable {
    pub num_classes: usize,
    pub layers: Vec<LayerStats>,
}

impl ClassStatsTable {
    pub fn from_model(model: &Model) -> Result<Self> {
        if !model.has_class_stats() {
            return Err(lpld_core::Error::MissingClassStats.into());
        }
        Ok(ClassStatsTable {
            num_classes: model.num_classes(),
            layers: model
                .bn
                .iter()
                .map(|s| LayerStats { channels: s.channels, global_rm: s.global_rm.clone(), global_rv: s.global_rv.clone(), classwise_rm: s.classwise_rm.clone(), classwise_rv: s.classwise_rv.clone() })
                .collect(),
        })
    }

    /// Installs the class rows into `model`. The global statistics must match
    /// the model's bit for bit, otherwise the table belongs to another teacher.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        if self.layers.len() != model.bn.len() || self.num_classes != model.num_classes() {
            return Err(Error::format(WHAT, format!("{} layers × {} classes do not fit the model", self.layers.len(), self.num_classes)));
        }
        for (j, (l, s)) in self.layers.iter().zip(&model.bn).enumerate() {
            if l.channels != s.channels || l.global_rm != s.global_rm || l.global_rv != s.global_rv {
                return Err(Error::format(WHAT, format!("layer {j} was estimated for a different teacher")));
            }
        }
        for (l, s) in self.layers.iter().zip(model.bn.iter_mut()) {
            install(s, l, self.num_classes);
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u16).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.channels as u32).to_le_bytes());
            put_f32s(&mut out, &l.global_rm);
            put_f32s(&mut out, &l.global_rv);
            put_f32s(&mut out, &l.classwise_rm);
            put_f32s(&mut out, &l.classwise_rv);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(WHAT, bytes);
        r.magic(MAGIC)?;
        let v = r.u16()?;
        if v != VERSION {
            return Err(Error::format(WHAT, format!("unsupported version {v}")));
        }
        let n_layers = r.u16()? as usize;
        let num_classes = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(r.remaining() / 4));
        for j in 0..n_layers {
            let channels = r.u32()? as usize;
            let rows = num_classes.checked_mul(channels).ok_or_else(|| Error::format(WHAT, format!("layer {j}: size overflow")))?;
            let global_rm = r.f32s(channels)?;
            let global_rv = r.f32s(channels)?;
            let classwise_rm = r.f32s(rows)?;
            let classwise_rv = r.f32s(rows)?;
            if global_rv.iter().chain(&classwise_rv).any(|&v| !(v >= 0.0)) {
                return Err(Error::format(WHAT, format!("layer {j}: negative or NaN variance")));
            }
            layers.push(LayerStats { channels, global_rm, global_rv, classwise_rm, classwise_rv });
        }
        r.finish()?;
        Ok(ClassStatsTable { num_classes, layers })
    }
}

fn install(s: &mut BnLayerState, l: &LayerStats, num_classes: usize) {
    s.num_classes = num_classes;
    s.classwise_rm = l.classwise_rm.clone();
    s.classwise_rv = l.classwise_rv.clone();
    s.class_updates = vec![0; num_classes];
}

pub fn save(table: &ClassStatsTable, path: &Path) -> Result<()> {
    write_file(path, &table.encode())
}

pub fn load(path: &Path) -> Result<ClassStatsTable> {
    ClassStatsTable::decode(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lpld_core::NetworkSpec;

    fn model_with_stats() -> Model {
        let mut m = Model::new(NetworkSpec::small_cnn([2, 4, 4], &[3, 2], 4), 1).unwrap();
        for (j, s) in m.bn.iter_mut().enumerate() {
            s.init_classwise(4);
            for (i, v) in s.classwise_rm.iter_mut().enumerate() {
                *v = (i + j) as f32 * 0.25;
            }
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model_with_stats();
        let t = ClassStatsTable::from_model(&m).unwrap();
        let bytes = t.encode();
        let back = ClassStatsTable::decode(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.encode(), bytes);
        assert_eq!(bytes.len() as u64, {
            let (payload, header) = lpld_core::squeeze::class_stats_storage(4, &m.spec.bn_channels());
            payload + header
        });
    }

    #[test]
    fn apply_checks_teacher() {
        let m = model_with_stats();
        let t = ClassStatsTable::from_model(&m).unwrap();
        let mut fresh = Model { bn: m.bn.iter().map(|s| BnLayerState { num_classes: 0, classwise_rm: vec![], classwise_rv: vec![], class_updates: vec![], ..s.clone() }).collect(), ..m.clone() };
        t.apply(&mut fresh).unwrap();
        assert_eq!(fresh.bn[0].classwise_rm, m.bn[0].classwise_rm);
        let mut other = Model::new(NetworkSpec::small_cnn([2, 4, 4], &[3, 2], 4), 9).unwrap();
        other.bn[0].global_rm[0] = 0.5;
        assert!(t.apply(&mut other).is_err());
    }
}
