//! `LPLDCKPT` model checkpoints.
//!
//! Layout: magic, version u16, tensor count u32, then per tensor: name length
//! u16, UTF-8 name, rank u8, dims u32 × rank, f32 data. The architecture,
//! input normalization and BN running statistics are stored as named tensors
//! next to the parameters; class-wise statistics live in the stats file.

use std::path::Path;

use lpld_core::{BnLayerState, Model, NetworkSpec, ParameterSet, Tensor};

use super::{put_f32s, Reader};
use crate::error::{read_file, write_file, Error, Result};

pub const MAGIC: &[u8; 8] = b"LPLDCKPT";
pub const VERSION: u16 = 1;
const WHAT: &str = "checkpoint";
const MAX_RANK: u8 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let rank = t.tensor.rank();
        if name.len() > u16::MAX as usize || rank > MAX_RANK as usize {
            return Err(Error::format(WHAT, format!("tensor {} cannot be encoded", t.name)));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank as u8);
        for &d in t.tensor.shape() {
            let d = u32::try_from(d).map_err(|_| Error::format(WHAT, "dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        put_f32s(&mut out, t.tensor.data());
    }
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader::new(WHAT, bytes);
    r.magic(MAGIC)?;
    let v = r.u16()?;
    if v != VERSION {
        return Err(Error::format(WHAT, format!("unsupported version {v}")));
    }
    let count = r.u32()? as usize;
    // each tensor takes at least 3 bytes
    if count > r.remaining() / 3 {
        return Err(Error::format(WHAT, format!("tensor count {count} exceeds file size")));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(WHAT, "tensor name is not UTF-8"))?.to_string();
        let rank = r.u8()?;
        if rank > MAX_RANK {
            return Err(Error::format(WHAT, format!("tensor {name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            numel = numel.checked_mul(d).ok_or_else(|| Error::format(WHAT, format!("tensor {name}: size overflow")))?;
            shape.push(d);
        }
        let data = r.f32s(numel)?;
        out.push(NamedTensor { name, tensor: Tensor::new(shape, data)? });
    }
    r.finish()?;
    Ok(out)
}

fn vector(name: &str, v: &[f32]) -> NamedTensor {
    NamedTensor { name: name.to_string(), tensor: Tensor::new(vec![v.len()], v.to_vec()).expect("1-d") }
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let arch: Vec<f32> = model.spec.encode().iter().map(|&c| c as f32).collect();
    let mut ts = vec![vector("arch", &arch), vector("input.mean", &model.input_mean), vector("input.std", &model.input_std)];
    for (name, t) in model.params.names.iter().zip(&model.params.tensors) {
        ts.push(NamedTensor { name: name.clone(), tensor: t.clone() });
    }
    for (j, s) in model.bn.iter().enumerate() {
        ts.push(vector(&format!("bn{j}.running_mean"), &s.global_rm));
        ts.push(vector(&format!("bn{j}.running_var"), &s.global_rv));
        ts.push(vector(&format!("bn{j}.config"), &[s.momentum, s.eps]));
    }
    encode_tensors(&ts)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let ts = decode_tensors(bytes)?;
    let mut it = ts.into_iter();
    let mut next = |want: &str| -> Result<Tensor<f32>> {
        let t = it.next().ok_or_else(|| Error::format(WHAT, format!("missing tensor {want}")))?;
        if t.name != want {
            return Err(Error::format(WHAT, format!("expected tensor {want}, found {}", t.name)));
        }
        Ok(t.tensor)
    };
    let arch = next("arch")?;
    if arch.data().iter().any(|&v| !(v >= 0.0 && v < 16_777_216.0 && v.fract() == 0.0)) {
        return Err(Error::format(WHAT, "architecture code is not integral"));
    }
    let code: Vec<u32> = arch.data().iter().map(|&v| v as u32).collect();
    let spec = NetworkSpec::decode(&code)?;
    let c = spec.input[0];
    let input_mean = next("input.mean")?.into_data();
    let input_std = next("input.std")?.into_data();
    if input_mean.len() != c || input_std.len() != c || input_std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::format(WHAT, "input normalization does not match the architecture"));
    }
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in spec.param_shapes() {
        let t = next(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::format(WHAT, format!("tensor {name}: shape {:?}, expected {shape:?}", t.shape())));
        }
        names.push(name);
        tensors.push(t);
    }
    let mut bn = Vec::new();
    for (j, ch) in spec.bn_channels().into_iter().enumerate() {
        let rm = next(&format!("bn{j}.running_mean"))?.into_data();
        let rv = next(&format!("bn{j}.running_var"))?.into_data();
        let cfg = next(&format!("bn{j}.config"))?.into_data();
        if rm.len() != ch || rv.len() != ch || cfg.len() != 2 {
            return Err(Error::format(WHAT, format!("BN layer {j} statistics do not match {ch} channels")));
        }
        let mut s = BnLayerState::new(ch, cfg[0], cfg[1])?;
        s.global_rm = rm;
        s.global_rv = rv;
        bn.push(s);
    }
    if it.next().is_some() {
        return Err(Error::format(WHAT, "unexpected trailing tensors"));
    }
    Ok(Model { spec, params: ParameterSet { names, tensors }, bn, input_mean, input_std })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    write_file(path, &encode_model(model)?)
}

pub fn load(path: &Path) -> Result<Model> {
    decode_model(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip() {
        let mut m = Model::new(NetworkSpec::small_cnn([3, 8, 8], &[4, 6], 5), 3).unwrap();
        m.input_mean = vec![0.4, 0.5, 0.6];
        m.bn[1].global_rv[2] = 1.75;
        let bytes = encode_model(&m).unwrap();
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_wrong_magic_and_trailing_bytes() {
        let m = Model::new(NetworkSpec::small_cnn([1, 4, 4], &[2], 2), 0).unwrap();
        let mut bytes = encode_model(&m).unwrap();
        bytes.push(0);
        assert!(decode_model(&bytes).is_err());
        bytes.pop();
        bytes[0] = b'X';
        assert!(matches!(decode_model(&bytes), Err(Error::Format { .. })));
    }
}
