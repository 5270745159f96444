//! Binary checkpoint container.
//!
//! All integers little-endian:
//!
//! ```text
//! magic      8 bytes  "GKVCKPT\0"
//! version    u32      1
//! json_len   u64
//! config     json_len bytes of ModelConfig JSON
//! count      u64      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   data     f64 × product(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ParamStore, ParamRole};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GKVCKPT\0";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(model: &Model, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(&model.config)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for (_, p) in model.params.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_len(r: &mut impl Read, limit: u64, what: &str) -> Result<usize> {
    let n = read_u64(r)?;
    if n > limit {
        return Err(Error::Format(format!("{what} {n} exceeds limit {limit}")));
    }
    Ok(n as usize)
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Model> {
    if &read_array::<8>(&mut r)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let json_len = read_len(&mut r, 1 << 20, "config length")?;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)
        .map_err(|e| Error::Format(format!("truncated config: {e}")))?;
    let config: ModelConfig = serde_json::from_slice(&json)?;
    config.validate()?;
    let count = read_len(&mut r, 1 << 16, "tensor count")?;
    let mut stored = ParamStore::default();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("tensor {name} has {ndim} dims")));
        }
        let shape = (0..ndim)
            .map(|_| read_len(&mut r, 1 << 32, "dimension"))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        if stored.find(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
        stored.push(name, ParamRole::Embedding, Tensor::new(shape, data)?);
    }
    Model::from_params(config, &stored)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let m = Model::new(ModelConfig::default(), 7).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.config, m.config);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let m = Model::new(ModelConfig::default(), 7).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Format(_))));
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(Error::Format(_))));
    }
}
