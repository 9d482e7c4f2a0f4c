//! Single-file binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "AUTOADCK" | u32 version | u64 config_len | config JSON bytes
//! u32 tensor_count | per tensor: u32 name_len, name, u8 dtype (0 f32, 1 f64),
//!                    u32 ndim, ndim x u64 dims, row-major payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Cursor, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"AUTOADCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("not a checkpoint file: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// JSON echo of the configuration the weights were trained with.
    pub config: String,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(config: String, tensors: BTreeMap<String, Tensor>) -> Self {
        Self { config, tensors }
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        buf.extend_from_slice(self.config.as_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            let dims = t.dims();
            let flat = t.flatten_all()?;
            match t.dtype() {
                DType::F64 => {
                    buf.push(1);
                    write_dims(&mut buf, dims);
                    for v in flat.to_vec1::<f64>()? {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                _ => {
                    buf.push(0);
                    write_dims(&mut buf, dims);
                    for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config_len = read_u64(&mut r)? as usize;
        let config = read_string(&mut r, config_len)?;
        let count = read_u32(&mut r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = read_string(&mut r, name_len)?;
            let mut tag = [0u8; 1];
            read_exact(&mut r, &mut tag)?;
            let ndim = read_u32(&mut r)? as usize;
            let dims = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = dims.iter().product();
            let t = match tag[0] {
                0 => {
                    let mut vals = Vec::with_capacity(n);
                    for _ in 0..n {
                        let mut b = [0u8; 4];
                        read_exact(&mut r, &mut b)?;
                        vals.push(f32::from_le_bytes(b));
                    }
                    Tensor::from_vec(vals, dims, &Device::Cpu)?
                }
                1 => {
                    let mut vals = Vec::with_capacity(n);
                    for _ in 0..n {
                        let mut b = [0u8; 8];
                        read_exact(&mut r, &mut b)?;
                        vals.push(f64::from_le_bytes(b));
                    }
                    Tensor::from_vec(vals, dims, &Device::Cpu)?
                }
                other => return Err(CheckpointError::Corrupt(format!("dtype tag {other}"))),
            };
            tensors.insert(name, t);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        let io_err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io_err)?;
        f.write_all(&bytes).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn write_dims(buf: &mut Vec<u8>, dims: &[usize]) {
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf)
        .map_err(|_| CheckpointError::Corrupt("unexpected end of file".into()))
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut Cursor<&[u8]>) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut Cursor<&[u8]>, len: usize) -> Result<String, CheckpointError> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(CheckpointError::Corrupt("string length past end".into()));
    }
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_values_and_config() {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a.weight".to_string(),
            Tensor::new(&[[1.5f32, -2.0], [0.25, 3.0]], &Device::Cpu).unwrap(),
        );
        tensors.insert(
            "b".to_string(),
            Tensor::new(&[0.1f64, 0.2, 0.3], &Device::Cpu).unwrap(),
        );
        let ck = Checkpoint::new("{\"x\":1}".into(), tensors);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, "{\"x\":1}");
        assert_eq!(
            back.tensors["a.weight"].to_vec2::<f32>().unwrap(),
            vec![vec![1.5, -2.0], vec![0.25, 3.0]]
        );
        assert_eq!(back.tensors["b"].dtype(), DType::F64);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        assert!(matches!(
            Checkpoint::from_bytes(b"NOTACKPT"),
            Err(CheckpointError::BadMagic)
        ));
        let ck = Checkpoint::new("{}".into(), BTreeMap::new());
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
