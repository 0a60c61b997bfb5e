//! Parameter checkpoints.
//!
//! Layout: 8 magic bytes `STDFCKPT`, `u32` format version, `u32` header
//! length, a JSON header (model kind, model config, tensor names and shapes),
//! then every tensor as little-endian `f32` in declaration order. All
//! integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STDFCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: ParamStore,
}

pub fn write_checkpoint(mut w: impl Write, kind: &str, config: &serde_json::Value, params: &ParamStore) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        config: config.clone(),
        tensors: params.iter().map(|(n, t)| TensorEntry { name: n.to_string(), rows: t.rows(), cols: t.cols() }).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(params.num_scalars() * 4);
    for (_, t) in params.iter() {
        for &x in t.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut params = ParamStore::new();
    for entry in header.tensors {
        let mut raw = vec![0u8; entry.rows * entry.cols * 4];
        r.read_exact(&mut raw).map_err(|_| Error::Format(format!("truncated data for tensor {}", entry.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        params.add(entry.name, Tensor::from_vec(entry.rows, entry.cols, data));
    }
    Ok(Checkpoint { kind: header.kind, config: header.config, params })
}

pub fn save_checkpoint(path: impl AsRef<Path>, kind: &str, config: &serde_json::Value, params: &ParamStore) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(file, kind, config, params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values() {
        let mut p = ParamStore::new();
        p.add("a.w", Tensor::from_fn(2, 3, |r, c| (r as f64 - c as f64) * 0.1));
        p.add("a.b", Tensor::filled(3, 1, 0.25));
        let cfg = serde_json::json!({"width": 3});
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, "test", &cfg, &p).unwrap();
        assert_eq!(&bytes[..8], MAGIC);

        let ck = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(ck.kind, "test");
        assert_eq!(ck.config, cfg);
        for ((n1, t1), (n2, t2)) in p.iter().zip(ck.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            for (x, y) in t1.data().iter().zip(t2.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_checkpoint(&b"NOTACKPT\x01\x00\x00\x00"[..]), Err(Error::Format(_))));
        let mut p = ParamStore::new();
        p.add("w", Tensor::zeros(4, 4));
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, "t", &serde_json::Value::Null, &p).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(read_checkpoint(bytes.as_slice()), Err(Error::Format(_))));
    }
}
