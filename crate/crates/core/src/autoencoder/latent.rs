//! Latent sequences and the `LATS` file format.
//!
//! `LATS` layout (little-endian): magic `b"LATS"`, `u32` version, `u32` N,
//! `u32` D, `u32` r_time, `u8` source kind (0 = mix, 1 = stem), then `N * D`
//! `f32` values, timestep-major.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LATS_MAGIC: &[u8; 4] = b"LATS";
pub const LATS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Mix,
    Stem,
}

impl SourceKind {
    fn code(self) -> u8 {
        match self {
            SourceKind::Mix => 0,
            SourceKind::Stem => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(SourceKind::Mix),
            1 => Ok(SourceKind::Stem),
            _ => Err(Error::Format(format!("unknown latent source kind {c}"))),
        }
    }
}

/// `N x D` latent vectors, one row per latent timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    vectors: Tensor,
    r_time: u32,
    source_kind: SourceKind,
}

impl LatentSequence {
    pub fn new(vectors: Tensor, r_time: u32, source_kind: SourceKind) -> Result<Self> {
        if vectors.rows() == 0 || vectors.cols() == 0 {
            return Err(Error::Shape(format!("latent sequence must be non-empty, got {:?}", vectors.shape())));
        }
        if !vectors.is_finite() {
            return Err(Error::Numeric("latent sequence contains non-finite values".into()));
        }
        Ok(Self { vectors, r_time, source_kind })
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn into_vectors(self) -> Tensor {
        self.vectors
    }

    /// Number of latent timesteps.
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn r_time(&self) -> u32 {
        self.r_time
    }

    pub fn source_kind(&self) -> SourceKind {
        self.source_kind
    }

    pub fn with_vectors(&self, vectors: Tensor) -> Result<Self> {
        Self::new(vectors, self.r_time, self.source_kind)
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        w.write_all(LATS_MAGIC)?;
        for v in [LATS_VERSION, self.len() as u32, self.dim() as u32, self.r_time] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[self.source_kind.code()])?;
        let mut buf = Vec::with_capacity(self.vectors.len() * 4);
        for &x in self.vectors.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Format("latent file too short".into()))?;
        if &magic != LATS_MAGIC {
            return Err(Error::Format("not a LATS latent file".into()));
        }
        let mut word = [0u8; 4];
        let mut next = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut word).map_err(|_| Error::Format("truncated LATS header".into()))?;
            Ok(u32::from_le_bytes(word))
        };
        let version = next(&mut r)?;
        if version != LATS_VERSION {
            return Err(Error::Format(format!("unsupported LATS version {version}")));
        }
        let n = next(&mut r)? as usize;
        let d = next(&mut r)? as usize;
        let r_time = next(&mut r)?;
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind).map_err(|_| Error::Format("truncated LATS header".into()))?;
        let kind = SourceKind::from_code(kind[0])?;
        let mut raw = vec![0u8; n * d * 4];
        r.read_exact(&mut raw).map_err(|_| Error::Format(format!("LATS payload shorter than {n}x{d}")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        Self::new(Tensor::from_vec(n, d, data), r_time, kind)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn lats_round_trip_is_lossless_for_f32(
            n in 1usize..20,
            d in 1usize..10,
            seed in any::<u32>(),
            stem in any::<bool>(),
        ) {
            let vals: Vec<f64> = (0..n * d).map(|i| (3.0 * ((i as f64 + seed as f64) * 0.37).sin()) as f32 as f64).collect();
            let kind = if stem { SourceKind::Stem } else { SourceKind::Mix };
            let seq = LatentSequence::new(Tensor::from_vec(n, d, vals), 4096, kind).unwrap();
            let mut bytes = Vec::new();
            seq.write(&mut bytes).unwrap();
            prop_assert_eq!(bytes.len(), 21 + n * d * 4);
            let back = LatentSequence::read(bytes.as_slice()).unwrap();
            prop_assert_eq!(back, seq);
        }
    }

    #[test]
    fn header_layout() {
        let seq = LatentSequence::new(Tensor::filled(2, 3, 1.0), 256, SourceKind::Stem).unwrap();
        let mut bytes = Vec::new();
        seq.write(&mut bytes).unwrap();
        assert_eq!(&bytes[0..4], b"LATS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 256);
        assert_eq!(bytes[20], 1);
        assert_eq!(f32::from_le_bytes(bytes[21..25].try_into().unwrap()), 1.0);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(LatentSequence::read(&b"LATX"[..]), Err(Error::Format(_))));
        assert!(matches!(LatentSequence::read(&b"LATS\x01\x00\x00\x00\x02"[..]), Err(Error::Format(_))));
        assert!(LatentSequence::new(Tensor::zeros(0, 4), 256, SourceKind::Mix).is_err());
    }
}
