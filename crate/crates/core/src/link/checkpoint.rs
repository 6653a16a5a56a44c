//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      b"MLCK"
//! version    u32 (= 1)
//! metadata   u32 byte length, UTF-8 text (free-form, JSON by convention)
//! count      u32 number of parameter vectors
//! per vector:
//!   name       u32 byte length, UTF-8
//!   segments   u32 count, then per segment:
//!                name u32 byte length + UTF-8, rows u64, cols u64
//!   values     u64 count, then that many f64
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{Layout, ParamVector};

const MAGIC: &[u8; 4] = b"MLCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint has no entry named {0}")]
    Missing(String),
}

/// Named parameter vectors plus a metadata string.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub entries: Vec<(String, ParamVector)>,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

impl Checkpoint {
    pub fn new(metadata: impl Into<String>) -> Self {
        Self {
            metadata: metadata.into(),
            entries: Vec::new(),
        }
    }

    pub fn with(mut self, name: impl Into<String>, params: ParamVector) -> Self {
        self.entries.push((name.into(), params));
        self
    }

    pub fn get(&self, name: &str) -> Result<&ParamVector, CheckpointError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(w, &self.metadata)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, p) in &self.entries {
            write_str(w, name)?;
            let segs = p.layout().segments();
            w.write_all(&(segs.len() as u32).to_le_bytes())?;
            for s in segs {
                write_str(w, &s.name)?;
                w.write_all(&(s.rows as u64).to_le_bytes())?;
                w.write_all(&(s.cols as u64).to_le_bytes())?;
            }
            w.write_all(&(p.len() as u64).to_le_bytes())?;
            for v in p.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let metadata = read_str(r)?;
        let count = read_u32(r)?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = read_str(r)?;
            let nseg = read_u32(r)?;
            let mut builder = Layout::builder();
            for _ in 0..nseg {
                let sname = read_str(r)?;
                let rows = read_u64(r)? as usize;
                let cols = read_u64(r)? as usize;
                builder = builder.segment(sname, rows, cols);
            }
            let layout = builder.build();
            let len = read_u64(r)? as usize;
            if len != layout.total_len() {
                return Err(CheckpointError::Corrupt(format!(
                    "entry {name}: {len} values for a {}-value layout",
                    layout.total_len()
                )));
            }
            let mut values = Vec::with_capacity(len);
            let mut b = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut b)?;
                values.push(f64::from_le_bytes(b));
            }
            let p = ParamVector::new(layout, values)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            entries.push((name, p));
        }
        Ok(Self { metadata, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::{DecoderModel, EncoderModel};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn model_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = EncoderModel::new(3, 2, 1.0, 0.1, &mut rng).unwrap();
        let dec = DecoderModel::new(3, 2, 2, &mut rng).unwrap();
        let ck = Checkpoint::new(r#"{"scheme":"test"}"#)
            .with("encoder", enc.params().clone())
            .with("decoder", dec.params().clone());
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let dec2 = dec.with_params(back.get("decoder").unwrap().clone()).unwrap();
        assert_eq!(dec2, dec);
        assert!(matches!(back.get("nope"), Err(CheckpointError::Missing(_))));
    }

    #[test]
    fn header_bytes_are_documented_layout() {
        let layout = Layout::builder().segment("w", 1, 2).build();
        let p = ParamVector::new(layout, vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        Checkpoint::new("").with("v", p).write_to(&mut buf).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"MLCK");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&0u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(b"v");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(b"w");
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            Checkpoint::read_from(&mut &b"NOPE\x01\0\0\0"[..]),
            Err(CheckpointError::BadMagic)
        ));
        assert!(matches!(
            Checkpoint::read_from(&mut &b"MLCK\x02\0\0\0"[..]),
            Err(CheckpointError::Version(2))
        ));
        assert!(matches!(
            Checkpoint::read_from(&mut &b"MLCK\x01\0\0\0\x05\0"[..]),
            Err(CheckpointError::Io(_))
        ));
    }

    proptest! {
        #[test]
        fn arbitrary_vectors_round_trip(
            values in proptest::collection::vec(proptest::num::f64::ANY, 1..40),
            meta in "[a-z0-9{}:\" ]{0,30}",
        ) {
            let n = values.len();
            let layout = Layout::builder().segment("a", 1, n).build();
            let p = ParamVector::new(layout, values.clone()).unwrap();
            let ck = Checkpoint::new(meta.clone()).with("x", p);
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(&back.metadata, &meta);
            let got = back.get("x").unwrap().values();
            for (a, b) in got.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
