//! Binary checkpoint format.
//!
//! ```text
//! "ECVT" | u32 version | u32 len, config TOML | u32 count |
//! count x (u32 len, name | u8 dtype | u32 rank | rank x u64 dim | values)
//! ```
//!
//! All integers and values are little-endian. Dtype tags: 0 = f32,
//! 1 = f64, 2 = u64.

use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"ECVT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("tensor `{name}` has unknown dtype tag {tag}")]
    BadDtype { name: String, tag: u8 },
    #[error("tensor table does not match the config: missing {missing:?}, unexpected {unexpected:?}")]
    NameMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("checkpoint config has {field} = {checkpoint}, but {requested} was requested")]
    ConfigConflict {
        field: String,
        checkpoint: String,
        requested: String,
    },
    #[error("checkpoint config is unreadable: {0}")]
    BadConfig(String),
    #[error("{0} bytes after the tensor table")]
    TrailingBytes(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl Values {
    fn tag(&self) -> u8 {
        match self {
            Values::F32(_) => 0,
            Values::F64(_) => 1,
            Values::U64(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::F64(v) => v.len(),
            Values::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Values,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.values.tag());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.values {
                Values::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Values::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Values::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8_lossy(r.take(len)?).into_owned();
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or(CheckpointError::Truncated(r.pos))?;
            let width = match tag {
                0 => 4,
                1 | 2 => 8,
                _ => return Err(CheckpointError::BadDtype { name, tag }),
            };
            let raw = r.take(n.checked_mul(width).ok_or(CheckpointError::Truncated(r.pos))?)?;
            let values = match tag {
                0 => Values::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => Values::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                _ => Values::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            entries.push(Entry { name, dims, values });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Checkpoint { config_text, entries })
    }

    pub fn write(&self, path: &Path) -> crate::Result<()> {
        // write-then-rename so an interrupted save never clobbers a good file
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| crate::Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| crate::Error::io(path, e))
    }

    pub fn read(path: &Path) -> crate::Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated(self.pos)),
        }
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_text: "num_classes = 10\n".into(),
            entries: vec![
                Entry {
                    name: "w".into(),
                    dims: vec![2, 2],
                    values: Values::F32(vec![1.0, -2.0, 0.5, 3.25]),
                },
                Entry {
                    name: "step".into(),
                    dims: vec![1],
                    values: Values::U64(vec![7]),
                },
                Entry {
                    name: "history".into(),
                    dims: vec![0, 7],
                    values: Values::F64(vec![]),
                },
            ],
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"ECVT");
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), b);
    }

    #[test]
    fn faults_are_typed() {
        let b = sample().to_bytes();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert_eq!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic));
        let mut bad = b.clone();
        bad[4] = 9;
        assert_eq!(Checkpoint::from_bytes(&bad), Err(CheckpointError::UnsupportedVersion(9)));
        assert!(matches!(
            Checkpoint::from_bytes(&b[..b.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
        // dtype tag of the first tensor sits after the header, config and name
        let tag_at = 4 + 4 + 4 + 17 + 4 + 4 + 1;
        assert_eq!(b[tag_at], 0);
        let mut bad = b.clone();
        bad[tag_at] = 7;
        assert_eq!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::BadDtype { name: "w".into(), tag: 7 })
        );
    }
}
