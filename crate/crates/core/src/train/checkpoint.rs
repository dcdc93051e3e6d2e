//! Binary container for model parameters, training state and latents.
//!
//! Layout (little-endian): magic `MOUS`, `u32` version, `u32` kind tag,
//! `u64` config length and UTF-8 config text, `u64` tensor count, then per
//! tensor a `u16` name length, the name, a `u8` rank, `u64` dims and the
//! `f32` payload. A CRC-64 of everything before it closes the file.

use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 4] = b"MOUS";
pub const VERSION: u32 = 1;
const CRC: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Stage1,
    Stage2,
    Latent,
}

impl CheckpointKind {
    pub fn tag(self) -> u32 {
        match self {
            CheckpointKind::Stage1 => 1,
            CheckpointKind::Stage2 => 2,
            CheckpointKind::Latent => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            1 => Ok(CheckpointKind::Stage1),
            2 => Ok(CheckpointKind::Stage2),
            3 => Ok(CheckpointKind::Latent),
            t => Err(Error::Format(format!("unknown kind tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CheckpointKind::Stage1 => "stage1",
            CheckpointKind::Stage2 => "stage2",
            CheckpointKind::Latent => "latent",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, config: impl Into<String>) -> Self {
        Self {
            kind,
            config: config.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(64 + self.config.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.kind.tag().to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
            if t.rank() > MAX_RANK {
                return Err(Error::InvalidArgument(format!(
                    "tensor `{name}` has rank {}",
                    t.rank()
                )));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = CRC.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {magic:?}, expected {:?} (\"MOUS\")",
                MAGIC
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let kind = CheckpointKind::from_tag(r.u32()?)?;
        let config_len = r.len_u64()?;
        let config = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| Error::Format("config text is not UTF-8".into()))?
            .to_string();
        let count = r.len_u64()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            if rank > MAX_RANK {
                return Err(Error::Format(format!(
                    "tensor `{name}` declares rank {rank}"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len_u64()?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| {
                    Error::Format(format!("tensor `{name}` shape {shape:?} overflows"))
                })?;
            let raw = r.take(numel)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let body_end = r.pos;
        let stored = u64::from_le_bytes(r.array()?);
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checksum",
                bytes.len() - r.pos
            )));
        }
        let actual = CRC.checksum(&bytes[..body_end]);
        if stored != actual {
            return Err(Error::Format(format!(
                "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
            )));
        }
        Ok(Self {
            kind,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a {} file, found {}",
                kind.name(),
                self.kind.name()
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                expected: (n - remaining) as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.array()?);
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} does not fit in memory")))
    }
}
