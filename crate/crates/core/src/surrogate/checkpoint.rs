//! The "SPDM" parameter container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic  "SPDM"            4 bytes
//! version u32
//! section tag              4 bytes ("SURR" surrogate, "PLCY" policy)
//! header length u32, header JSON bytes
//! tensor count u32
//! per tensor: name length u32, UTF-8 name, rank u32, dims u64 × rank, f64 × len
//! SHA-256 of every preceding byte (32 bytes)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ndtensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPDM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tag: [u8; 4],
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated SPDM file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&self.tag);
        let header = serde_json::to_vec(&self.header).expect("serializable header");
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 32 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not an SPDM file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("SPDM checksum mismatch".into()));
        }
        let mut c = Cursor { bytes: body, pos: 4 };
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported SPDM version {version}")));
        }
        let tag: [u8; 4] = c.take(4)?.try_into().expect("4 bytes");
        let hlen = c.u32()? as usize;
        let header = serde_json::from_slice(c.take(hlen)?)?;
        let count = c.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = c.u32()? as usize;
            let name = String::from_utf8(c.take(nlen)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = c.u32()? as usize;
            let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = c
                .take(len * 8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if c.pos != body.len() {
            return Err(Error::Format("trailing bytes in SPDM file".into()));
        }
        Ok(Self { tag, header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = vec![];
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the section tag is `tag`.
    pub fn expect_tag(&self, tag: &[u8; 4]) -> Result<()> {
        if &self.tag != tag {
            return Err(Error::Format(format!(
                "SPDM section {:?}, expected {:?}",
                String::from_utf8_lossy(&self.tag),
                String::from_utf8_lossy(tag)
            )));
        }
        Ok(())
    }
}
