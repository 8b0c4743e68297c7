//! The "SPDD" dataset container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "SPDD"               4 bytes
//! version u32
//! header length u32, header JSON bytes
//!   {"config": DatasetConfig, "config_hash": hex, "count": n,
//!    "noise_seeds": [u64; n], "has_noise": bool}
//! per trajectory: u f64 × K·P, f f64 × (K−1)·P, then ξ f64 × fine·P if has_noise
//! SHA-256 of every preceding byte (32 bytes)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ndtensor::Tensor;
use crate::solver::{Dataset, DatasetConfig, Trajectory};

pub const MAGIC: &[u8; 4] = b"SPDD";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: DatasetConfig,
    config_hash: String,
    count: usize,
    noise_seeds: Vec<u64>,
    has_noise: bool,
}

fn put(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(data: &Dataset) -> Result<Vec<u8>> {
    let has_noise = data.trajectories.iter().all(|t| t.xi.is_some());
    let header = Header {
        config: data.config.clone(),
        config_hash: data.config_hash(),
        count: data.len(),
        noise_seeds: data.trajectories.iter().map(|t| t.noise_seed).collect(),
        has_noise,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &data.trajectories {
        put(&mut out, &t.u);
        put(&mut out, &t.f);
        if has_noise {
            put(&mut out, t.xi.as_ref().expect("checked above"));
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 12 + 32 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an SPDD file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("SPDD checksum mismatch".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported SPDD version {version}")));
    }
    let hlen = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(body.get(12..12 + hlen).ok_or_else(|| Error::Format("truncated SPDD header".into()))?)?;
    if header.config.hash() != header.config_hash {
        return Err(Error::Format("SPDD config hash mismatch".into()));
    }
    if header.noise_seeds.len() != header.count {
        return Err(Error::Format("SPDD seed list length differs from the count".into()));
    }
    let p = &header.config.problem;
    let shapes = [p.trajectory_shape(), p.forcing_shape(), p.noise_shape()];
    let lens: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let per = lens[0] + lens[1] + if header.has_noise { lens[2] } else { 0 };
    let values = &body[12 + hlen..];
    if values.len() != header.count * per * 8 {
        return Err(Error::Format("SPDD payload size does not match the header".into()));
    }
    let floats: Vec<f64> = values
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let trajectories = floats
        .chunks(per)
        .zip(&header.noise_seeds)
        .map(|(c, &seed)| {
            let u = Tensor::new(shapes[0].clone(), c[..lens[0]].to_vec())?;
            let f = Tensor::new(shapes[1].clone(), c[lens[0]..lens[0] + lens[1]].to_vec())?;
            let xi = if header.has_noise {
                Some(Tensor::new(shapes[2].clone(), c[lens[0] + lens[1]..].to_vec())?)
            } else {
                None
            };
            Ok(Trajectory { u, f, xi, noise_seed: seed })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: header.config,
        trajectories,
    })
}

pub fn save(data: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(data)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    from_bytes(&std::fs::read(path)?)
}

/// The config hash recorded in a container without decoding the payload.
pub fn header_hash(bytes: &[u8]) -> Result<String> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an SPDD file".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(bytes.get(12..12 + hlen).ok_or_else(|| Error::Format("truncated SPDD header".into()))?)?;
    Ok(header.config_hash)
}
