//! Weight container format.
//!
//! Layout: an 8-byte magic string, one version byte, a u64 little-endian
//! manifest length, the text manifest (one `name;dim dim ...;offset` line per
//! tensor, offsets relative to the payload), then the payload of f64
//! little-endian blobs. Round-trips are bit-exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Init, ModelWeights, WeightSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EVTWGTS\n";
pub const VERSION: u8 = 1;

pub fn to_bytes(weights: &ModelWeights) -> Vec<u8> {
    let mut manifest = String::new();
    let mut offset = 0u64;
    for (spec, tensor) in weights.specs.iter().zip(&weights.tensors) {
        let dims: Vec<String> = spec.shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{};{};{offset}\n", spec.name, dims.join(" ")));
        offset += (tensor.numel() * 8) as u64;
    }
    let mut out = Vec::with_capacity(17 + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for tensor in &weights.tensors {
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelWeights> {
    if bytes.len() < 17 || &bytes[..8] != MAGIC {
        return Err(Error::Format {
            detail: "bad magic".into(),
        });
    }
    if bytes[8] != VERSION {
        return Err(Error::Format {
            detail: format!("unsupported version {}", bytes[8]),
        });
    }
    let mlen = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
    if bytes.len() < 17 + mlen {
        return Err(Error::Format {
            detail: "truncated manifest".into(),
        });
    }
    let manifest = std::str::from_utf8(&bytes[17..17 + mlen]).map_err(|_| Error::Format {
        detail: "manifest is not utf-8".into(),
    })?;
    let payload = &bytes[17 + mlen..];

    let mut specs = Vec::new();
    let mut tensors = Vec::new();
    for line in manifest.lines() {
        let mut parts = line.split(';');
        let (name, dims, offset) = match (parts.next(), parts.next(), parts.next()) {
            (Some(n), Some(d), Some(o)) if parts.next().is_none() => (n, d, o),
            _ => {
                return Err(Error::Format {
                    detail: format!("malformed manifest line {line:?}"),
                })
            }
        };
        let shape: Vec<usize> = dims
            .split_whitespace()
            .map(|d| {
                d.parse().map_err(|_| Error::Format {
                    detail: format!("entry {name}: bad dimension {d:?}"),
                })
            })
            .collect::<Result<_>>()?;
        let offset: usize = offset.parse().map_err(|_| Error::Format {
            detail: format!("entry {name}: bad offset"),
        })?;
        let numel: usize = shape.iter().product();
        let end = offset + numel * 8;
        if end > payload.len() {
            return Err(Error::Format {
                detail: format!("entry {name}: blob exceeds payload"),
            });
        }
        let data: Vec<f64> = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data).map_err(|e| Error::Format {
            detail: format!("entry {name}: {e}"),
        })?);
        specs.push(WeightSpec {
            name: name.to_string(),
            shape,
            // init kind is not stored; loaded weights are data, not a recipe
            init: Init::Zero,
        });
    }
    ModelWeights::from_tensors(specs, tensors)
}

pub fn save(weights: &ModelWeights, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(weights))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelWeights> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}
