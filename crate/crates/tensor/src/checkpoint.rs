//! Named-tensor checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   "DMAE2CKP"            8 bytes
//! version u32
//! count   u32
//! count x { name_len u32, name utf-8, rank u32, dims u64 x rank, data f32 x prod(dims) }
//! ```
//!
//! A JSON sidecar (`<file>.json`) lists names and shapes.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DMAE2CKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(params: &ParamSet<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + params.num_elements() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode(mut r: impl Read) -> Result<ParamSet<f32>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!("bad magic {:?}", magic)));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = ParamSet::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Format(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if out.contains(&name) {
            return Err(TensorError::Format(format!("duplicate tensor {name}")));
        }
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn manifest(params: &ParamSet<f32>) -> CheckpointManifest {
    CheckpointManifest {
        version: VERSION,
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    }
}

/// Write the checkpoint and its sidecar, each via a temp file + rename.
pub fn save(path: &Path, params: &ParamSet<f32>) -> Result<()> {
    write_atomic(path, &encode(params))?;
    let json = serde_json::to_vec_pretty(&manifest(params))?;
    write_atomic(&sidecar_path(path), &json)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet<f32>> {
    decode(BufReader::new(fs::File::open(path)?))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(bytes)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert(
            "encoder.pos_embed",
            Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.5, 0.0, -0.25]).unwrap(),
        );
        p.insert("decoder.mask_token", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        p
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..8], b"DMAE2CKP");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        // first tensor in name order
        let len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        assert_eq!(&bytes[20..20 + len], b"decoder.mask_token");
    }

    #[test]
    fn decode_rejects_bad_magic_and_truncation() {
        let mut bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes[..]), Err(TensorError::Format(_))));
    }

    #[test]
    fn save_writes_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &sample()).unwrap();
        let m: CheckpointManifest = serde_json::from_slice(&fs::read(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(m.tensors.len(), 2);
        assert_eq!(m.tensors[1].shape, vec![2, 3]);
        assert_eq!(load(&path).unwrap(), sample());
    }
}
