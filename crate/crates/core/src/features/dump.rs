//! Debug dump of a feature tensor: a small binary file (`OSFD` magic, version,
//! rank, little-endian u64 dims, then row-major little-endian f32 data) plus a
//! JSON sidecar naming the channel roles.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{ChannelRole, FeatureStack};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"OSFD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDumpHeader {
    pub version: u32,
    pub dims: Vec<usize>,
    pub dtype: String,
    pub order: String,
    pub channel_roles: Vec<ChannelRole>,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_feature_dump(path: &Path, stack: &FeatureStack) -> Result<()> {
    let io = |e| Error::io(format!("writing {}", path.display()), e);
    let dims = stack.data.dims().to_vec();
    let data = stack.data.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut buf = Vec::with_capacity(16 + 8 * dims.len() + 4 * data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in &dims {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in &data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(io)?;

    let header = FeatureDumpHeader {
        version: VERSION,
        dims,
        dtype: "f32".into(),
        order: "row-major".into(),
        channel_roles: stack.channel_roles.clone(),
    };
    let side = sidecar(path);
    fs::write(&side, serde_json::to_string_pretty(&header)?)
        .map_err(|e| Error::io(format!("writing {}", side.display()), e))
}

pub fn read_feature_dump(path: &Path) -> Result<FeatureStack> {
    let bad = |msg: &str| Error::invalid(format!("{}: {msg}", path.display()));
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not a feature dump"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(4) != VERSION {
        return Err(bad("unsupported version"));
    }
    let rank = u32_at(8) as usize;
    let mut off = 12;
    if bytes.len() < off + 8 * rank {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[off + 8 * i..off + 8 * i + 8].try_into().unwrap()) as usize)
        .collect();
    off += 8 * rank;
    let n: usize = dims.iter().product();
    if bytes.len() != off + 4 * n {
        return Err(bad("payload size does not match dims"));
    }
    let data: Vec<f32> = bytes[off..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let side = sidecar(path);
    let header: FeatureDumpHeader = serde_json::from_str(
        &fs::read_to_string(&side).map_err(|e| Error::io(format!("reading {}", side.display()), e))?,
    )?;
    if header.dims != dims {
        return Err(bad("sidecar dims disagree with binary header"));
    }
    Ok(FeatureStack {
        data: Tensor::from_vec(data, dims, &Device::Cpu)?,
        channel_roles: header.channel_roles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{stack_features, FeatureMode};

    #[test]
    fn dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mel = Tensor::arange(0f32, 24.0, &Device::Cpu).unwrap().reshape((2, 3, 4)).unwrap();
        let stack = stack_features(&mel, Some(&mel), Some(&mel), FeatureMode::Tfst).unwrap();
        let p = dir.path().join("feat.bin");
        write_feature_dump(&p, &stack).unwrap();
        let back = read_feature_dump(&p).unwrap();
        assert_eq!(back.channel_roles, stack.channel_roles);
        assert_eq!(back.data.dims(), &[2, 3, 3, 4]);
        assert_eq!(
            back.data.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            stack.data.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(&raw[..4], b"OSFD");
        assert_eq!(raw.len(), 12 + 4 * 8 + 4 * 72);
    }
}
