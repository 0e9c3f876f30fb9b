//! `NCAP` parameter checkpoints: magic, version, then named tensors until EOF.
//! Every integer is u32 little-endian; tensor data is raw f32 little-endian.

use std::fs;
use std::path::Path;

use super::TrainError;

pub const MAGIC: &[u8; 4] = b"NCAP";
pub const VERSION: u32 = 1;

pub type NamedTensor = (String, Vec<usize>, Vec<f32>);

pub fn encode(tensors: &[(&str, Vec<usize>, &[f32])]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, dims, data) in tensors {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            TrainError::Checkpoint(format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>, TrainError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(TrainError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut tensors = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| TrainError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let count: usize = dims.iter().product();
        let raw = r.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, dims, data));
    }
    Ok(tensors)
}

pub fn save(path: &Path, tensors: &[(&str, Vec<usize>, &[f32])]) -> Result<(), TrainError> {
    fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>, TrainError> {
    decode(&fs::read(path)?)
}

pub fn save_params(path: &Path, params: &crate::engine::NcaParams) -> Result<(), TrainError> {
    save(path, &params.tensors())
}

pub fn load_params(path: &Path) -> Result<crate::engine::NcaParams, TrainError> {
    let tensors = load(path)?;
    let params = crate::engine::NcaParams::from_tensors(&tensors)
        .ok_or_else(|| TrainError::Checkpoint("tensors do not form a cell network".into()))?;
    if params.channels() != crate::engine::STATE_CHANNELS {
        return Err(TrainError::Checkpoint(format!(
            "network has {} state channels, the classifier uses {}",
            params.channels(),
            crate::engine::STATE_CHANNELS
        )));
    }
    Ok(params)
}
