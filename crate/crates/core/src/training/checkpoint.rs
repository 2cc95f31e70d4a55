use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::model::Network;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PKCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized network state plus the configuration that produced it.
///
/// Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header
/// (config, epoch, intrinsics, tensor index), then every tensor as
/// little-endian `f32` in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub intrinsics: CameraIntrinsics,
    pub state: Vec<(String, Vec<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    intrinsics: CameraIntrinsics,
    tensors: Vec<(String, usize)>,
}

/// Path of the JSON config echoed next to a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("config.json")
}

impl Checkpoint {
    pub fn from_network(net: &mut Network, config: &TrainConfig, epoch: usize, intrinsics: CameraIntrinsics) -> Self {
        Self {
            config: config.clone(),
            epoch,
            intrinsics,
            state: net.state(),
        }
    }

    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::new(self.config.model.clone())?;
        net.load_state(&self.state)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            intrinsics: self.intrinsics,
            tensors: self.state.iter().map(|(n, v)| (n.clone(), v.len())).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let n_values: usize = self.state.iter().map(|(_, v)| v.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 4 * n_values);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in &self.state {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::ConfigMismatch(format!("{}: {msg}", path.display()));
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated checkpoint"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a posekit checkpoint"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated checkpoint"))?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| bad("truncated checkpoint"))?;
        let len = u64::from_le_bytes(b8) as usize;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&r[..len]).map_err(|e| bad(&format!("bad header: {e}")))?;
        r = &r[len..];
        let total: usize = header.tensors.iter().map(|(_, n)| n).sum();
        if r.len() != total * 4 {
            return Err(bad(&format!("expected {} tensor bytes, found {}", total * 4, r.len())));
        }
        let mut state = Vec::with_capacity(header.tensors.len());
        for (name, n) in header.tensors {
            let (head, tail) = r.split_at(n * 4);
            let v = head
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            state.push((name, v));
            r = tail;
        }
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            intrinsics: header.intrinsics,
            state,
        })
    }

    /// Writes the checkpoint and its config sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let mut json =
            serde_json::to_string_pretty(&self.config).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        json.push('\n');
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
