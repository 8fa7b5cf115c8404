//! Checkpoints: `<name>.manifest.json` plus `<name>.params.bin`, a flat blob of
//! little-endian `f32` values in manifest order.

use std::path::{Path, PathBuf};

use pearl_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{PearlError, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 2],
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape[0] * self.shape[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: String,
    pub seed: u64,
    pub hyperparameters: serde_json::Value,
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<Tensor>,
}

/// Manifest and blob paths for a checkpoint base path. A path that already
/// names either file is accepted.
pub fn checkpoint_paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.to_string_lossy();
    let stem = s
        .strip_suffix(".manifest.json")
        .or_else(|| s.strip_suffix(".params.bin"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{stem}.manifest.json")),
        PathBuf::from(format!("{stem}.params.bin")),
    )
}

pub fn encode_blob(tensors: &[Tensor]) -> Vec<u8> {
    let total: usize = tensors.iter().map(Tensor::len).sum();
    let mut out = Vec::with_capacity(total * 4);
    for t in tensors {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn check_specs(declared: &[ParamSpec], expected: &[ParamSpec]) -> Result<()> {
    if declared.len() != expected.len() {
        return Err(PearlError::CheckpointShape(format!(
            "manifest lists {} parameters, hyperparameters imply {}",
            declared.len(),
            expected.len()
        )));
    }
    for (d, e) in declared.iter().zip(expected) {
        if d != e {
            return Err(PearlError::CheckpointShape(format!(
                "parameter `{}` {:?} does not match expected `{}` {:?}",
                d.name, d.shape, e.name, e.shape
            )));
        }
    }
    Ok(())
}

/// Validates the manifest and decodes the blob. `expected` derives the
/// parameter list implied by the manifest's hyperparameters.
pub fn decode_checkpoint(
    manifest: CheckpointManifest,
    blob: &[u8],
    expected: impl Fn(&CheckpointManifest) -> Result<Vec<ParamSpec>>,
) -> Result<Checkpoint> {
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(PearlError::CheckpointVersion {
            found: manifest.format_version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    check_specs(&manifest.params, &expected(&manifest)?)?;
    let want: usize = manifest.params.iter().map(|p| p.numel() * 4).sum();
    if blob.len() < want {
        return Err(PearlError::CheckpointTruncated {
            expected: want,
            found: blob.len(),
        });
    }
    if blob.len() > want {
        return Err(PearlError::CheckpointTrailing {
            extra: blob.len() - want,
        });
    }
    let mut tensors = Vec::with_capacity(manifest.params.len());
    let mut chunks = blob.chunks_exact(4);
    for p in &manifest.params {
        let data: Vec<f64> = chunks
            .by_ref()
            .take(p.numel())
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push(Tensor::new(p.shape[0], p.shape[1], data)?);
    }
    Ok(Checkpoint { manifest, tensors })
}

pub fn save_checkpoint(ckpt: &Checkpoint, base: &Path) -> Result<()> {
    if ckpt.manifest.params.len() != ckpt.tensors.len() {
        return Err(PearlError::CheckpointShape(format!(
            "{} parameter specs for {} tensors",
            ckpt.manifest.params.len(),
            ckpt.tensors.len()
        )));
    }
    for (p, t) in ckpt.manifest.params.iter().zip(&ckpt.tensors) {
        if p.shape != t.shape() {
            return Err(PearlError::CheckpointShape(format!(
                "parameter `{}` declared {:?} but holds {:?}",
                p.name,
                p.shape,
                t.shape()
            )));
        }
    }
    let (mpath, bpath) = checkpoint_paths(base);
    if let Some(dir) = mpath.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PearlError::io(dir, e))?;
    }
    let json = serde_json::to_string_pretty(&ckpt.manifest)?;
    std::fs::write(&mpath, json).map_err(|e| PearlError::io(&mpath, e))?;
    std::fs::write(&bpath, encode_blob(&ckpt.tensors)).map_err(|e| PearlError::io(&bpath, e))
}

pub fn load_checkpoint(
    base: &Path,
    expected: impl Fn(&CheckpointManifest) -> Result<Vec<ParamSpec>>,
) -> Result<Checkpoint> {
    let (mpath, bpath) = checkpoint_paths(base);
    let text = std::fs::read_to_string(&mpath).map_err(|e| PearlError::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let blob = std::fs::read(&bpath).map_err(|e| PearlError::io(&bpath, e))?;
    decode_checkpoint(manifest, &blob, expected)
}
