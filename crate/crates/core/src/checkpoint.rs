//! Checkpoint serialization.
//!
//! A checkpoint is a safetensors file of named tensors plus a JSON sidecar
//! (`<stem>.json`) carrying the format version, the student config, and the
//! charset. Distillation-only parameters live under the `distill/` prefix
//! so inference loads can drop them without knowing the training setup.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::charset::LabelCodec;
use crate::error::{Error, Result};
use crate::params::{ParamSet, DISTILL_PREFIX};
use crate::student::{Student, StudentConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub student: StudentConfig,
    pub alphabet: String,
    pub max_label_len: usize,
}

impl CheckpointMeta {
    pub fn new(student: &StudentConfig, codec: &LabelCodec) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            student: student.clone(),
            alphabet: crate::charset::ALPHABET.to_string(),
            max_label_len: codec.max_label_len,
        }
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::BadCheckpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tensors: std::collections::HashMap<String, Tensor> =
        params.named_tensors().into_iter().collect();
    candle_core::safetensors::save(&tensors, path)?;
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    let side = sidecar_path(path);
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

/// Loads tensors and metadata. With `keep_distill` false the `distill/`
/// namespace is dropped, which is what inference wants.
pub fn load_checkpoint(
    path: &Path,
    device: &Device,
    keep_distill: bool,
) -> Result<(BTreeMap<String, Tensor>, CheckpointMeta)> {
    if !path.exists() {
        return Err(bad(path, "file not found"));
    }
    let side = sidecar_path(path);
    let json = std::fs::read_to_string(&side)
        .map_err(|e| bad(path, format!("missing sidecar {}: {e}", side.display())))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&json).map_err(|e| bad(path, format!("bad sidecar: {e}")))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(bad(
            path,
            format!("unsupported version {} (expected {CHECKPOINT_VERSION})", meta.version),
        ));
    }
    let loaded = candle_core::safetensors::load(path, device)
        .map_err(|e| bad(path, format!("unreadable tensors: {e}")))?;
    let mut tensors = BTreeMap::new();
    for (name, t) in loaded {
        if !keep_distill && name.starts_with(DISTILL_PREFIX) {
            continue;
        }
        tensors.insert(name, t);
    }
    if tensors.is_empty() {
        return Err(bad(path, "no tensors"));
    }
    Ok((tensors, meta))
}

/// Rebuilds a student for inference from a checkpoint. Distillation
/// tensors are ignored; every student tensor must be present.
pub fn load_student(path: &Path, device: &Device) -> Result<(Student, CheckpointMeta)> {
    use rand::SeedableRng;
    let (tensors, meta) = load_checkpoint(path, device, false)?;
    let mut params = ParamSet::new();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
    let student = Student::init(
        &mut params,
        &mut rng,
        meta.student.clone(),
        candle_core::DType::F32,
        device,
    )?;
    for name in params.named().keys() {
        if !tensors.contains_key(name) {
            return Err(bad(path, format!("missing tensor {name}")));
        }
    }
    params.load_from(&tensors)?;
    Ok((student, meta))
}

/// Rewrites a checkpoint without its distillation parameters.
pub fn strip_distill(src: &Path, dst: &Path, device: &Device) -> Result<CheckpointMeta> {
    let (tensors, meta) = load_checkpoint(src, device, false)?;
    if let Some(dir) = dst.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    candle_core::safetensors::save(&map, dst)?;
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    let side = sidecar_path(dst);
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok(meta)
}
