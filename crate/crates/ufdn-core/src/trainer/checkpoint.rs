//! Checkpoint persistence.
//!
//! Binary layout: magic `UFDN`, format version byte 0x01, a 4-byte
//! little-endian manifest length, the UTF-8 TOML manifest, then raw 32-bit
//! little-endian IEEE-754 tensor payloads in manifest order. The manifest
//! carries the architecture, a config echo, the step and seed, optimizer
//! step counters, and a named tensor index with shapes and byte offsets.
//!
//! Saving first rounds the live parameters and Adam moments through f32
//! (storage precision), so a resumed run continues from *exactly* the bytes
//! on disk and replays an uninterrupted run bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptStates, TrainConfig};
use crate::error::{Result, UfdnError};
use crate::nn::{Architecture, UfdnModel, ALL_PARTITIONS};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"UFDN";
const VERSION: u8 = 0x01;

#[derive(Serialize, Deserialize)]
struct Manifest {
    step: u64,
    seed: u64,
    arch: Architecture,
    config: TrainConfig,
    optimizer: OptMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct OptMeta {
    /// Adam step counters in partition order (E, G, Dv, Dx, C).
    t: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// A fully reconstructed checkpoint.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: UfdnModel,
    pub opt: OptStates,
    pub config: TrainConfig,
    pub step: u64,
    pub seed: u64,
}

/// Quantizes the live state to storage precision and writes it to `path`.
pub fn save_checkpoint(
    model: &mut UfdnModel,
    opt: &mut OptStates,
    config: &TrainConfig,
    step: u64,
    path: &Path,
) -> Result<()> {
    super::quantize_state(model, opt)?;

    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0u64;
    let push = |name: String, t: &Tensor, entries: &mut Vec<TensorEntry>, payload: &mut Vec<u8>, offset: &mut u64| {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: *offset,
        });
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        *offset += 4 * t.numel() as u64;
    };

    let specs: Vec<(String, Tensor)> = model
        .params()
        .map(|(s, t)| (s.name.clone(), t.clone()))
        .collect();
    for (name, t) in &specs {
        push(format!("param.{name}"), t, &mut entries, &mut payload, &mut offset);
    }
    for (name, t) in &specs {
        let partition = model.partition_of(name)?;
        let state = opt.get_mut(partition);
        let (m, v) = state.moments_mut(name, t.numel()).clone();
        let mt = Tensor::from_vec(t.shape(), m)?;
        let vt = Tensor::from_vec(t.shape(), v)?;
        push(format!("adam.m.{name}"), &mt, &mut entries, &mut payload, &mut offset);
        push(format!("adam.v.{name}"), &vt, &mut entries, &mut payload, &mut offset);
    }

    let manifest = Manifest {
        step,
        seed: config.seed,
        arch: model.arch.clone(),
        config: config.clone(),
        optimizer: OptMeta {
            t: ALL_PARTITIONS.iter().map(|&p| opt.get(p).t).collect(),
        },
        tensors: entries,
    };
    let manifest_text = toml::to_string(&manifest)
        .map_err(|e| UfdnError::Format(format!("manifest serialization failed: {e}")))?;

    let mut bytes = Vec::with_capacity(9 + manifest_text.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.push(VERSION);
    bytes.extend_from_slice(&(manifest_text.len() as u32).to_le_bytes());
    bytes.extend_from_slice(manifest_text.as_bytes());
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads and validates a checkpoint, widening tensors back to f64.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 9 {
        return Err(UfdnError::Format("file too short for a checkpoint".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(UfdnError::Format(format!(
            "bad magic {:?}; expected \"UFDN\"",
            &bytes[..4]
        )));
    }
    if bytes[4] != VERSION {
        return Err(UfdnError::Format(format!(
            "unsupported checkpoint version {}; expected {VERSION}",
            bytes[4]
        )));
    }
    let manifest_len = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
    let manifest_end = 9 + manifest_len;
    if bytes.len() < manifest_end {
        return Err(UfdnError::Format("truncated manifest".into()));
    }
    let manifest_text = std::str::from_utf8(&bytes[9..manifest_end])
        .map_err(|_| UfdnError::Format("manifest is not valid UTF-8".into()))?;
    let manifest: Manifest = toml::from_str(manifest_text)
        .map_err(|e| UfdnError::Format(format!("bad manifest: {e}")))?;
    manifest.arch.validate()?;
    if manifest.optimizer.t.len() != ALL_PARTITIONS.len() {
        return Err(UfdnError::Integrity(format!(
            "optimizer carries {} step counters, expected {}",
            manifest.optimizer.t.len(),
            ALL_PARTITIONS.len()
        )));
    }

    // Expected tensor set, derived from the declared architecture.
    let specs = manifest.arch.param_specs();
    let expected_count = specs.len() * 3;
    if manifest.tensors.len() != expected_count {
        return Err(UfdnError::Integrity(format!(
            "manifest lists {} tensors, architecture implies {expected_count}",
            manifest.tensors.len()
        )));
    }
    let payload = &bytes[manifest_end..];
    let mut cursor = 0u64;
    let mut model = UfdnModel::init(manifest.arch.clone(), 0)?;
    let mut opt = OptStates::new();
    for (p, &t) in ALL_PARTITIONS.iter().zip(&manifest.optimizer.t) {
        opt.get_mut(*p).t = t;
    }

    for entry in &manifest.tensors {
        let (kind, param_name) = split_name(&entry.name)?;
        let spec = specs
            .iter()
            .find(|s| s.name == param_name)
            .ok_or_else(|| {
                UfdnError::Integrity(format!(
                    "tensor `{}` does not correspond to any architecture parameter",
                    entry.name
                ))
            })?;
        if entry.shape != spec.shape {
            return Err(UfdnError::Integrity(format!(
                "tensor `{}` has shape {:?} but the declared architecture requires {:?}",
                entry.name, entry.shape, spec.shape
            )));
        }
        if entry.offset != cursor {
            return Err(UfdnError::Integrity(format!(
                "tensor `{}` declares offset {} but payload cursor is {cursor}",
                entry.name, entry.offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let nbytes = 4 * numel;
        let start = cursor as usize;
        let slice = payload.get(start..start + nbytes).ok_or_else(|| {
            UfdnError::Integrity(format!(
                "payload truncated while reading tensor `{}`",
                entry.name
            ))
        })?;
        let mut data = Vec::with_capacity(numel);
        for chunk in slice.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
        }
        cursor += nbytes as u64;
        match kind {
            TensorKind::Param => {
                model.set_param(param_name, Tensor::from_vec(&entry.shape, data)?)?;
            }
            TensorKind::AdamM => {
                let partition = spec.partition;
                let state = opt.get_mut(partition);
                let (m, _) = state.moments_mut(param_name, numel);
                *m = data;
            }
            TensorKind::AdamV => {
                let partition = spec.partition;
                let state = opt.get_mut(partition);
                let (_, v) = state.moments_mut(param_name, numel);
                *v = data;
            }
        }
    }
    if cursor as usize != payload.len() {
        return Err(UfdnError::Integrity(format!(
            "payload holds {} bytes but the manifest accounts for {cursor}",
            payload.len()
        )));
    }
    Ok(LoadedCheckpoint {
        model,
        opt,
        config: manifest.config,
        step: manifest.step,
        seed: manifest.seed,
    })
}

enum TensorKind {
    Param,
    AdamM,
    AdamV,
}

fn split_name(name: &str) -> Result<(TensorKind, &str)> {
    if let Some(rest) = name.strip_prefix("param.") {
        Ok((TensorKind::Param, rest))
    } else if let Some(rest) = name.strip_prefix("adam.m.") {
        Ok((TensorKind::AdamM, rest))
    } else if let Some(rest) = name.strip_prefix("adam.v.") {
        Ok((TensorKind::AdamV, rest))
    } else {
        Err(UfdnError::Integrity(format!(
            "unrecognized tensor name `{name}`"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use tempfile::TempDir;

    fn model_and_opt() -> (UfdnModel, OptStates) {
        let arch = Architecture::new(8, 1, 3).unwrap().with_latent_dim(8);
        let model = UfdnModel::init(arch, 3).unwrap();
        (model, OptStates::new())
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = TempDir::new().unwrap();
        let (mut model, mut opt) = model_and_opt();
        let config = TrainConfig::default();
        let p1 = dir.path().join("a.ufdn");
        save_checkpoint(&mut model, &mut opt, &config, 5, &p1).unwrap();
        let mut loaded = load_checkpoint(&p1).unwrap();
        let p2 = dir.path().join("b.ufdn");
        save_checkpoint(
            &mut loaded.model,
            &mut loaded.opt,
            &loaded.config,
            loaded.step,
            &p2,
        )
        .unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn load_recovers_params_to_f32_precision() {
        let dir = TempDir::new().unwrap();
        let (model, mut opt) = model_and_opt();
        let pristine = model.clone();
        let mut to_save = model;
        let path = dir.path().join("c.ufdn");
        save_checkpoint(&mut to_save, &mut opt, &TrainConfig::default(), 1, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        for ((spec, before), (_, after)) in pristine.params().zip(loaded.model.params()) {
            for (a, b) in before.data().iter().zip(after.data()) {
                let rel = (a - b).abs() / a.abs().max(1e-30);
                assert!(
                    rel <= 2f64.powi(-23) || (a - b).abs() < 1e-30,
                    "{}: {a} vs {b}",
                    spec.name
                );
            }
        }
        assert_eq!(loaded.step, 1);
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.ufdn");
        fs::write(&path, b"NOPE\x01\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(UfdnError::Format(_))
        ));
        let mut ok = b"UFDN".to_vec();
        ok.push(0x7f);
        ok.extend_from_slice(&0u32.to_le_bytes());
        fs::write(&path, ok).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(UfdnError::Format(_))
        ));
    }

    #[test]
    fn corrupted_shape_digit_names_the_tensor() {
        let dir = TempDir::new().unwrap();
        let (mut model, mut opt) = model_and_opt();
        let path = dir.path().join("d.ufdn");
        save_checkpoint(&mut model, &mut opt, &TrainConfig::default(), 1, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let len = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
        let manifest = String::from_utf8(bytes[9..9 + len].to_vec()).unwrap();
        // E.mu.w has shape [256, 8]; flip its 8 to 9 (same byte length).
        let needle = "shape = [256, 8]";
        assert!(manifest.contains(needle), "fixture drifted: {manifest}");
        let corrupted = manifest.replacen(needle, "shape = [256, 9]", 1);
        bytes[9..9 + len].copy_from_slice(corrupted.as_bytes());
        fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(UfdnError::Integrity(msg)) => {
                assert!(msg.contains("E.mu.w"), "message should name the tensor: {msg}")
            }
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_an_integrity_error() {
        let dir = TempDir::new().unwrap();
        let (mut model, mut opt) = model_and_opt();
        let path = dir.path().join("e.ufdn");
        save_checkpoint(&mut model, &mut opt, &TrainConfig::default(), 1, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(UfdnError::Integrity(_))
        ));
    }
}
