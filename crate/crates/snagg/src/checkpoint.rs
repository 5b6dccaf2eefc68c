//! Checkpoint files: magic `SNAGG001`, a length-prefixed UTF-8 manifest
//! (JSON text carrying the step, seed, model description and per-tensor
//! name/shape/dtype/offset records), then raw little-endian f64 payloads.
//! Optimizer velocity tensors are stored under `velocity/<name>` so training
//! resumes exactly. The optimizer hyperparameters themselves live in the run
//! config, not the checkpoint.

use crate::config::{model_from_kv, model_to_kv, KvMap, KvReader};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::{OptimizerConfig, TrainState};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SNAGG001";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub step: usize,
    pub seed: u64,
    pub lr_frame_scale: f64,
    pub model: KvMap,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub velocity: IndexMap<String, Vec<f64>>,
    pub step: usize,
    pub seed: u64,
    pub lr_frame_scale: f64,
}

impl LoadedCheckpoint {
    /// Rebuild a train state that resumes exactly where the checkpoint left
    /// off.
    pub fn into_train_state(self, cfg: &OptimizerConfig) -> TrainState {
        let mut state = TrainState::new(self.params, self.seed, self.lr_frame_scale, cfg);
        state.velocity = self.velocity;
        state.step = self.step;
        state.current_lr = crate::train::effective_lr(cfg, state.lr_frame_scale, state.step);
        state
    }
}

pub fn save(path: &Path, state: &TrainState, spec: &ModelSpec) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push_tensor = |name: String, shape: Vec<usize>, data: &[f64], payload: &mut Vec<u8>, entries: &mut Vec<TensorEntry>| {
        entries.push(TensorEntry {
            name,
            shape,
            dtype: "f64".into(),
            offset: payload.len() as u64,
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in state.params.iter() {
        push_tensor(name.clone(), t.shape().to_vec(), t.data(), &mut payload, &mut entries);
    }
    for (name, v) in &state.velocity {
        push_tensor(
            format!("velocity/{name}"),
            vec![v.len()],
            v,
            &mut payload,
            &mut entries,
        );
    }
    let manifest = CheckpointManifest {
        format: "snagg-checkpoint-v1".into(),
        step: state.step,
        seed: state.seed,
        lr_frame_scale: state.lr_frame_scale,
        model: model_to_kv(spec),
        tensors: entries,
    };
    let manifest_text =
        serde_json::to_string(&manifest).map_err(|e| Error::Io(format!("manifest encode: {e}")))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(manifest_text.len() as u64).to_le_bytes())?;
    file.write_all(manifest_text.as_bytes())?;
    file.write_all(&payload)?;
    file.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let file = path.display();
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!("{file}: not a checkpoint (bad magic)")));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(Error::Data(format!("{file}: truncated manifest")));
    }
    let manifest_text = std::str::from_utf8(&bytes[16..16 + manifest_len])
        .map_err(|e| Error::Data(format!("{file}: manifest is not UTF-8: {e}")))?;
    let manifest: CheckpointManifest = serde_json::from_str(manifest_text)
        .map_err(|e| Error::Data(format!("{file}: manifest: {e}")))?;
    if manifest.format != "snagg-checkpoint-v1" {
        return Err(Error::Data(format!(
            "{file}: unsupported checkpoint format {:?}",
            manifest.format
        )));
    }
    let payload = &bytes[16 + manifest_len..];
    let read_tensor = |entry: &TensorEntry| -> Result<Vec<f64>> {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        if end > payload.len() {
            return Err(Error::Data(format!(
                "{file}: tensor {} runs past the payload",
                entry.name
            )));
        }
        Ok(payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };

    let spec = {
        let r = KvReader::new(&manifest.model);
        model_from_kv(&r)?
    };
    let mut params = ParamSet::new();
    let mut velocity = IndexMap::new();
    for entry in &manifest.tensors {
        let data = read_tensor(entry)?;
        if let Some(stripped) = entry.name.strip_prefix("velocity/") {
            velocity.insert(stripped.to_string(), data);
        } else {
            params.insert(&entry.name, Tensor::new(entry.shape.clone(), data)?);
        }
    }
    for name in params.names() {
        if !velocity.contains_key(name) {
            return Err(Error::Data(format!(
                "{file}: missing velocity for parameter {name}"
            )));
        }
    }
    Ok(LoadedCheckpoint {
        spec,
        params,
        velocity,
        step: manifest.step,
        seed: manifest.seed,
        lr_frame_scale: manifest.lr_frame_scale,
    })
}

/// Copy every name- and shape-compatible parameter of `src` into `dst`.
/// Returns how many tensors were copied (the fine-tuning initialization
/// path).
pub fn init_from_compatible(dst: &mut ParamSet, src: &ParamSet) -> usize {
    let mut copied = 0;
    let names: Vec<String> = dst.names().cloned().collect();
    for name in names {
        if let Ok(s) = src.get(&name) {
            let d = dst.get_mut(&name).unwrap();
            if d.shape() == s.shape() {
                *d = s.clone().with_requires_grad();
                copied += 1;
            }
        }
    }
    copied
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{micro_arch_spec, micro_lstm_spec};
    use crate::model;
    use tempfile::TempDir;

    fn roundtrip(spec: &ModelSpec) {
        let params = model::init_params(spec, 5).unwrap();
        let cfg = OptimizerConfig::default();
        let mut state = TrainState::new(params, 41, 2.0, &cfg);
        state.step = 7;
        for v in state.velocity.values_mut() {
            for (i, x) in v.iter_mut().enumerate() {
                *x = i as f64 * 0.25;
            }
        }
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &state, spec).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(&loaded.spec, spec);
        assert_eq!(loaded.step, 7);
        assert_eq!(loaded.seed, 41);
        assert_eq!(loaded.params, state.params);
        assert_eq!(loaded.velocity, state.velocity);
        let resumed = loaded.into_train_state(&cfg);
        assert_eq!(resumed.step, 7);
    }

    #[test]
    fn pooling_checkpoint_round_trips() {
        roundtrip(&micro_arch_spec(crate::arch::ArchKind::SlowPooling));
    }

    #[test]
    fn lstm_checkpoint_round_trips() {
        roundtrip(&micro_lstm_spec());
    }

    #[test]
    fn saving_is_deterministic() {
        let spec = micro_arch_spec(crate::arch::ArchKind::ConvPooling);
        let params = model::init_params(&spec, 5).unwrap();
        let cfg = OptimizerConfig::default();
        let state = TrainState::new(params, 1, 1.0, &cfg);
        let dir = TempDir::new().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save(&a, &state, &spec).unwrap();
        save(&b, &state, &spec).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn corrupt_magic_is_a_data_error() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOTMAGIC........").unwrap();
        assert!(matches!(load(&path), Err(Error::Data(_))));
    }

    #[test]
    fn compatible_init_counts_matches() {
        let spec = micro_arch_spec(crate::arch::ArchKind::ConvPooling);
        let src = model::init_params(&spec, 1).unwrap();
        let mut dst = model::init_params(&spec, 2).unwrap();
        let n = init_from_compatible(&mut dst, &src);
        assert_eq!(n, src.len());
        for (name, t) in src.iter() {
            assert_eq!(dst.get(name).unwrap().data(), t.data());
        }
        // Shape-incompatible target parameters stay untouched.
        let mut partial = ParamSet::new();
        partial.insert("head.out.b", Tensor::zeros(&[99]));
        partial.insert("head.out.w", src.get("head.out.w").unwrap().clone());
        let n = init_from_compatible(&mut partial, &src);
        assert_eq!(n, 1);
    }
}
