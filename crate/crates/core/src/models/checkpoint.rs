//! Checkpoints as safetensors files.
//!
//! Parameters are stored as `param/<name>`, normalization statistics as
//! `buffer/<name>`, all f32. The header carries a single metadata entry,
//! `manifest`, holding JSON with the format tag, version, architecture, step
//! counter, seed and (optionally) the full training configuration.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::{init_models, ModelBundle};
use crate::config::{ArchConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rng::make_rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "wmrobust-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub arch: ArchConfig,
    pub step: u64,
    pub seed: u64,
    pub param_count: usize,
    /// Training configuration as TOML, when the checkpoint came from `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
}

fn to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn save_checkpoint(bundle: &ModelBundle<f32>, path: &Path, seed: u64, config: Option<&TrainConfig>) -> Result<()> {
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        arch: bundle.arch.clone(),
        step: bundle.step,
        seed,
        param_count: bundle.param_count(),
        config: config.map(|c| c.to_toml_string()),
    };
    let manifest = serde_json::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, t) in bundle.named_params() {
        blobs.push((format!("param/{name}"), t.shape().to_vec(), to_bytes(t)));
    }
    for (name, t) in bundle.named_buffers() {
        blobs.push((format!("buffer/{name}"), t.shape().to_vec(), to_bytes(t)));
    }
    let views = blobs
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(MANIFEST_KEY.to_string(), manifest)]);
    let bytes = safetensors::tensor::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so a crash never leaves a truncated checkpoint
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn parse_manifest(raw: Option<&String>) -> Result<CheckpointManifest> {
    let raw = raw.ok_or_else(|| Error::Checkpoint("no manifest in checkpoint header".into()))?;
    let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let format = value.get("format").and_then(|v| v.as_str()).unwrap_or_default();
    let version = value.get("version").and_then(|v| v.as_u64());
    if format != CHECKPOINT_FORMAT || version != Some(CHECKPOINT_VERSION as u64) {
        return Err(Error::CheckpointVersion {
            found: format!("{format} v{}", version.map_or("?".to_string(), |v| v.to_string())),
            expected: CHECKPOINT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))
}

/// Reads only the header of a checkpoint.
pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointManifest> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut len = [0u8; 8];
    file.read_exact(&mut len)
        .map_err(|_| Error::Checkpoint(format!("{}: not a checkpoint", path.display())))?;
    let len = u64::from_le_bytes(len);
    if len > 100_000_000 {
        return Err(Error::Checkpoint(format!("{}: implausible header size", path.display())));
    }
    let mut header = vec![0u8; len as usize];
    file.read_exact(&mut header)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    let header: serde_json::Value =
        serde_json::from_slice(&header).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let raw = header
        .get("__metadata__")
        .and_then(|m| m.get(MANIFEST_KEY))
        .and_then(|v| v.as_str())
        .map(str::to_string);
    parse_manifest(raw.as_ref())
}

fn fill_store(store: &mut ParamStore<f32>, prefix: &str, st: &SafeTensors<'_>) -> Result<()> {
    for (name, t) in store.iter_mut() {
        let key = format!("{prefix}/{name}");
        let view = st
            .tensor(&key)
            .map_err(|_| Error::Checkpoint(format!("missing tensor {key}")))?;
        if view.dtype() != Dtype::F32 || view.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {key}: expected f32 {:?}, found {:?} {:?}",
                t.shape(),
                view.dtype(),
                view.shape()
            )));
        }
        for (dst, chunk) in t.data_mut().iter_mut().zip(view.data().chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle<f32>, CheckpointManifest)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let manifest = parse_manifest(meta.metadata().as_ref().and_then(|m| m.get(MANIFEST_KEY)))?;

    let mut bundle: ModelBundle<f32> = init_models(&manifest.arch, &mut make_rng(0))?;
    let expected = bundle.named_params().count() + bundle.named_buffers().count();
    if st.len() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, architecture needs {expected}",
            st.len()
        )));
    }
    fill_store(&mut bundle.encoder.params, "param", &st)?;
    fill_store(&mut bundle.decoder.params, "param", &st)?;
    fill_store(&mut bundle.discriminator.params, "param", &st)?;
    fill_store(&mut bundle.encoder.buffers, "buffer", &st)?;
    fill_store(&mut bundle.decoder.buffers, "buffer", &st)?;
    fill_store(&mut bundle.discriminator.buffers, "buffer", &st)?;
    bundle.step = manifest.step;
    Ok((bundle, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ImageBatch, ImageRole, MessageBatch};

    fn arch() -> ArchConfig {
        ArchConfig {
            image_height: 16,
            image_width: 16,
            message_length: 6,
            channels: 4,
            encoder_blocks: 1,
            encoder_post_blocks: 1,
            decoder_blocks: 2,
            discriminator_blocks: 1,
            discriminator_channels: 4,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn round_trip_preserves_outputs_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut bundle: ModelBundle<f32> = init_models(&arch(), &mut make_rng(9)).unwrap();
        bundle.step = 17;
        // non-trivial running statistics
        bundle.decoder.buffers.tensors_mut()[0].fill(0.25);
        let a = dir.path().join("a.safetensors");
        save_checkpoint(&bundle, &a, 9, None).unwrap();
        let (loaded, manifest) = load_checkpoint(&a).unwrap();
        assert_eq!(manifest.step, 17);
        assert_eq!(manifest.seed, 9);
        assert_eq!(manifest, inspect_checkpoint(&a).unwrap());

        let mut rng = make_rng(1);
        let x = ImageBatch::new(Tensor::from_fn(&[2, 3, 16, 16], |_| rng.uniform() as f32), ImageRole::Cover).unwrap();
        let m = MessageBatch::new(vec![0, 1, 1, 0, 1, 0, 1, 1, 1, 0, 0, 0], 2, 6).unwrap();
        let before = bundle.encode(&x, &m).unwrap();
        let after = loaded.encode(&x, &m).unwrap();
        assert_eq!(before.tensor(), after.tensor());
        assert_eq!(bundle.decode(&before).unwrap().values(), loaded.decode(&after).unwrap().values());

        let b = dir.path().join("b.safetensors");
        save_checkpoint(&loaded, &b, 9, None).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("old.safetensors");
        let manifest = r#"{"format":"wmrobust-checkpoint","version":0}"#.to_string();
        let bytes = safetensors::tensor::serialize(
            Vec::<(String, TensorView<'_>)>::new(),
            Some(HashMap::from([(MANIFEST_KEY.to_string(), manifest)])),
        )
        .unwrap();
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointVersion { .. })));
        assert!(matches!(inspect_checkpoint(&path), Err(Error::CheckpointVersion { .. })));
    }

    #[test]
    fn garbage_is_a_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.safetensors");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        assert!(inspect_checkpoint(&path).is_err());
    }
}
