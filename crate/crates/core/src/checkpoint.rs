//! Checkpoint directories: `manifest.json` plus one raw f32le file per tensor.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, ModelConfig};
use crate::error::{Error, Result};
use crate::io::{read_json, read_tensor, write_tensor, DTYPE};
use crate::sampler::{ExpertPair, ExpertRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub model: ModelConfig,
    pub stage: u8,
    pub role: ExpertRole,
    pub steps: usize,
    pub tensors: Vec<TensorEntry>,
}

const TEXT_TABLE: &str = "text_table";

pub fn save_checkpoint(model: &Denoiser, role: ExpertRole, stage: u8, steps: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let named = model.params.named();
    let all = named.iter().map(|(n, a)| (n.as_str(), *a)).chain(std::iter::once((TEXT_TABLE, &model.text_table)));
    for (name, array) in all {
        let file = format!("{name}.bin");
        write_tensor(&dir.join(&file), array)?;
        let (r, c) = array.dim();
        tensors.push(TensorEntry { name: name.to_string(), file, shape: [r, c] });
    }
    let manifest = CheckpointManifest { dtype: DTYPE.into(), model: model.config.clone(), stage, role, steps, tensors };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Denoiser, CheckpointManifest)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: CheckpointManifest = read_json(&manifest_path)?;
    if manifest.dtype != DTYPE {
        return Err(Error::CorruptManifest { path: manifest_path, reason: format!("unsupported dtype `{}`", manifest.dtype) });
    }
    let mut model = Denoiser::new(manifest.model.clone(), 0)?;
    let lookup = |name: &str| -> Result<Array2<f32>> {
        let entry = manifest.tensors.iter().find(|e| e.name == name).ok_or_else(|| Error::CorruptManifest {
            path: manifest_path.clone(),
            reason: format!("tensor `{name}` not listed"),
        })?;
        read_tensor(&dir.join(&entry.file), (entry.shape[0], entry.shape[1]))
    };
    let mut failure = None;
    model.params.visit_mut(&mut |name, slot| {
        if failure.is_some() {
            return;
        }
        match lookup(name) {
            Ok(a) if a.dim() == slot.dim() => *slot = a,
            Ok(a) => failure = Some(Error::ShapeMismatch(format!("`{name}` is {:?}, architecture needs {:?}", a.dim(), slot.dim()))),
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let table = lookup(TEXT_TABLE)?;
    if table.dim() != model.text_table.dim() {
        return Err(Error::ShapeMismatch(format!("text table is {:?}, expected {:?}", table.dim(), model.text_table.dim())));
    }
    model.text_table = table;
    Ok((model, manifest))
}

/// Loads `root/locator` and `root/preserver`.
pub fn load_pair(root: &Path, boundary: f32) -> Result<ExpertPair> {
    let (locator, _) = load_checkpoint(&root.join(ExpertRole::Locator.as_str()))?;
    let (preserver, _) = load_checkpoint(&root.join(ExpertRole::Preserver.as_str()))?;
    ExpertPair::new(locator, preserver, boundary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { frames: 2, height: 4, width: 4, patch: [1, 2, 2], d_model: 8, heads: 2, blocks: 2, text_len: 4, text_dim: 4, ..ModelConfig::default() }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Denoiser::new(small(), 4).unwrap();
        m.params.blocks[1].fusion_text.bias.fill(0.25);
        save_checkpoint(&m, ExpertRole::Preserver, 2, 17, dir.path()).unwrap();
        let (back, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!((manifest.stage, manifest.role, manifest.steps), (2, ExpertRole::Preserver, 17));
    }

    #[test]
    fn shape_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let m = Denoiser::new(small(), 4).unwrap();
        save_checkpoint(&m, ExpertRole::Locator, 1, 0, dir.path()).unwrap();
        let p = dir.path().join("manifest.json");
        let mut manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        manifest.model.d_model = 16;
        manifest.model.heads = 2;
        fs::write(&p, serde_json::to_vec(&manifest).unwrap()).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn missing_tensor_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let m = Denoiser::new(small(), 4).unwrap();
        save_checkpoint(&m, ExpertRole::Locator, 1, 0, dir.path()).unwrap();
        fs::remove_file(dir.path().join("head.weight.bin")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::MissingFile(_))));
    }
}
