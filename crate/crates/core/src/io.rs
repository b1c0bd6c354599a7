//! Raw little-endian f32 tensor files and the on-disk dataset layout.
//!
//! ```text
//! root/
//!   index.json          {"generator_version", "vocab", "samples": [dir, ..]}
//!   vocab.json
//!   sample_00000/
//!     manifest.json     shapes, dtype "f32le", seed, spec, token ids
//!     ref.bin gt.bin mask.bin effect.bin
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array, Dimension, IntoDimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{read_vocab, write_vocab, BipartiteText};
use crate::world::{SampleRecord, SceneSpec};

pub const DTYPE: &str = "f32le";
pub const GENERATOR_VERSION: &str = concat!("eraser-world/", env!("CARGO_PKG_VERSION"));

pub fn write_tensor<D: Dimension>(path: &Path, tensor: &Array<f32, D>) -> Result<()> {
    let mut bytes = Vec::with_capacity(tensor.len() * 4);
    for v in tensor.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_tensor<Sh>(path: &Path, shape: Sh) -> Result<Array<f32, Sh::Dim>>
where
    Sh: IntoDimension,
{
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let dim = shape.into_dimension();
    let bytes = fs::read(path)?;
    let expected = dim.size() * 4;
    if bytes.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{} holds {} bytes, shape {:?} needs {expected}",
            path.display(),
            bytes.len(),
            dim.slice()
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array::from_shape_vec(dim, data).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    serde_json::from_slice(&fs::read(path)?)
        .map_err(|e| Error::CorruptManifest { path: path.to_path_buf(), reason: e.to_string() })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub generator_version: String,
    pub vocab: String,
    pub samples: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleManifest {
    pub dtype: String,
    /// `[T, H, W, C]`
    pub video_shape: [usize; 4],
    /// `[T, H, W]`
    pub mask_shape: [usize; 3],
    pub seed: u64,
    pub spec: SceneSpec,
    pub token_ids: Vec<u32>,
    pub tensors: TensorFiles,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorFiles {
    #[serde(rename = "ref")]
    pub reference: String,
    pub gt: String,
    pub mask: String,
    pub effect: String,
}

impl Default for TensorFiles {
    fn default() -> Self {
        Self {
            reference: "ref.bin".into(),
            gt: "gt.bin".into(),
            mask: "mask.bin".into(),
            effect: "effect.bin".into(),
        }
    }
}

/// Token sequence length stored in manifests.
pub const MANIFEST_TEXT_LEN: usize = crate::text::DEFAULT_MAX_LEN;

pub fn write_dataset(samples: &[SampleRecord], root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    write_vocab(&root.join("vocab.json"))?;
    let mut names = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:05}");
        let dir = root.join(&name);
        fs::create_dir_all(&dir)?;
        let files = TensorFiles::default();
        let (t, h, w, c) = s.ref_video.dim();
        let manifest = SampleManifest {
            dtype: DTYPE.into(),
            video_shape: [t, h, w, c],
            mask_shape: [t, h, w],
            seed: s.spec.seed,
            spec: s.spec.clone(),
            token_ids: s.text.encode(MANIFEST_TEXT_LEN)?,
            tensors: files.clone(),
        };
        write_tensor(&dir.join(&files.reference), &s.ref_video)?;
        write_tensor(&dir.join(&files.gt), &s.gt_video)?;
        write_tensor(&dir.join(&files.mask), &s.mask)?;
        write_tensor(&dir.join(&files.effect), &s.effect_map)?;
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        names.push(name);
    }
    let index = DatasetIndex {
        generator_version: GENERATOR_VERSION.into(),
        vocab: "vocab.json".into(),
        samples: names,
    };
    fs::write(root.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

pub fn read_dataset(root: &Path) -> Result<Vec<SampleRecord>> {
    let index: DatasetIndex = read_json(&root.join("index.json"))?;
    read_vocab(&root.join(&index.vocab))?;
    index.samples.iter().map(|name| read_sample(&root.join(name))).collect()
}

fn read_sample(dir: &Path) -> Result<SampleRecord> {
    let manifest_path = dir.join("manifest.json");
    let m: SampleManifest = read_json(&manifest_path)?;
    let corrupt = |reason: String| Error::CorruptManifest { path: manifest_path.clone(), reason };
    if m.dtype != DTYPE {
        return Err(corrupt(format!("unsupported dtype `{}`", m.dtype)));
    }
    let [t, h, w, c] = m.video_shape;
    if m.mask_shape != [t, h, w] {
        return Err(Error::ShapeMismatch(format!("mask shape {:?} vs video {:?}", m.mask_shape, m.video_shape)));
    }
    if m.seed != m.spec.seed || (m.spec.frames, m.spec.height, m.spec.width) != (t, h, w) {
        return Err(corrupt("spec disagrees with recorded shape or seed".into()));
    }
    let path = |f: &str| -> PathBuf { dir.join(f) };
    Ok(SampleRecord {
        ref_video: read_tensor(&path(&m.tensors.reference), (t, h, w, c))?,
        gt_video: read_tensor(&path(&m.tensors.gt), (t, h, w, c))?,
        mask: read_tensor(&path(&m.tensors.mask), (t, h, w))?,
        effect_map: read_tensor(&path(&m.tensors.effect), (t, h, w))?,
        text: BipartiteText::decode(&m.token_ids)?,
        spec: m.spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_scene, EffectKind, WorldConfig};

    fn samples(n: u64) -> Vec<SampleRecord> {
        let world = WorldConfig::default();
        (0..n)
            .map(|s| generate_scene(&SceneSpec::random(s, &world, &EffectKind::ALL)).unwrap())
            .collect()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data = samples(10);
        write_dataset(&data, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), data);
    }

    #[test]
    fn truncated_tensor_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&samples(2), dir.path()).unwrap();
        let f = dir.path().join("sample_00001/gt.bin");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn missing_tensor_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&samples(2), dir.path()).unwrap();
        fs::remove_file(dir.path().join("sample_00000/effect.bin")).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("effect.bin")),
            other => panic!("expected missing file, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&samples(1), dir.path()).unwrap();
        fs::write(dir.path().join("sample_00000/manifest.json"), b"{ not json").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::CorruptManifest { .. })));
    }
}
