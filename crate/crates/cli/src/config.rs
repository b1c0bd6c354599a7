use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use eraser_core::data::{DataConfig, Split};
use eraser_core::denoiser::ModelConfig;
use eraser_core::metrics::SWEEP_SCALES;
use eraser_core::sampler::{DEFAULT_BOUNDARY, DEFAULT_STEPS};
use eraser_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub boundary: f32,
    pub w_txt: f32,
    pub w_m: f32,
    /// Seed of the initial noise.
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, boundary: DEFAULT_BOUNDARY, w_txt: 1.5, w_m: 1.5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    /// Evaluate only the first `limit` samples of the split.
    pub limit: Option<usize>,
    pub sweep_w_txt: Vec<f32>,
    pub sweep_w_m: Vec<f32>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: Split::Test, limit: None, sweep_w_txt: SWEEP_SCALES.to_vec(), sweep_w_m: SWEEP_SCALES.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data: "data".into(), checkpoints: "checkpoints".into(), out: "out".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seeds of every section.
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| eraser_core::Error::InvalidConfig(format!("{}: {e}", path.display())).into())
    }

    pub fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.data.seed = seed;
            self.train.seed = seed;
            self.sample.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let w = &self.data.world;
        if (w.frames, w.height, w.width) != (self.model.frames, self.model.height, self.model.width) {
            bail!(eraser_core::Error::InvalidConfig(format!(
                "data clips are {}x{}x{} but the model expects {}x{}x{}",
                w.frames, w.height, w.width, self.model.frames, self.model.height, self.model.width
            )));
        }
        if self.sample.steps == 0 {
            bail!(eraser_core::Error::InvalidConfig("sample.steps must be positive".into()));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named() {
        let err = serde_json::from_str::<RunConfig>(r#"{"train": {"learning_rat": 0.1}}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn seed_overrides_sections() {
        let mut c: RunConfig = serde_json::from_str(r#"{"seed": 9, "train": {"seed": 1}}"#).unwrap();
        c.apply_seed();
        assert_eq!((c.data.seed, c.train.seed, c.sample.seed), (9, 9, 9));
    }

    #[test]
    fn mismatched_geometry_is_rejected() {
        let mut c = RunConfig::default();
        c.validate().unwrap();
        c.model.height = 8;
        assert!(c.validate().is_err());
    }
}
