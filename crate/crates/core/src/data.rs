//! Train / test / out-of-distribution splits drawn from the scene generator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainingSets;
use crate::world::{generate_scene, EffectKind, MisalignSpec, SampleRecord, SceneSpec, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub world: WorldConfig,
    pub seed: u64,
    /// Pixel-aligned training pairs.
    pub train_samples: usize,
    /// Additional pairs whose ground truth is jittered and re-lit.
    pub misaligned_samples: usize,
    pub test_samples: usize,
    pub ood_samples: usize,
    pub train_effects: Vec<EffectKind>,
    /// Effect kinds never seen in training.
    pub ood_effects: Vec<EffectKind>,
    pub misalignment: MisalignSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            seed: 0,
            train_samples: 2000,
            misaligned_samples: 1000,
            test_samples: 24,
            ood_samples: 16,
            train_effects: vec![EffectKind::Shadow, EffectKind::LightHalo, EffectKind::Reflection, EffectKind::None],
            ood_effects: vec![EffectKind::Ripple],
            misalignment: MisalignSpec { translation_jitter: 1, brightness_jitter: 0.05 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Misaligned,
    Test,
    Ood,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Misaligned, Split::Test, Split::Ood];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Misaligned => "misaligned",
            Split::Test => "test",
            Split::Ood => "ood",
        }
    }
}

/// Scene seed of sample `index` in `split`; splits never share seeds.
pub fn scene_seed(base: u64, split: Split, index: usize) -> u64 {
    let tag = split as u64 + 1;
    base.wrapping_mul(0x0100_0000_01b3).wrapping_add(tag << 40).wrapping_add(index as u64)
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_effects.is_empty() || self.ood_effects.is_empty() {
            return Err(Error::InvalidConfig("train_effects and ood_effects must be non-empty".into()));
        }
        if let Some(k) = self.ood_effects.iter().find(|k| self.train_effects.contains(k)) {
            return Err(Error::InvalidConfig(format!("{k:?} is both a training and an out-of-distribution effect")));
        }
        if self.train_samples == 0 {
            return Err(Error::InvalidConfig("train_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_samples,
            Split::Misaligned => self.misaligned_samples,
            Split::Test => self.test_samples,
            Split::Ood => self.ood_samples,
        }
    }

    pub fn spec(&self, split: Split, index: usize) -> SceneSpec {
        let effects = if split == Split::Ood { &self.ood_effects } else { &self.train_effects };
        let mut spec = SceneSpec::random(scene_seed(self.seed, split, index), &self.world, effects);
        if split == Split::Misaligned {
            spec.misalignment = Some(self.misalignment);
        }
        spec
    }

    pub fn generate(&self, split: Split) -> Result<Vec<SampleRecord>> {
        self.validate()?;
        (0..self.count(split)).map(|i| generate_scene(&self.spec(split, i))).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: TrainingSets,
    pub test: Vec<SampleRecord>,
    pub ood: Vec<SampleRecord>,
}

pub fn build_splits(cfg: &DataConfig) -> Result<DataSplits> {
    Ok(DataSplits {
        train: TrainingSets { aligned: cfg.generate(Split::Train)?, misaligned: cfg.generate(Split::Misaligned)? },
        test: cfg.generate(Split::Test)?,
        ood: cfg.generate(Split::Ood)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn splits_are_disjoint_and_sized() {
        let cfg = DataConfig { train_samples: 20, misaligned_samples: 10, test_samples: 5, ood_samples: 4, ..DataConfig::default() };
        let seeds: HashSet<u64> = Split::ALL.iter().flat_map(|&s| (0..cfg.count(s)).map(move |i| scene_seed(0, s, i))).collect();
        assert_eq!(seeds.len(), 39);
        let d = build_splits(&cfg).unwrap();
        assert_eq!((d.train.aligned.len(), d.train.misaligned.len(), d.test.len(), d.ood.len()), (20, 10, 5, 4));
        assert!(d.ood.iter().all(|s| s.spec.effect_kind == EffectKind::Ripple));
        assert!(d.train.aligned.iter().all(|s| s.spec.effect_kind != EffectKind::Ripple && s.spec.misalignment.is_none()));
        assert!(d.train.misaligned.iter().all(|s| s.spec.misalignment.is_some()));
    }

    #[test]
    fn overlapping_effect_sets_are_rejected() {
        let cfg = DataConfig { ood_effects: vec![EffectKind::Shadow], ..DataConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
