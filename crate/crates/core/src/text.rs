//! Structured two-part removal prompts.
//!
//! A prompt names what to erase (the object and its effects) and then what
//! the scene should look like afterwards. Instead of natural language the
//! parts are drawn from a closed vocabulary, so every scene description maps
//! to exactly one token sequence.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{BackgroundKind, EffectKind, ObjectKind, SceneSpec};

pub const DEFAULT_MAX_LEN: usize = 16;
pub const DEFAULT_TEXT_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub u32);

/// Closed vocabulary. Ids are positions in this table.
pub const VOCAB: [&str; 13] = [
    "PAD",
    "SEG_OBJECT",
    "SEG_EFFECT",
    "SEG_SCENE",
    "OBJ_DISK",
    "OBJ_SQUARE",
    "EFF_SHADOW",
    "EFF_LIGHT_HALO",
    "EFF_REFLECTION",
    "EFF_RIPPLE",
    "BG_FLAT",
    "BG_GRADIENT",
    "BG_STRIPES",
];

pub const PAD: TokenId = TokenId(0);
pub const SEG_OBJECT: TokenId = TokenId(1);
pub const SEG_EFFECT: TokenId = TokenId(2);
pub const SEG_SCENE: TokenId = TokenId(3);

pub fn vocab_size() -> usize {
    VOCAB.len()
}

pub fn token(name: &str) -> Result<TokenId> {
    VOCAB
        .iter()
        .position(|&n| n == name)
        .map(|i| TokenId(i as u32))
        .ok_or_else(|| Error::UnknownToken(name.to_string()))
}

pub fn token_name(id: TokenId) -> Result<&'static str> {
    VOCAB
        .get(id.0 as usize)
        .copied()
        .ok_or(Error::TokenOutOfRange { id: id.0 as usize, vocab: VOCAB.len() })
}

fn object_token(kind: ObjectKind) -> TokenId {
    match kind {
        ObjectKind::Disk => TokenId(4),
        ObjectKind::Square => TokenId(5),
    }
}

fn effect_token(kind: EffectKind) -> Option<TokenId> {
    match kind {
        EffectKind::Shadow => Some(TokenId(6)),
        EffectKind::LightHalo => Some(TokenId(7)),
        EffectKind::Reflection => Some(TokenId(8)),
        EffectKind::Ripple => Some(TokenId(9)),
        EffectKind::None => None,
    }
}

fn background_token(kind: BackgroundKind) -> TokenId {
    match kind {
        BackgroundKind::Flat => TokenId(10),
        BackgroundKind::Gradient => TokenId(11),
        BackgroundKind::Stripes => TokenId(12),
    }
}

/// Writes `vocab.json` (name → id).
pub fn write_vocab(path: &Path) -> Result<()> {
    let map: BTreeMap<&str, u32> = VOCAB.iter().enumerate().map(|(i, &n)| (n, i as u32)).collect();
    std::fs::write(path, serde_json::to_vec_pretty(&map)?)?;
    Ok(())
}

/// Reads `vocab.json` and checks it agrees with the built-in table.
pub fn read_vocab(path: &Path) -> Result<BTreeMap<String, u32>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let map: BTreeMap<String, u32> = serde_json::from_slice(&std::fs::read(path)?)
        .map_err(|e| Error::CorruptManifest { path: path.to_path_buf(), reason: e.to_string() })?;
    for (name, &id) in &map {
        if token(name)? != TokenId(id) {
            return Err(Error::CorruptManifest {
                path: path.to_path_buf(),
                reason: format!("`{name}` maps to {id}, expected {}", token(name)?.0),
            });
        }
    }
    Ok(map)
}

/// Erasure targets (object + effects) followed by the post-removal scene.
/// `None` segments mean the empty text condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BipartiteText {
    pub object_tokens: Vec<u32>,
    pub effect_tokens: Vec<u32>,
    pub scene_tokens: Vec<u32>,
    /// The empty text condition: encodes to all padding.
    #[serde(default)]
    pub empty: bool,
}

impl BipartiteText {
    pub fn empty() -> Self {
        Self { object_tokens: vec![], effect_tokens: vec![], scene_tokens: vec![], empty: true }
    }

    /// Padded id sequence `[SEG_OBJECT obj.. SEG_EFFECT eff.. SEG_SCENE scene.. PAD..]`.
    pub fn encode(&self, max_len: usize) -> Result<Vec<u32>> {
        let mut ids = Vec::with_capacity(max_len);
        if !self.empty {
            ids.push(SEG_OBJECT.0);
            ids.extend(&self.object_tokens);
            ids.push(SEG_EFFECT.0);
            ids.extend(&self.effect_tokens);
            ids.push(SEG_SCENE.0);
            ids.extend(&self.scene_tokens);
        }
        if ids.len() > max_len {
            return Err(Error::InvalidConfig(format!("text of {} tokens exceeds max length {max_len}", ids.len())));
        }
        ids.resize(max_len, PAD.0);
        Ok(ids)
    }

    /// Inverse of [`encode`](Self::encode).
    pub fn decode(ids: &[u32]) -> Result<Self> {
        for &id in ids {
            if id as usize >= VOCAB.len() {
                return Err(Error::TokenOutOfRange { id: id as usize, vocab: VOCAB.len() });
            }
        }
        let body: Vec<u32> = ids.iter().copied().take_while(|&id| id != PAD.0).collect();
        if body.is_empty() {
            return Ok(Self::empty());
        }
        let find = |marker: TokenId| {
            body.iter()
                .position(|&id| id == marker.0)
                .ok_or_else(|| Error::InvalidConfig(format!("token sequence lacks marker {}", VOCAB[marker.0 as usize])))
        };
        let (o, e, s) = (find(SEG_OBJECT)?, find(SEG_EFFECT)?, find(SEG_SCENE)?);
        if !(o == 0 && o < e && e < s) {
            return Err(Error::InvalidConfig("segment markers out of order".into()));
        }
        Ok(Self {
            object_tokens: body[o + 1..e].to_vec(),
            effect_tokens: body[e + 1..s].to_vec(),
            scene_tokens: body[s + 1..].to_vec(),
            empty: false,
        })
    }
}

pub fn compose_text(spec: &SceneSpec) -> BipartiteText {
    BipartiteText {
        object_tokens: vec![object_token(spec.object_kind).0],
        effect_tokens: effect_token(spec.effect_kind).map(|t| t.0).into_iter().collect(),
        scene_tokens: vec![background_token(spec.background_kind).0],
        empty: false,
    }
}

/// `[L_max, D_txt]` text latent.
pub type TextEmbedding = Array2<f32>;

/// Looks up each id in `table`; padding rows are zero whatever the table says.
pub fn embed_text(ids: &[u32], table: &Array2<f32>) -> Result<TextEmbedding> {
    let (vocab, dim) = table.dim();
    let mut out = TextEmbedding::zeros((ids.len(), dim));
    for (row, &id) in ids.iter().enumerate() {
        if id as usize >= vocab {
            return Err(Error::TokenOutOfRange { id: id as usize, vocab });
        }
        if id != PAD.0 {
            out.row_mut(row).assign(&table.row(id as usize));
        }
    }
    Ok(out)
}

/// Frozen random embedding table standing in for a pretrained text encoder.
pub fn random_text_table(dim: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = Array2::from_shape_fn((VOCAB.len(), dim), |_| {
        let z: f32 = StandardNormal.sample(&mut rng);
        z
    });
    table.row_mut(PAD.0 as usize).fill(0.0);
    table
}
