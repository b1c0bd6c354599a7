//! Procedural "object + physical effect" video world.
//!
//! Every scene is rendered twice from the same static background: once with
//! the moving object and its effect composited (the reference video), once
//! with both removed (the ground truth). The effect intensity map is kept as
//! evaluation metadata and is never fed to a model.

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{compose_text, BipartiteText};

/// `[T, H, W, C]` grid with values in `[0, 1]`. Doubles as the model latent.
pub type VideoClip = Array4<f32>;
/// `[T, H, W]` grid, 1.0 on the removal target.
pub type MaskClip = Array3<f32>;
/// `[T, H, W]` per-pixel effect intensity in `[0, 1]`.
pub type EffectMap = Array3<f32>;

pub const CHANNELS: usize = 3;

pub const SHADOW_OFFSET: (f32, f32) = (2.0, 2.0);
pub const SHADOW_DARKENING: f32 = 0.5;
pub const HALO_AMPLITUDE: f32 = 0.35;
/// Halo extent relative to the object radius.
pub const HALO_EXTENT: f32 = 2.2;
pub const REFLECTION_ATTENUATION: f32 = 0.5;
/// Water line row as a fraction of frame height.
pub const WATER_LINE: f32 = 0.625;
pub const RIPPLE_AMPLITUDE: f32 = 1.5;
pub const RIPPLE_SHIMMER: f32 = 0.12;
pub const RIPPLE_EXTENT: f32 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Disk,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    Shadow,
    LightHalo,
    Reflection,
    Ripple,
    None,
}

impl EffectKind {
    pub const ALL: [EffectKind; 5] = [
        EffectKind::Shadow,
        EffectKind::LightHalo,
        EffectKind::Reflection,
        EffectKind::Ripple,
        EffectKind::None,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Flat,
    Gradient,
    Stripes,
}

/// Linear trajectory of the object centre, in cells (row, column).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub start: [f32; 2],
    pub velocity: [f32; 2],
}

impl Motion {
    pub fn center(&self, frame: usize) -> (f32, f32) {
        let f = frame as f32;
        (
            self.start[0] + f * self.velocity[0],
            self.start[1] + f * self.velocity[1],
        )
    }
}

/// Background-only imperfection applied to the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisalignSpec {
    /// Per-frame integer shift drawn from `±1..=±k` on each axis.
    pub translation_jitter: u32,
    /// Per-frame brightness offset of magnitude `b` with random sign.
    pub brightness_jitter: f32,
}

impl MisalignSpec {
    pub fn is_identity(&self) -> bool {
        self.translation_jitter == 0 && self.brightness_jitter == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub object_kind: ObjectKind,
    /// Disk radius or square half-side, in cells.
    pub object_radius: f32,
    pub effect_kind: EffectKind,
    pub motion: Motion,
    pub background_kind: BackgroundKind,
    #[serde(default)]
    pub misalignment: Option<MisalignSpec>,
    /// Mask grows by this many cells (Chebyshev) beyond the object support.
    #[serde(default)]
    pub mask_dilation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub ref_video: VideoClip,
    pub gt_video: VideoClip,
    pub mask: MaskClip,
    pub effect_map: EffectMap,
    pub text: BipartiteText,
    pub spec: SceneSpec,
}

/// Knobs for drawing random scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_radius: f32,
    pub max_radius: f32,
    pub max_speed: f32,
    pub mask_dilation: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 16,
            width: 16,
            min_radius: 2.0,
            max_radius: 3.0,
            max_speed: 0.6,
            mask_dilation: 0,
        }
    }
}

impl SceneSpec {
    /// Draws a valid scene whose effect kind is one of `effects`.
    pub fn random(seed: u64, world: &WorldConfig, effects: &[EffectKind]) -> SceneSpec {
        assert!(!effects.is_empty(), "at least one effect kind");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ce7e);
        let object_kind = if rng.random_bool(0.5) { ObjectKind::Disk } else { ObjectKind::Square };
        let effect_kind = effects[rng.random_range(0..effects.len())];
        let background_kind = match rng.random_range(0..3) {
            0 => BackgroundKind::Flat,
            1 => BackgroundKind::Gradient,
            _ => BackgroundKind::Stripes,
        };
        let radius = rng.random_range(world.min_radius..=world.max_radius);
        let span = (world.frames - 1) as f32;
        let (h, w) = (world.height as f32, world.width as f32);
        // Reflections need the object above the water line.
        let y_max_bound = if effect_kind == EffectKind::Reflection {
            (h * WATER_LINE).floor()
        } else {
            h
        };
        let mut axis = |lo: f32, hi: f32| {
            let v = rng.random_range(-world.max_speed..=world.max_speed);
            let travel = v * span;
            let start_lo = lo + radius + (-travel).max(0.0);
            let start_hi = hi - radius - travel.max(0.0);
            if start_hi <= start_lo {
                ((lo + hi) * 0.5, 0.0)
            } else {
                (rng.random_range(start_lo..start_hi), v)
            }
        };
        let (y0, vy) = axis(0.0, y_max_bound);
        let (x0, vx) = axis(0.0, w);
        SceneSpec {
            seed,
            frames: world.frames,
            height: world.height,
            width: world.width,
            object_kind,
            object_radius: radius,
            effect_kind,
            motion: Motion { start: [y0, x0], velocity: [vy, vx] },
            background_kind,
            misalignment: None,
            mask_dilation: world.mask_dilation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::InvalidScene(format!("need at least 2 frames, got {}", self.frames)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidScene("empty frame".into()));
        }
        if self.object_radius.is_nan() || self.object_radius <= 0.0 {
            return Err(Error::InvalidScene(format!("object radius {} must be positive", self.object_radius)));
        }
        let r = self.object_radius;
        for f in 0..self.frames {
            let (cy, cx) = self.motion.center(f);
            let inside = cy - r >= -1e-4
                && cy + r <= self.height as f32 + 1e-4
                && cx - r >= -1e-4
                && cx + r <= self.width as f32 + 1e-4;
            if !inside {
                return Err(Error::InvalidScene(format!(
                    "trajectory leaves the frame at frame {f}: centre ({cy:.2}, {cx:.2}), radius {r:.2}"
                )));
            }
        }
        Ok(())
    }
}

struct Palette {
    object: [f32; 3],
    bg_a: [f32; 3],
    bg_b: [f32; 3],
    gradient_dir: (f32, f32),
    stripe_period: f32,
    stripe_phase: f32,
    stripes_vertical: bool,
    ripple_phase: f32,
}

impl Palette {
    fn draw(seed: u64) -> Palette {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut color = |lo: f32, hi: f32| -> [f32; 3] {
            [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
        };
        let bg_a = color(0.15, 0.65);
        let mut bg_b = color(0.15, 0.65);
        let mut object = color(0.0, 1.0);
        let mean_bg: [f32; 3] = std::array::from_fn(|c| 0.5 * (bg_a[c] + bg_b[c]));
        let mut tries = 0;
        while dist(&object, &mean_bg) < 0.45 && tries < 64 {
            object = color(0.0, 1.0);
            tries += 1;
        }
        if dist(&bg_a, &bg_b) < 0.2 {
            bg_b = std::array::from_fn(|c| if bg_a[c] < 0.4 { bg_a[c] + 0.25 } else { bg_a[c] - 0.25 });
        }
        let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        Palette {
            object,
            bg_a,
            bg_b,
            gradient_dir: (angle.sin(), angle.cos()),
            stripe_period: rng.random_range(4.0..8.0),
            stripe_phase: rng.random_range(0.0..std::f32::consts::TAU),
            stripes_vertical: rng.random_bool(0.5),
            ripple_phase: rng.random_range(0.0..std::f32::consts::TAU),
        }
    }
}

fn dist(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

fn background(spec: &SceneSpec, pal: &Palette, y: f32, x: f32) -> [f32; 3] {
    let (h, w) = (spec.height as f32, spec.width as f32);
    let s = match spec.background_kind {
        BackgroundKind::Flat => 0.0,
        BackgroundKind::Gradient => {
            let (dy, dx) = pal.gradient_dir;
            let proj = ((y / h - 0.5) * dy + (x / w - 0.5) * dx) / std::f32::consts::SQRT_2;
            (proj + 0.5).clamp(0.0, 1.0)
        }
        BackgroundKind::Stripes => {
            let coord = if pal.stripes_vertical { x } else { y };
            0.5 + 0.5 * (std::f32::consts::TAU * coord / pal.stripe_period + pal.stripe_phase).sin()
        }
    };
    std::array::from_fn(|c| pal.bg_a[c] + (pal.bg_b[c] - pal.bg_a[c]) * s)
}

fn covers(kind: ObjectKind, radius: f32, dy: f32, dx: f32) -> bool {
    match kind {
        ObjectKind::Disk => dy * dy + dx * dx <= radius * radius,
        ObjectKind::Square => dy.abs() <= radius && dx.abs() <= radius,
    }
}

/// Renders a scene. Pure function of `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<SampleRecord> {
    spec.validate()?;
    let pal = Palette::draw(spec.seed);
    let (t_len, h, w) = (spec.frames, spec.height, spec.width);
    let mut ref_video = VideoClip::zeros((t_len, h, w, CHANNELS));
    let mut gt_video = VideoClip::zeros((t_len, h, w, CHANNELS));
    let mut object_support = MaskClip::zeros((t_len, h, w));
    let mut effect_map = EffectMap::zeros((t_len, h, w));
    let r = spec.object_radius;
    let water_row = (h as f32 * WATER_LINE).floor();

    for f in 0..t_len {
        let (cy, cx) = spec.motion.center(f);
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
                let bg = background(spec, &pal, py, px);
                let with_effect = match spec.effect_kind {
                    EffectKind::None => bg,
                    EffectKind::Shadow => {
                        let inside = covers(spec.object_kind, r, py - cy - SHADOW_OFFSET.0, px - cx - SHADOW_OFFSET.1);
                        if inside {
                            bg.map(|v| v * (1.0 - SHADOW_DARKENING))
                        } else {
                            bg
                        }
                    }
                    EffectKind::LightHalo => {
                        let d2 = (py - cy).powi(2) + (px - cx).powi(2);
                        if d2.sqrt() < HALO_EXTENT * r {
                            let glow = HALO_AMPLITUDE * (-d2 / (2.0 * r * r)).exp();
                            bg.map(|v| (v + glow).min(1.0))
                        } else {
                            bg
                        }
                    }
                    EffectKind::Reflection => {
                        let mirrored = 2.0 * water_row - py;
                        if py >= water_row && covers(spec.object_kind, r, mirrored - cy, px - cx) {
                            std::array::from_fn(|c| {
                                (1.0 - REFLECTION_ATTENUATION) * bg[c] + REFLECTION_ATTENUATION * pal.object[c]
                            })
                        } else {
                            bg
                        }
                    }
                    EffectKind::Ripple => {
                        let d = ((py - cy).powi(2) + (px - cx).powi(2)).sqrt();
                        if d < RIPPLE_EXTENT * r {
                            let decay = (-(d - r).max(0.0) / r).exp();
                            let wave = (std::f32::consts::TAU * py / 3.0 + pal.ripple_phase + f as f32).sin();
                            let shifted = background(spec, &pal, py, px + RIPPLE_AMPLITUDE * decay * wave);
                            shifted.map(|v| (v + RIPPLE_SHIMMER * decay * wave).clamp(0.0, 1.0))
                        } else {
                            bg
                        }
                    }
                };
                let on_object = covers(spec.object_kind, r, py - cy, px - cx);
                let shown = if on_object { pal.object } else { with_effect };
                let mut diff = 0.0;
                for c in 0..CHANNELS {
                    ref_video[[f, y, x, c]] = shown[c];
                    gt_video[[f, y, x, c]] = bg[c];
                    diff += (with_effect[c] - bg[c]).abs();
                }
                effect_map[[f, y, x]] = (diff / CHANNELS as f32).clamp(0.0, 1.0);
                if on_object {
                    object_support[[f, y, x]] = 1.0;
                }
            }
        }
    }

    let mask = dilate(&object_support, spec.mask_dilation);
    let base = SampleRecord {
        ref_video,
        gt_video,
        mask,
        effect_map,
        text: compose_text(spec),
        spec: SceneSpec { misalignment: None, ..spec.clone() },
    };
    match spec.misalignment {
        Some(mis) => Ok(make_misaligned(&base, mis)),
        None => Ok(base),
    }
}

fn dilate(mask: &MaskClip, radius: usize) -> MaskClip {
    if radius == 0 {
        return mask.clone();
    }
    let (t_len, h, w) = mask.dim();
    let k = radius as isize;
    MaskClip::from_shape_fn((t_len, h, w), |(f, y, x)| {
        for dy in -k..=k {
            for dx in -k..=k {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && mask[[f, yy as usize, xx as usize]] > 0.5 {
                    return 1.0;
                }
            }
        }
        0.0
    })
}

/// `ref ⊙ (1 − mask)`, mask broadcast over channels.
pub fn make_masked_video(reference: &VideoClip, mask: &MaskClip) -> Result<VideoClip> {
    let (t, h, w, _) = reference.dim();
    if mask.dim() != (t, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "video {:?} vs mask {:?}",
            reference.dim(),
            mask.dim()
        )));
    }
    let keep = mask.mapv(|m| 1.0 - m).insert_axis(Axis(3));
    Ok(reference * &keep)
}

/// Shifts and re-lights the ground-truth background per `mis`. The reference
/// video, mask and effect map are untouched.
pub fn make_misaligned(sample: &SampleRecord, mis: MisalignSpec) -> SampleRecord {
    let mut out = sample.clone();
    out.spec.misalignment = Some(mis);
    if mis.is_identity() {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample.spec.seed ^ 0x0a11_97ed);
    let (t_len, h, w, c_len) = sample.gt_video.dim();
    let k = mis.translation_jitter as i64;
    let nonzero_shift = |rng: &mut ChaCha8Rng| -> i64 {
        if k == 0 {
            0
        } else {
            let mag = rng.random_range(1..=k);
            if rng.random_bool(0.5) { mag } else { -mag }
        }
    };
    for f in 0..t_len {
        let dy = nonzero_shift(&mut rng);
        let dx = nonzero_shift(&mut rng);
        let offset = if rng.random_bool(0.5) { mis.brightness_jitter } else { -mis.brightness_jitter };
        for y in 0..h {
            for x in 0..w {
                let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                for c in 0..c_len {
                    out.gt_video[[f, y, x, c]] = (sample.gt_video[[f, sy, sx, c]] + offset).clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(effect: EffectKind, bg: BackgroundKind) -> SceneSpec {
        SceneSpec {
            seed: 11,
            frames: 8,
            height: 16,
            width: 16,
            object_kind: ObjectKind::Disk,
            object_radius: 2.5,
            effect_kind: effect,
            motion: Motion { start: [5.0, 5.0], velocity: [0.2, 0.5] },
            background_kind: bg,
            misalignment: None,
            mask_dilation: 0,
        }
    }

    #[test]
    fn no_effect_differs_only_inside_mask() {
        let s = generate_scene(&spec(EffectKind::None, BackgroundKind::Stripes)).unwrap();
        assert!(s.effect_map.iter().all(|&e| e == 0.0));
        for ((idx, &m), _) in s.mask.indexed_iter().zip(0..) {
            if m == 0.0 {
                let (f, y, x) = idx;
                for c in 0..CHANNELS {
                    assert_eq!(s.ref_video[[f, y, x, c]], s.gt_video[[f, y, x, c]]);
                }
            }
        }
        assert!(s.mask.sum() > 0.0);
    }

    #[test]
    fn halo_leaks_outside_mask() {
        let s = generate_scene(&spec(EffectKind::LightHalo, BackgroundKind::Flat)).unwrap();
        let mut found = false;
        for ((f, y, x), &m) in s.mask.indexed_iter() {
            let d: f32 = (0..CHANNELS).map(|c| (s.ref_video[[f, y, x, c]] - s.gt_video[[f, y, x, c]]).abs()).sum();
            if m == 0.0 && d > 0.0 && s.effect_map[[f, y, x]] > 0.0 {
                found = true;
            }
        }
        assert!(found);
    }

    #[test]
    fn generation_is_deterministic() {
        let sp = spec(EffectKind::Ripple, BackgroundKind::Gradient);
        assert_eq!(generate_scene(&sp).unwrap(), generate_scene(&sp).unwrap());
    }

    #[test]
    fn trajectory_leaving_frame_is_rejected() {
        let mut sp = spec(EffectKind::None, BackgroundKind::Flat);
        sp.motion.velocity = [0.0, 2.0];
        assert!(matches!(generate_scene(&sp), Err(Error::InvalidScene(_))));
        sp.frames = 1;
        assert!(sp.validate().is_err());
    }

    #[test]
    fn masked_video_edge_cases() {
        let s = generate_scene(&spec(EffectKind::Shadow, BackgroundKind::Gradient)).unwrap();
        let ones = MaskClip::ones(s.mask.dim());
        assert!(make_masked_video(&s.ref_video, &ones).unwrap().iter().all(|&v| v == 0.0));
        let zeros = MaskClip::zeros(s.mask.dim());
        assert_eq!(make_masked_video(&s.ref_video, &zeros).unwrap(), s.ref_video);

        let mut single = zeros.clone();
        single[[3, 7, 9]] = 1.0;
        let out = make_masked_video(&s.ref_video, &single).unwrap();
        for ((f, y, x, c), &v) in out.indexed_iter() {
            let expected = if (f, y, x) == (3, 7, 9) { 0.0 } else { s.ref_video[[f, y, x, c]] };
            assert_eq!(v, expected);
        }
        let bad = MaskClip::zeros((8, 16, 15));
        assert!(matches!(make_masked_video(&s.ref_video, &bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn misalignment_leaves_reference_and_mask() {
        let s = generate_scene(&spec(EffectKind::Shadow, BackgroundKind::Stripes)).unwrap();
        let m = make_misaligned(&s, MisalignSpec { translation_jitter: 2, brightness_jitter: 0.05 });
        assert_eq!(m.ref_video, s.ref_video);
        assert_eq!(m.mask, s.mask);
        assert_eq!(m.effect_map, s.effect_map);
        assert_ne!(m.gt_video, s.gt_video);
        let identity = make_misaligned(&s, MisalignSpec { translation_jitter: 0, brightness_jitter: 0.0 });
        assert_eq!(identity.gt_video, s.gt_video);
    }

    #[test]
    fn mask_dilation_grows_mask() {
        let mut sp = spec(EffectKind::None, BackgroundKind::Flat);
        let tight = generate_scene(&sp).unwrap();
        sp.mask_dilation = 1;
        let loose = generate_scene(&sp).unwrap();
        assert!(loose.mask.sum() > tight.mask.sum());
        assert!(tight.mask.iter().zip(loose.mask.iter()).all(|(&a, &b)| b >= a));
    }

    #[test]
    fn random_specs_are_valid() {
        let world = WorldConfig::default();
        for seed in 0..300 {
            let sp = SceneSpec::random(seed, &world, &EffectKind::ALL);
            sp.validate().unwrap();
        }
    }
}
