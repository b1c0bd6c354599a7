//! Evaluation: PSNR, SSIM, background-crop diagnostics, effect-region error
//! and the guidance-scale sweep.
//!
//! Pixels live in [0, 1]; MAE values are in the same units (multiply by 255
//! to compare with 8-bit figures).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{s, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::denoiser::ConditionBundle;
use crate::error::{Error, Result};
use crate::guidance::GuidanceScales;
use crate::sampler::{gaussian_like, run_sampler, ExpertPair, SamplerKind, Schedule};
use crate::trainer::full_bundle;
use crate::world::{EffectMap, MaskClip, SampleRecord, VideoClip};

/// Reported when two clips are identical (or the region error is zero).
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Standard guidance grid, used for both scales.
pub const SWEEP_SCALES: [f32; 4] = [1.0, 1.5, 2.0, 3.0];

fn same_shape(a: &VideoClip, b: &VideoClip) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn mse(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.len().max(1) as f64;
    Ok(a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / n)
}

pub fn mae(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.len().max(1) as f64;
    Ok(a.iter().zip(b).map(|(x, y)| ((x - y) as f64).abs()).sum::<f64>() / n)
}

/// `10·log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn check_region(a: &VideoClip, region: &MaskClip) -> Result<()> {
    let (t, h, w, _) = a.dim();
    if region.dim() != (t, h, w) {
        return Err(Error::ShapeMismatch(format!("video {:?} vs region {:?}", a.dim(), region.dim())));
    }
    Ok(())
}

/// Sums `f(a, b)` over every channel of the pixels where `region > 0.5`.
fn region_mean(a: &VideoClip, b: &VideoClip, region: &MaskClip, f: impl Fn(f64) -> f64) -> Result<Option<f64>> {
    same_shape(a, b)?;
    check_region(a, region)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&r, (pa, pb)) in region.iter().zip(a.lanes(Axis(3)).into_iter().zip(b.lanes(Axis(3)))) {
        if r > 0.5 {
            for (x, y) in pa.iter().zip(pb.iter()) {
                sum += f((x - y) as f64);
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// PSNR over the pixels where `region > 0.5`; `None` for an empty region.
pub fn region_psnr(a: &VideoClip, b: &VideoClip, region: &MaskClip) -> Result<Option<f64>> {
    Ok(region_mean(a, b, region, |d| d * d)?.map(psnr_from_mse))
}

pub fn region_mae(a: &VideoClip, b: &VideoClip, region: &MaskClip) -> Result<Option<f64>> {
    region_mean(a, b, region, f64::abs)
}

fn ssim_plane(a: ArrayView2<f32>, b: ArrayView2<f32>) -> f64 {
    let (h, w) = a.dim();
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for y in 0..=h - SSIM_WINDOW {
        for x in 0..=w - SSIM_WINDOW {
            let wa = a.slice(s![y..y + SSIM_WINDOW, x..x + SSIM_WINDOW]);
            let wb = b.slice(s![y..y + SSIM_WINDOW, x..x + SSIM_WINDOW]);
            let ma = wa.iter().map(|&v| v as f64).sum::<f64>() / n;
            let mb = wb.iter().map(|&v| v as f64).sum::<f64>() / n;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for (&pa, &pb) in wa.iter().zip(wb.iter()) {
                let (da, db) = (pa as f64 - ma, pb as f64 - mb);
                va += da * da;
                vb += db * db;
                cov += da * db;
            }
            va /= n;
            vb /= n;
            cov /= n;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            windows += 1;
        }
    }
    total / windows as f64
}

/// Mean windowed SSIM over every frame and channel.
pub fn ssim(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    same_shape(a, b)?;
    let (t, h, w, c) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!("{h}x{w} frames are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let mut total = 0.0;
    for f in 0..t {
        for ch in 0..c {
            total += ssim_plane(a.slice(s![f, .., .., ch]), b.slice(s![f, .., .., ch]));
        }
    }
    Ok(total / (t * c) as f64)
}

/// Top-left crop covering `ratio` of the frame with the frame's aspect ratio.
pub fn crop_dims(height: usize, width: usize, ratio: f64) -> Result<(usize, usize)> {
    let side = ratio.max(0.0).sqrt();
    let (ch, cw) = ((height as f64 * side).round() as usize, (width as f64 * side).round() as usize);
    if ch == 0 || cw == 0 || ratio > 1.0 {
        return Err(Error::CropTooSmall { ratio, height, width });
    }
    Ok((ch, cw))
}

pub fn crop(v: &VideoClip, ratio: f64) -> Result<VideoClip> {
    let (_, h, w, _) = v.dim();
    let (ch, cw) = crop_dims(h, w, ratio)?;
    Ok(v.slice(s![.., ..ch, ..cw, ..]).to_owned())
}

pub fn crop_mae(a: &VideoClip, b: &VideoClip, ratio: f64) -> Result<f64> {
    same_shape(a, b)?;
    mae(&crop(a, ratio)?, &crop(b, ratio)?)
}

/// Background-crop diagnostics of one output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropMetrics {
    pub ratio: f64,
    /// Output vs reference.
    pub mae_ref: f64,
    /// Reference vs ground truth: a property of the training pair itself.
    pub mae_ref_gt: f64,
    pub mae_gt: f64,
    pub psnr_ref_bg: f64,
    pub psnr_gt_bg: f64,
}

pub fn crop_background_metrics(reference: &VideoClip, out: &VideoClip, gt: &VideoClip, ratio: f64) -> Result<CropMetrics> {
    same_shape(reference, out)?;
    same_shape(out, gt)?;
    let (r, o, g) = (crop(reference, ratio)?, crop(out, ratio)?, crop(gt, ratio)?);
    Ok(CropMetrics {
        ratio,
        mae_ref: mae(&o, &r)?,
        mae_ref_gt: mae(&r, &g)?,
        mae_gt: mae(&o, &g)?,
        psnr_ref_bg: psnr(&o, &r)?,
        psnr_gt_bg: psnr(&o, &g)?,
    })
}

/// Pixels carrying an effect but not covered by the mask.
pub fn effect_region(effect_map: &EffectMap, mask: &MaskClip) -> Result<MaskClip> {
    if effect_map.dim() != mask.dim() {
        return Err(Error::ShapeMismatch(format!("effect map {:?} vs mask {:?}", effect_map.dim(), mask.dim())));
    }
    let mut region = effect_map.mapv(|e| if e > 0.0 { 1.0 } else { 0.0 });
    ndarray::Zip::from(&mut region).and(mask).for_each(|r, &m| {
        if m > 0.5 {
            *r = 0.0
        }
    });
    Ok(region)
}

/// Mask plus effect support: everything a removal has to change.
pub fn edit_region(effect_map: &EffectMap, mask: &MaskClip) -> Result<MaskClip> {
    let mut region = effect_region(effect_map, mask)?;
    ndarray::Zip::from(&mut region).and(mask).for_each(|r, &m| {
        if m > 0.5 {
            *r = 1.0
        }
    });
    Ok(region)
}

/// MAE over the effect-only pixels; `None` when there are none (e.g. no effect).
pub fn effect_region_error(out: &VideoClip, gt: &VideoClip, effect_map: &EffectMap, mask: &MaskClip) -> Result<Option<f64>> {
    region_mae(out, gt, &effect_region(effect_map, mask)?)
}

/// Initial noise for the `index`-th evaluation sample.
pub fn eval_noise(sample: &SampleRecord, seed: u64, index: usize) -> VideoClip {
    gaussian_like(sample.gt_video.dim(), seed.wrapping_mul(0x9e37_79b9).wrapping_add(index as u64))
}

fn start_bundle(pair: &ExpertPair, sample: &SampleRecord, seed: u64, index: usize) -> Result<ConditionBundle> {
    full_bundle(&pair.locator, sample, eval_noise(sample, seed, index), 1.0)
}

/// Runs `kind` on every sample, each from its own seeded noise.
pub fn generate_outputs(pair: &ExpertPair, samples: &[SampleRecord], kind: SamplerKind, schedule: &Schedule, seed: u64) -> Result<Vec<VideoClip>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(run_sampler(pair, &start_bundle(pair, s, seed, i)?, kind, schedule)?.0))
        .collect()
}

/// Scores of one generated output against its sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub seed: u64,
    pub effect_kind: crate::world::EffectKind,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR restricted to mask ∪ effect.
    pub edit_psnr: Option<f64>,
    /// Copy-the-reference baseline on the same region.
    pub edit_psnr_copy: Option<f64>,
    pub effect_error: Option<f64>,
    pub crop_16: CropMetrics,
    pub crop_32: CropMetrics,
}

pub fn score_sample(sample: &SampleRecord, out: &VideoClip) -> Result<SampleScores> {
    let edit = edit_region(&sample.effect_map, &sample.mask)?;
    Ok(SampleScores {
        seed: sample.spec.seed,
        effect_kind: sample.spec.effect_kind,
        psnr: psnr(out, &sample.gt_video)?,
        ssim: ssim(out, &sample.gt_video)?,
        edit_psnr: region_psnr(out, &sample.gt_video, &edit)?,
        edit_psnr_copy: region_psnr(&sample.ref_video, &sample.gt_video, &edit)?,
        effect_error: effect_region_error(out, &sample.gt_video, &sample.effect_map, &sample.mask)?,
        crop_16: crop_background_metrics(&sample.ref_video, out, &sample.gt_video, 1.0 / 16.0)?,
        crop_32: crop_background_metrics(&sample.ref_video, out, &sample.gt_video, 1.0 / 32.0)?,
    })
}

/// Mean of the present values, `None` if there are none.
pub fn mean_present(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    mean_present(values.into_iter().map(Some)).unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: f64,
    pub ssim: f64,
    pub edit_psnr: Option<f64>,
    pub edit_psnr_copy: Option<f64>,
    pub effect_error: Option<f64>,
    pub crop_16_mae_ref: f64,
    pub crop_16_mae_ref_gt: f64,
    pub crop_16_psnr_ref_bg: f64,
    pub crop_16_psnr_gt_bg: f64,
    pub crop_32_mae_ref: f64,
    pub crop_32_mae_ref_gt: f64,
    pub crop_32_psnr_ref_bg: f64,
    pub crop_32_psnr_gt_bg: f64,
}

impl Aggregate {
    pub fn of(scores: &[SampleScores]) -> Aggregate {
        let m = |f: fn(&SampleScores) -> f64| mean(scores.iter().map(f));
        Aggregate {
            psnr: m(|s| s.psnr),
            ssim: m(|s| s.ssim),
            edit_psnr: mean_present(scores.iter().map(|s| s.edit_psnr)),
            edit_psnr_copy: mean_present(scores.iter().map(|s| s.edit_psnr_copy)),
            effect_error: mean_present(scores.iter().map(|s| s.effect_error)),
            crop_16_mae_ref: m(|s| s.crop_16.mae_ref),
            crop_16_mae_ref_gt: m(|s| s.crop_16.mae_ref_gt),
            crop_16_psnr_ref_bg: m(|s| s.crop_16.psnr_ref_bg),
            crop_16_psnr_gt_bg: m(|s| s.crop_16.psnr_gt_bg),
            crop_32_mae_ref: m(|s| s.crop_32.mae_ref),
            crop_32_mae_ref_gt: m(|s| s.crop_32.mae_ref_gt),
            crop_32_psnr_ref_bg: m(|s| s.crop_32.psnr_ref_bg),
            crop_32_psnr_gt_bg: m(|s| s.crop_32.psnr_gt_bg),
        }
    }
}

/// One sampler evaluated on one sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sampler: SamplerKind,
    pub steps: usize,
    pub seed: u64,
    pub samples: Vec<SampleScores>,
    pub aggregate: Aggregate,
}

pub fn evaluate(pair: &ExpertPair, samples: &[SampleRecord], kind: SamplerKind, schedule: &Schedule, seed: u64) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("evaluation set is empty".into()));
    }
    let outputs = generate_outputs(pair, samples, kind, schedule, seed)?;
    let scores = samples.iter().zip(&outputs).map(|(s, o)| score_sample(s, o)).collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { sampler: kind, steps: schedule.steps(), seed, aggregate: Aggregate::of(&scores), samples: scores })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub w_txt: f32,
    pub w_m: f32,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
    /// Grid mean ("average guidance").
    pub mean: f64,
    pub best: SweepCell,
}

impl SweepTable {
    pub fn from_cells(cells: Vec<SweepCell>) -> Result<SweepTable> {
        let best = *cells
            .iter()
            .max_by(|a, b| a.psnr.total_cmp(&b.psnr))
            .ok_or_else(|| Error::InvalidConfig("empty sweep grid".into()))?;
        let mean = mean(cells.iter().map(|c| c.psnr));
        Ok(SweepTable { cells, mean, best })
    }

    pub fn max(&self) -> f64 {
        self.best.psnr
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("w_txt,w_m,psnr\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{:.6}", c.w_txt, c.w_m, c.psnr);
        }
        out
    }
}

/// Mean test PSNR of multi-condition guidance at every `(w_txt, w_m)` pair.
pub fn sweep_guidance(pair: &ExpertPair, samples: &[SampleRecord], w_txt: &[f32], w_m: &[f32], schedule: &Schedule, seed: u64) -> Result<SweepTable> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("sweep set is empty".into()));
    }
    let mut cells = Vec::with_capacity(w_txt.len() * w_m.len());
    for &wt in w_txt {
        for &wm in w_m {
            let scales = GuidanceScales::new(wm, wt)?;
            let outputs = generate_outputs(pair, samples, SamplerKind::McCfg { scales }, schedule, seed)?;
            let psnr = mean(samples.iter().zip(&outputs).map(|(s, o)| psnr(o, &s.gt_video)).collect::<Result<Vec<_>>>()?);
            log::debug!("sweep w_txt={wt} w_m={wm}: {psnr:.3} dB");
            cells.push(SweepCell { w_txt: wt, w_m: wm, psnr });
        }
    }
    SweepTable::from_cells(cells)
}

/// One expert judgement: whether `method`'s output for `sample` was selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vote {
    pub sample: String,
    pub method: String,
    pub selected: bool,
}

/// Per-method share of selected outputs.
pub fn preference_rates(votes: &[Vote]) -> BTreeMap<String, f64> {
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for v in votes {
        let e = tally.entry(v.method.clone()).or_default();
        e.0 += v.selected as usize;
        e.1 += 1;
    }
    tally.into_iter().map(|(m, (sel, n))| (m, sel as f64 / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_scene, EffectKind, MisalignSpec, SceneSpec, WorldConfig};
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip(seed: u64, dims: (usize, usize, usize, usize)) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(dims, |_| rng.random::<f32>())
    }

    #[test]
    fn psnr_closed_forms() {
        let a = VideoClip::from_elem((2, 8, 8, 3), 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((psnr(&a, &(&a + 0.1)).unwrap() - 20.0).abs() < 1e-4);
        assert!((psnr(&a, &(&a + 0.01)).unwrap() - 40.0).abs() < 1e-3);
        assert!(psnr(&a, &VideoClip::zeros((2, 8, 8, 1))).is_err());
    }

    #[test]
    fn psnr_falls_with_noise_amplitude() {
        let a = random_clip(1, (2, 8, 8, 3));
        let noise = random_clip(2, (2, 8, 8, 3)).mapv(|v| v - 0.5);
        let values: Vec<f64> = [0.01f32, 0.02, 0.05, 0.1, 0.2].iter().map(|&amp| psnr(&a, &(&a + &noise.mapv(|v| v * amp))).unwrap()).collect();
        assert!(values.windows(2).all(|w| w[0] > w[1]), "{values:?}");
    }

    #[test]
    fn ssim_closed_forms() {
        let a = random_clip(3, (2, 8, 9, 3));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let (m1, m2) = (0.3f64, 0.7f64);
        let c1 = VideoClip::from_elem((1, 8, 8, 1), m1 as f32);
        let c2 = VideoClip::from_elem((1, 8, 8, 1), m2 as f32);
        let (m1, m2) = (m1 as f32 as f64, m2 as f32 as f64);
        let expected = (2.0 * m1 * m2 + SSIM_C1) / (m1 * m1 + m2 * m2 + SSIM_C1);
        assert!((ssim(&c1, &c2).unwrap() - expected).abs() < 1e-9);
        assert!(ssim(&VideoClip::zeros((1, 6, 6, 1)), &VideoClip::zeros((1, 6, 6, 1))).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn ssim_symmetric_and_bounded(sa in any::<u64>(), sb in any::<u64>()) {
            let a = random_clip(sa, (1, 8, 8, 2));
            let b = random_clip(sb, (1, 8, 8, 2));
            let ab = ssim(&a, &b).unwrap();
            prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn crop_metrics_ignore_pixels_outside_crop(seed in any::<u64>(), y in 4usize..16, x in 0usize..16, v in 0.0f32..1.0) {
            let r = random_clip(seed, (1, 16, 16, 3));
            let g = random_clip(seed ^ 1, (1, 16, 16, 3));
            let o = random_clip(seed ^ 2, (1, 16, 16, 3));
            let before = crop_background_metrics(&r, &o, &g, 1.0 / 16.0).unwrap();
            let mut o2 = o.clone();
            o2[[0, y, x, 1]] = v;
            let after = crop_background_metrics(&r, &o2, &g, 1.0 / 16.0).unwrap();
            prop_assert_eq!(before, after);
        }
    }

    #[test]
    fn crop_geometry() {
        assert_eq!(crop_dims(16, 16, 1.0 / 16.0).unwrap(), (4, 4));
        assert_eq!(crop_dims(16, 16, 1.0 / 32.0).unwrap(), (3, 3));
        assert!(matches!(crop_dims(2, 2, 1.0 / 32.0), Err(Error::CropTooSmall { .. })));
    }

    #[test]
    fn crop_mae_closed_forms() {
        let r = random_clip(4, (2, 16, 16, 3)).mapv(|v| v * 0.5);
        let m = crop_background_metrics(&r, &r, &(&r + 0.2), 1.0 / 16.0).unwrap();
        assert_eq!(m.mae_ref, 0.0);
        assert_eq!(m.psnr_ref_bg, PSNR_CAP);
        assert!((m.mae_ref_gt - 0.2).abs() < 1e-6);
        assert!((crop_mae(&r, &(&r + 0.05), 1.0 / 32.0).unwrap() - 0.05).abs() < 1e-6);
    }

    #[test]
    fn aligned_crops_beat_misaligned_crops() {
        let world = WorldConfig::default();
        let mis = MisalignSpec { translation_jitter: 1, brightness_jitter: 0.05 };
        let (mut aligned, mut misaligned) = (0.0, 0.0);
        for seed in 0..20 {
            let s = generate_scene(&SceneSpec::random(seed, &world, &EffectKind::ALL)).unwrap();
            aligned += crop_mae(&s.ref_video, &s.gt_video, 1.0 / 16.0).unwrap();
            let m = crate::world::make_misaligned(&s, mis);
            misaligned += crop_mae(&m.ref_video, &m.gt_video, 1.0 / 16.0).unwrap();
        }
        assert!(misaligned >= 2.0 * aligned && misaligned > 0.0, "{aligned} vs {misaligned}");
    }

    #[test]
    fn effect_region_error_cases() {
        let world = WorldConfig::default();
        let mut spec = SceneSpec::random(11, &world, &[EffectKind::LightHalo]);
        let s = generate_scene(&spec).unwrap();
        assert_eq!(effect_region_error(&s.gt_video, &s.gt_video, &s.effect_map, &s.mask).unwrap(), Some(0.0));
        let copy = effect_region_error(&s.ref_video, &s.gt_video, &s.effect_map, &s.mask).unwrap().unwrap();
        let region = effect_region(&s.effect_map, &s.mask).unwrap();
        let mean_effect = s.effect_map.iter().zip(&region).filter(|(_, &r)| r > 0.5).map(|(&e, _)| e as f64).sum::<f64>() / region.sum() as f64;
        assert!(copy > 0.0 && (copy - mean_effect).abs() < 1e-5, "{copy} vs {mean_effect}");
        spec.effect_kind = EffectKind::None;
        let s = generate_scene(&spec).unwrap();
        assert_eq!(effect_region_error(&s.ref_video, &s.gt_video, &s.effect_map, &s.mask).unwrap(), None);
    }

    #[test]
    fn sweep_table_summary() {
        let cells: Vec<SweepCell> = (0..16).map(|i| SweepCell { w_txt: SWEEP_SCALES[i / 4], w_m: SWEEP_SCALES[i % 4], psnr: 20.0 + i as f64 * 0.1 }).collect();
        let t = SweepTable::from_cells(cells).unwrap();
        assert!(t.mean <= t.max());
        assert_eq!(t.best.psnr, 21.5);
        let csv = t.to_csv();
        assert!(csv.starts_with("w_txt,w_m,psnr\n"));
        assert_eq!(csv.lines().count(), 17);
        assert!(SweepTable::from_cells(vec![]).is_err());
    }

    #[test]
    fn preference_rate_is_selection_mean() {
        let v = |m: &str, s: bool| Vote { sample: "a".into(), method: m.into(), selected: s };
        let rates = preference_rates(&[v("x", true), v("x", false), v("x", true), v("y", false)]);
        assert!((rates["x"] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rates["y"], 0.0);
    }
}
