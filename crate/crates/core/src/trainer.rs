//! Two-stage training.
//!
//! Stage I trains each expert with random conditional dropout so that the
//! text-only, mask-only and full branches of one network all become usable.
//! Stage II runs all three branches deterministically and trains the fusion
//! layers on the full-branch output.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    collect_grads, is_fusion_param, patchify_target, register, single, three_branch, Branch, ConditionBundle, Denoiser, ModelConfig, Params,
};
use crate::error::{Error, Result};
use crate::sampler::{add_noise, gaussian_like, velocity_target, ExpertPair, ExpertRole};
use crate::tape::Tape;
use crate::text::TextEmbedding;
use crate::world::{make_masked_video, SampleRecord, VideoClip};

/// Share of a batch drawn from the pixel-aligned source; the rest comes from
/// the misaligned source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataMix {
    pub aligned_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub p_text_drop: f64,
    pub p_mask_zero: f64,
    /// Full-scale runs use 12,500 Locator steps.
    pub locator_steps: usize,
    /// Full-scale runs use 20,000 Preserver steps.
    pub preserver_steps: usize,
    /// Full-scale runs use 1,800 joint Stage II steps.
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub stage2_learning_rate: f32,
    pub grad_clip: Option<f32>,
    pub seed: u64,
    pub boundary: f32,
    pub locator_data: DataMix,
    pub preserver_data: DataMix,
    pub stage2_data: DataMix,
    /// Stage II also updates the backbone when set.
    pub stage2_unfreeze_base: bool,
    /// Fractions of the Locator budget at which snapshots are kept.
    pub locator_snapshots: Vec<f64>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p_text_drop: 0.1,
            p_mask_zero: 0.2,
            locator_steps: 500,
            preserver_steps: 800,
            stage2_steps: 200,
            batch_size: 4,
            learning_rate: 1e-3,
            stage2_learning_rate: 1e-3,
            grad_clip: Some(1.0),
            seed: 0,
            boundary: crate::sampler::DEFAULT_BOUNDARY,
            locator_data: DataMix { aligned_fraction: 0.5 },
            preserver_data: DataMix { aligned_fraction: 1.0 },
            stage2_data: DataMix { aligned_fraction: 0.5 },
            stage2_unfreeze_base: false,
            locator_snapshots: vec![0.25],
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} = {p} is not a probability")))
            }
        };
        prob("p_text_drop", self.p_text_drop)?;
        prob("p_mask_zero", self.p_mask_zero)?;
        if self.p_text_drop == 1.0 && self.p_mask_zero == 1.0 {
            return Err(Error::InvalidConfig("dropping text and mask with certainty leaves only the excluded unconditional branch".into()));
        }
        for (name, mix) in [("locator_data", self.locator_data), ("preserver_data", self.preserver_data), ("stage2_data", self.stage2_data)] {
            prob(name, mix.aligned_fraction)?;
        }
        if !(self.boundary > 0.0 && self.boundary < 1.0) {
            return Err(Error::InvalidConfig(format!("boundary {} must lie in (0, 1)", self.boundary)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.stage2_learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        for &f in &self.locator_snapshots {
            prob("locator_snapshots", f)?;
        }
        Ok(())
    }

    /// Noise-level range an expert trains on; the two ranges partition [0, 1] at the boundary.
    pub fn noise_range(&self, role: ExpertRole) -> (f32, f32) {
        match role {
            ExpertRole::Locator => (self.boundary, 1.0),
            ExpertRole::Preserver => (0.0, self.boundary),
        }
    }

    pub fn sample_noise_level<R: Rng>(&self, role: ExpertRole, rng: &mut R) -> f32 {
        match role {
            ExpertRole::Locator => rng.random_range(self.boundary..=1.0),
            ExpertRole::Preserver => rng.random_range(0.0..self.boundary),
        }
    }

    pub fn steps_for(&self, role: ExpertRole) -> usize {
        match role {
            ExpertRole::Locator => self.locator_steps,
            ExpertRole::Preserver => self.preserver_steps,
        }
    }

    pub fn stage1_mix(&self, role: ExpertRole) -> DataMix {
        match role {
            ExpertRole::Locator => self.locator_data,
            ExpertRole::Preserver => self.preserver_data,
        }
    }
}

/// Draws which branch a training example uses. Text is dropped with
/// probability `p_text`, the mask pair is zeroed with probability `p_mask`,
/// independently; the joint drop (unconditional) is rejected and redrawn.
pub fn draw_branch<R: Rng>(rng: &mut R, p_text: f64, p_mask: f64) -> Branch {
    assert!(!(p_text >= 1.0 && p_mask >= 1.0), "unconditional branch is excluded");
    loop {
        let drop_text = rng.random_bool(p_text);
        let drop_mask = rng.random_bool(p_mask);
        match (drop_text, drop_mask) {
            (true, true) => continue,
            (true, false) => return Branch::MaskOnly,
            (false, true) => return Branch::TextOnly,
            (false, false) => return Branch::Full,
        }
    }
}

pub fn branch_dropout<R: Rng>(full: &ConditionBundle, rng: &mut R, p_text: f64, p_mask: f64, null_text: &TextEmbedding) -> (Branch, ConditionBundle) {
    let branch = draw_branch(rng, p_text, p_mask);
    (branch, full.branch(branch, null_text))
}

/// Analytic branch frequencies after rejecting the unconditional case,
/// ordered `[text_only, mask_only, full]`.
pub fn branch_probabilities(p_text: f64, p_mask: f64) -> [f64; 3] {
    let text_only = (1.0 - p_text) * p_mask;
    let mask_only = p_text * (1.0 - p_mask);
    let full = (1.0 - p_text) * (1.0 - p_mask);
    let z = 1.0 - p_text * p_mask;
    [text_only / z, mask_only / z, full / z]
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchHistogram {
    pub text_only: usize,
    pub mask_only: usize,
    pub full: usize,
}

impl BranchHistogram {
    pub fn add(&mut self, b: Branch) {
        match b {
            Branch::TextOnly => self.text_only += 1,
            Branch::MaskOnly => self.mask_only += 1,
            Branch::Full => self.full += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.text_only + self.mask_only + self.full
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: u8,
    pub expert: ExpertRole,
    pub branch_histogram: BranchHistogram,
    pub loss: f64,
}

/// Adaptive-moment optimizer over a [`Params`] tree.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub clip: Option<f32>,
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &Params<Array2<f32>>, lr: f32, clip: Option<f32>) -> Self {
        let zeros: Vec<Array2<f32>> = params.named().iter().map(|(_, a)| Array2::zeros(a.dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Updates every parameter whose name passes `trainable`.
    pub fn step(&mut self, params: &mut Params<Array2<f32>>, grads: &Params<Array2<f32>>, trainable: impl Fn(&str) -> bool) {
        self.t += 1;
        let named = grads.named();
        let norm = named
            .iter()
            .filter(|(n, _)| trainable(n))
            .map(|(_, g)| g.iter().map(|v| (*v as f64).powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let factor = match self.clip {
            Some(c) if norm > c as f64 => (c as f64 / norm) as f32,
            _ => 1.0,
        };
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        let mut idx = 0;
        params.visit_mut(&mut |name, p| {
            let i = idx;
            idx += 1;
            if !trainable(name) {
                return;
            }
            let g = named[i].1;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * factor;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        });
    }
}

/// A noised training example: full-condition bundle and velocity target.
#[derive(Debug, Clone)]
pub struct Example {
    pub bundle: ConditionBundle,
    pub target: VideoClip,
}

pub fn full_bundle(model: &Denoiser, sample: &SampleRecord, x_t: VideoClip, t: f32) -> Result<ConditionBundle> {
    let ids = sample.text.encode(model.config.text_len)?;
    Ok(ConditionBundle {
        x_t,
        t,
        x_ref: sample.ref_video.clone(),
        mask: sample.mask.clone(),
        x_masked: make_masked_video(&sample.ref_video, &sample.mask)?,
        text: model.embed_ids(&ids)?,
    })
}

/// Noises the ground truth of each sample at a level drawn from the expert's range.
pub fn make_examples(model: &Denoiser, batch: &[&SampleRecord], role: ExpertRole, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Example>> {
    batch
        .iter()
        .map(|s| {
            let t = cfg.sample_noise_level(role, rng);
            let noise = gaussian_like(s.gt_video.dim(), rng.random());
            let x_t = add_noise(&s.gt_video, t, &noise)?;
            Ok(Example { bundle: full_bundle(model, s, x_t, t)?, target: velocity_target(&s.gt_video, &noise) })
        })
        .collect()
}

fn check_loss(loss: f64, stage: u8, role: ExpertRole) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("stage {stage} {} loss ({loss})", role.as_str())))
    }
}

/// Mean single-branch loss and gradients for `examples` as given.
pub fn single_branch_loss_and_grads(model: &Denoiser, examples: &[Example], trainable: impl Fn(&str) -> bool) -> (f64, Params<Array2<f32>>) {
    let cfg: &ModelConfig = &model.config;
    let mut tape = Tape::<f32>::new();
    let pv = register(&mut tape, &model.params, trainable);
    let total = batch_loss(&mut tape, examples, |tape, ex| single(tape, cfg, &pv, &ex.bundle), cfg);
    let loss = tape.value(total)[[0, 0]] as f64;
    let mut grads = tape.backward(total);
    (loss, collect_grads(&pv, &mut grads, &model.params))
}

/// Mean full-branch loss of the three-branch pass and gradients.
pub fn three_branch_loss_and_grads(model: &Denoiser, examples: &[Example], trainable: impl Fn(&str) -> bool) -> (f64, Params<Array2<f32>>) {
    let cfg: &ModelConfig = &model.config;
    let null = model.null_text();
    let triples: Vec<[ConditionBundle; 3]> = examples.iter().map(|e| e.bundle.triple(&null)).collect();
    let mut tape = Tape::<f32>::new();
    let pv = register(&mut tape, &model.params, trainable);
    let mut i = 0;
    let total = batch_loss(
        &mut tape,
        examples,
        |tape, _| {
            let [a, b, c] = &triples[i];
            i += 1;
            three_branch(tape, cfg, &pv, [a, b, c])[2]
        },
        cfg,
    );
    let loss = tape.value(total)[[0, 0]] as f64;
    let mut grads = tape.backward(total);
    (loss, collect_grads(&pv, &mut grads, &model.params))
}

fn batch_loss<'a>(
    tape: &mut Tape<'a, f32>,
    examples: &[Example],
    mut predict: impl FnMut(&mut Tape<'a, f32>, &Example) -> crate::tape::Var,
    cfg: &ModelConfig,
) -> crate::tape::Var {
    let mut total = None;
    for ex in examples {
        let out = predict(tape, ex);
        let target = tape.constant(patchify_target(cfg, &ex.target));
        let l = tape.mse(out, target);
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l),
        });
    }
    let total = total.expect("non-empty batch");
    tape.scale(total, 1.0 / examples.len() as f64)
}

pub struct StepReport {
    pub loss: f64,
    pub histogram: BranchHistogram,
}

/// One Stage-I update: conditional dropout per example, MSE on the selected branch.
pub fn stage1_step(model: &mut Denoiser, opt: &mut Adam, batch: &[&SampleRecord], role: ExpertRole, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<StepReport> {
    let null = model.null_text();
    let mut histogram = BranchHistogram::default();
    let mut examples = make_examples(model, batch, role, cfg, rng)?;
    for ex in &mut examples {
        let (branch, bundle) = branch_dropout(&ex.bundle, rng, cfg.p_text_drop, cfg.p_mask_zero, &null);
        histogram.add(branch);
        ex.bundle = bundle;
    }
    let trainable = |n: &str| !is_fusion_param(n);
    let (loss, grads) = single_branch_loss_and_grads(model, &examples, trainable);
    check_loss(loss, 1, role)?;
    opt.step(&mut model.params, &grads, trainable);
    Ok(StepReport { loss, histogram })
}

/// One Stage-II update on the full-branch output of the three-branch pass.
pub fn stage2_step(model: &mut Denoiser, opt: &mut Adam, batch: &[&SampleRecord], role: ExpertRole, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<StepReport> {
    let examples = make_examples(model, batch, role, cfg, rng)?;
    let unfreeze = cfg.stage2_unfreeze_base;
    let trainable = move |n: &str| unfreeze || is_fusion_param(n);
    let (loss, grads) = three_branch_loss_and_grads(model, &examples, trainable);
    check_loss(loss, 2, role)?;
    opt.step(&mut model.params, &grads, trainable);
    let histogram = BranchHistogram { text_only: batch.len(), mask_only: batch.len(), full: batch.len() };
    Ok(StepReport { loss, histogram })
}

/// Aligned and misaligned training pools.
#[derive(Debug, Clone, Default)]
pub struct TrainingSets {
    pub aligned: Vec<SampleRecord>,
    pub misaligned: Vec<SampleRecord>,
}

impl TrainingSets {
    fn draw_batch<'a>(&'a self, mix: DataMix, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<&'a SampleRecord>> {
        let needs_aligned = mix.aligned_fraction > 0.0;
        let needs_misaligned = mix.aligned_fraction < 1.0;
        if (needs_aligned && self.aligned.is_empty()) || (needs_misaligned && self.misaligned.is_empty()) {
            return Err(Error::EmptyDataset(format!(
                "mix wants aligned fraction {} but pools hold {} aligned / {} misaligned samples",
                mix.aligned_fraction,
                self.aligned.len(),
                self.misaligned.len()
            )));
        }
        Ok((0..size)
            .map(|_| {
                let pool = if rng.random_bool(mix.aligned_fraction) { &self.aligned } else { &self.misaligned };
                &pool[rng.random_range(0..pool.len())]
            })
            .collect())
    }
}

fn role_salt(role: ExpertRole) -> u64 {
    match role {
        ExpertRole::Locator => 0x10ca_7012,
        ExpertRole::Preserver => 0x9e5e_12e2,
    }
}

pub struct Stage1Output {
    pub model: Denoiser,
    /// `(step, weights)` for each requested snapshot.
    pub snapshots: Vec<(usize, Denoiser)>,
}

/// Stage I for one expert: fresh initialisation, its own data mix, noise range and budget.
pub fn train_stage1(role: ExpertRole, model_cfg: &ModelConfig, data: &TrainingSets, cfg: &TrainConfig, log: &mut dyn FnMut(&LogRecord)) -> Result<Stage1Output> {
    cfg.validate()?;
    let steps = cfg.steps_for(role);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ role_salt(role));
    let mut model = Denoiser::new(model_cfg.clone(), rng.random())?;
    let mut opt = Adam::new(&model.params, cfg.learning_rate, cfg.grad_clip);
    let snapshot_steps: Vec<usize> = if role == ExpertRole::Locator {
        cfg.locator_snapshots.iter().map(|f| (f * steps as f64).round() as usize).collect()
    } else {
        vec![]
    };
    let mut snapshots = Vec::new();
    let mut window = BranchHistogram::default();
    let mut window_loss = 0.0;
    let mut window_len = 0;
    for step in 1..=steps {
        let batch = data.draw_batch(cfg.stage1_mix(role), cfg.batch_size, &mut rng)?;
        let report = stage1_step(&mut model, &mut opt, &batch, role, cfg, &mut rng)?;
        window.text_only += report.histogram.text_only;
        window.mask_only += report.histogram.mask_only;
        window.full += report.histogram.full;
        window_loss += report.loss;
        window_len += 1;
        if step % cfg.log_every.max(1) == 0 || step == steps {
            log(&LogRecord { step, stage: 1, expert: role, branch_histogram: window, loss: window_loss / window_len as f64 });
            window = BranchHistogram::default();
            window_loss = 0.0;
            window_len = 0;
        }
        if snapshot_steps.contains(&step) {
            snapshots.push((step, model.clone()));
        }
    }
    Ok(Stage1Output { model, snapshots })
}

pub fn train_locator(model_cfg: &ModelConfig, data: &TrainingSets, cfg: &TrainConfig, log: &mut dyn FnMut(&LogRecord)) -> Result<Stage1Output> {
    train_stage1(ExpertRole::Locator, model_cfg, data, cfg, log)
}

pub fn train_preserver(model_cfg: &ModelConfig, data: &TrainingSets, cfg: &TrainConfig, log: &mut dyn FnMut(&LogRecord)) -> Result<Stage1Output> {
    train_stage1(ExpertRole::Preserver, model_cfg, data, cfg, log)
}

/// Stage II: both experts updated each step on the mixed pool, each at its own noise range.
pub fn train_stage2(pair: ExpertPair, data: &TrainingSets, cfg: &TrainConfig, log: &mut dyn FnMut(&LogRecord)) -> Result<ExpertPair> {
    cfg.validate()?;
    let ExpertPair { mut locator, mut preserver, boundary } = pair;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57a6_e002);
    let mut opt_l = Adam::new(&locator.params, cfg.stage2_learning_rate, cfg.grad_clip);
    let mut opt_p = Adam::new(&preserver.params, cfg.stage2_learning_rate, cfg.grad_clip);
    let mut sums = [0.0f64; 2];
    let mut count = 0;
    for step in 1..=cfg.stage2_steps {
        for (i, role) in [ExpertRole::Locator, ExpertRole::Preserver].into_iter().enumerate() {
            let batch = data.draw_batch(cfg.stage2_data, cfg.batch_size, &mut rng)?;
            let (model, opt) = match role {
                ExpertRole::Locator => (&mut locator, &mut opt_l),
                ExpertRole::Preserver => (&mut preserver, &mut opt_p),
            };
            sums[i] += stage2_step(model, opt, &batch, role, cfg, &mut rng)?.loss;
        }
        count += 1;
        if step % cfg.log_every.max(1) == 0 || step == cfg.stage2_steps {
            let n = cfg.batch_size * count;
            for (i, role) in [ExpertRole::Locator, ExpertRole::Preserver].into_iter().enumerate() {
                let histogram = BranchHistogram { text_only: n, mask_only: n, full: n };
                log(&LogRecord { step, stage: 2, expert: role, branch_histogram: histogram, loss: sums[i] / count as f64 });
            }
            sums = [0.0; 2];
            count = 0;
        }
    }
    ExpertPair::new(locator, preserver, boundary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_scene, EffectKind, SceneSpec, WorldConfig};

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig { frames: 2, height: 8, width: 8, patch: [1, 2, 2], d_model: 16, heads: 2, blocks: 2, mlp_ratio: 2, text_len: 8, text_dim: 8, ..ModelConfig::default() }
    }

    fn tiny_world() -> WorldConfig {
        WorldConfig { frames: 2, height: 8, width: 8, min_radius: 1.5, max_radius: 2.0, ..WorldConfig::default() }
    }

    fn pool(n: u64) -> Vec<SampleRecord> {
        (0..n).map(|s| generate_scene(&SceneSpec::random(s, &tiny_world(), &EffectKind::ALL)).unwrap()).collect()
    }

    #[test]
    fn degenerate_dropout_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..200).all(|_| draw_branch(&mut rng, 0.0, 0.0) == Branch::Full));
        assert!((0..200).all(|_| draw_branch(&mut rng, 1.0, 0.0) == Branch::MaskOnly));
        assert!((0..200).all(|_| draw_branch(&mut rng, 0.0, 1.0) == Branch::TextOnly));
    }

    #[test]
    fn renormalised_probabilities() {
        let [t, m, f] = branch_probabilities(0.1, 0.2);
        assert!((t - 0.18 / 0.98).abs() < 1e-12);
        assert!((m - 0.08 / 0.98).abs() < 1e-12);
        assert!((f - 0.72 / 0.98).abs() < 1e-12);
    }

    #[test]
    fn dropout_variants_zero_the_right_conditions() {
        let model = Denoiser::new(tiny_model(), 0).unwrap();
        let s = &pool(1)[0];
        let full = full_bundle(&model, s, s.gt_video.clone(), 0.5).unwrap();
        let null = model.null_text();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b, bundle) = branch_dropout(&full, &mut rng, 0.0, 1.0, &null);
        assert_eq!(b, Branch::TextOnly);
        assert!(bundle.mask.iter().all(|&v| v == 0.0) && bundle.x_masked.iter().all(|&v| v == 0.0));
        assert_eq!(bundle.text, full.text);
        let (b, bundle) = branch_dropout(&full, &mut rng, 1.0, 0.0, &null);
        assert_eq!(b, Branch::MaskOnly);
        assert!(bundle.text.iter().all(|&v| v == 0.0));
        assert_eq!(bundle.mask, full.mask);
    }

    #[test]
    fn noise_levels_respect_expert_ranges() {
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5000 {
            assert!(cfg.sample_noise_level(ExpertRole::Locator, &mut rng) >= 0.875);
            assert!(cfg.sample_noise_level(ExpertRole::Preserver, &mut rng) < 0.875);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { p_text_drop: 1.0, p_mask_zero: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { p_text_drop: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { boundary: 1.0, ..TrainConfig::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn zero_model_loss_is_target_energy() {
        // Zero network, zero clean video: loss = mean(noise²) ≈ 1, std ≈ sqrt(2/3072).
        let mut model = Denoiser::zeros(tiny_model()).unwrap();
        let mut samples = pool(8);
        for s in &mut samples {
            s.gt_video.fill(0.0);
        }
        let refs: Vec<&SampleRecord> = samples.iter().collect();
        let cfg = TrainConfig { batch_size: 8, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut opt = Adam::new(&model.params, 1e-3, None);
        let report = stage1_step(&mut model, &mut opt, &refs, ExpertRole::Preserver, &cfg, &mut rng).unwrap();
        assert!((report.loss - 1.0).abs() < 0.11, "loss {}", report.loss);
        assert_eq!(report.histogram.total(), 8);
    }

    #[test]
    fn stage2_starts_at_stage1_loss_and_freezes_base() {
        let model = Denoiser::new(tiny_model(), 5).unwrap();
        let mut model = model;
        model.params.head.weight.mapv_inplace(|_| 0.05);
        let samples = pool(3);
        let refs: Vec<&SampleRecord> = samples.iter().collect();
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let examples = make_examples(&model, &refs, ExpertRole::Locator, &cfg, &mut rng).unwrap();
        let (l1, _) = single_branch_loss_and_grads(&model, &examples, |_| false);
        let (l2, grads) = three_branch_loss_and_grads(&model, &examples, is_fusion_param);
        assert!((l1 - l2).abs() <= 1e-6 * l1.max(1.0), "{l1} vs {l2}");
        for (name, g) in grads.named() {
            if !is_fusion_param(&name) {
                assert!(g.iter().all(|&v| v == 0.0), "{name} has gradient");
            }
        }
        assert!(grads.named().iter().any(|(n, g)| is_fusion_param(n) && g.iter().any(|&v| v != 0.0)));

        let before = model.clone();
        let mut opt = Adam::new(&model.params, 1e-2, None);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        stage2_step(&mut model, &mut opt, &refs, ExpertRole::Locator, &cfg, &mut rng).unwrap();
        for ((name, a), (_, b)) in model.params.named().into_iter().zip(before.params.named()) {
            if is_fusion_param(&name) {
                continue;
            }
            assert_eq!(a, b, "{name} changed");
        }
        assert_ne!(model.params, before.params);
    }

    #[test]
    fn stage1_is_reproducible_and_logs() {
        let data = TrainingSets { aligned: pool(6), misaligned: vec![] };
        let cfg = TrainConfig { preserver_steps: 6, batch_size: 2, log_every: 3, ..TrainConfig::default() };
        let run = || {
            let mut logs = Vec::new();
            let out = train_preserver(&tiny_model(), &data, &cfg, &mut |r| logs.push(r.clone())).unwrap();
            (out.model, logs)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.len(), 2);
        assert_eq!(la[0].branch_histogram.total(), 6);
        assert!(la.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn missing_pool_is_an_error() {
        let data = TrainingSets { aligned: pool(2), misaligned: vec![] };
        let cfg = TrainConfig { locator_steps: 1, ..TrainConfig::default() };
        assert!(matches!(train_locator(&tiny_model(), &data, &cfg, &mut |_| {}), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn stage2_honours_step_budget() {
        let data = TrainingSets { aligned: pool(4), misaligned: pool(2) };
        let cfg = TrainConfig { stage2_steps: 3, batch_size: 1, log_every: 1, ..TrainConfig::default() };
        let m = Denoiser::new(tiny_model(), 1).unwrap();
        let pair = ExpertPair::new(m.clone(), m, 0.875).unwrap();
        let mut steps = Vec::new();
        train_stage2(pair, &data, &cfg, &mut |r| steps.push((r.step, r.expert))).unwrap();
        assert_eq!(steps.iter().map(|s| s.0).max(), Some(3));
        assert_eq!(steps.len(), 6);
    }
}
