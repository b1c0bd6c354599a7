//! Tiny multimodal diffusion transformer predicting a velocity field.
//!
//! Conditioning: the noisy latent, reference video, mask and masked video are
//! concatenated per pixel along channels and patchified into tokens; the
//! noise level enters through a sinusoidal time embedding added to every
//! token; the text latent enters through cross-attention in each block.
//!
//! Each block also owns two fusion layers (`fusion_mask`, `fusion_text`)
//! which are only used by the three-branch forward pass. After block `i`
//! produces the text-only, mask-only and pre-fusion full states, the full
//! state is updated as
//!
//! ```text
//! ĥ_f = h̃_f + fusion_mask(h̃_f − h_m)
//! h_f = ĥ_f + fusion_text(ĥ_f − h_txt)
//! ```
//!
//! where `h_m` and `h_txt` are the post-block states of the other branches.

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Grads, Scalar, Tape, Var};
use crate::text::{random_text_table, TextEmbedding};
use crate::world::{MaskClip, VideoClip, CHANNELS};

/// Per-pixel conditioning channels: x_t, x_ref, mask, masked video.
pub const INPUT_CHANNELS: usize = 3 * CHANNELS + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `[pt, ph, pw]`
    pub patch: [usize; 3],
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub text_len: usize,
    pub text_dim: usize,
    /// Seed of the frozen text embedding table shared by all experts.
    pub text_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 16,
            width: 16,
            patch: [2, 2, 2],
            d_model: 64,
            heads: 4,
            blocks: 4,
            mlp_ratio: 4,
            text_len: crate::text::DEFAULT_MAX_LEN,
            text_dim: crate::text::DEFAULT_TEXT_DIM,
            text_seed: 0x7e47,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [pt, ph, pw] = self.patch;
        if pt == 0 || ph == 0 || pw == 0 {
            return Err(Error::InvalidConfig("patch sizes must be positive".into()));
        }
        if !self.frames.is_multiple_of(pt) || !self.height.is_multiple_of(ph) || !self.width.is_multiple_of(pw) {
            return Err(Error::InvalidConfig(format!(
                "patch {:?} does not tile a {}x{}x{} video",
                self.patch, self.frames, self.height, self.width
            )));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.blocks == 0 || self.mlp_ratio == 0 || self.text_len == 0 || self.text_dim == 0 {
            return Err(Error::InvalidConfig("blocks, mlp_ratio and text sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> [usize; 3] {
        [self.frames / self.patch[0], self.height / self.patch[1], self.width / self.patch[2]]
    }

    pub fn tokens(&self) -> usize {
        self.grid().iter().product()
    }

    pub fn patch_volume(&self) -> usize {
        self.patch.iter().product()
    }

    pub fn patch_in(&self) -> usize {
        self.patch_volume() * INPUT_CHANNELS
    }

    pub fn patch_out(&self) -> usize {
        self.patch_volume() * CHANNELS
    }

    pub fn video_shape(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, CHANNELS)
    }

    /// Number of fusion-layer scalars: two `D→D` affine maps per block.
    pub fn fusion_param_count(&self) -> usize {
        2 * self.blocks * (self.d_model * self.d_model + self.d_model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub attn_qkv: Linear<T>,
    pub attn_out: Linear<T>,
    pub cross_q: Linear<T>,
    /// Text keys and values, no bias: an all-zero text latent yields zero keys and values.
    pub cross_kv: T,
    pub cross_out: Linear<T>,
    pub mlp_in: Linear<T>,
    pub mlp_out: Linear<T>,
    /// Time-conditioned `(shift, scale, gate)` for attention and MLP, `d → 6d`.
    pub modulation: Linear<T>,
    pub fusion_mask: Linear<T>,
    pub fusion_text: Linear<T>,
}

/// All trainable tensors, generic over the leaf type so the same structure
/// carries arrays, tape handles, gradients or optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub patch_embed: Linear<T>,
    pub time_in: Linear<T>,
    pub time_out: Linear<T>,
    pub blocks: Vec<BlockParams<T>>,
    /// Time-conditioned `(shift, scale)` of the output norm, `d → 2d`.
    pub head_modulation: Linear<T>,
    pub head: Linear<T>,
}

impl<T> Linear<T> {
    fn map<'s, U>(&'s self, prefix: &str, f: &mut impl FnMut(&str, &'s T) -> U) -> Linear<U> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T> Params<T> {
    pub fn map<'s, U>(&'s self, f: &mut impl FnMut(&str, &'s T) -> U) -> Params<U> {
        Params {
            patch_embed: self.patch_embed.map("patch_embed", f),
            time_in: self.time_in.map("time_in", f),
            time_out: self.time_out.map("time_out", f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let p = format!("blocks.{i}");
                    BlockParams {
                        attn_qkv: b.attn_qkv.map(&format!("{p}.attn_qkv"), f),
                        attn_out: b.attn_out.map(&format!("{p}.attn_out"), f),
                        cross_q: b.cross_q.map(&format!("{p}.cross_q"), f),
                        cross_kv: f(&format!("{p}.cross_kv.weight"), &b.cross_kv),
                        cross_out: b.cross_out.map(&format!("{p}.cross_out"), f),
                        mlp_in: b.mlp_in.map(&format!("{p}.mlp_in"), f),
                        mlp_out: b.mlp_out.map(&format!("{p}.mlp_out"), f),
                        modulation: b.modulation.map(&format!("{p}.modulation"), f),
                        fusion_mask: b.fusion_mask.map(&format!("{p}.fusion_mask"), f),
                        fusion_text: b.fusion_text.map(&format!("{p}.fusion_text"), f),
                    }
                })
                .collect(),
            head_modulation: self.head_modulation.map("head_modulation", f),
            head: self.head.map("head", f),
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut T)) {
        self.patch_embed.visit_mut("patch_embed", f);
        self.time_in.visit_mut("time_in", f);
        self.time_out.visit_mut("time_out", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            b.attn_qkv.visit_mut(&format!("{p}.attn_qkv"), f);
            b.attn_out.visit_mut(&format!("{p}.attn_out"), f);
            b.cross_q.visit_mut(&format!("{p}.cross_q"), f);
            f(&format!("{p}.cross_kv.weight"), &mut b.cross_kv);
            b.cross_out.visit_mut(&format!("{p}.cross_out"), f);
            b.mlp_in.visit_mut(&format!("{p}.mlp_in"), f);
            b.mlp_out.visit_mut(&format!("{p}.mlp_out"), f);
            b.modulation.visit_mut(&format!("{p}.modulation"), f);
            b.fusion_mask.visit_mut(&format!("{p}.fusion_mask"), f);
            b.fusion_text.visit_mut(&format!("{p}.fusion_text"), f);
        }
        self.head_modulation.visit_mut("head_modulation", f);
        self.head.visit_mut("head", f);
    }

    /// `(name, leaf)` pairs in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(&mut |name, leaf| out.push((name.to_string(), leaf)));
        out
    }
}

pub fn is_fusion_param(name: &str) -> bool {
    name.contains(".fusion_")
}

impl<F: Scalar> Params<Array2<F>> {
    pub fn cast<G: Scalar>(&self) -> Params<Array2<G>> {
        self.map(&mut |_, a| a.mapv(|v| G::from(v).expect("cast")))
    }

    pub fn scalar_count(&self) -> usize {
        self.named().iter().map(|(_, a)| a.len()).sum()
    }
}

/// Noisy latent plus conditions for one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub x_t: VideoClip,
    pub t: f32,
    pub x_ref: VideoClip,
    pub mask: MaskClip,
    pub x_masked: VideoClip,
    pub text: TextEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    TextOnly,
    MaskOnly,
    Full,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::TextOnly, Branch::MaskOnly, Branch::Full];
}

impl ConditionBundle {
    /// Derives a branch variant from a full bundle: text-only zeroes the mask
    /// pair, mask-only swaps in the empty text latent.
    pub fn branch(&self, branch: Branch, null_text: &TextEmbedding) -> ConditionBundle {
        let mut b = self.clone();
        match branch {
            Branch::Full => {}
            Branch::TextOnly => {
                b.mask.fill(0.0);
                b.x_masked.fill(0.0);
            }
            Branch::MaskOnly => b.text = null_text.clone(),
        }
        b
    }

    /// The `(text-only, mask-only, full)` triple sharing this bundle's `x_t` and `t`.
    pub fn triple(&self, null_text: &TextEmbedding) -> [ConditionBundle; 3] {
        [
            self.branch(Branch::TextOnly, null_text),
            self.branch(Branch::MaskOnly, null_text),
            self.clone(),
        ]
    }

    pub fn with_state(&self, x_t: VideoClip, t: f32) -> ConditionBundle {
        ConditionBundle { x_t, t, ..self.clone() }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let video = cfg.video_shape();
        let (t, h, w, _) = video;
        for (name, dim) in [("x_t", self.x_t.dim()), ("x_ref", self.x_ref.dim()), ("x_masked", self.x_masked.dim())] {
            if dim != video {
                return Err(Error::ShapeMismatch(format!("{name} is {dim:?}, model expects {video:?}")));
            }
        }
        if self.mask.dim() != (t, h, w) {
            return Err(Error::ShapeMismatch(format!("mask is {:?}, model expects {:?}", self.mask.dim(), (t, h, w))));
        }
        if self.text.dim() != (cfg.text_len, cfg.text_dim) {
            return Err(Error::ShapeMismatch(format!(
                "text latent is {:?}, model expects {:?}",
                self.text.dim(),
                (cfg.text_len, cfg.text_dim)
            )));
        }
        if !self.t.is_finite() {
            return Err(Error::NonFinite("noise level".into()));
        }
        let all_finite = self.x_t.iter().chain(self.x_ref.iter()).chain(self.x_masked.iter()).all(|v| v.is_finite())
            && self.mask.iter().all(|v| v.is_finite())
            && self.text.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("condition bundle".into()));
        }
        Ok(())
    }
}

/// `(v_txt, v_m, v_f)`
#[derive(Debug, Clone, PartialEq)]
pub struct BranchTriple {
    pub text_only: VideoClip,
    pub mask_only: VideoClip,
    pub full: VideoClip,
}

/// Keeps only the full-conditioning field; the other branches exist to feed
/// the fusion layers.
pub fn extract_full_branch(triple: BranchTriple) -> VideoClip {
    triple.full
}

/// Parameters plus the frozen text table.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: ModelConfig,
    pub params: Params<Array2<f32>>,
    pub text_table: Array2<f32>,
}

fn zero_linear(i: usize, o: usize) -> Linear<Array2<f32>> {
    Linear { weight: Array2::zeros((i, o)), bias: Array2::zeros((1, o)) }
}

impl Denoiser {
    /// Random initialisation. Fusion layers and the output head start at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dense = |i: usize, o: usize, gain: f32| -> Linear<Array2<f32>> {
            let normal = Normal::new(0.0f32, gain / (i as f32).sqrt()).expect("valid std");
            Linear { weight: Array2::from_shape_fn((i, o), |_| normal.sample(&mut rng)), bias: Array2::zeros((1, o)) }
        };
        let d = config.d_model;
        let out_gain = 1.0 / (2.0 * config.blocks as f32).sqrt();
        let patch_embed = dense(config.patch_in(), d, 1.0);
        let time_in = dense(d, d, 1.0);
        let time_out = dense(d, d, 1.0);
        let blocks = (0..config.blocks)
            .map(|_| BlockParams {
                attn_qkv: dense(d, 3 * d, 1.0),
                attn_out: dense(d, d, out_gain),
                cross_q: dense(d, d, 1.0),
                cross_kv: dense(config.text_dim, 2 * d, 1.0).weight,
                cross_out: dense(d, d, out_gain),
                mlp_in: dense(d, config.mlp_ratio * d, 1.0),
                mlp_out: dense(config.mlp_ratio * d, d, out_gain),
                modulation: zero_linear(d, 6 * d),
                fusion_mask: zero_linear(d, d),
                fusion_text: zero_linear(d, d),
            })
            .collect();
        let head_modulation = zero_linear(d, 2 * d);
        let head = zero_linear(d, config.patch_out());
        let text_table = random_text_table(config.text_dim, config.text_seed);
        Ok(Self { params: Params { patch_embed, time_in, time_out, blocks, head_modulation, head }, text_table, config })
    }

    /// Every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.visit_mut(&mut |_, a| a.fill(0.0));
        Ok(m)
    }

    pub fn reset_fusion(&mut self) {
        self.params.visit_mut(&mut |name, a| {
            if is_fusion_param(name) {
                a.fill(0.0)
            }
        });
    }

    pub fn null_text(&self) -> TextEmbedding {
        TextEmbedding::zeros((self.config.text_len, self.config.text_dim))
    }

    pub fn embed_ids(&self, ids: &[u32]) -> Result<TextEmbedding> {
        crate::text::embed_text(ids, &self.text_table)
    }

    pub fn forward_single(&self, bundle: &ConditionBundle) -> Result<VideoClip> {
        bundle.validate(&self.config)?;
        let mut tape = Tape::<f32>::new();
        let pv = register(&mut tape, &self.params, |_| false);
        let out = single(&mut tape, &self.config, &pv, bundle);
        Ok(unpatchify(&self.config, tape.value(out)))
    }

    pub fn forward_three_branch(&self, bundles: [&ConditionBundle; 3]) -> Result<BranchTriple> {
        check_triple(&self.config, bundles)?;
        let mut tape = Tape::<f32>::new();
        let pv = register(&mut tape, &self.params, |_| false);
        let [vt, vm, vf] = three_branch(&mut tape, &self.config, &pv, bundles);
        Ok(BranchTriple {
            text_only: unpatchify(&self.config, tape.value(vt)),
            mask_only: unpatchify(&self.config, tape.value(vm)),
            full: unpatchify(&self.config, tape.value(vf)),
        })
    }

    /// Same computation as [`forward_three_branch`](Self::forward_three_branch)
    /// on the batch-wise concatenation `[c_txt; c_m; c_f]`, split back into
    /// its three chunks.
    pub fn forward_batched(&self, bundles: [&ConditionBundle; 3]) -> Result<BranchTriple> {
        check_triple(&self.config, bundles)?;
        let mut tape = Tape::<f32>::new();
        let pv = register(&mut tape, &self.params, |_| false);
        let stacked = batched_three_branch(&mut tape, &self.config, &pv, bundles);
        let n = self.config.tokens();
        let chunk = |i: usize| {
            let v = tape.value(stacked).slice(ndarray::s![i * n..(i + 1) * n, ..]).to_owned();
            unpatchify(&self.config, &v)
        };
        Ok(BranchTriple { text_only: chunk(0), mask_only: chunk(1), full: chunk(2) })
    }
}

fn check_triple(cfg: &ModelConfig, bundles: [&ConditionBundle; 3]) -> Result<()> {
    for b in bundles {
        b.validate(cfg)?;
    }
    let [a, b, c] = bundles;
    if a.t != b.t || b.t != c.t || a.x_t != b.x_t || b.x_t != c.x_t {
        return Err(Error::ShapeMismatch("three-branch bundles must share x_t and t".into()));
    }
    Ok(())
}

/// Puts every parameter on `tape`; names for which `trainable` is false
/// become frozen leaves that never receive gradients.
pub fn register<'a, F: Scalar>(
    tape: &mut Tape<'a, F>,
    params: &'a Params<Array2<F>>,
    trainable: impl Fn(&str) -> bool,
) -> Params<Var> {
    params.map(&mut |name, a| if trainable(name) { tape.param(a) } else { tape.frozen(a) })
}

/// Gradients for every registered parameter (zeros where nothing flowed).
pub fn collect_grads<F: Scalar>(vars: &Params<Var>, grads: &mut Grads<F>, params: &Params<Array2<F>>) -> Params<Array2<F>> {
    let mut shapes = params.named().into_iter().map(|(_, a)| a.dim());
    vars.map(&mut |_, v| grads.take_or_zeros(*v, shapes.next().expect("same structure")))
}

/// `[tokens, patch_in]` features in `(dt, dh, dw, channel)` order.
pub fn patchify<F: Scalar>(cfg: &ModelConfig, b: &ConditionBundle) -> Array2<F> {
    let [gt, gh, gw] = cfg.grid();
    let [pt, ph, pw] = cfg.patch;
    let mut out = Array2::zeros((cfg.tokens(), cfg.patch_in()));
    for it in 0..gt {
        for ih in 0..gh {
            for iw in 0..gw {
                let row = (it * gh + ih) * gw + iw;
                let mut col = 0;
                for dt in 0..pt {
                    for dh in 0..ph {
                        for dw in 0..pw {
                            let (f, y, x) = (it * pt + dt, ih * ph + dh, iw * pw + dw);
                            for c in 0..CHANNELS {
                                out[[row, col + c]] = F::lit(b.x_t[[f, y, x, c]] as f64);
                                out[[row, col + CHANNELS + c]] = F::lit(b.x_ref[[f, y, x, c]] as f64);
                                out[[row, col + 2 * CHANNELS + 1 + c]] = F::lit(b.x_masked[[f, y, x, c]] as f64);
                            }
                            out[[row, col + 2 * CHANNELS]] = F::lit(b.mask[[f, y, x]] as f64);
                            col += INPUT_CHANNELS;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse layout of the output head: `[tokens, patch_out]` → `[T, H, W, C]`.
pub fn unpatchify<F: Scalar>(cfg: &ModelConfig, tokens: &Array2<F>) -> VideoClip {
    let [gt, gh, gw] = cfg.grid();
    let [pt, ph, pw] = cfg.patch;
    let mut out = Array4::zeros(cfg.video_shape());
    for it in 0..gt {
        for ih in 0..gh {
            for iw in 0..gw {
                let row = (it * gh + ih) * gw + iw;
                let mut col = 0;
                for dt in 0..pt {
                    for dh in 0..ph {
                        for dw in 0..pw {
                            for c in 0..CHANNELS {
                                out[[it * pt + dt, ih * ph + dh, iw * pw + dw, c]] =
                                    tokens[[row, col + c]].to_f32().unwrap_or(f32::NAN);
                            }
                            col += CHANNELS;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Patch-major target layout matching [`unpatchify`].
pub fn patchify_target<F: Scalar>(cfg: &ModelConfig, v: &VideoClip) -> Array2<F> {
    let [gt, gh, gw] = cfg.grid();
    let [pt, ph, pw] = cfg.patch;
    let mut out = Array2::zeros((cfg.tokens(), cfg.patch_out()));
    for it in 0..gt {
        for ih in 0..gh {
            for iw in 0..gw {
                let row = (it * gh + ih) * gw + iw;
                let mut col = 0;
                for dt in 0..pt {
                    for dh in 0..ph {
                        for dw in 0..pw {
                            for c in 0..CHANNELS {
                                out[[row, col + c]] = F::lit(v[[it * pt + dt, ih * ph + dh, iw * pw + dw, c]] as f64);
                            }
                            col += CHANNELS;
                        }
                    }
                }
            }
        }
    }
    out
}

fn sinusoid(pos: f64, freq_index: usize, freqs: usize, max_period: f64) -> (f64, f64) {
    let w = (-(max_period.ln()) * freq_index as f64 / freqs as f64).exp();
    ((pos * w).sin(), (pos * w).cos())
}

fn position_table<F: Scalar>(cfg: &ModelConfig) -> Array2<F> {
    let d = cfg.d_model;
    let per_axis = d / 6; // sin/cos pairs per axis
    let [gt, gh, gw] = cfg.grid();
    let mut out = Array2::zeros((cfg.tokens(), d));
    for it in 0..gt {
        for ih in 0..gh {
            for iw in 0..gw {
                let row = (it * gh + ih) * gw + iw;
                for (axis, pos) in [it, ih, iw].into_iter().enumerate() {
                    for k in 0..per_axis {
                        let (s, c) = sinusoid(pos as f64, k, per_axis, 32.0);
                        out[[row, axis * 2 * per_axis + 2 * k]] = F::lit(s);
                        out[[row, axis * 2 * per_axis + 2 * k + 1]] = F::lit(c);
                    }
                }
            }
        }
    }
    out
}

fn time_features<F: Scalar>(cfg: &ModelConfig, t: f32) -> Array2<F> {
    let half = cfg.d_model / 2;
    let mut out = Array2::zeros((1, cfg.d_model));
    for k in 0..half {
        let (s, c) = sinusoid(1000.0 * t as f64, k, half, 10_000.0);
        out[[0, k]] = F::lit(s);
        out[[0, half + k]] = F::lit(c);
    }
    out
}

fn linear<F: Scalar>(tape: &mut Tape<'_, F>, x: Var, l: &Linear<Var>) -> Var {
    let y = tape.matmul(x, l.weight);
    tape.add_row(y, l.bias)
}

/// Token sequence, text latent and `[1, d]` time conditioning for one bundle.
fn embed<F: Scalar>(tape: &mut Tape<'_, F>, cfg: &ModelConfig, p: &Params<Var>, b: &ConditionBundle) -> (Var, Var, Var) {
    let x = tape.constant(patchify(cfg, b));
    let h = linear(tape, x, &p.patch_embed);
    let pos = tape.constant(position_table(cfg));
    let h = tape.add(h, pos);
    let tf = tape.constant(time_features(cfg, b.t));
    let te = linear(tape, tf, &p.time_in);
    let te = tape.silu(te);
    let te = linear(tape, te, &p.time_out);
    let h = tape.add_row(h, te);
    let text = tape.constant(b.text.mapv(|v| F::lit(v as f64)));
    let cond = tape.silu(te);
    (h, text, cond)
}

/// `a ⊙ (1 + scale) + shift` with `[1, d]` rows.
fn modulate<F: Scalar>(tape: &mut Tape<'_, F>, a: Var, shift: Var, scale: Var) -> Var {
    let s = tape.mul_row(a, scale);
    let a = tape.add(a, s);
    tape.add_row(a, shift)
}

/// `h + o ⊙ (1 + gate)`.
fn gated_residual<F: Scalar>(tape: &mut Tape<'_, F>, h: Var, o: Var, gate: Var) -> Var {
    let g = tape.mul_row(o, gate);
    let o = tape.add(o, g);
    tape.add(h, o)
}

fn attend<F: Scalar>(tape: &mut Tape<'_, F>, cfg: &ModelConfig, q: Var, k: Var, v: Var) -> Var {
    let dh = cfg.d_model / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let heads: Vec<Var> = (0..cfg.heads)
        .map(|h| {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
            let s = tape.matmul_nt(qh, kh);
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s);
            tape.matmul(a, vh)
        })
        .collect();
    tape.concat_cols(&heads)
}

fn per_chunk<F: Scalar>(tape: &mut Tape<'_, F>, x: Var, chunks: usize, mut f: impl FnMut(&mut Tape<'_, F>, Var, usize) -> Var) -> Var {
    if chunks == 1 {
        return f(tape, x, 0);
    }
    let n = tape.shape(x).0 / chunks;
    let parts: Vec<Var> = (0..chunks)
        .map(|c| {
            let part = tape.slice_rows(x, c * n, (c + 1) * n);
            f(tape, part, c)
        })
        .collect();
    tape.concat_rows(&parts)
}

/// One transformer block over `texts.len()` equally sized row chunks; every
/// chunk attends only within itself and to its own text latent.
fn block<F: Scalar>(tape: &mut Tape<'_, F>, cfg: &ModelConfig, bp: &BlockParams<Var>, h: Var, texts: &[Var], cond: Var) -> Var {
    let d = cfg.d_model;
    let chunks = texts.len();
    let mods = linear(tape, cond, &bp.modulation);
    let [shift_a, scale_a, gate_a, shift_m, scale_m, gate_m] = std::array::from_fn(|i| tape.slice_cols(mods, i * d, (i + 1) * d));

    let a = tape.layer_norm(h);
    let a = modulate(tape, a, shift_a, scale_a);
    let qkv = linear(tape, a, &bp.attn_qkv);
    let o = per_chunk(tape, qkv, chunks, |tape, part, _| {
        let q = tape.slice_cols(part, 0, d);
        let k = tape.slice_cols(part, d, 2 * d);
        let v = tape.slice_cols(part, 2 * d, 3 * d);
        attend(tape, cfg, q, k, v)
    });
    let o = linear(tape, o, &bp.attn_out);
    let h = gated_residual(tape, h, o, gate_a);

    let a = tape.layer_norm(h);
    let q = linear(tape, a, &bp.cross_q);
    let o = per_chunk(tape, q, chunks, |tape, part, c| {
        let kv = tape.matmul(texts[c], bp.cross_kv);
        let k = tape.slice_cols(kv, 0, d);
        let v = tape.slice_cols(kv, d, 2 * d);
        attend(tape, cfg, part, k, v)
    });
    let o = linear(tape, o, &bp.cross_out);
    let h = tape.add(h, o);

    let a = tape.layer_norm(h);
    let a = modulate(tape, a, shift_m, scale_m);
    let m = linear(tape, a, &bp.mlp_in);
    let m = tape.gelu(m);
    let m = linear(tape, m, &bp.mlp_out);
    gated_residual(tape, h, m, gate_m)
}

fn head<F: Scalar>(tape: &mut Tape<'_, F>, p: &Params<Var>, h: Var, cond: Var) -> Var {
    let d = tape.shape(h).1;
    let mods = linear(tape, cond, &p.head_modulation);
    let shift = tape.slice_cols(mods, 0, d);
    let scale = tape.slice_cols(mods, d, 2 * d);
    let a = tape.layer_norm(h);
    let a = modulate(tape, a, shift, scale);
    linear(tape, a, &p.head)
}

fn fuse<F: Scalar>(tape: &mut Tape<'_, F>, bp: &BlockParams<Var>, h_txt: Var, h_m: Var, h_f_pre: Var) -> Var {
    let d = tape.sub(h_f_pre, h_m);
    let d = linear(tape, d, &bp.fusion_mask);
    let h_hat = tape.add(h_f_pre, d);
    let d = tape.sub(h_hat, h_txt);
    let d = linear(tape, d, &bp.fusion_text);
    tape.add(h_hat, d)
}

/// Single-branch velocity, `[tokens, patch_out]`. Fusion layers unused.
pub fn single<F: Scalar>(tape: &mut Tape<'_, F>, cfg: &ModelConfig, p: &Params<Var>, b: &ConditionBundle) -> Var {
    let (mut h, text, cond) = embed(tape, cfg, p, b);
    for bp in &p.blocks {
        h = block(tape, cfg, bp, h, &[text], cond);
    }
    head(tape, p, h, cond)
}

/// Three isolated branches with per-block fusion into the full branch.
/// Returns `[v_txt, v_m, v_f]` as `[tokens, patch_out]`.
pub fn three_branch<F: Scalar>(tape: &mut Tape<'_, F>, cfg: &ModelConfig, p: &Params<Var>, bundles: [&ConditionBundle; 3]) -> [Var; 3] {
    let (mut ht, tt, ct) = embed(tape, cfg, p, bundles[0]);
    let (mut hm, tm, cm) = embed(tape, cfg, p, bundles[1]);
    let (mut hf, tf, cf) = embed(tape, cfg, p, bundles[2]);
    for bp in &p.blocks {
        ht = block(tape, cfg, bp, ht, &[tt], ct);
        hm = block(tape, cfg, bp, hm, &[tm], cm);
        let hf_pre = block(tape, cfg, bp, hf, &[tf], cf);
        hf = fuse(tape, bp, ht, hm, hf_pre);
    }
    [head(tape, p, ht, ct), head(tape, p, hm, cm), head(tape, p, hf, cf)]
}

/// Batch-concatenated variant of [`three_branch`]: a `[3·tokens, patch_out]` output.
pub fn batched_three_branch<F: Scalar>(tape: &mut Tape<'_, F>, cfg: &ModelConfig, p: &Params<Var>, bundles: [&ConditionBundle; 3]) -> Var {
    let n = cfg.tokens();
    let embedded: Vec<(Var, Var, Var)> = bundles.iter().map(|b| embed(tape, cfg, p, b)).collect();
    // The three bundles share `t`, so one time conditioning serves all rows.
    let cond = embedded[0].2;
    let texts: Vec<Var> = embedded.iter().map(|e| e.1).collect();
    let mut h = tape.concat_rows(&embedded.iter().map(|e| e.0).collect::<Vec<_>>());
    for bp in &p.blocks {
        let out = block(tape, cfg, bp, h, &texts, cond);
        let ht = tape.slice_rows(out, 0, n);
        let hm = tape.slice_rows(out, n, 2 * n);
        let hf_pre = tape.slice_rows(out, 2 * n, 3 * n);
        let hf = fuse(tape, bp, ht, hm, hf_pre);
        h = tape.concat_rows(&[ht, hm, hf]);
    }
    head(tape, p, h, cond)
}
