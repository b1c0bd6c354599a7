//! Rectified-flow noise path, noise-level expert routing and Euler samplers.
//!
//! The path is `x_t = (1 − t)·x0 + t·noise`, so the velocity target is
//! `noise − x0` and sampling integrates `dx = v dt` from `t = 1` down to 0.

use ndarray::Zip;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{extract_full_branch, Branch, ConditionBundle, Denoiser};
use crate::error::{Error, Result};
use crate::guidance::{mc_cfg_combine, GuidanceScales};
use crate::world::VideoClip;

pub const DEFAULT_STEPS: usize = 40;
pub const DEFAULT_BOUNDARY: f32 = 0.875;

/// Strictly decreasing time grid from 1 to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    times: Vec<f32>,
}

impl Schedule {
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        let times = (0..=steps).map(|k| (1.0 - k as f64 / steps as f64) as f32).collect();
        Ok(Self { times })
    }

    pub fn from_times(times: Vec<f32>) -> Result<Self> {
        let ok = times.len() >= 2
            && times.first() == Some(&1.0)
            && times.last() == Some(&0.0)
            && times.windows(2).all(|w| w[1] < w[0]);
        if !ok {
            return Err(Error::InvalidConfig("schedule must decrease strictly from 1 to 0".into()));
        }
        Ok(Self { times })
    }

    /// Number of integration steps N (one model evaluation each).
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// `t_0 = 1 > … > t_N = 0`
    pub fn times(&self) -> &[f32] {
        &self.times
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertRole {
    /// High-noise expert: finds and erases the object and its effects.
    Locator,
    /// Low-noise expert: restores the background faithfully.
    Preserver,
}

impl ExpertRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ExpertRole::Locator => "locator",
            ExpertRole::Preserver => "preserver",
        }
    }
}

/// Noise levels at or above the boundary go to the Locator.
pub fn route(t: f32, boundary: f32) -> ExpertRole {
    if t >= boundary {
        ExpertRole::Locator
    } else {
        ExpertRole::Preserver
    }
}

#[derive(Debug, Clone)]
pub struct ExpertPair {
    pub locator: Denoiser,
    pub preserver: Denoiser,
    pub boundary: f32,
}

impl ExpertPair {
    pub fn new(locator: Denoiser, preserver: Denoiser, boundary: f32) -> Result<Self> {
        if locator.config != preserver.config {
            return Err(Error::InvalidConfig("locator and preserver architectures differ".into()));
        }
        if !(boundary > 0.0 && boundary < 1.0) {
            return Err(Error::InvalidConfig(format!("boundary {boundary} must lie in (0, 1)")));
        }
        Ok(Self { locator, preserver, boundary })
    }

    pub fn expert(&self, role: ExpertRole) -> &Denoiser {
        match role {
            ExpertRole::Locator => &self.locator,
            ExpertRole::Preserver => &self.preserver,
        }
    }
}

pub fn route_expert(pair: &ExpertPair, t: f32) -> Result<&Denoiser> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidConfig(format!("noise level {t} outside [0, 1]")));
    }
    Ok(pair.expert(route(t, pair.boundary)))
}

pub fn add_noise(x0: &VideoClip, t: f32, noise: &VideoClip) -> Result<VideoClip> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidConfig(format!("noise level {t} outside [0, 1]")));
    }
    if x0.dim() != noise.dim() {
        return Err(Error::ShapeMismatch(format!("x0 {:?} vs noise {:?}", x0.dim(), noise.dim())));
    }
    let mut out = x0.clone();
    Zip::from(&mut out).and(noise).for_each(|x, &n| *x = (1.0 - t) * *x + t * n);
    Ok(out)
}

pub fn velocity_target(x0: &VideoClip, noise: &VideoClip) -> VideoClip {
    noise - x0
}

pub fn gaussian_like(shape: (usize, usize, usize, usize), seed: u64) -> VideoClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VideoClip::from_shape_fn(shape, |_| StandardNormal.sample(&mut rng))
}

/// Explicit Euler from `t_0` to `t_N`: `x ← x + (t_{k+1} − t_k)·v(x, t_k)`.
pub fn euler(x_start: VideoClip, schedule: &Schedule, mut velocity: impl FnMut(&VideoClip, f32, usize) -> Result<VideoClip>) -> Result<VideoClip> {
    let mut x = x_start;
    for (k, w) in schedule.times().windows(2).enumerate() {
        let v = velocity(&x, w[0], k)?;
        let dt = w[1] - w[0];
        Zip::from(&mut x).and(&v).for_each(|x, &v| *x += dt * v);
    }
    Ok(x)
}

/// Which expert served each step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub steps: Vec<(f32, ExpertRole)>,
    /// Model forward evaluations per expert (a three-branch pass counts once).
    pub locator_calls: usize,
    pub preserver_calls: usize,
}

impl RoutingTrace {
    fn record(&mut self, t: f32, role: ExpertRole) {
        self.steps.push((t, role));
        match role {
            ExpertRole::Locator => self.locator_calls += 1,
            ExpertRole::Preserver => self.preserver_calls += 1,
        }
    }

    /// Locator steps form a prefix of the step sequence.
    pub fn is_monotone(&self) -> bool {
        let first_preserver = self.steps.iter().position(|(_, r)| *r == ExpertRole::Preserver).unwrap_or(self.steps.len());
        self.steps[first_preserver..].iter().all(|(_, r)| *r == ExpertRole::Preserver)
    }
}

fn check_shared_start(bundles: &[ConditionBundle; 3]) -> Result<()> {
    if bundles[0].x_t != bundles[1].x_t || bundles[1].x_t != bundles[2].x_t {
        return Err(Error::ShapeMismatch("branch bundles must share the initial noise".into()));
    }
    Ok(())
}

/// Plain conditional sampling with a single bundle (any branch variant).
pub fn sample_conditional(pair: &ExpertPair, bundle: &ConditionBundle, schedule: &Schedule) -> Result<(VideoClip, RoutingTrace)> {
    let mut trace = RoutingTrace::default();
    let x = euler(bundle.x_t.clone(), schedule, |x, t, _| {
        let role = route(t, pair.boundary);
        trace.record(t, role);
        pair.expert(role).forward_single(&bundle.with_state(x.clone(), t))
    })?;
    Ok((x, trace))
}

/// Multi-conditional guidance: each step evaluates the text-only, mask-only
/// and full bundles separately and combines them with `scales`.
pub fn sample_mccfg(pair: &ExpertPair, bundles: &[ConditionBundle; 3], schedule: &Schedule, scales: GuidanceScales) -> Result<(VideoClip, RoutingTrace)> {
    scales.validate()?;
    check_shared_start(bundles)?;
    let mut trace = RoutingTrace::default();
    let x = euler(bundles[2].x_t.clone(), schedule, |x, t, _| {
        let role = route(t, pair.boundary);
        trace.record(t, role);
        let model = pair.expert(role);
        let v_txt = model.forward_single(&bundles[0].with_state(x.clone(), t))?;
        let v_m = model.forward_single(&bundles[1].with_state(x.clone(), t))?;
        let v_f = model.forward_single(&bundles[2].with_state(x.clone(), t))?;
        mc_cfg_combine(&v_txt, &v_m, &v_f, scales)
    })?;
    Ok((x, trace))
}

/// Learned fusion: each step runs the three-branch pass and integrates only
/// the full-branch velocity. No guidance scales.
pub fn sample_ldcfg(pair: &ExpertPair, bundles: &[ConditionBundle; 3], schedule: &Schedule) -> Result<(VideoClip, RoutingTrace)> {
    check_shared_start(bundles)?;
    let mut trace = RoutingTrace::default();
    let x = euler(bundles[2].x_t.clone(), schedule, |x, t, _| {
        let role = route(t, pair.boundary);
        trace.record(t, role);
        let [a, b, c] = bundles.each_ref().map(|bd| bd.with_state(x.clone(), t));
        Ok(extract_full_branch(pair.expert(role).forward_three_branch([&a, &b, &c])?))
    })?;
    Ok((x, trace))
}

/// How a sample is produced from a full-condition bundle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SamplerKind {
    /// Single bundle of the given branch variant, no guidance.
    Conditional { branch: Branch },
    McCfg { scales: GuidanceScales },
    LdCfg,
}

/// Runs `kind` starting from `full` (whose `x_t` is the initial noise).
pub fn run_sampler(pair: &ExpertPair, full: &ConditionBundle, kind: SamplerKind, schedule: &Schedule) -> Result<(VideoClip, RoutingTrace)> {
    let null = pair.locator.null_text();
    match kind {
        SamplerKind::Conditional { branch } => sample_conditional(pair, &full.branch(branch, &null), schedule),
        SamplerKind::McCfg { scales } => sample_mccfg(pair, &full.triple(&null), schedule, scales),
        SamplerKind::LdCfg => sample_ldcfg(pair, &full.triple(&null), schedule),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ModelConfig;
    use ndarray::Array4;

    #[test]
    fn noise_injection_endpoints() {
        let x0 = Array4::from_elem((2, 2, 2, 3), 0.3f32);
        let n = Array4::from_elem((2, 2, 2, 3), -1.2f32);
        assert_eq!(add_noise(&x0, 0.0, &n).unwrap(), x0);
        assert_eq!(add_noise(&x0, 1.0, &n).unwrap(), n);
        let z = Array4::zeros((2, 2, 2, 3));
        let twos = Array4::from_elem((2, 2, 2, 3), 2.0f32);
        assert_eq!(add_noise(&z, 0.5, &twos).unwrap(), Array4::from_elem((2, 2, 2, 3), 1.0f32));
        assert!(add_noise(&x0, 1.5, &n).is_err());
    }

    #[test]
    fn routing_boundary_is_inclusive() {
        assert_eq!(route(0.9, 0.875), ExpertRole::Locator);
        assert_eq!(route(0.5, 0.875), ExpertRole::Preserver);
        assert_eq!(route(0.875, 0.875), ExpertRole::Locator);
        assert_eq!(route(0.874_999, 0.875), ExpertRole::Preserver);
    }

    #[test]
    fn schedule_shape() {
        let s = Schedule::uniform(40).unwrap();
        assert_eq!(s.steps(), 40);
        assert_eq!(s.times()[0], 1.0);
        assert_eq!(s.times()[40], 0.0);
        assert!((s.times()[1] - 0.975).abs() < 1e-7);
        assert!(Schedule::from_times(vec![1.0, 0.5, 0.6, 0.0]).is_err());
        assert!(Schedule::uniform(0).is_err());
    }

    #[test]
    fn euler_converges_at_first_order_on_linear_dynamics() {
        // dx/dt = a·x from t=1 to 0 has x(0) = x(1)·exp(−a).
        let a = 1.3f64;
        let run = |steps: usize| {
            let s = Schedule::uniform(steps).unwrap();
            let x = euler(Array4::from_elem((1, 1, 1, 1), 1.0f32), &s, |x, _, _| Ok(x * a as f32)).unwrap();
            (x[[0, 0, 0, 0]] as f64 - (-a).exp()).abs()
        };
        let (e1, e2, e3) = (run(20), run(40), run(80));
        assert!((e1 / e2 - 2.0).abs() < 0.15, "ratio {}", e1 / e2);
        assert!((e2 / e3 - 2.0).abs() < 0.15, "ratio {}", e2 / e3);

        // Single step local error is O(dt²).
        let one_step = |dt: f64| {
            let s = Schedule::from_times(vec![1.0, (1.0 - dt) as f32, 0.0]).unwrap();
            let mut first = None;
            euler(Array4::from_elem((1, 1, 1, 1), 1.0f32), &s, |x, _, k| {
                if k == 1 && first.is_none() {
                    first = Some(x[[0, 0, 0, 0]] as f64);
                }
                Ok(x * a as f32)
            })
            .unwrap();
            (first.unwrap() - (-a * dt).exp()).abs()
        };
        let ratio = one_step(0.1) / one_step(0.05);
        assert!((ratio - 4.0).abs() < 0.4, "local ratio {ratio}");
    }

    #[test]
    fn zero_experts_return_initial_noise() {
        let cfg = ModelConfig { frames: 2, height: 4, width: 4, patch: [1, 2, 2], d_model: 8, heads: 2, blocks: 1, text_len: 4, text_dim: 4, ..ModelConfig::default() };
        let z = Denoiser::zeros(cfg.clone()).unwrap();
        let pair = ExpertPair::new(z.clone(), z.clone(), DEFAULT_BOUNDARY).unwrap();
        let x_t = gaussian_like(cfg.video_shape(), 3);
        let bundle = ConditionBundle {
            x_t: x_t.clone(),
            t: 1.0,
            x_ref: VideoClip::zeros(cfg.video_shape()),
            mask: ndarray::Array3::zeros((2, 4, 4)),
            x_masked: VideoClip::zeros(cfg.video_shape()),
            text: z.null_text(),
        };
        let (out, trace) = sample_conditional(&pair, &bundle, &Schedule::uniform(1).unwrap()).unwrap();
        assert_eq!(out, x_t);
        assert_eq!(trace.locator_calls, 1);
    }

    #[test]
    fn pair_validation() {
        let a = Denoiser::zeros(ModelConfig::default()).unwrap();
        let b = Denoiser::zeros(ModelConfig { blocks: 2, ..ModelConfig::default() }).unwrap();
        assert!(ExpertPair::new(a.clone(), b, 0.875).is_err());
        assert!(ExpertPair::new(a.clone(), a, 1.0).is_err());
    }
}
