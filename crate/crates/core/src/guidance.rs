//! Multi-conditional guidance arithmetic.
//!
//! Given predictions under text-only, mask-only and full conditioning:
//!
//! ```text
//! ε̃ = ε_m + w_m (ε_f − ε_m)
//! α = clip(‖ε_f‖₂ / (‖ε̃‖₂ + δ), 0, 1)
//! ε̂ = α ε̃
//! ε = ε_txt + w_txt (ε̂ − ε_txt)
//! ```
//!
//! The rescale keeps the mask-extrapolated prediction from growing past the
//! norm of the full-condition prediction.

use ndarray::{Array, Axis, Dimension, Zip, RemoveAxis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DELTA: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceScales {
    pub w_m: f32,
    pub w_txt: f32,
    pub delta: f64,
}

impl GuidanceScales {
    pub fn new(w_m: f32, w_txt: f32) -> Result<Self> {
        let s = Self { w_m, w_txt, delta: DEFAULT_DELTA };
        s.validate()?;
        Ok(s)
    }

    /// `w_m = w_txt = 1`: the combination reduces to the full prediction.
    pub fn identity() -> Self {
        Self { w_m: 1.0, w_txt: 1.0, delta: DEFAULT_DELTA }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_m >= 0.0 && self.w_m.is_finite()) || !(self.w_txt >= 0.0 && self.w_txt.is_finite()) {
            return Err(Error::InvalidConfig(format!("guidance scales must be finite and ≥ 0, got w_m={} w_txt={}", self.w_m, self.w_txt)));
        }
        if self.delta.is_nan() || self.delta <= 0.0 {
            return Err(Error::InvalidConfig(format!("delta must be positive, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Reduction scope of the norms in the rescale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// One L2 norm over every element.
    #[default]
    PerSample,
    /// One norm per index of the leading (frame) axis.
    PerFrame,
}

/// Intermediate values of the combination.
#[derive(Debug, Clone, PartialEq)]
pub struct McCfgParts<D: Dimension> {
    pub extrapolated: Array<f32, D>,
    /// One entry per sample, or per frame under [`NormScope::PerFrame`].
    pub alpha: Vec<f64>,
    pub rescaled: Array<f32, D>,
    pub output: Array<f32, D>,
}

fn l2<'a>(values: impl Iterator<Item = &'a f32>) -> f64 {
    values.map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// `clip(num / (den + δ), 0, 1)`, with `0/δ` read as 0.
pub fn rescale_factor(num: f64, den: f64, delta: f64) -> f64 {
    if num == 0.0 {
        return 0.0;
    }
    (num / (den + delta)).clamp(0.0, 1.0)
}

pub fn mc_cfg_parts<D: Dimension + RemoveAxis>(
    eps_txt: &Array<f32, D>,
    eps_m: &Array<f32, D>,
    eps_f: &Array<f32, D>,
    scales: GuidanceScales,
    scope: NormScope,
) -> Result<McCfgParts<D>> {
    scales.validate()?;
    if eps_txt.shape() != eps_m.shape() || eps_m.shape() != eps_f.shape() {
        return Err(Error::ShapeMismatch(format!(
            "guidance inputs {:?}, {:?}, {:?}",
            eps_txt.shape(),
            eps_m.shape(),
            eps_f.shape()
        )));
    }
    if ![eps_txt, eps_m, eps_f].iter().all(|a| a.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("guidance inputs".into()));
    }
    let w_m = scales.w_m as f64;
    let mut extrapolated = eps_m.clone();
    Zip::from(&mut extrapolated)
        .and(eps_f)
        .for_each(|e, &f| *e = (*e as f64 + w_m * (f as f64 - *e as f64)) as f32);

    let mut rescaled = extrapolated.clone();
    let alpha = match scope {
        NormScope::PerSample => {
            let a = rescale_factor(l2(eps_f.iter()), l2(extrapolated.iter()), scales.delta);
            rescaled.mapv_inplace(|v| (v as f64 * a) as f32);
            vec![a]
        }
        NormScope::PerFrame => {
            if eps_f.ndim() == 0 {
                return Err(Error::ShapeMismatch("per-frame rescale needs a frame axis".into()));
            }
            let mut alphas = Vec::with_capacity(eps_f.shape()[0]);
            for ((mut r, e), f) in rescaled
                .axis_iter_mut(Axis(0))
                .zip(extrapolated.axis_iter(Axis(0)))
                .zip(eps_f.axis_iter(Axis(0)))
            {
                let a = rescale_factor(l2(f.iter()), l2(e.iter()), scales.delta);
                r.mapv_inplace(|v| (v as f64 * a) as f32);
                alphas.push(a);
            }
            alphas
        }
    };

    let w_txt = scales.w_txt as f64;
    let mut output = eps_txt.clone();
    Zip::from(&mut output)
        .and(&rescaled)
        .for_each(|o, &r| *o = (*o as f64 + w_txt * (r as f64 - *o as f64)) as f32);

    Ok(McCfgParts { extrapolated, alpha, rescaled, output })
}

/// Guided prediction with per-sample norms.
pub fn mc_cfg_combine<D: Dimension + RemoveAxis>(
    eps_txt: &Array<f32, D>,
    eps_m: &Array<f32, D>,
    eps_f: &Array<f32, D>,
    scales: GuidanceScales,
) -> Result<Array<f32, D>> {
    Ok(mc_cfg_parts(eps_txt, eps_m, eps_f, scales, NormScope::PerSample)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array4};
    use proptest::prelude::*;

    /// Scalar re-derivation of the combination on plain vectors.
    fn oracle(txt: &[f64], m: &[f64], f: &[f64], w_m: f64, w_txt: f64, delta: f64) -> Vec<f64> {
        let tilde: Vec<f64> = m.iter().zip(f).map(|(m, f)| m + w_m * (f - m)).collect();
        let nf = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nt = tilde.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ratio = if nf == 0.0 { 0.0 } else { nf / (nt + delta) };
        let alpha = ratio.clamp(0.0, 1.0);
        txt.iter().zip(&tilde).map(|(t, e)| t + w_txt * (alpha * e - t)).collect()
    }

    #[test]
    fn hand_computed_example() {
        let out = mc_cfg_combine(&array![0.0f32, 0.0], &array![1.0f32, 0.0], &array![2.0f32, 0.0], GuidanceScales::new(2.0, 1.5).unwrap()).unwrap();
        let expected = oracle(&[0.0, 0.0], &[1.0, 0.0], &[2.0, 0.0], 2.0, 1.5, 1e-8);
        assert!((expected[0] - 3.0).abs() < 1e-6);
        assert!((out[0] as f64 - 3.0).abs() < 1e-6 && out[1] == 0.0);
        let parts = mc_cfg_parts(&array![0.0f32, 0.0], &array![1.0f32, 0.0], &array![2.0f32, 0.0], GuidanceScales::new(2.0, 1.5).unwrap(), NormScope::PerSample).unwrap();
        assert_eq!(parts.extrapolated, array![3.0f32, 0.0]);
        assert!((parts.alpha[0] - 2.0 / (3.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn all_zero_inputs_give_zero() {
        let z = Array4::<f32>::zeros((2, 2, 2, 3));
        let parts = mc_cfg_parts(&z, &z, &z, GuidanceScales::new(3.0, 2.0).unwrap(), NormScope::PerSample).unwrap();
        assert_eq!(parts.alpha, vec![0.0]);
        assert!(parts.output.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = array![1.0f32, 2.0];
        let b = array![1.0f32, f32::NAN];
        let s = GuidanceScales::identity();
        assert!(matches!(mc_cfg_combine(&a, &a, &b, s), Err(Error::NonFinite(_))));
        assert!(matches!(mc_cfg_combine(&a, &a, &array![1.0f32], s), Err(Error::ShapeMismatch(_))));
        assert!(GuidanceScales::new(-1.0, 1.0).is_err());
        assert!(GuidanceScales { delta: 0.0, ..GuidanceScales::identity() }.validate().is_err());
    }

    #[test]
    fn per_frame_scope_uses_one_alpha_per_frame() {
        let f = Array4::from_shape_fn((3, 2, 2, 3), |(t, ..)| (t + 1) as f32);
        let m = Array4::zeros((3, 2, 2, 3));
        let parts = mc_cfg_parts(&m, &m, &f, GuidanceScales::new(2.0, 1.0).unwrap(), NormScope::PerFrame).unwrap();
        assert_eq!(parts.alpha.len(), 3);
        for a in parts.alpha {
            assert!((a - 0.5).abs() < 1e-6);
        }
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-5.0f32..5.0, n)
    }

    proptest! {
        #[test]
        fn matches_scalar_oracle(txt in vec_strategy(8), m in vec_strategy(8), f in vec_strategy(8), w_m in 0.0f32..10.0, w_txt in 0.0f32..10.0) {
            let out = mc_cfg_combine(&Array1::from(txt.clone()), &Array1::from(m.clone()), &Array1::from(f.clone()), GuidanceScales::new(w_m, w_txt).unwrap()).unwrap();
            let c = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
            let expected = oracle(&c(&txt), &c(&m), &c(&f), w_m as f64, w_txt as f64, 1e-8);
            for (o, e) in out.iter().zip(expected) {
                prop_assert!((*o as f64 - e).abs() <= 1e-4 * (1.0 + e.abs()));
            }
        }

        #[test]
        fn rescale_never_grows(m in vec_strategy(16), f in vec_strategy(16), w_m in 0.0f32..10.0) {
            let z = Array1::zeros(16);
            let parts = mc_cfg_parts(&z, &Array1::from(m), &Array1::from(f.clone()), GuidanceScales::new(w_m, 1.0).unwrap(), NormScope::PerSample).unwrap();
            let a = parts.alpha[0];
            prop_assert!((0.0..=1.0).contains(&a));
            let n_hat = l2(parts.rescaled.iter());
            let n_tilde = l2(parts.extrapolated.iter());
            let n_f = l2(f.iter());
            prop_assert!(n_hat <= n_tilde.min(n_f) + 1e-5);
        }

        #[test]
        fn zero_scales_select_branches(txt in vec_strategy(6), m in vec_strategy(6), f in vec_strategy(6)) {
            let (txt, m, f) = (Array1::from(txt), Array1::from(m), Array1::from(f));
            let parts = mc_cfg_parts(&txt, &m, &f, GuidanceScales::new(0.0, 1.0).unwrap(), NormScope::PerSample).unwrap();
            prop_assert_eq!(&parts.extrapolated, &m);
            let out = mc_cfg_combine(&txt, &m, &f, GuidanceScales::new(2.0, 0.0).unwrap()).unwrap();
            prop_assert_eq!(out, txt);
        }

        #[test]
        fn positively_homogeneous(txt in vec_strategy(6), m in vec_strategy(6), f in vec_strategy(6), lambda in 0.1f32..10.0, w_m in 0.0f32..5.0, w_txt in 0.0f32..5.0) {
            let s = GuidanceScales::new(w_m, w_txt).unwrap();
            let (txt, m, f) = (Array1::from(txt), Array1::from(m), Array1::from(f));
            let base = mc_cfg_combine(&txt, &m, &f, s).unwrap();
            let scaled = mc_cfg_combine(&(&txt * lambda), &(&m * lambda), &(&f * lambda), s).unwrap();
            for (b, sc) in base.iter().zip(scaled.iter()) {
                prop_assert!((b * lambda - sc).abs() <= 1e-3 * (1.0 + sc.abs()));
            }
        }
    }
}
