//! Reconstruction losses and the adaptive depth-loss weight.
//!
//! The depth weight combines a linearly decaying base weight with a tanh
//! modulation of the RGB/depth loss ratio and is clipped to
//! `[w_final, 2 w_init]`.

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::raster::{RenderOutput, MIN_DEPTH_ALPHA};

pub const RATIO_EPS: f64 = 1e-8;

/// Base weight `w_init (1 - alpha t / T)`.
pub fn base_weight(w_init: f64, alpha: f64, t: usize, total: usize) -> Result<f64> {
    if t > total || total == 0 {
        return Err(Error::Precondition(format!(
            "iteration {t} outside [0, {total}]"
        )));
    }
    Ok(w_init * (1.0 - alpha * t as f64 / total as f64))
}

/// `L_rgb / (L_depth + 1e-8)`.
pub fn loss_ratio(l_rgb: f64, l_depth: f64) -> f64 {
    l_rgb / (l_depth + RATIO_EPS)
}

/// `1 + beta tanh(r - 1)`.
pub fn modulation(r: f64, beta: f64) -> f64 {
    1.0 + beta * (r - 1.0).tanh()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub w_init: f64,
    pub w_final: f64,
    /// Attenuation amplitude of the base weight.
    pub alpha: f64,
    /// Modulation gain.
    pub beta: f64,
    /// EMA factor applied to the loss ratio; `None` uses the raw ratio.
    pub ratio_smoothing: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            w_init: 0.5,
            w_final: 0.1,
            alpha: 0.5,
            beta: 0.5,
            ratio_smoothing: Some(0.9),
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        if !(self.w_init > 0.0 && self.w_final > 0.0) {
            return bad("schedule weights must be positive".into());
        }
        if self.w_final > 2.0 * self.w_init {
            return bad(format!(
                "w_final {} exceeds the upper clip 2*w_init = {}",
                self.w_final,
                2.0 * self.w_init
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0,1]", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta {} outside (0,1]", self.beta));
        }
        if let Some(s) = self.ratio_smoothing {
            if !(0.0..1.0).contains(&s) {
                return bad(format!("ratio smoothing {s} outside [0,1)"));
            }
        }
        Ok(())
    }
}

/// Live state of the depth-weight schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveWeightState {
    pub config: ScheduleConfig,
    pub total_iters: usize,
    pub last_lambda: f64,
    smoothed_ratio: Option<f64>,
}

impl AdaptiveWeightState {
    pub fn new(config: ScheduleConfig, total_iters: usize) -> Result<Self> {
        config.validate()?;
        if total_iters == 0 {
            return Err(Error::Precondition("total iterations must be positive".into()));
        }
        Ok(Self {
            config,
            total_iters,
            last_lambda: config.w_init.clamp(config.w_final, 2.0 * config.w_init),
            smoothed_ratio: None,
        })
    }

    pub fn w_min(&self) -> f64 {
        self.config.w_final
    }

    pub fn w_max(&self) -> f64 {
        2.0 * self.config.w_init
    }

    pub fn base_weight(&self, t: usize) -> Result<f64> {
        base_weight(self.config.w_init, self.config.alpha, t, self.total_iters)
    }

    /// Weight before clipping, without touching the state.
    pub fn unclipped(&self, t: usize, ratio: f64) -> Result<f64> {
        Ok(self.base_weight(t)? * modulation(ratio, self.config.beta))
    }

    /// Depth weight for iteration `t`; updates `last_lambda`.
    pub fn lambda_depth(&mut self, t: usize, l_rgb: f64, l_depth: f64) -> Result<f64> {
        if !(l_rgb >= 0.0 && l_depth >= 0.0) {
            return Err(Error::Precondition(format!(
                "losses must be non-negative, got ({l_rgb}, {l_depth})"
            )));
        }
        let raw = loss_ratio(l_rgb, l_depth);
        let ratio = match (self.config.ratio_smoothing, self.smoothed_ratio) {
            (Some(k), Some(prev)) => k * prev + (1.0 - k) * raw,
            _ => raw,
        };
        let lambda = self.unclipped(t, ratio)?.max(self.w_min()).min(self.w_max());
        self.smoothed_ratio = Some(ratio);
        self.last_lambda = lambda;
        Ok(lambda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    L1,
    L2,
}

impl LossKind {
    fn value_and_slope(self, err: f64) -> (f64, f64) {
        match self {
            LossKind::L1 => (err.abs(), if err > 0.0 { 1.0 } else if err < 0.0 { -1.0 } else { 0.0 }),
            LossKind::L2 => (err * err, 2.0 * err),
        }
    }
}

/// Loss values for one rendered frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub rgb: f64,
    pub depth: f64,
    pub depth_pixels: usize,
    /// Set when no pixel had both rendered and observed depth.
    pub no_valid_depth: bool,
}

/// Loss plus its gradient with respect to the rendered color and depth.
#[derive(Debug, Clone)]
pub struct LossWithGrad {
    pub terms: LossTerms,
    pub grad_color: Array3<f64>,
    pub grad_depth: Array2<f64>,
}

/// `L = L_rgb + lambda L_depth` with per-pixel means. Color covers every
/// pixel; depth covers pixels with rendered coverage and finite observed
/// depth.
pub fn total_loss(rendered: &RenderOutput, frame: &Frame, lambda: f64, kind: LossKind) -> Result<LossWithGrad> {
    if rendered.color.dim() != frame.rgb.dim() {
        return Err(Error::ShapeMismatch(format!(
            "render {:?} vs frame {:?}",
            rendered.color.dim(),
            frame.rgb.dim()
        )));
    }
    let n_color = rendered.color.len() as f64;
    let mut rgb = 0.0;
    let mut grad_color = Array3::zeros(rendered.color.dim());
    Zip::from(&mut grad_color)
        .and(&rendered.color)
        .and(&frame.rgb)
        .for_each(|g, &r, &f| {
            let (v, s) = kind.value_and_slope(r - f);
            rgb += v;
            *g = s / n_color;
        });
    rgb /= n_color;

    let valid = |r: f64, a: f64, f: f64| r.is_finite() && a >= MIN_DEPTH_ALPHA && f.is_finite();
    let mut depth_pixels = 0usize;
    Zip::from(&rendered.depth)
        .and(&rendered.alpha)
        .and(&frame.depth)
        .for_each(|&r, &a, &f| {
            if valid(r, a, f) {
                depth_pixels += 1;
            }
        });
    let mut depth = 0.0;
    let mut grad_depth = Array2::zeros(rendered.depth.dim());
    if depth_pixels > 0 {
        let n = depth_pixels as f64;
        Zip::from(&mut grad_depth)
            .and(&rendered.depth)
            .and(&rendered.alpha)
            .and(&frame.depth)
            .for_each(|g, &r, &a, &f| {
                if valid(r, a, f) {
                    let (v, s) = kind.value_and_slope(r - f);
                    depth += v;
                    *g = lambda * s / n;
                }
            });
        depth /= n;
    }
    Ok(LossWithGrad {
        terms: LossTerms {
            total: rgb + lambda * depth,
            rgb,
            depth,
            depth_pixels,
            no_valid_depth: depth_pixels == 0,
        },
        grad_color,
        grad_depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state(t_total: usize) -> AdaptiveWeightState {
        AdaptiveWeightState::new(
            ScheduleConfig {
                ratio_smoothing: None,
                ..ScheduleConfig::default()
            },
            t_total,
        )
        .unwrap()
    }

    #[test]
    fn base_weight_examples() {
        assert_eq!(base_weight(0.7, 0.5, 0, 100).unwrap(), 0.7);
        assert_eq!(base_weight(0.7, 0.5, 100, 100).unwrap(), 0.35);
        assert_eq!(base_weight(1.0, 0.5, 50, 100).unwrap(), 0.75);
        assert!(base_weight(1.0, 0.5, 101, 100).is_err());
    }

    #[test]
    fn ratio_examples() {
        assert!((loss_ratio(0.1, 0.1) - 1.0).abs() < 1e-6);
        assert!((loss_ratio(0.2, 0.1) - 2.0).abs() < 1e-6);
        assert!((loss_ratio(1.0, 0.0) - 1e8).abs() < 1e-6);
    }

    #[test]
    fn modulation_examples() {
        assert_eq!(modulation(1.0, 0.3), 1.0);
        assert_eq!(modulation(1e6, 0.5), 1.5);
        assert!((modulation(2.0, 0.5) - 1.38080).abs() < 1e-5);
    }

    #[test]
    fn lambda_examples() {
        let mut s = state(100);
        assert!((s.lambda_depth(0, 0.3, 0.3).unwrap() - 0.5).abs() < 1e-6);
        // Upper clip.
        let mut s = AdaptiveWeightState::new(
            ScheduleConfig {
                w_init: 0.5,
                beta: 1.0,
                ratio_smoothing: None,
                ..ScheduleConfig::default()
            },
            100,
        )
        .unwrap();
        s.config.alpha = 0.0;
        // base 0.5 * (1 + tanh(big)) = 1.0 = 2 w_init exactly at saturation.
        assert_eq!(s.lambda_depth(0, 1e9, 0.0).unwrap(), 1.0);
        let mut s = state(100);
        let l = s.lambda_depth(100, 3.0, 1.0).unwrap();
        let expected = 0.25 * (1.0 + 0.5 * 2.0f64.tanh());
        assert!((l - expected).abs() < 1e-9, "{l}");
        assert!((l - 0.37050).abs() < 1e-5);
        assert_eq!(s.last_lambda, l);
        // Full-gain modulation at the same point.
        let mut s = state(100);
        s.config.beta = 1.0;
        assert!((s.lambda_depth(100, 3.0, 1.0).unwrap() - 0.49101).abs() < 1e-5);
    }

    #[test]
    fn smoothing_damps_ratio_jumps() {
        let mut smooth = AdaptiveWeightState::new(ScheduleConfig::default(), 100).unwrap();
        let mut raw = state(100);
        smooth.lambda_depth(0, 0.1, 0.1).unwrap();
        raw.lambda_depth(0, 0.1, 0.1).unwrap();
        let a = smooth.lambda_depth(1, 0.3, 0.1).unwrap();
        let b = raw.lambda_depth(1, 0.3, 0.1).unwrap();
        assert!(a < b);
    }

    #[test]
    fn rejects_inverted_clip_range() {
        let cfg = ScheduleConfig {
            w_init: 0.1,
            w_final: 0.5,
            ..ScheduleConfig::default()
        };
        assert!(AdaptiveWeightState::new(cfg, 10).is_err());
    }

    fn frame_from(rgb: Array3<f64>, depth: Array2<f64>) -> Frame {
        let (h, w, _) = rgb.dim();
        Frame::new(rgb, depth, Array2::from_elem((h, w), false), 0.0).unwrap()
    }

    #[test]
    fn total_loss_examples() {
        let rgb = Array3::from_elem((2, 2, 3), 0.5);
        let depth = Array2::from_elem((2, 2), 3.0);
        let rendered = RenderOutput {
            color: rgb.clone(),
            depth: depth.clone(),
            alpha: Array2::ones((2, 2)),
        };
        let frame = frame_from(rgb.clone(), depth.clone());
        let l = total_loss(&rendered, &frame, 0.5, LossKind::L1).unwrap().terms;
        assert_eq!((l.total, l.rgb, l.depth), (0.0, 0.0, 0.0));

        let shifted = RenderOutput {
            color: rgb.mapv(|v| v + 0.1),
            depth: depth.clone(),
            alpha: Array2::zeros((2, 2)),
        };
        let l = total_loss(&shifted, &frame, 0.5, LossKind::L1).unwrap().terms;
        assert!((l.total - 0.1).abs() < 1e-12);
        assert!(l.no_valid_depth);

        let mut color = rgb.clone();
        for c in 0..3 {
            color[[0, 1, c]] += 0.2;
            color[[1, 0, c]] -= 0.2;
        }
        let toy = RenderOutput {
            color,
            depth: depth.mapv(|d| d + 1.0),
            alpha: Array2::ones((2, 2)),
        };
        let l = total_loss(&toy, &frame, 0.5, LossKind::L1).unwrap().terms;
        assert!((l.total - 0.6).abs() < 1e-12);
        assert_eq!(l.depth_pixels, 4);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let frame = frame_from(
            Array3::from_shape_fn((3, 3, 3), |(y, x, c)| (y * 9 + x * 3 + c) as f64 / 27.0),
            Array2::from_shape_fn((3, 3), |(y, x)| if x == 1 && y == 1 { f64::NAN } else { 2.0 + x as f64 }),
        );
        let rendered = RenderOutput {
            color: Array3::from_shape_fn((3, 3, 3), |(y, x, c)| ((y + 2 * x + c) % 4) as f64 / 4.0 + 0.01),
            depth: Array2::from_shape_fn((3, 3), |(y, x)| 2.3 + 0.1 * y as f64 - 0.2 * x as f64),
            alpha: Array2::ones((3, 3)),
        };
        for kind in [LossKind::L1, LossKind::L2] {
            let base = total_loss(&rendered, &frame, 0.4, kind).unwrap();
            let h = 1e-6;
            for idx in [[0, 0, 0], [2, 1, 2], [1, 2, 1]] {
                let mut p = rendered.clone();
                p.color[idx] += h;
                let mut m = rendered.clone();
                m.color[idx] -= h;
                let fd = (total_loss(&p, &frame, 0.4, kind).unwrap().terms.total
                    - total_loss(&m, &frame, 0.4, kind).unwrap().terms.total)
                    / (2.0 * h);
                assert!((fd - base.grad_color[idx]).abs() < 1e-6);
            }
            for idx in [[0, 0], [2, 2], [0, 2]] {
                let mut p = rendered.clone();
                p.depth[idx] += h;
                let mut m = rendered.clone();
                m.depth[idx] -= h;
                let fd = (total_loss(&p, &frame, 0.4, kind).unwrap().terms.total
                    - total_loss(&m, &frame, 0.4, kind).unwrap().terms.total)
                    / (2.0 * h);
                assert!((fd - base.grad_depth[idx]).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn lambda_stays_in_clip_range(
            t in 0usize..=1000,
            l_rgb in 0.0f64..10.0,
            l_depth in 0.0f64..10.0,
            w_init in 0.01f64..2.0,
            frac in 0.01f64..1.0,
            beta in 0.01f64..=1.0,
        ) {
            let cfg = ScheduleConfig { w_init, w_final: frac * w_init, alpha: 0.5, beta, ratio_smoothing: None };
            let mut s = AdaptiveWeightState::new(cfg, 1000).unwrap();
            let l = s.lambda_depth(t, l_rgb, l_depth).unwrap();
            prop_assert!(l >= s.w_min() && l <= s.w_max());
        }

        #[test]
        fn unclipped_is_monotone_in_losses(
            t in 0usize..=100,
            l_rgb in 0.0f64..5.0,
            l_depth in 0.0f64..5.0,
            bump in 0.0f64..1.0,
        ) {
            let s = state(100);
            let w = |a: f64, b: f64| s.unclipped(t, loss_ratio(a, b)).unwrap();
            prop_assert!(w(l_rgb + bump, l_depth) >= w(l_rgb, l_depth));
            prop_assert!(w(l_rgb, l_depth + bump) <= w(l_rgb, l_depth));
        }
    }

    #[test]
    fn equal_losses_decay_linearly_to_floor() {
        let cfg = ScheduleConfig { w_init: 0.5, w_final: 0.3, alpha: 0.5, beta: 0.5, ratio_smoothing: None };
        let mut s = AdaptiveWeightState::new(cfg, 100).unwrap();
        let mut prev = f64::INFINITY;
        for t in 0..=100 {
            let l = s.lambda_depth(t, 0.2, 0.2).unwrap();
            let expected = (0.5 * (1.0 - 0.5 * t as f64 / 100.0) * modulation(loss_ratio(0.2, 0.2), 0.5)).max(0.3);
            assert!((l - expected).abs() < 1e-12);
            assert!(l <= prev);
            prev = l;
        }
        assert_eq!(prev, 0.3);
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let c: ScheduleConfig = serde_json::from_str(r#"{"w_init": 0.4}"#).unwrap();
        assert_eq!(c.w_init, 0.4);
        assert_eq!(c.ratio_smoothing, ScheduleConfig::default().ratio_smoothing);
        assert!(serde_json::from_str::<ScheduleConfig>(r#"{"gamma": 1.0}"#).is_err());
    }
}
