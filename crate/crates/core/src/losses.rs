//! Ignore-aware pixel losses and the decoder kernel penalty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::{Label, LabelMask};
use crate::postprocess::ProbabilityMotionMask;

/// Lower clamp on p_t so the logarithm stays finite.
pub const P_T_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    #[default]
    Focal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LogBase {
    #[default]
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "e")]
    E,
}

impl LogBase {
    pub fn ln(self) -> f64 {
        match self {
            LogBase::Two => std::f64::consts::LN_2,
            LogBase::E => 1.0,
        }
    }

    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Two => x.log2(),
            LogBase::E => x.ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma: f64,
    pub alpha: f64,
    pub log_base: LogBase,
    pub l2_factor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Focal,
            gamma: 2.0,
            alpha: 0.25,
            log_base: LogBase::Two,
            l2_factor: 0.0005,
        }
    }
}

impl LossConfig {
    pub fn bce() -> Self {
        Self {
            kind: LossKind::Bce,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.l2_factor >= 0.0) {
            return Err(Error::Config(format!(
                "l2_factor must be >= 0, got {}",
                self.l2_factor
            )));
        }
        Ok(())
    }

    /// Effective (gamma, alpha): cross-entropy is the focal loss with
    /// gamma 0 and alpha 1.
    fn focal_params(&self) -> (f64, f64) {
        match self.kind {
            LossKind::Bce => (0.0, 1.0),
            LossKind::Focal => (self.gamma, self.alpha),
        }
    }

    /// Loss of one pixel.
    pub fn pixel_loss(&self, p1: f64, label: Label) -> f64 {
        let (g, a) = self.focal_params();
        focal_term(p_t(p1, label), g, a, self.log_base)
    }

    /// Derivative of [`pixel_loss`](Self::pixel_loss) with respect to p1.
    pub fn pixel_grad(&self, p1: f64, label: Label) -> f64 {
        let (g, a) = self.focal_params();
        let raw = p_t(p1, label);
        if raw < P_T_EPSILON {
            // clamped region is flat
            return 0.0;
        }
        let dpt = focal_grad_pt(raw.min(1.0), g, a, self.log_base);
        match label {
            Label::Motion => dpt,
            _ => -dpt,
        }
    }

    /// Mean loss over the retained pairs; zero with a warning when empty.
    pub fn mean_loss(&self, pairs: &[Pair]) -> f64 {
        if pairs.is_empty() {
            log::warn!("loss over an empty pixel set; contributing zero");
            return 0.0;
        }
        pairs.iter().map(|p| self.pixel_loss(p.p1, p.label)).sum::<f64>() / pairs.len() as f64
    }
}

/// A retained (non-ignore) pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub p1: f64,
    pub label: Label,
}

/// Drop every pixel whose ground truth is ignore.
pub fn filter_ignore(pred: &ProbabilityMotionMask, gt: &LabelMask) -> Result<Vec<Pair>> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(pred
        .values()
        .iter()
        .zip(gt.labels())
        .filter(|(_, &l)| l != Label::Ignore)
        .map(|(&p, &label)| Pair {
            p1: p as f64,
            label,
        })
        .collect())
}

/// Probability assigned to the true class.
pub fn p_t(p1: f64, label: Label) -> f64 {
    match label {
        Label::Motion => p1,
        _ => 1.0 - p1,
    }
}

fn clamp_pt(pt: f64) -> f64 {
    pt.clamp(P_T_EPSILON, 1.0)
}

fn focal_term(pt: f64, gamma: f64, alpha: f64, base: LogBase) -> f64 {
    let pt = clamp_pt(pt);
    let w = if gamma == 0.0 { 1.0 } else { (1.0 - pt).powf(gamma) };
    -alpha * w * base.log(pt)
}

fn focal_grad_pt(pt: f64, gamma: f64, alpha: f64, base: LogBase) -> f64 {
    let q = 1.0 - pt;
    if q <= 0.0 {
        return if gamma == 0.0 { -alpha / base.ln() } else { 0.0 };
    }
    let w = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let dw = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
    alpha * (dw * base.log(pt) - w / (pt * base.ln()))
}

/// Mean binary cross-entropy.
pub fn bce(pairs: &[Pair], base: LogBase) -> f64 {
    LossConfig {
        kind: LossKind::Bce,
        log_base: base,
        ..LossConfig::default()
    }
    .mean_loss(pairs)
}

/// Mean focal loss.
pub fn focal(pairs: &[Pair], gamma: f64, alpha: f64, base: LogBase) -> f64 {
    LossConfig {
        kind: LossKind::Focal,
        gamma,
        alpha,
        log_base: base,
        ..LossConfig::default()
    }
    .mean_loss(pairs)
}

/// `factor * sum(w^2)` over the given flagged kernels.
pub fn l2_penalty<'a>(kernels: impl IntoIterator<Item = &'a [f32]>, factor: f64) -> f64 {
    factor
        * kernels
            .into_iter()
            .flat_map(|k| k.iter())
            .map(|&w| (w as f64) * (w as f64))
            .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(p1: f64, label: Label) -> Pair {
        Pair { p1, label }
    }

    #[test]
    fn filter_examples() {
        let gt = LabelMask::new(1, 3, vec![Label::Motion, Label::Ignore, Label::Static]).unwrap();
        let pred = ProbabilityMotionMask::new(1, 3, vec![0.9, 0.8, 0.1]).unwrap();
        let pairs = filter_ignore(&pred, &gt).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].label, Label::Motion);
        assert!((pairs[0].p1 - 0.9).abs() < 1e-6);
        assert_eq!(pairs[1].label, Label::Static);
        let all_ignore = LabelMask::filled(1, 3, Label::Ignore);
        assert!(filter_ignore(&pred, &all_ignore).unwrap().is_empty());
        assert!(filter_ignore(&pred, &LabelMask::filled(1, 2, Label::Static)).is_err());
    }

    #[test]
    fn p_t_examples() {
        assert_eq!(p_t(0.9, Label::Motion), 0.9);
        assert!((p_t(0.9, Label::Static) - 0.1).abs() < 1e-15);
        assert_eq!(p_t(0.5, Label::Motion), p_t(0.5, Label::Static));
    }

    #[test]
    fn bce_examples() {
        assert_eq!(bce(&[pair(1.0, Label::Motion)], LogBase::Two), 0.0);
        assert_eq!(bce(&[pair(0.5, Label::Motion)], LogBase::Two), 1.0);
        assert_eq!(
            bce(&[pair(0.5, Label::Motion), pair(0.0, Label::Static)], LogBase::Two),
            0.5
        );
        assert_eq!(bce(&[], LogBase::Two), 0.0);
    }

    #[test]
    fn focal_examples() {
        assert_eq!(focal(&[pair(0.5, Label::Static)], 2.0, 0.25, LogBase::Two), 0.0625);
        assert_eq!(focal(&[pair(1.0, Label::Motion)], 3.0, 0.7, LogBase::E), 0.0);
        // base e differs from base 2 by a factor ln 2
        let b2 = focal(&[pair(0.3, Label::Motion)], 2.0, 0.25, LogBase::Two);
        let be = focal(&[pair(0.3, Label::Motion)], 2.0, 0.25, LogBase::E);
        assert!((be - b2 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_penalty([[0.0f32, 0.0].as_slice()], 0.0005), 0.0);
        assert!((l2_penalty([[3.0f32, 4.0].as_slice()], 0.0005) - 0.0125).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            alpha: 1.5,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            gamma: -1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let h = 1e-5;
        for kind in [LossKind::Bce, LossKind::Focal] {
            for base in [LogBase::Two, LogBase::E] {
                let cfg = LossConfig {
                    kind,
                    log_base: base,
                    ..LossConfig::default()
                };
                for i in 1..=9 {
                    let p = i as f64 / 10.0;
                    for label in [Label::Motion, Label::Static] {
                        let fd = (cfg.pixel_loss(p + h, label) - cfg.pixel_loss(p - h, label)) / (2.0 * h);
                        let an = cfg.pixel_grad(p, label);
                        assert!((fd - an).abs() / an.abs().max(1e-12) < 1e-4, "{kind:?} {p} {label:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_at_certainty() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.pixel_grad(1.0, Label::Motion), 0.0);
        let b = LossConfig::bce();
        assert!((b.pixel_grad(1.0, Label::Motion) + 1.0 / std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(cfg.pixel_grad(0.0, Label::Motion), 0.0);
    }

    proptest! {
        #[test]
        fn focal_reduces_to_bce(p in 0.0f64..=1.0, motion in any::<bool>()) {
            let l = if motion { Label::Motion } else { Label::Static };
            let pairs = [pair(p, l)];
            prop_assert!((focal(&pairs, 0.0, 1.0, LogBase::Two) - bce(&pairs, LogBase::Two)).abs() <= 1e-12);
        }

        #[test]
        fn losses_are_nonnegative_and_decreasing(a in 1e-6f64..1.0, b in 1e-6f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(hi - lo > 1e-9);
            for cfg in [LossConfig::bce(), LossConfig::default()] {
                let l_lo = cfg.pixel_loss(lo, Label::Motion);
                let l_hi = cfg.pixel_loss(hi, Label::Motion);
                prop_assert!(l_hi >= 0.0);
                prop_assert!(l_hi < l_lo);
            }
        }
    }
}
