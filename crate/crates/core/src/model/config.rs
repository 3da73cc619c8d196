use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Switches and sizes that determine the network graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Temporal window length; odd.
    pub n: usize,
    /// Input (height, width); both divisible by 4.
    pub input_hw: (usize, usize),
    /// Multiplier on every filter count, rounded to a multiple of 4.
    pub base_filters_scale: f64,
    pub use_low_level_conv3d: bool,
    pub use_fusion: bool,
    pub use_batch_norm: bool,
    pub dropout_rate: f64,
    pub freeze_vgg: bool,
    /// Seed of the weight initializer.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n: 5,
            input_hw: (240, 320),
            base_filters_scale: 1.0,
            use_low_level_conv3d: true,
            use_fusion: true,
            use_batch_norm: true,
            dropout_rate: 0.3,
            freeze_vgg: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n % 2 == 0 {
            return Err(Error::Config(format!("n must be odd and >= 1, got {}", self.n)));
        }
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "input height and width must be positive multiples of 4, got {h}x{w}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.base_filters_scale > 0.0 && self.base_filters_scale.is_finite()) {
            return Err(Error::Config(format!(
                "base_filters_scale must be positive, got {}",
                self.base_filters_scale
            )));
        }
        Ok(())
    }

    /// Scaled filter count for a layer declared with `base` filters.
    pub fn filters(&self, base: usize) -> usize {
        if self.base_filters_scale == 1.0 {
            return base;
        }
        let scaled = (base as f64 * self.base_filters_scale / 4.0).round() as usize * 4;
        scaled.max(4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoLowLevelConv3d,
    NoFusion,
    NoBatchNorm,
    NOverride(usize),
}

/// Derive an ablation variant from a base configuration.
pub fn make_ablation(config: &ModelConfig, variant: Ablation) -> Result<ModelConfig> {
    config.validate()?;
    let mut out = config.clone();
    match variant {
        Ablation::NoLowLevelConv3d => out.use_low_level_conv3d = false,
        Ablation::NoFusion => out.use_fusion = false,
        Ablation::NoBatchNorm => out.use_batch_norm = false,
        Ablation::NOverride(k) => {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("window length must be odd, got {k}")));
            }
            out.n = k;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        for bad in [
            ModelConfig {
                n: 4,
                ..Default::default()
            },
            ModelConfig {
                input_hw: (242, 320),
                ..Default::default()
            },
            ModelConfig {
                dropout_rate: 1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn filter_scaling_rounds_to_multiples_of_four() {
        let c = ModelConfig {
            base_filters_scale: 0.25,
            ..Default::default()
        };
        assert_eq!(c.filters(64), 16);
        assert_eq!(c.filters(512), 128);
        let c = ModelConfig {
            base_filters_scale: 0.1,
            ..Default::default()
        };
        assert_eq!(c.filters(64), 8);
        assert_eq!(c.filters(1), 4);
        assert_eq!(ModelConfig::default().filters(1), 1);
    }

    #[test]
    fn ablations() {
        let base = ModelConfig::default();
        assert_eq!(make_ablation(&base, Ablation::NOverride(3)).unwrap().n, 3);
        assert!(make_ablation(&base, Ablation::NOverride(4)).is_err());
        assert!(!make_ablation(&base, Ablation::NoFusion).unwrap().use_fusion);
        assert!(!make_ablation(&base, Ablation::NoLowLevelConv3d).unwrap().use_low_level_conv3d);
    }

    #[test]
    fn serde_round_trip() {
        let c = ModelConfig {
            base_filters_scale: 0.25,
            input_hw: (64, 64),
            ..Default::default()
        };
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
