//! Scene-level prediction: sliding windows, optional alignment, smoothing
//! and thresholding.

use serde::{Deserialize, Serialize};

use crate::alignment::{align_block, AlignConfig};
use crate::datasets::{make_sliding_blocks, BlockTensor, FrameBlock, Scene};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionCounts};
use crate::postprocess::{smooth, threshold, BinaryMotionMask, ProbabilityMotionMask, DEFAULT_SIGMA};
use crate::training::MotionPredictor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub smooth: bool,
    pub sigma: f64,
    pub threshold: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            smooth: true,
            sigma: DEFAULT_SIGMA,
            threshold: 0.4,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn apply(&self, p: &ProbabilityMotionMask) -> BinaryMotionMask {
        if self.smooth {
            threshold(&smooth(p, self.sigma), self.threshold)
        } else {
            threshold(p, self.threshold)
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PredictOptions {
    pub batch_size: usize,
    pub align: Option<AlignConfig>,
    pub post: PostprocessConfig,
}

#[derive(Debug, Clone)]
pub struct FramePrediction {
    /// Scene time step (0-based) of the predicted frame.
    pub target_index: usize,
    pub probability: ProbabilityMotionMask,
    pub binary: BinaryMotionMask,
}

/// Align every block of a tensor onto its center frame.
pub fn align_tensor(tensor: &BlockTensor, cfg: &AlignConfig) -> BlockTensor {
    BlockTensor {
        blocks: tensor
            .blocks
            .iter()
            .map(|b| align_block(b, cfg).into_frame_block())
            .collect(),
    }
}

/// One prediction per eligible frame of the scene.
pub fn predict_scene(
    model: &impl MotionPredictor,
    scene: &Scene,
    opts: &PredictOptions,
) -> Result<Vec<FramePrediction>> {
    opts.post.validate()?;
    let blocks = make_sliding_blocks(scene, model.window())?;
    let mut out = Vec::with_capacity(blocks.len());
    for chunk in blocks.chunks(opts.batch_size.max(1)) {
        let prepared: Vec<FrameBlock> = match &opts.align {
            Some(cfg) => chunk.iter().map(|b| align_block(b, cfg).into_frame_block()).collect(),
            None => chunk.to_vec(),
        };
        let refs: Vec<&FrameBlock> = prepared.iter().collect();
        for (p, b) in model.predict_blocks(&refs)?.into_iter().zip(chunk) {
            out.push(FramePrediction {
                target_index: b.target_index,
                binary: opts.post.apply(&p),
                probability: p,
            });
        }
    }
    Ok(out)
}

/// Pooled confusion counts of predictions against the scene's masks.
pub fn scene_counts(preds: &[FramePrediction], scene: &Scene) -> Result<ConfusionCounts> {
    preds
        .iter()
        .map(|p| {
            let gt = scene.gt.get(p.target_index).ok_or_else(|| {
                Error::Shape(format!(
                    "prediction for frame {} but scene has {}",
                    p.target_index,
                    scene.len()
                ))
            })?;
            metrics::count(&p.binary, gt)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic_scene, SyntheticConfig};
    use crate::labelspace::Label;

    struct Oracle(usize);

    impl MotionPredictor for Oracle {
        fn window(&self) -> usize {
            self.0
        }
        fn predict_blocks(&self, blocks: &[&FrameBlock]) -> Result<Vec<ProbabilityMotionMask>> {
            blocks
                .iter()
                .map(|b| {
                    let g = &b.target_gt;
                    let v = g.labels().iter().map(|l| (*l == Label::Motion) as u8 as f32).collect();
                    ProbabilityMotionMask::new(g.height(), g.width(), v)
                })
                .collect()
        }
    }

    #[test]
    fn sliding_prediction_covers_eligible_frames() {
        let s = generate_synthetic_scene(&SyntheticConfig {
            frames: 10,
            ..Default::default()
        })
        .unwrap()
        .scene;
        let opts = PredictOptions {
            batch_size: 4,
            post: PostprocessConfig {
                smooth: false,
                ..Default::default()
            },
            ..Default::default()
        };
        let p = predict_scene(&Oracle(5), &s, &opts).unwrap();
        assert_eq!(p.iter().map(|x| x.target_index).collect::<Vec<_>>(), (2..8).collect::<Vec<_>>());
        let c = scene_counts(&p, &s).unwrap();
        assert_eq!(metrics::derive(&c).f_measure, Some(1.0));
        assert_eq!(predict_scene(&Oracle(1), &s, &opts).unwrap().len(), 10);
    }
}
