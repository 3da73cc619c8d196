//! Aligning the frames of a block onto its center frame.

pub mod homography;
pub mod orb;
pub mod warp;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datasets::{Frame, FrameBlock};
use crate::error::Result;
use crate::labelspace::{Label, LabelMask};

pub use homography::{estimate_homography, fit_dlt, Correspondence, Homography, RansacConfig};
pub use orb::{detect, detect_and_match, match_features, Features, Keypoint};
pub use warp::{warp, Warped};

/// What replaces warped-frame pixels that have no source preimage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    /// Copy the center frame's pixel, so the hole looks static.
    #[default]
    Target,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub max_keypoints: usize,
    pub keep_fraction: f64,
    /// FAST intensity threshold on the 0..255 scale.
    pub fast_threshold: f32,
    pub pyramid_levels: usize,
    pub scale_factor: f64,
    pub patch_size: usize,
    pub cross_check: bool,
    pub ransac: RansacConfig,
    pub fill: FillPolicy,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            max_keypoints: 5000,
            keep_fraction: 0.10,
            fast_threshold: 20.0,
            pyramid_levels: 4,
            scale_factor: 1.2,
            patch_size: 31,
            cross_check: true,
            ransac: RansacConfig::default(),
            fill: FillPolicy::Target,
        }
    }
}

/// A block after alignment. `target_gt` carries IGNORE wherever some frame
/// of the block had no valid preimage.
#[derive(Debug, Clone)]
pub struct AlignedBlock {
    pub frames: Vec<Arc<Frame>>,
    pub validity: Vec<Vec<bool>>,
    /// Source-to-center homography per frame (identity for the center and
    /// for frames that fell back).
    pub homographies: Vec<Homography>,
    pub fell_back: Vec<bool>,
    pub target_gt: Arc<LabelMask>,
    pub target_index: usize,
    pub n: usize,
}

impl AlignedBlock {
    pub fn into_frame_block(self) -> FrameBlock {
        FrameBlock {
            frames: self.frames,
            target_gt: self.target_gt,
            target_index: self.target_index,
            n: self.n,
        }
    }
}

fn estimate_onto(
    source: &Frame,
    target: &Frame,
    target_features: &Features,
    config: &AlignConfig,
) -> Result<Homography> {
    orb::check_pair(source, target)?;
    let src = orb::detect(source, config);
    let pairs = orb::matched(&src, target_features, config)?;
    estimate_homography(&pairs, &config.ransac)
}

/// Warp every non-center frame onto the center frame. A frame whose
/// features or homography cannot be estimated is passed through unchanged.
pub fn align_block(block: &FrameBlock, config: &AlignConfig) -> AlignedBlock {
    let c = block.n / 2;
    let center = block.frames[c].clone();
    let (h, w) = (center.height(), center.width());
    let target_features = orb::detect(&center, config);
    let mut frames = Vec::with_capacity(block.n);
    let mut validity = Vec::with_capacity(block.n);
    let mut homographies = Vec::with_capacity(block.n);
    let mut fell_back = Vec::with_capacity(block.n);
    for (k, f) in block.frames.iter().enumerate() {
        if k == c {
            frames.push(center.clone());
            validity.push(vec![true; h * w]);
            homographies.push(Homography::identity());
            fell_back.push(false);
            continue;
        }
        let warped = estimate_onto(f, &center, &target_features, config)
            .and_then(|hm| Ok((hm, warp::warp(f, None, &hm)?)));
        match warped {
            Ok((hm, mut wp)) => {
                if config.fill == FillPolicy::Target {
                    let dst = wp.frame.data_mut();
                    for (i, ok) in wp.validity.iter().enumerate() {
                        if !ok {
                            dst[i * 3..i * 3 + 3].copy_from_slice(&center.data()[i * 3..i * 3 + 3]);
                        }
                    }
                }
                frames.push(Arc::new(wp.frame));
                validity.push(wp.validity);
                homographies.push(hm);
                fell_back.push(false);
            }
            Err(e) => {
                log::warn!(
                    "frame {} of block at t={} passed through unaligned: {e}",
                    k,
                    block.target_index
                );
                frames.push(f.clone());
                validity.push(vec![true; h * w]);
                homographies.push(Homography::identity());
                fell_back.push(true);
            }
        }
    }
    let any_invalid = (0..h * w).any(|i| validity.iter().any(|v| !v[i]));
    let target_gt = if any_invalid {
        let mut gt = (*block.target_gt).clone();
        for (i, l) in gt.labels_mut().iter_mut().enumerate() {
            if validity.iter().any(|v| !v[i]) {
                *l = Label::Ignore;
            }
        }
        Arc::new(gt)
    } else {
        block.target_gt.clone()
    };
    AlignedBlock {
        frames,
        validity,
        homographies,
        fell_back,
        target_gt,
        target_index: block.target_index,
        n: block.n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::orb::test_texture;

    fn block_of(frames: Vec<Frame>) -> FrameBlock {
        let (h, w) = (frames[0].height(), frames[0].width());
        let n = frames.len();
        FrameBlock {
            frames: frames.into_iter().map(Arc::new).collect(),
            target_gt: Arc::new(LabelMask::filled(h, w, Label::Static)),
            target_index: n / 2,
            n,
        }
    }

    #[test]
    fn static_block_is_unchanged() {
        let f = test_texture(96, 128, 11);
        let b = block_of(vec![f.clone(), f.clone(), f.clone()]);
        let a = align_block(&b, &AlignConfig::default());
        for hm in &a.homographies {
            assert!(hm.max_abs_diff(&Homography::identity()) < 1e-6);
        }
        assert!(Arc::ptr_eq(&a.frames[1], &b.frames[1]));
        assert!(a.fell_back.iter().all(|x| !x));
        for fr in &a.frames {
            let d = fr.data().iter().zip(f.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
            assert!(d < 1e-5);
        }
    }

    #[test]
    fn blank_frame_falls_back() {
        let f = test_texture(96, 128, 12);
        let blank = Frame::new(96, 128, vec![0.3; 96 * 128 * 3]).unwrap();
        let b = block_of(vec![blank.clone(), f.clone(), f.clone()]);
        let a = align_block(&b, &AlignConfig::default());
        assert_eq!(a.fell_back, vec![true, false, false]);
        assert_eq!(*a.frames[0], blank);
        assert!(a.validity[0].iter().all(|v| *v));
    }

    #[test]
    fn pan_block_residual_energy_drops() {
        use crate::datasets::{generate_synthetic_scene, make_sliding_blocks, CameraMotion, SyntheticConfig};
        let s = generate_synthetic_scene(&SyntheticConfig {
            camera: CameraMotion::Pan { dx: 2.0, dy: 1.0 },
            frames: 5,
            seed: 21,
            ..Default::default()
        })
        .unwrap();
        let block = &make_sliding_blocks(&s.scene, 5).unwrap()[0];
        let a = align_block(block, &AlignConfig::default());
        assert!(a.fell_back.iter().all(|x| !x));
        for k in 0..5 {
            let truth = s.homography(k, 2);
            assert!((a.homographies[k].h(0, 2) - truth.h(0, 2)).abs() < 0.5, "{k}: {:?}", a.homographies[k]);
        }
        let bg = s.background(2);
        let energy = |frames: &[Arc<Frame>], valid: Option<&[Vec<bool>]>| {
            let c = &frames[2];
            let (mut e, mut n) = (0.0f64, 0usize);
            for (k, f) in frames.iter().enumerate() {
                for i in 0..64 * 64 {
                    if !bg[i] || !s.background(k)[i] || valid.is_some_and(|v| !v[k][i]) {
                        continue;
                    }
                    for ch in 0..3 {
                        e += ((f.data()[i * 3 + ch] - c.data()[i * 3 + ch]) as f64).powi(2);
                    }
                    n += 1;
                }
            }
            e / n as f64
        };
        let before = energy(&block.frames, None);
        let after = energy(&a.frames, Some(&a.validity));
        assert!(after < 0.1 * before, "before {before}, after {after}");
    }
}
