//! Scenes, frame blocks and the development/evaluation split.

pub mod io;
pub mod synthetic;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::LabelMask;
use crate::nn::{Shape, Tensor};

pub use io::{load_scene, write_scene, SceneLayout};
pub use synthetic::{generate_synthetic_scene, CameraMotion, ShapeMix, SyntheticConfig, SyntheticScene};

/// An RGB frame with values in `[0, 1]`, stored height x width x 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "frame buffer has {} values, expected {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Luma in `[0, 1]` (ITU-R BT.601 weights).
    pub fn to_gray(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        Self::new(height, width, rgb.iter().map(|&v| v as f32 / 255.0).collect())
    }
}

/// A sequence of frames with one label mask per frame.
#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub category: String,
    pub frames: Vec<Arc<Frame>>,
    pub gt: Vec<Arc<LabelMask>>,
    /// Dataset index of the first frame (1 for CDNet numbering).
    pub first_index: usize,
}

impl Scene {
    pub fn new(
        name: impl Into<String>,
        category: impl Into<String>,
        frames: Vec<Frame>,
        gt: Vec<LabelMask>,
    ) -> Result<Self> {
        let scene = Self {
            name: name.into(),
            category: category.into(),
            frames: frames.into_iter().map(Arc::new).collect(),
            gt: gt.into_iter().map(Arc::new).collect(),
            first_index: 1,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// (height, width) of the scene's frames.
    pub fn size(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.height(), f.width()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.gt.len() {
            return Err(Error::Shape(format!(
                "scene {} has {} frames but {} masks",
                self.name,
                self.frames.len(),
                self.gt.len()
            )));
        }
        if let Some((h, w)) = self.size() {
            for (t, (f, g)) in self.frames.iter().zip(&self.gt).enumerate() {
                if (f.height(), f.width()) != (h, w) || (g.height(), g.width()) != (h, w) {
                    return Err(Error::Shape(format!(
                        "scene {} frame {t} is not {h}x{w}",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A window of `n` consecutive frames and the mask of its center frame.
#[derive(Debug, Clone)]
pub struct FrameBlock {
    pub frames: Vec<Arc<Frame>>,
    pub target_gt: Arc<LabelMask>,
    /// Scene time step of the center frame (0-based).
    pub target_index: usize,
    pub n: usize,
}

impl FrameBlock {
    pub fn center(&self) -> &Frame {
        &self.frames[self.n / 2]
    }
}

/// Blocks in a fixed order with their paired masks.
#[derive(Debug, Clone, Default)]
pub struct BlockTensor {
    pub blocks: Vec<FrameBlock>,
}

impl BlockTensor {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn extend(&mut self, other: BlockTensor) {
        self.blocks.extend(other.blocks);
    }
}

fn check_window(scene: &Scene, n: usize) -> Result<()> {
    if n == 0 || n % 2 == 0 {
        return Err(Error::Config(format!("window length must be odd, got {n}")));
    }
    if scene.len() < n {
        return Err(Error::EmptyTensor {
            frames: scene.len(),
            window: n,
        });
    }
    Ok(())
}

fn block_at(scene: &Scene, start: usize, n: usize) -> FrameBlock {
    let center = start + n / 2;
    FrameBlock {
        frames: scene.frames[start..start + n].to_vec(),
        target_gt: scene.gt[center].clone(),
        target_index: center,
        n,
    }
}

/// Non-overlapping blocks covering the first `floor(N / n) * n` frames.
pub fn make_training_blocks(scene: &Scene, n: usize) -> Result<BlockTensor> {
    check_window(scene, n)?;
    Ok(BlockTensor {
        blocks: (0..scene.len() / n).map(|k| block_at(scene, k * n, n)).collect(),
    })
}

/// One block per eligible center frame, stride 1.
pub fn make_sliding_blocks(scene: &Scene, n: usize) -> Result<Vec<FrameBlock>> {
    check_window(scene, n)?;
    Ok((0..=scene.len() - n).map(|s| block_at(scene, s, n)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub development_scenes: Vec<String>,
    pub evaluation_scenes: Vec<String>,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            development_scenes: Vec::new(),
            evaluation_scenes: Vec::new(),
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in [0, 1], got {}",
                self.validation_fraction
            )));
        }
        let dev: BTreeSet<&str> = self.development_scenes.iter().map(String::as_str).collect();
        let overlap: Vec<&str> = self
            .evaluation_scenes
            .iter()
            .map(String::as_str)
            .filter(|s| dev.contains(s))
            .collect();
        if !overlap.is_empty() {
            return Err(Error::Config(format!(
                "development and evaluation scenes overlap: {}",
                overlap.join(", ")
            )));
        }
        Ok(())
    }
}

/// Seeded shuffle of the block axis followed by a train/validation cut.
pub fn shuffle_and_split(tensor: BlockTensor, spec: &SplitSpec) -> Result<(BlockTensor, BlockTensor)> {
    spec.validate()?;
    let mut blocks = tensor.blocks;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    blocks.shuffle(&mut rng);
    let n_val = (blocks.len() as f64 * spec.validation_fraction).round() as usize;
    let val = blocks.split_off(blocks.len() - n_val);
    Ok((BlockTensor { blocks }, BlockTensor { blocks: val }))
}

/// Pack blocks into a (batch, n, 3, h, w) network input.
pub fn blocks_to_tensor(blocks: &[&FrameBlock]) -> Result<Tensor> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::Shape("no blocks to pack".into()))?;
    let n = first.n;
    let (h, w) = (first.frames[0].height(), first.frames[0].width());
    let shape = Shape::new(blocks.len(), n, 3, h, w);
    let mut t = Tensor::zeros(shape);
    for (b, block) in blocks.iter().enumerate() {
        if block.n != n {
            return Err(Error::Shape("blocks of different window length".into()));
        }
        for (k, f) in block.frames.iter().enumerate() {
            if (f.height(), f.width()) != (h, w) {
                return Err(Error::Shape(format!(
                    "frame is {}x{}, batch expects {h}x{w}",
                    f.height(),
                    f.width()
                )));
            }
            let img = t.image_mut(b, k);
            for (i, px) in f.data().chunks_exact(3).enumerate() {
                img[i] = px[0];
                img[h * w + i] = px[1];
                img[2 * h * w + i] = px[2];
            }
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelspace::Label;
    use proptest::prelude::*;

    /// Scene whose frame t has every value equal to t / 1000, so frames can
    /// be identified after blocking.
    fn indexed_scene(n_frames: usize) -> Scene {
        let frames = (0..n_frames)
            .map(|t| Frame::new(2, 2, vec![t as f32 / 1000.0; 12]).unwrap())
            .collect();
        let gt = (0..n_frames)
            .map(|t| {
                let l = if t % 2 == 0 { Label::Static } else { Label::Motion };
                LabelMask::filled(2, 2, l)
            })
            .collect();
        Scene::new("s", "c", frames, gt).unwrap()
    }

    fn frame_id(f: &Frame) -> usize {
        (f.data()[0] * 1000.0).round() as usize
    }

    #[test]
    fn training_block_examples() {
        let b = make_training_blocks(&indexed_scene(17), 5).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(frame_id(b.blocks[2].frames.last().unwrap()), 14);
        let b = make_training_blocks(&indexed_scene(5), 5).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.blocks[0].target_index, 2);
        assert!(matches!(
            make_training_blocks(&indexed_scene(4), 5),
            Err(Error::EmptyTensor { frames: 4, window: 5 })
        ));
    }

    #[test]
    fn sliding_block_examples() {
        let b = make_sliding_blocks(&indexed_scene(10), 5).unwrap();
        let targets: Vec<usize> = b.iter().map(|x| x.target_index).collect();
        // enumeration oracle
        let expected: Vec<usize> = (0..10).filter(|t| *t >= 2 && *t + 2 <= 9).collect();
        assert_eq!(targets, expected);
        assert_eq!(make_sliding_blocks(&indexed_scene(5), 5).unwrap().len(), 1);
        assert_eq!(make_sliding_blocks(&indexed_scene(10), 1).unwrap().len(), 10);
    }

    #[test]
    fn split_examples() {
        let spec = SplitSpec {
            seed: 7,
            ..Default::default()
        };
        let t = make_training_blocks(&indexed_scene(50), 5).unwrap();
        let (train, val) = shuffle_and_split(t.clone(), &spec).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        let (train2, _) = shuffle_and_split(t.clone(), &spec).unwrap();
        let ids = |b: &BlockTensor| b.blocks.iter().map(|x| x.target_index).collect::<Vec<_>>();
        assert_eq!(ids(&train), ids(&train2));
        let none = SplitSpec {
            validation_fraction: 0.0,
            ..spec
        };
        let (all, empty) = shuffle_and_split(t, &none).unwrap();
        assert_eq!((all.len(), empty.len()), (10, 0));
    }

    #[test]
    fn overlapping_split_is_rejected() {
        let spec = SplitSpec {
            development_scenes: vec!["a".into(), "b".into()],
            evaluation_scenes: vec!["b".into()],
            ..Default::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn packing_is_channel_first() {
        let f = Frame::new(1, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let block = FrameBlock {
            frames: vec![Arc::new(f)],
            target_gt: Arc::new(LabelMask::filled(1, 2, Label::Static)),
            target_index: 0,
            n: 1,
        };
        let t = blocks_to_tensor(&[&block]).unwrap();
        assert_eq!(t.data(), &[0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
    }

    proptest! {
        #[test]
        fn blocking_invariants(n_frames in 1usize..40, half in 0usize..4, seed in 0u64..100) {
            let n = 2 * half + 1;
            let scene = indexed_scene(n_frames);
            if n_frames < n {
                prop_assert!(make_training_blocks(&scene, n).is_err());
                return Ok(());
            }
            let t = make_training_blocks(&scene, n).unwrap();
            let concat: Vec<usize> = t.blocks.iter().flat_map(|b| b.frames.iter().map(|f| frame_id(f))).collect();
            prop_assert_eq!(concat, (0..(n_frames / n) * n).collect::<Vec<_>>());
            for b in &t.blocks {
                prop_assert_eq!(frame_id(b.center()), b.target_index);
                prop_assert!(Arc::ptr_eq(&b.target_gt, &scene.gt[b.target_index]));
            }
            let sliding = make_sliding_blocks(&scene, n).unwrap();
            let targets: Vec<usize> = sliding.iter().map(|b| b.target_index).collect();
            prop_assert_eq!(targets, (half..n_frames - half).collect::<Vec<_>>());
            let spec = SplitSpec { seed, ..Default::default() };
            let (a, b) = shuffle_and_split(t.clone(), &spec).unwrap();
            let mut ids: Vec<usize> = a.blocks.iter().chain(&b.blocks).map(|x| x.target_index).collect();
            ids.sort();
            let mut orig: Vec<usize> = t.blocks.iter().map(|x| x.target_index).collect();
            orig.sort();
            prop_assert_eq!(ids, orig);
            for x in a.blocks.iter().chain(&b.blocks) {
                prop_assert!(Arc::ptr_eq(&x.target_gt, &scene.gt[x.target_index]));
            }
        }
    }
}
