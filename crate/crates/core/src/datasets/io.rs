//! Reading and writing scenes in directory layouts.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{Frame, Scene};
use crate::error::{Error, Result};
use crate::labelspace::{relabel, LabelMask, RawAnnotationCodec, RawAnnotationMask};

/// Where frames and masks live relative to a scene directory.
///
/// Patterns may contain `{scene}` (the scene directory name) and one printf
/// style integer field such as `%06d` or `%d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneLayout {
    pub frames_dir: String,
    pub frame_pattern: String,
    pub gt_dir: String,
    pub gt_pattern: String,
    pub first_index: usize,
}

impl Default for SceneLayout {
    fn default() -> Self {
        Self::cdnet()
    }
}

impl SceneLayout {
    /// `input/in000001.jpg` and `groundtruth/gt000001.png`.
    pub fn cdnet() -> Self {
        Self {
            frames_dir: "input".into(),
            frame_pattern: "in%06d.jpg".into(),
            gt_dir: "groundtruth".into(),
            gt_pattern: "gt%06d.png".into(),
            first_index: 1,
        }
    }

    /// `<scene>/<scene>-1.bmp` with masks in the sibling `<scene>-GT`.
    pub fn lasiesta() -> Self {
        Self {
            frames_dir: ".".into(),
            frame_pattern: "{scene}-%d.bmp".into(),
            gt_dir: "../{scene}-GT".into(),
            gt_pattern: "{scene}-GT_%d.png".into(),
            first_index: 1,
        }
    }
}

/// Expand `{scene}` and the integer field of a pattern.
pub fn format_pattern(pattern: &str, scene: &str, index: usize) -> String {
    let s = pattern.replace("{scene}", scene);
    let Some(start) = s.find('%') else {
        return s;
    };
    let rest = &s[start + 1..];
    let Some(d) = rest.find('d') else {
        return s;
    };
    let spec = &rest[..d];
    let width: usize = spec.trim_start_matches('0').parse().unwrap_or(0);
    let num = if spec.starts_with('0') {
        format!("{index:0width$}")
    } else {
        format!("{index:width$}")
    };
    format!("{}{}{}", &s[..start], num, &rest[d + 1..])
}

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "png", "bmp"];

/// The pattern's path, or the same stem with another image extension.
pub fn resolve(dir: &Path, name: &str) -> Option<PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        return Some(p);
    }
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| p.with_extension(ext))
        .find(|q| q.is_file())
}

pub fn resize_nearest(mask: &LabelMask, h: usize, w: usize) -> LabelMask {
    let (sh, sw) = (mask.height(), mask.width());
    let labels = (0..h)
        .flat_map(|y| {
            let sy = ((y as f64 + 0.5) * sh as f64 / h as f64) as usize;
            (0..w).map(move |x| {
                let sx = ((x as f64 + 0.5) * sw as f64 / w as f64) as usize;
                (sy.min(sh - 1), sx.min(sw - 1))
            })
        })
        .map(|(sy, sx)| mask.get(sy, sx))
        .collect();
    LabelMask::new(h, w, labels).expect("sizes match")
}

fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| Error::load(path, e))?.to_rgb8())
}

/// Read one annotation image and relabel it.
pub fn load_mask(path: &Path, codec: &RawAnnotationCodec) -> Result<LabelMask> {
    let rgb = load_rgb(path)?;
    let raw = RawAnnotationMask::from_rgb(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())?;
    relabel(&raw, codec).map_err(|e| match e {
        Error::Decode { .. } => Error::load(path, e),
        other => other,
    })
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    let rgb = load_rgb(path)?;
    Frame::from_rgb8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
}

/// Load every frame/mask pair of the scene at `root`. Frames are numbered
/// consecutively from `layout.first_index`; discovery stops at the first
/// missing frame.
pub fn load_scene(
    root: &Path,
    layout: &SceneLayout,
    codec: &RawAnnotationCodec,
    resize_to: Option<(usize, usize)>,
) -> Result<Scene> {
    let name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::load(root, "scene path has no name"))?;
    let category = root
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let frames_dir = root.join(format_pattern(&layout.frames_dir, &name, 0));
    let gt_dir = root.join(format_pattern(&layout.gt_dir, &name, 0));
    let mut frames = Vec::new();
    let mut gts = Vec::new();
    let mut size: Option<(usize, usize)> = None;
    let mut index = layout.first_index;
    while let Some(fp) = resolve(&frames_dir, &format_pattern(&layout.frame_pattern, &name, index)) {
        let gt_name = format_pattern(&layout.gt_pattern, &name, index);
        let gp = resolve(&gt_dir, &gt_name)
            .ok_or_else(|| Error::load(&fp, format!("no ground truth {}", gt_dir.join(&gt_name).display())))?;
        let rgb = load_rgb(&fp)?;
        let (h, w) = (rgb.height() as usize, rgb.width() as usize);
        match size {
            None => size = Some((h, w)),
            Some(s) if s != (h, w) => {
                return Err(Error::load(&fp, format!("frame is {h}x{w}, scene is {}x{}", s.0, s.1)));
            }
            _ => {}
        }
        let mask = load_mask(&gp, codec)?;
        if (mask.height(), mask.width()) != (h, w) {
            return Err(Error::load(
                &gp,
                format!("mask is {}x{}, frame is {h}x{w}", mask.height(), mask.width()),
            ));
        }
        let (frame, mask) = match resize_to {
            Some((rh, rw)) if (rh, rw) != (h, w) => {
                let resized = image::imageops::resize(&rgb, rw as u32, rh as u32, FilterType::Triangle);
                (
                    Frame::from_rgb8(rh, rw, resized.as_raw())?,
                    resize_nearest(&mask, rh, rw),
                )
            }
            _ => (Frame::from_rgb8(h, w, rgb.as_raw())?, mask),
        };
        frames.push(frame);
        gts.push(mask);
        index += 1;
    }
    if frames.is_empty() {
        return Err(Error::load(
            &frames_dir,
            format!(
                "no frame matching {}",
                format_pattern(&layout.frame_pattern, &name, layout.first_index)
            ),
        ));
    }
    let mut scene = Scene::new(name, category, frames, gts)?;
    scene.first_index = layout.first_index;
    Ok(scene)
}

pub fn save_frame(path: &Path, frame: &Frame) -> Result<()> {
    let img = RgbImage::from_raw(frame.width() as u32, frame.height() as u32, frame.to_rgb8())
        .expect("buffer matches size");
    img.save(path).map_err(|e| Error::load(path, e))
}

pub fn save_gray(path: &Path, height: usize, width: usize, data: &[u8]) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, data.to_vec())
        .ok_or_else(|| Error::Shape("gray buffer does not match size".into()))?;
    img.save(path).map_err(|e| Error::load(path, e))
}

/// Read an 8-bit gray image as (height, width, pixels).
pub fn load_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::load(path, e))?.to_luma8();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

/// Write a scene in the CDNet layout (frames as PNG so they round-trip).
pub fn write_scene(scene: &Scene, root: &Path) -> Result<()> {
    let input = root.join("input");
    let gt = root.join("groundtruth");
    std::fs::create_dir_all(&input)?;
    std::fs::create_dir_all(&gt)?;
    for (k, (f, m)) in scene.frames.iter().zip(&scene.gt).enumerate() {
        let idx = scene.first_index + k;
        save_frame(&input.join(format!("in{idx:06}.png")), f)?;
        save_gray(&gt.join(format!("gt{idx:06}.png")), m.height(), m.width(), &m.to_gray())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelspace::Label;

    #[test]
    fn pattern_expansion() {
        assert_eq!(format_pattern("in%06d.jpg", "x", 7), "in000007.jpg");
        assert_eq!(format_pattern("{scene}-%d.bmp", "I_SI_01", 12), "I_SI_01-12.bmp");
        assert_eq!(format_pattern("../{scene}-GT", "a", 0), "../a-GT");
    }

    #[test]
    fn nearest_resize_keeps_alphabet() {
        let m = LabelMask::new(
            2,
            2,
            vec![Label::Static, Label::Motion, Label::Ignore, Label::Motion],
        )
        .unwrap();
        let r = resize_nearest(&m, 5, 3);
        assert_eq!((r.height(), r.width()), (5, 3));
        assert_eq!(r.get(0, 0), Label::Static);
        assert_eq!(r.get(4, 2), Label::Motion);
        assert_eq!(r.get(4, 0), Label::Ignore);
    }
}
