//! Synthetic scenes: textured shapes moving over a textured background,
//! optionally filmed by a moving camera.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Frame, Scene};
use crate::alignment::Homography;
use crate::error::{Error, Result};
use crate::labelspace::{Label, LabelMask};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CameraMotion {
    #[default]
    None,
    /// Constant camera velocity in pixels per frame.
    Pan { dx: f64, dy: f64 },
    /// Independent Gaussian offset per frame.
    Jitter { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeMix {
    Rectangles,
    Ellipses,
    #[default]
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub name: String,
    pub category: String,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub object_count: usize,
    /// Inclusive range of object side lengths in pixels.
    pub min_object_size: usize,
    pub max_object_size: usize,
    /// Object speed in pixels per frame.
    pub speed: f64,
    pub shapes: ShapeMix,
    pub camera: CameraMotion,
    /// Standard deviation of per-pixel sensor noise (values in [0, 1]).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            category: "synthetic".into(),
            height: 64,
            width: 64,
            frames: 30,
            object_count: 1,
            min_object_size: 10,
            max_object_size: 18,
            speed: 2.0,
            shapes: ShapeMix::Mixed,
            camera: CameraMotion::None,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("frame {}x{} is smaller than 8x8", self.height, self.width));
        }
        if self.frames == 0 {
            return bad("a scene needs at least one frame".into());
        }
        if self.object_count > 0 {
            if self.min_object_size < 2 || self.min_object_size > self.max_object_size {
                return bad(format!(
                    "object size range [{}, {}] is empty or below 2",
                    self.min_object_size, self.max_object_size
                ));
            }
            if self.max_object_size >= self.height.min(self.width) {
                return bad(format!(
                    "objects up to {} px do not fit a {}x{} frame",
                    self.max_object_size, self.height, self.width
                ));
            }
            if !(self.speed.is_finite() && self.speed > 0.0) {
                return bad(format!("object speed must be positive, got {}", self.speed));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        match self.camera {
            CameraMotion::None => {}
            CameraMotion::Pan { dx, dy } if dx.is_finite() && dy.is_finite() => {}
            CameraMotion::Jitter { sigma } if sigma.is_finite() && sigma >= 0.0 => {}
            c => return bad(format!("invalid camera motion {c:?}")),
        }
        Ok(())
    }
}

/// One object's shape, colors and per-frame top-left positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub kind: ShapeKind,
    pub width: f64,
    pub height: f64,
    pub colors: [[f32; 3]; 2],
    pub positions: Vec<(f64, f64)>,
}

impl ObjectTrack {
    /// Whether the pixel center (x + 0.5, y + 0.5) lies inside the object
    /// at frame t.
    pub fn covers(&self, t: usize, y: usize, x: usize) -> bool {
        let (px, py) = self.positions[t];
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        match self.kind {
            ShapeKind::Rectangle => cx >= px && cx < px + self.width && cy >= py && cy < py + self.height,
            ShapeKind::Ellipse => {
                let (rx, ry) = (self.width / 2.0, self.height / 2.0);
                let u = (cx - px - rx) / rx;
                let v = (cy - py - ry) / ry;
                u * u + v * v <= 1.0
            }
        }
    }

    fn color(&self, t: usize, y: usize, x: usize) -> [f32; 3] {
        let (px, py) = self.positions[t];
        // stripes fixed to the object so its texture moves with it
        let u = ((x as f64 + 0.5 - px) / 3.0).floor() as i64;
        let v = ((y as f64 + 0.5 - py) / 3.0).floor() as i64;
        self.colors[((u + v).rem_euclid(2)) as usize]
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub scene: Scene,
    /// Camera offset of each frame in canvas pixels.
    pub camera_offsets: Vec<(f64, f64)>,
    pub objects: Vec<ObjectTrack>,
}

impl SyntheticScene {
    /// Ground-truth map from frame `from` to frame `to`: a background point
    /// at p in frame `from` is at `H * p` in frame `to`.
    pub fn homography(&self, from: usize, to: usize) -> Homography {
        let (a, b) = (self.camera_offsets[from], self.camera_offsets[to]);
        Homography::translation(a.0 - b.0, a.1 - b.1)
    }

    /// Pixels not covered by any object in frame t.
    pub fn background(&self, t: usize) -> Vec<bool> {
        self.scene.gt[t].labels().iter().map(|l| *l == Label::Static).collect()
    }
}

struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn textured(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.7));
        let (fx, fy) = (rng.gen_range(0.02..0.08), rng.gen_range(0.02..0.08));
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let s = 0.1 * ((x as f64 * fx).sin() + (y as f64 * fy).cos()) as f32;
                data.extend(base.iter().map(|b| b + s));
            }
        }
        let mut c = Self { h, w, data };
        for _ in 0..(h * w / 30).max(10) {
            let (ph, pw) = (rng.gen_range(2..=7), rng.gen_range(2..=7));
            let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
            let g: f32 = rng.gen_range(0.05..0.95);
            let tint: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.08..0.08));
            for y in y0..(y0 + ph).min(h) {
                for x in x0..(x0 + pw).min(w) {
                    let i = (y * w + x) * 3;
                    for k in 0..3 {
                        c.data[i + k] = (g + tint[k]).clamp(0.0, 1.0);
                    }
                }
            }
        }
        c
    }

    fn sample(&self, y: f64, x: f64) -> [f32; 3] {
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.w - 1), (y0 + 1).min(self.h - 1));
        let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
        let px = |yy: usize, xx: usize| {
            let i = (yy * self.w + xx) * 3;
            [self.data[i], self.data[i + 1], self.data[i + 2]]
        };
        let (a, b, c, d) = (px(y0, x0), px(y0, x1), px(y1, x0), px(y1, x1));
        std::array::from_fn(|k| {
            (a[k] * (1.0 - fx) + b[k] * fx) * (1.0 - fy) + (c[k] * (1.0 - fx) + d[k] * fx) * fy
        })
    }
}

fn camera_offsets(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    match cfg.camera {
        CameraMotion::None => vec![(0.0, 0.0); cfg.frames],
        CameraMotion::Pan { dx, dy } => (0..cfg.frames).map(|t| (t as f64 * dx, t as f64 * dy)).collect(),
        CameraMotion::Jitter { sigma } => {
            if sigma == 0.0 {
                return vec![(0.0, 0.0); cfg.frames];
            }
            let n = Normal::new(0.0, sigma).expect("validated sigma");
            let lim = 3.0 * sigma;
            (0..cfg.frames)
                .map(|_| (n.sample(rng).clamp(-lim, lim), n.sample(rng).clamp(-lim, lim)))
                .collect()
        }
    }
}

fn saturated_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let hue = rng.gen_range(0..6);
    let lo = rng.gen_range(0.0..0.15);
    let hi = rng.gen_range(0.85..1.0);
    let mid = rng.gen_range(lo..hi);
    match hue {
        0 => [hi, mid, lo],
        1 => [mid, hi, lo],
        2 => [lo, hi, mid],
        3 => [lo, mid, hi],
        4 => [mid, lo, hi],
        _ => [hi, lo, mid],
    }
}

fn object_tracks(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<ObjectTrack> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    (0..cfg.object_count)
        .map(|_| {
            let kind = match cfg.shapes {
                ShapeMix::Rectangles => ShapeKind::Rectangle,
                ShapeMix::Ellipses => ShapeKind::Ellipse,
                ShapeMix::Mixed if rng.gen_bool(0.5) => ShapeKind::Rectangle,
                ShapeMix::Mixed => ShapeKind::Ellipse,
            };
            let ow = rng.gen_range(cfg.min_object_size..=cfg.max_object_size) as f64;
            let oh = rng.gen_range(cfg.min_object_size..=cfg.max_object_size) as f64;
            let c = saturated_color(rng);
            let colors = [c, c.map(|v| v * 0.55)];
            let mut p = (rng.gen_range(0.0..=w - ow).round(), rng.gen_range(0.0..=h - oh).round());
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut v = (cfg.speed * theta.cos(), cfg.speed * theta.sin());
            let mut positions = Vec::with_capacity(cfg.frames);
            for _ in 0..cfg.frames {
                positions.push(p);
                p = (p.0 + v.0, p.1 + v.1);
                // reflect off the frame borders
                if p.0 < 0.0 || p.0 + ow > w {
                    v.0 = -v.0;
                    p.0 = if p.0 < 0.0 { -p.0 } else { 2.0 * (w - ow) - p.0 };
                }
                if p.1 < 0.0 || p.1 + oh > h {
                    v.1 = -v.1;
                    p.1 = if p.1 < 0.0 { -p.1 } else { 2.0 * (h - oh) - p.1 };
                }
                p = (p.0.clamp(0.0, w - ow), p.1.clamp(0.0, h - oh));
            }
            ObjectTrack {
                kind,
                width: ow,
                height: oh,
                colors,
                positions,
            }
        })
        .collect()
}

/// Render a scene. The same seed always yields the same frames.
pub fn generate_synthetic_scene(cfg: &SyntheticConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let offsets = camera_offsets(cfg, &mut rng);
    let min_x = offsets.iter().map(|o| o.0).fold(f64::INFINITY, f64::min);
    let min_y = offsets.iter().map(|o| o.1).fold(f64::INFINITY, f64::min);
    let max_x = offsets.iter().map(|o| o.0).fold(f64::NEG_INFINITY, f64::max);
    let max_y = offsets.iter().map(|o| o.1).fold(f64::NEG_INFINITY, f64::max);
    let canvas_w = cfg.width + (max_x - min_x).ceil() as usize + 2;
    let canvas_h = cfg.height + (max_y - min_y).ceil() as usize + 2;
    let canvas = Canvas::textured(canvas_h, canvas_w, &mut rng);
    let objects = object_tracks(cfg, &mut rng);
    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0f32, cfg.noise_sigma as f32).expect("validated"));
    let (h, w) = (cfg.height, cfg.width);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut gts = Vec::with_capacity(cfg.frames);
    for (t, &(ox, oy)) in offsets.iter().enumerate() {
        let mut data = Vec::with_capacity(h * w * 3);
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let top = objects.iter().rev().find(|o| o.covers(t, y, x));
                let px = match top {
                    Some(o) => o.color(t, y, x),
                    None => canvas.sample(y as f64 + oy - min_y + 1.0, x as f64 + ox - min_x + 1.0),
                };
                labels.push(if top.is_some() { Label::Motion } else { Label::Static });
                for v in px {
                    let n = noise.map(|d| d.sample(&mut rng)).unwrap_or(0.0);
                    data.push((v + n).clamp(0.0, 1.0));
                }
            }
        }
        frames.push(Frame::new(h, w, data)?);
        gts.push(LabelMask::new(h, w, labels)?);
    }
    Ok(SyntheticScene {
        scene: Scene::new(cfg.name.clone(), cfg.category.clone(), frames, gts)?,
        camera_offsets: offsets,
        objects,
    })
}
