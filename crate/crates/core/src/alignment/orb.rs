//! Oriented FAST keypoints with rotated BRIEF descriptors.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::homography::Correspondence;
use super::AlignConfig;
use crate::datasets::Frame;
use crate::error::{Error, Result};

/// A single-channel image on the 0..255 intensity scale.
#[derive(Debug, Clone)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Plane {
    fn from_frame(f: &Frame) -> Self {
        Self {
            h: f.height(),
            w: f.width(),
            data: f.to_gray().into_iter().map(|v| v * 255.0).collect(),
        }
    }

    #[inline]
    fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    fn bilinear(&self, y: f32, x: f32) -> f32 {
        let x = x.clamp(0.0, (self.w - 1) as f32);
        let y = y.clamp(0.0, (self.h - 1) as f32);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.w - 1), (y0 + 1).min(self.h - 1));
        let (fx, fy) = (x - x0 as f32, y - y0 as f32);
        let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
        let bot = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    fn downscale(&self, factor: f32) -> Self {
        let h = ((self.h as f32 / factor).round() as usize).max(1);
        let w = ((self.w as f32 / factor).round() as usize).max(1);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(self.bilinear((y as f32 + 0.5) * factor - 0.5, (x as f32 + 0.5) * factor - 0.5));
            }
        }
        Self { h, w, data }
    }

    /// Separable 5-tap Gaussian (sigma 2) with clamped borders.
    fn smoothed(&self) -> Self {
        let k: Vec<f32> = (-2i32..=2).map(|i| (-(i * i) as f32 / 8.0).exp()).collect();
        let s: f32 = k.iter().sum();
        let k: Vec<f32> = k.iter().map(|v| v / s).collect();
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut tmp = vec![0.0; self.data.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                tmp[y * self.w + x] = (0..5)
                    .map(|i| k[i] * self.at(y, clamp(x as isize + i as isize - 2, self.w)))
                    .sum();
            }
        }
        let mut data = vec![0.0; self.data.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                data[y * self.w + x] = (0..5)
                    .map(|i| k[i] * tmp[clamp(y as isize + i as isize - 2, self.h) * self.w + x])
                    .sum();
            }
        }
        Self {
            h: self.h,
            w: self.w,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Position in full-resolution pixel coordinates.
    pub x: f64,
    pub y: f64,
    pub level: usize,
    pub angle: f32,
    pub response: f32,
}

pub type Descriptor = [u64; 4];

#[derive(Debug, Clone, Default)]
pub struct Features {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

const CIRCLE: [(isize, isize); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// True if the 16-bit ring mask holds 9 contiguous set bits (with wrap).
fn has_arc9(mask: u32) -> bool {
    let m = mask | (mask << 16);
    let mut run = m;
    for s in 1..9 {
        run &= m >> s;
    }
    run & 0xFFFF != 0
}

/// FAST-9 score at (y, x), or 0 when the pixel is not a corner.
fn fast_score(img: &Plane, y: usize, x: usize, t: f32) -> f32 {
    let p = img.at(y, x);
    let mut brighter = 0u32;
    let mut darker = 0u32;
    let mut ring = [0f32; 16];
    for (i, (dx, dy)) in CIRCLE.iter().enumerate() {
        let v = img.at((y as isize + dy) as usize, (x as isize + dx) as usize);
        ring[i] = v - p;
        if v > p + t {
            brighter |= 1 << i;
        } else if v < p - t {
            darker |= 1 << i;
        }
    }
    let score = |mask: u32, sign: f32| -> f32 {
        (0..16)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| sign * ring[i] - t)
            .sum()
    };
    match (has_arc9(brighter), has_arc9(darker)) {
        (true, _) => score(brighter, 1.0),
        (_, true) => score(darker, -1.0),
        _ => 0.0,
    }
}

fn harris(img: &Plane, y: usize, x: usize) -> f32 {
    const K: f32 = 0.04;
    let (mut a, mut b, mut c) = (0.0f32, 0.0f32, 0.0f32);
    for yy in y - 3..=y + 3 {
        for xx in x - 3..=x + 3 {
            let ix = (img.at(yy, xx + 1) - img.at(yy, xx - 1)) * 0.5;
            let iy = (img.at(yy + 1, xx) - img.at(yy - 1, xx)) * 0.5;
            a += ix * ix;
            b += iy * iy;
            c += ix * iy;
        }
    }
    a * b - c * c - K * (a + b) * (a + b)
}

fn orientation(img: &Plane, y: usize, x: usize, r: isize) -> f32 {
    let (mut m01, mut m10) = (0.0f32, 0.0f32);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let v = img.at((y as isize + dy) as usize, (x as isize + dx) as usize);
            m10 += dx as f32 * v;
            m01 += dy as f32 * v;
        }
    }
    m01.atan2(m10)
}

/// 256 test pairs inside the unit disc, drawn from an isotropic Gaussian.
fn pattern() -> &'static [[(f32, f32); 2]; 256] {
    static PATTERN: OnceLock<[[(f32, f32); 2]; 256]> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0b5e_ed01);
        let normal = Normal::new(0.0f32, 0.4).expect("valid sigma");
        let mut point = || loop {
            let p = (normal.sample(&mut rng), normal.sample(&mut rng));
            if p.0 * p.0 + p.1 * p.1 <= 1.0 {
                return p;
            }
        };
        let mut out = [[(0.0, 0.0); 2]; 256];
        for pair in out.iter_mut() {
            *pair = [point(), point()];
            while pair[0] == pair[1] {
                pair[1] = point();
            }
        }
        out
    })
}

fn describe(smooth: &Plane, y: usize, x: usize, angle: f32, r: f32) -> Descriptor {
    let (s, c) = angle.sin_cos();
    let mut d = [0u64; 4];
    for (i, pair) in pattern().iter().enumerate() {
        let sample = |(px, py): (f32, f32)| {
            let (px, py) = (px * r, py * r);
            let rx = (c * px - s * py).round() as isize;
            let ry = (s * px + c * py).round() as isize;
            smooth.at((y as isize + ry) as usize, (x as isize + rx) as usize)
        };
        if sample(pair[0]) < sample(pair[1]) {
            d[i / 64] |= 1 << (i % 64);
        }
    }
    d
}

/// Patch size used for a frame: the configured size, clamped so that the
/// usable interior stays at least half of the smaller frame side.
pub fn effective_patch_size(config: &AlignConfig, h: usize, w: usize) -> usize {
    let limit = (h.min(w) / 4).max(7);
    let p = config.patch_size.min(limit);
    if p % 2 == 0 {
        p - 1
    } else {
        p
    }
}

/// Detect up to `config.max_keypoints` ORB features over an image pyramid.
pub fn detect(frame: &Frame, config: &AlignConfig) -> Features {
    let patch = effective_patch_size(config, frame.height(), frame.width());
    let r = (patch / 2) as isize;
    let border = r as usize + 1;
    let base = Plane::from_frame(frame);
    let levels = config.pyramid_levels.max(1);
    let f = 1.0 / config.scale_factor;
    let geom: f64 = (0..levels).map(|l| f.powi(l as i32)).sum();
    let mut out = Features::default();
    let mut assigned = 0usize;
    for level in 0..levels {
        let quota = if level + 1 == levels {
            config.max_keypoints.saturating_sub(assigned)
        } else {
            (config.max_keypoints as f64 * f.powi(level as i32) / geom).round() as usize
        };
        assigned += quota;
        let scale = config.scale_factor.powi(level as i32);
        let img = if level == 0 {
            base.clone()
        } else {
            base.downscale(scale as f32)
        };
        if img.h <= 2 * border || img.w <= 2 * border {
            break;
        }
        let t = config.fast_threshold;
        let mut score = vec![0f32; img.h * img.w];
        for y in border..img.h - border {
            for x in border..img.w - border {
                score[y * img.w + x] = fast_score(&img, y, x, t);
            }
        }
        let mut cands: Vec<(f32, usize, usize)> = Vec::new();
        for y in border..img.h - border {
            for x in border..img.w - border {
                let s = score[y * img.w + x];
                if s <= 0.0 {
                    continue;
                }
                // 3x3 non-maximum suppression; ties resolved by scan order
                let mut is_max = true;
                'nb: for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let j = (y as isize + dy) as usize * img.w + (x as isize + dx) as usize;
                        let later = dy > 0 || (dy == 0 && dx > 0);
                        if score[j] > s || (score[j] == s && !later) {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if is_max {
                    cands.push((harris(&img, y, x), y, x));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        cands.truncate(quota);
        let smooth = img.smoothed();
        for (resp, y, x) in cands {
            let angle = orientation(&img, y, x, r);
            out.descriptors.push(describe(&smooth, y, x, angle, r as f32));
            out.keypoints.push(Keypoint {
                x: x as f64 * scale,
                y: y as f64 * scale,
                level,
                angle,
                response: resp,
            });
        }
    }
    out
}

pub fn hamming(a: &Descriptor, b: &Descriptor) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

fn nearest(d: &Descriptor, pool: &[Descriptor]) -> Option<(usize, u32)> {
    pool.iter()
        .enumerate()
        .map(|(j, e)| (j, hamming(d, e)))
        .min_by_key(|&(j, dist)| (dist, j))
}

/// Brute-force Hamming matching (optionally cross-checked), sorted by
/// ascending distance and cut to the best `keep_fraction`.
pub fn match_features(source: &Features, target: &Features, config: &AlignConfig) -> Vec<Correspondence> {
    let mut matches: Vec<(u32, usize, usize)> = Vec::new();
    for (i, d) in source.descriptors.iter().enumerate() {
        let Some((j, dist)) = nearest(d, &target.descriptors) else {
            continue;
        };
        if config.cross_check && nearest(&target.descriptors[j], &source.descriptors).map(|m| m.0) != Some(i) {
            continue;
        }
        matches.push((dist, i, j));
    }
    matches.sort();
    let keep = (matches.len() as f64 * config.keep_fraction).ceil() as usize;
    matches
        .into_iter()
        .take(keep)
        .map(|(dist, i, j)| {
            let (s, t) = (&source.keypoints[i], &target.keypoints[j]);
            Correspondence {
                source: (s.x, s.y),
                target: (t.x, t.y),
                distance: dist,
            }
        })
        .collect()
}

/// Detect in both frames and return the retained correspondences.
pub fn detect_and_match(source: &Frame, target: &Frame, config: &AlignConfig) -> Result<Vec<Correspondence>> {
    check_pair(source, target)?;
    let a = detect(source, config);
    let b = detect(target, config);
    matched(&a, &b, config)
}

pub(crate) fn check_pair(source: &Frame, target: &Frame) -> Result<()> {
    if (source.height(), source.width()) != (target.height(), target.width()) {
        return Err(Error::Shape(format!(
            "source is {}x{}, target is {}x{}",
            source.height(),
            source.width(),
            target.height(),
            target.width()
        )));
    }
    if source.height() == 0 || source.width() == 0 {
        return Err(Error::Shape("empty frame".into()));
    }
    Ok(())
}

pub(crate) fn matched(a: &Features, b: &Features, config: &AlignConfig) -> Result<Vec<Correspondence>> {
    let m = match_features(a, b, config);
    if m.len() < 4 {
        return Err(Error::InsufficientFeatures {
            found: m.len(),
            required: 4,
        });
    }
    Ok(m)
}

/// Deterministic corner-rich test texture: random axis-aligned patches of
/// random gray levels over a mid-gray base.
#[doc(hidden)]
pub fn test_texture(h: usize, w: usize, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = vec![0.5f32; h * w];
    for _ in 0..(h * w / 40).max(8) {
        let (ph, pw) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let v: f32 = rng.gen_range(0.0..1.0);
        for y in y0..(y0 + ph).min(h) {
            for x in x0..(x0 + pw).min(w) {
                g[y * w + x] = v;
            }
        }
    }
    Frame::new(h, w, g.iter().flat_map(|&v| [v, v, v]).collect()).expect("sizes match")
}
