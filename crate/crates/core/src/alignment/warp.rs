//! Inverse-mapped resampling of frames and label masks.

use super::homography::Homography;
use crate::datasets::Frame;
use crate::error::Result;
use crate::labelspace::{Label, LabelMask};

#[derive(Debug, Clone)]
pub struct Warped {
    pub frame: Frame,
    /// `true` where the destination pixel has a preimage inside the source.
    pub validity: Vec<bool>,
    pub mask: Option<LabelMask>,
}

impl Warped {
    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|v| **v).count()
    }
}

const EDGE_EPS: f64 = 1e-9;

/// Source coordinate for destination pixel (x, y) when it lies inside the
/// source frame's pixel-center grid.
pub fn preimage(inv: &Homography, x: usize, y: usize, h: usize, w: usize) -> Option<(f64, f64)> {
    let (sx, sy) = inv.apply(x as f64, y as f64)?;
    let inside = sx >= -EDGE_EPS
        && sy >= -EDGE_EPS
        && sx <= (w - 1) as f64 + EDGE_EPS
        && sy <= (h - 1) as f64 + EDGE_EPS;
    inside.then(|| (sx.clamp(0.0, (w - 1) as f64), sy.clamp(0.0, (h - 1) as f64)))
}

fn bilinear(f: &Frame, sx: f64, sy: f64) -> [f32; 3] {
    let (h, w) = (f.height(), f.width());
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
    let (a, b, c, d) = (f.pixel(y0, x0), f.pixel(y0, x1), f.pixel(y1, x0), f.pixel(y1, x1));
    std::array::from_fn(|k| {
        let top = a[k] * (1.0 - fx) + b[k] * fx;
        let bot = c[k] * (1.0 - fx) + d[k] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Warp `frame` (and optionally its mask) into the target view `H * p`.
/// Pixels without a preimage are zero in the frame and IGNORE in the mask.
pub fn warp(frame: &Frame, mask: Option<&LabelMask>, h: &Homography) -> Result<Warped> {
    let inv = h.inverse()?;
    let (fh, fw) = (frame.height(), frame.width());
    let mut out = Frame::zeros(fh, fw);
    let mut validity = vec![false; fh * fw];
    let mut warped_mask = mask.map(|m| LabelMask::filled(m.height(), m.width(), Label::Ignore));
    for y in 0..fh {
        for x in 0..fw {
            let Some((sx, sy)) = preimage(&inv, x, y, fh, fw) else {
                continue;
            };
            let i = y * fw + x;
            validity[i] = true;
            out.data_mut()[i * 3..i * 3 + 3].copy_from_slice(&bilinear(frame, sx, sy));
            if let (Some(src), Some(dst)) = (mask, warped_mask.as_mut()) {
                let (nx, ny) = (sx.round() as usize, sy.round() as usize);
                dst.set(y, x, src.get(ny.min(fh - 1), nx.min(fw - 1)));
            }
        }
    }
    Ok(Warped {
        frame: out,
        validity,
        mask: warped_mask,
    })
}
