//! Planar homographies and their robust estimation.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// 3x3 projective map from source to target pixel coordinates, scaled so
/// that `h22 = 1`. Pixel (x, y) has its center at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

const DET_EPS: f64 = 1e-12;

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]],
        }
    }

    /// Normalize an arbitrary matrix to `h22 = 1`.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        let s = m[2][2];
        if !s.is_finite() || s.abs() < DET_EPS || m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Estimation(format!("cannot normalize matrix with h22 = {s}")));
        }
        let mut out = m;
        for row in &mut out {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Ok(Self { m: out })
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn h(&self, row: usize, col: usize) -> f64 {
        self.m[row][col]
    }

    fn to_na(self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.m[r][c])
    }

    fn from_na(m: &Matrix3<f64>) -> Result<Self> {
        Self::from_matrix([
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ])
    }

    pub fn determinant(&self) -> f64 {
        self.to_na().determinant()
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.to_na().try_inverse().ok_or(Error::Singular)?;
        if self.determinant().abs() < DET_EPS {
            return Err(Error::Singular);
        }
        Self::from_na(&inv).map_err(|_| Error::Singular)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::from_na(&(self.to_na() * other.to_na()))
    }

    /// Map a point; `None` when it lands on the line at infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.m;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() < DET_EPS {
            return None;
        }
        Some((
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        ))
    }

    /// Largest absolute entry difference.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row-major, space separated, one line.
    pub fn to_line(&self) -> String {
        self.m
            .iter()
            .flatten()
            .map(|v| format!("{v:.9}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A matched point pair, source frame to target frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source: (f64, f64),
    pub target: (f64, f64),
    /// Hamming distance of the descriptors (0 for synthetic pairs).
    pub distance: u32,
}

impl Correspondence {
    pub fn new(source: (f64, f64), target: (f64, f64)) -> Self {
        Self {
            source,
            target,
            distance: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier threshold on the forward reprojection error, in pixels.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            threshold: 3.0,
            seed: 0,
        }
    }
}

/// Similarity transform moving the centroid to 0 and the mean distance to √2.
fn normalizer(pts: &[(f64, f64)]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (cx, cy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (cx, cy) = (cx / n, cy / n);
    let mean = pts.iter().map(|p| (p.0 - cx).hypot(p.1 - cy)).sum::<f64>() / n;
    let s = if mean > 1e-12 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn transform(t: &Matrix3<f64>, p: (f64, f64)) -> (f64, f64) {
    let v = t * Vector3::new(p.0, p.1, 1.0);
    (v[0] / v[2], v[1] / v[2])
}

/// Normalized direct linear transform over all given pairs.
pub fn fit_dlt(pairs: &[Correspondence]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::InsufficientFeatures {
            found: pairs.len(),
            required: 4,
        });
    }
    let src: Vec<_> = pairs.iter().map(|c| c.source).collect();
    let dst: Vec<_> = pairs.iter().map(|c| c.target).collect();
    let (t1, t2) = (normalizer(&src), normalizer(&dst));
    // pad to at least 9 rows so the thin SVD yields the full right basis
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(&dst).enumerate() {
        let (x, y) = transform(&t1, *s);
        let (u, v) = transform(&t2, *d);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let svd = a.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::Estimation("SVD did not converge".into()))?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nine singular values");
    let h = vt.row(k);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t2_inv = t2.try_inverse().ok_or(Error::Singular)?;
    let full = t2_inv * hn * t1;
    let out = Homography::from_na(&full)?;
    if out.determinant().abs() < DET_EPS {
        return Err(Error::Estimation("degenerate homography".into()));
    }
    Ok(out)
}

fn cross(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

/// True when some three of the four points are (nearly) collinear.
fn has_collinear_triple(p: [(f64, f64); 4]) -> bool {
    let scale = p
        .iter()
        .flat_map(|a| p.iter().map(move |b| (a.0 - b.0).hypot(a.1 - b.1)))
        .fold(0.0, f64::max);
    let tol = 1e-6 * scale * scale.max(1.0);
    [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
        .iter()
        .any(|&(i, j, k)| cross(p[i], p[j], p[k]).abs() <= tol)
}

fn reprojection_error(h: &Homography, c: &Correspondence) -> f64 {
    match h.apply(c.source.0, c.source.1) {
        Some((x, y)) => (x - c.target.0).hypot(y - c.target.1),
        None => f64::INFINITY,
    }
}

/// RANSAC over minimal 4-point samples, refit on the best inlier set.
pub fn estimate_homography(pairs: &[Correspondence], config: &RansacConfig) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::InsufficientFeatures {
            found: pairs.len(),
            required: 4,
        });
    }
    if pairs.len() == 4 {
        let s: [(f64, f64); 4] = std::array::from_fn(|i| pairs[i].source);
        let d: [(f64, f64); 4] = std::array::from_fn(|i| pairs[i].target);
        if has_collinear_triple(s) || has_collinear_triple(d) {
            return Err(Error::Estimation("collinear correspondences".into()));
        }
        return fit_dlt(pairs);
    }
    let inliers_of = |h: &Homography| -> (Vec<usize>, f64) {
        let mut idx = Vec::new();
        let mut err = 0.0;
        for (i, c) in pairs.iter().enumerate() {
            let e = reprojection_error(h, c);
            if e < config.threshold {
                idx.push(i);
                err += e;
            }
        }
        (idx, err)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(Homography, Vec<usize>, f64)> = None;
    for _ in 0..config.iterations {
        let pick = sample(&mut rng, pairs.len(), 4).into_vec();
        let s: [(f64, f64); 4] = std::array::from_fn(|i| pairs[pick[i]].source);
        let d: [(f64, f64); 4] = std::array::from_fn(|i| pairs[pick[i]].target);
        if has_collinear_triple(s) || has_collinear_triple(d) {
            continue;
        }
        let sample_pairs: Vec<_> = pick.iter().map(|&i| pairs[i]).collect();
        let Ok(h) = fit_dlt(&sample_pairs) else {
            continue;
        };
        let (idx, err) = inliers_of(&h);
        let better = match &best {
            None => true,
            Some((_, b, e)) => idx.len() > b.len() || (idx.len() == b.len() && err < *e),
        };
        if better {
            let done = idx.len() == pairs.len();
            best = Some((h, idx, err));
            if done {
                break;
            }
        }
    }
    let (sample_h, best_idx, _) = best.ok_or_else(|| Error::Estimation("every sample was degenerate".into()))?;
    if best_idx.len() < 4 {
        return Err(Error::Estimation(format!(
            "no consensus: best sample has {} inliers",
            best_idx.len()
        )));
    }
    let inliers: Vec<_> = best_idx.iter().map(|&i| pairs[i]).collect();
    // keep the refit only if it does not lose inliers
    match fit_dlt(&inliers) {
        Ok(refined) if inliers_of(&refined).0.len() >= best_idx.len() => Ok(refined),
        _ => Ok(sample_h),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_pairs(h: &Homography) -> Vec<Correspondence> {
        let mut out = Vec::new();
        for i in 0..6 {
            for j in 0..5 {
                let p = (10.0 + 37.0 * i as f64 + (j * j) as f64, 8.0 + 29.0 * j as f64 + i as f64);
                out.push(Correspondence::new(p, h.apply(p.0, p.1).unwrap()));
            }
        }
        out
    }

    #[test]
    fn translation_is_recovered() {
        let truth = Homography::translation(-70.32, 4.5);
        let h = estimate_homography(&grid_pairs(&truth), &RansacConfig::default()).unwrap();
        assert!((h.h(0, 2) + 70.32).abs() < 1e-3);
        assert!((h.h(1, 2) - 4.5).abs() < 1e-3);
        assert!((h.h(0, 0) - 1.0).abs() < 1e-3 && (h.h(1, 1) - 1.0).abs() < 1e-3);
        assert_eq!(h.h(2, 2), 1.0);
    }

    #[test]
    fn identity_is_recovered() {
        let h = estimate_homography(&grid_pairs(&Homography::identity()), &RansacConfig::default()).unwrap();
        assert!(h.max_abs_diff(&Homography::identity()) < 1e-6);
    }

    #[test]
    fn outliers_are_rejected() {
        let truth = Homography::translation(5.0, -3.0);
        let mut pairs = grid_pairs(&truth);
        for (k, c) in pairs.iter_mut().enumerate().filter(|(k, _)| k % 5 == 0) {
            c.target = (c.target.0 + 40.0 + k as f64, c.target.1 - 25.0);
        }
        let h = estimate_homography(&pairs, &RansacConfig::default()).unwrap();
        assert!(h.max_abs_diff(&truth) < 1e-6);
    }

    #[test]
    fn collinear_points_fail() {
        let pairs: Vec<_> = (0..10)
            .map(|i| {
                let p = (i as f64 * 3.0, i as f64 * 2.0);
                Correspondence::new(p, (p.0 + 1.0, p.1))
            })
            .collect();
        assert!(matches!(
            estimate_homography(&pairs, &RansacConfig::default()),
            Err(Error::Estimation(_))
        ));
    }

    #[test]
    fn inverse_and_compose() {
        let h = Homography::from_matrix([[1.1, 0.05, 3.0], [-0.02, 0.95, -7.0], [1e-4, 2e-4, 1.0]]).unwrap();
        let id = h.compose(&h.inverse().unwrap()).unwrap();
        assert!(id.max_abs_diff(&Homography::identity()) < 1e-12);
        assert!(Homography::from_matrix([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]])
            .unwrap()
            .inverse()
            .is_err());
    }

    proptest! {
        #[test]
        fn affine_composition_is_recovered(
            a in 0.8f64..1.2, b in -0.2f64..0.2, c in -0.2f64..0.2, d in 0.8f64..1.2,
            tx in -30.0f64..30.0, ty in -30.0f64..30.0,
        ) {
            let base = Homography::translation(2.0, -1.0);
            let affine = Homography::from_matrix([[a, b, tx], [c, d, ty], [0.0, 0.0, 1.0]]).unwrap();
            let composed = affine.compose(&base).unwrap();
            let pairs: Vec<_> = grid_pairs(&base)
                .into_iter()
                .map(|p| Correspondence::new(p.source, affine.apply(p.target.0, p.target.1).unwrap()))
                .collect();
            let h = estimate_homography(&pairs, &RansacConfig::default()).unwrap();
            prop_assert!(h.max_abs_diff(&composed) < 1e-3);
            prop_assert_eq!(h.h(2, 2), 1.0);
        }
    }
}
