//! From probability masks to binary motion masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::LabelMask;
use crate::metrics::{self, ConfusionCounts};

/// Per-pixel motion probabilities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMotionMask {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ProbabilityMotionMask {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "probability buffer has {} entries, expected {}x{}",
                values.len(),
                height,
                width
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            values: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// Per-pixel binary decisions, `true` meaning motion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMotionMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl BinaryMotionMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "binary buffer has {} entries, expected {}x{}",
                values.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn motion_count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    /// 8-bit image encoding: 255 for motion, 0 otherwise.
    pub fn to_gray(&self) -> Vec<u8> {
        self.values.iter().map(|&v| if v { 255 } else { 0 }).collect()
    }

    pub fn from_gray(height: usize, width: usize, gray: &[u8]) -> Result<Self> {
        Self::new(height, width, gray.iter().map(|&v| v >= 128).collect())
    }
}

/// Normalized 3x3 Gaussian kernel, row-major.
pub fn gaussian_kernel_3x3(sigma: f64) -> [f64; 9] {
    let g1 = [(-0.5 / (sigma * sigma)).exp(), 1.0, (-0.5 / (sigma * sigma)).exp()];
    let mut k = [0.0; 9];
    for y in 0..3 {
        for x in 0..3 {
            k[y * 3 + x] = g1[y] * g1[x];
        }
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Border index by reflection without repeating the edge pixel.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

pub const DEFAULT_SIGMA: f64 = 1.0;

/// 3x3 Gaussian smoothing with reflective borders.
pub fn smooth(mask: &ProbabilityMotionMask, sigma: f64) -> ProbabilityMotionMask {
    let k = gaussian_kernel_3x3(sigma);
    let (h, w) = (mask.height, mask.width);
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for dy in 0..3 {
                let sy = reflect(y as isize + dy as isize - 1, h);
                for dx in 0..3 {
                    let sx = reflect(x as isize + dx as isize - 1, w);
                    acc += k[dy * 3 + dx] * mask.values[sy * w + sx] as f64;
                }
            }
            out[y * w + x] = acc.clamp(0.0, 1.0) as f32;
        }
    }
    ProbabilityMotionMask {
        height: h,
        width: w,
        values: out,
    }
}

/// Global threshold with `>=` semantics.
pub fn threshold(mask: &ProbabilityMotionMask, t: f64) -> BinaryMotionMask {
    let t = t as f32;
    BinaryMotionMask {
        height: mask.height,
        width: mask.width,
        values: mask.values.iter().map(|&v| v >= t).collect(),
    }
}

/// Threshold grid 0.0, 0.1, ..., 0.9.
pub fn default_grid() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub f_measure: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// `None` when the F-measure is undefined at every grid point.
    pub best_threshold: Option<f64>,
    pub table: Vec<SweepRow>,
}

/// Pooled confusion counts of `preds` against `gts` at threshold `t`.
pub fn pooled_counts(
    preds: &[ProbabilityMotionMask],
    gts: &[LabelMask],
    t: f64,
) -> Result<ConfusionCounts> {
    let mut total = ConfusionCounts::default();
    for (p, g) in preds.iter().zip(gts) {
        total += metrics::count(&threshold(p, t), g)?;
    }
    Ok(total)
}

fn check_pairs(preds: &[ProbabilityMotionMask], gts: &[LabelMask]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Config("no predictions given".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions but {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// Evaluate the pooled F-measure at every grid threshold and pick the best;
/// ties go to the smaller threshold.
pub fn sweep_threshold(
    preds: &[ProbabilityMotionMask],
    gts: &[LabelMask],
    grid: &[f64],
) -> Result<SweepResult> {
    check_pairs(preds, gts)?;
    let mut table = Vec::with_capacity(grid.len());
    for &t in grid {
        let f = metrics::derive(&pooled_counts(preds, gts, t)?).f_measure;
        table.push(SweepRow {
            threshold: t,
            f_measure: f,
        });
    }
    let mut best: Option<(f64, f64)> = None;
    for row in &table {
        if let Some(f) = row.f_measure {
            let better = match best {
                None => true,
                Some((bt, bf)) => f > bf || (f == bf && row.threshold < bt),
            };
            if better {
                best = Some((row.threshold, f));
            }
        }
    }
    Ok(SweepResult {
        best_threshold: best.map(|(t, _)| t),
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelspace::Label;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prob(h: usize, w: usize, v: Vec<f32>) -> ProbabilityMotionMask {
        ProbabilityMotionMask::new(h, w, v).unwrap()
    }

    #[test]
    fn constant_mask_is_unchanged() {
        let m = ProbabilityMotionMask::filled(5, 7, 0.37);
        let s = smooth(&m, DEFAULT_SIGMA);
        assert!(s.values().iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn impulse_gives_center_weight() {
        let mut v = vec![0.0; 25];
        v[12] = 1.0;
        let s = smooth(&prob(5, 5, v), 1.0);
        // independent evaluation: separable 1D weights (e^-0.5, 1, e^-0.5)
        let e = (-0.5f64).exp();
        let center = 1.0 / ((1.0 + 2.0 * e) * (1.0 + 2.0 * e));
        assert!((s.values()[12] as f64 - center).abs() < 1e-6);
        assert!((center - 0.2042).abs() < 1e-4);
        let corner = e * e * center;
        assert!((s.values()[6] as f64 - corner).abs() < 1e-6);
    }

    #[test]
    fn threshold_examples() {
        let m = prob(1, 3, vec![0.4, 0.39, 0.7]);
        assert_eq!(threshold(&m, 0.4).values(), &[true, false, true]);
        assert_eq!(threshold(&m, 0.7).values(), &[false, false, true]);
        assert!(threshold(&m, 0.0).values().iter().all(|&v| v));
        assert_eq!(threshold(&m, 0.7001).motion_count(), 0);
    }

    #[test]
    fn perfect_predictor_sweep_picks_smallest_positive_threshold() {
        let gt = LabelMask::new(
            2,
            2,
            vec![Label::Motion, Label::Static, Label::Static, Label::Motion],
        )
        .unwrap();
        let p = prob(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let r = sweep_threshold(&[p], &[gt], &default_grid()).unwrap();
        assert_eq!(r.best_threshold, Some(0.1));
        assert_eq!(r.table.len(), 10);
        assert!((r.table[0].f_measure.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(r.table[1..].iter().all(|row| row.f_measure == Some(1.0)));
    }

    #[test]
    fn sweep_rejects_empty_or_unpaired_input() {
        assert!(sweep_threshold(&[], &[], &default_grid()).is_err());
        let p = ProbabilityMotionMask::filled(1, 1, 0.5);
        assert!(sweep_threshold(&[p], &[], &default_grid()).is_err());
    }

    #[test]
    fn interior_mean_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w) = (20, 20);
        let m = prob(h, w, (0..h * w).map(|_| rng.gen::<f32>()).collect());
        let s = smooth(&m, 1.0);
        // each interior input pixel whose 3x3 neighbourhood is interior
        // contributes its full mass to the interior output window
        let window_sum = |v: &[f32], lo: usize, hi: usize| -> f64 {
            let mut acc = 0.0;
            for y in lo..hi {
                for x in lo..hi {
                    acc += v[y * w + x] as f64;
                }
            }
            acc
        };
        let k = gaussian_kernel_3x3(1.0);
        let mut expected = 0.0;
        for y in 0..h {
            for x in 0..w {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (oy, ox) = (y as isize - dy as isize + 1, x as isize - dx as isize + 1);
                        if (2..18).contains(&oy) && (2..18).contains(&ox) {
                            expected += k[dy * 3 + dx] * m.values()[y * w + x] as f64;
                        }
                    }
                }
            }
        }
        assert!((window_sum(s.values(), 2, 18) - expected).abs() / 256.0 < 1e-6);
    }

    proptest! {
        #[test]
        fn smoothing_stays_within_input_range(
            (h, w, v) in (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
                (Just(h), Just(w), proptest::collection::vec(0.0f32..=1.0, h * w))
            })
        ) {
            let m = prob(h, w, v.clone());
            let s = smooth(&m, 1.0);
            let lo = v.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            for &o in s.values() {
                prop_assert!(o >= lo - 1e-6 && o <= hi + 1e-6);
            }
        }

        #[test]
        fn threshold_is_monotone(
            v in proptest::collection::vec(0.0f32..=1.0, 1..64),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let m = prob(1, v.len(), v);
            let a = threshold(&m, lo);
            let b = threshold(&m, hi);
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!(!*y || *x);
            }
        }
    }
}
