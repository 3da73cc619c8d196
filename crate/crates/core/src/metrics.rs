//! Pixel-level evaluation.
//!
//! Ignore pixels are excluded from every count. Within a scene counts are
//! pooled; across scenes and categories F-measures are macro-averaged.

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::{Label, LabelMask};
use crate::postprocess::{self, BinaryMotionMask, ProbabilityMotionMask};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Derived metrics; `None` marks a zero denominator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub pwc: Option<f64>,
    pub f_measure: Option<f64>,
}

pub const METRIC_NAMES: [&str; 8] = [
    "tpr",
    "tnr",
    "fpr",
    "fnr",
    "precision",
    "recall",
    "pwc",
    "f_measure",
];

impl MetricReport {
    pub fn values(&self) -> [Option<f64>; 8] {
        [
            self.tpr,
            self.tnr,
            self.fpr,
            self.fnr,
            self.precision,
            self.recall,
            self.pwc,
            self.f_measure,
        ]
    }

    fn from_values(v: [Option<f64>; 8]) -> Self {
        Self {
            tpr: v[0],
            tnr: v[1],
            fpr: v[2],
            fnr: v[3],
            precision: v[4],
            recall: v[5],
            pwc: v[6],
            f_measure: v[7],
        }
    }
}

/// Cross-tabulate a binary prediction against a label mask.
pub fn count(pred: &BinaryMotionMask, gt: &LabelMask) -> Result<ConfusionCounts> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.values().iter().zip(gt.labels()) {
        match (g, p) {
            (Label::Ignore, _) => {}
            (Label::Motion, true) => c.tp += 1,
            (Label::Motion, false) => c.fn_ += 1,
            (Label::Static, true) => c.fp += 1,
            (Label::Static, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn derive(c: &ConfusionCounts) -> MetricReport {
    let tpr = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    let f_measure = match (precision, tpr) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    MetricReport {
        tpr,
        tnr: ratio(c.tn, c.tn + c.fp),
        fpr: ratio(c.fp, c.fp + c.tn),
        fnr: ratio(c.fn_, c.tp + c.fn_),
        precision,
        recall: tpr,
        pwc: ratio(100 * (c.fp + c.fn_), c.total()),
        f_measure,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    /// `None` when no point has both precision and recall defined.
    pub auc: Option<f64>,
}

/// Precision-recall points over a threshold grid with pooled counts, and
/// the trapezoidal area under them.
pub fn pr_curve(
    preds: &[ProbabilityMotionMask],
    gts: &[LabelMask],
    grid: &[f64],
) -> Result<PrCurve> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions paired with {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let points: Vec<PrPoint> = grid
        .iter()
        .map(|&t| {
            let r = derive(&postprocess::pooled_counts(preds, gts, t)?);
            Ok(PrPoint {
                threshold: t,
                precision: r.precision,
                recall: r.recall,
            })
        })
        .collect::<Result<_>>()?;
    let auc = area_under(&points);
    Ok(PrCurve { points, auc })
}

/// Trapezoidal area over recall-sorted defined points. The curve is extended
/// to recall 0 at the precision of its lowest-recall point.
fn area_under(points: &[PrPoint]) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .filter_map(|p| Some((p.recall?, p.precision?)))
        .collect();
    if pts.is_empty() {
        return None;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut area = 0.0;
    let mut prev = (0.0, pts[0].1);
    for &(r, p) in &pts {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    Some(area)
}

/// One evaluated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub scene: String,
    pub category: String,
    pub counts: ConfusionCounts,
    pub report: MetricReport,
}

impl SceneResult {
    pub fn new(scene: impl Into<String>, category: impl Into<String>, counts: ConfusionCounts) -> Self {
        Self {
            scene: scene.into(),
            category: category.into(),
            report: derive(&counts),
            counts,
        }
    }
}

/// Mean of the defined values of each metric over a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub name: String,
    pub members: usize,
    pub means: MetricReport,
    /// Members whose F-measure was undefined and therefore skipped.
    pub undefined_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub categories: Vec<GroupSummary>,
    pub overall: GroupSummary,
}

fn mean_of(reports: &[MetricReport]) -> MetricReport {
    let mut out = [None; 8];
    for (k, slot) in out.iter_mut().enumerate() {
        let defined: Vec<f64> = reports.iter().filter_map(|r| r.values()[k]).collect();
        if !defined.is_empty() {
            *slot = Some(defined.iter().sum::<f64>() / defined.len() as f64);
        }
    }
    MetricReport::from_values(out)
}

/// Per-category unweighted means, and the overall mean of category means.
pub fn aggregate(rows: &[SceneResult]) -> Summary {
    let mut groups: BTreeMap<&str, Vec<&SceneResult>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.category.as_str()).or_default().push(r);
    }
    let categories: Vec<GroupSummary> = groups
        .into_iter()
        .map(|(name, members)| {
            let reports: Vec<MetricReport> = members.iter().map(|m| m.report).collect();
            GroupSummary {
                name: name.to_string(),
                members: members.len(),
                means: mean_of(&reports),
                undefined_count: reports.iter().filter(|r| r.f_measure.is_none()).count(),
            }
        })
        .collect();
    let cat_means: Vec<MetricReport> = categories.iter().map(|c| c.means).collect();
    let overall = GroupSummary {
        name: "overall".into(),
        members: categories.len(),
        means: mean_of(&cat_means),
        undefined_count: categories.iter().map(|c| c.undefined_count).sum(),
    };
    Summary {
        categories,
        overall,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(labels: &[Label]) -> LabelMask {
        LabelMask::new(1, labels.len(), labels.to_vec()).unwrap()
    }

    fn pred(v: &[bool]) -> BinaryMotionMask {
        BinaryMotionMask::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn count_examples() {
        use Label::*;
        let c = count(
            &pred(&[true, false, true, false]),
            &mask(&[Motion, Static, Static, Motion]),
        )
        .unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 1,
                tn: 1,
                fp: 1,
                fn_: 1
            }
        );
        let c = count(&pred(&[true, true]), &mask(&[Motion, Ignore])).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 1,
                ..Default::default()
            }
        );
        assert!(count(&pred(&[true]), &mask(&[Motion, Ignore])).is_err());
    }

    #[test]
    fn derive_examples() {
        let r = derive(&ConfusionCounts {
            tp: 25,
            tn: 25,
            fp: 25,
            fn_: 25,
        });
        assert_eq!(r.pwc, Some(50.0));
        let r = derive(&ConfusionCounts {
            tp: 2,
            tn: 0,
            fp: 1,
            fn_: 1,
        });
        let two_thirds = 2.0 / 3.0;
        assert!((r.precision.unwrap() - two_thirds).abs() < 1e-12);
        assert!((r.recall.unwrap() - two_thirds).abs() < 1e-12);
        assert!((r.f_measure.unwrap() - two_thirds).abs() < 1e-12);
        let r = derive(&ConfusionCounts {
            tp: 0,
            tn: 0,
            fp: 0,
            fn_: 5,
        });
        assert_eq!(r.precision, None);
        assert_eq!(r.recall, Some(0.0));
        assert_eq!(r.f_measure, None);
    }

    #[test]
    fn aggregate_is_two_level_mean() {
        let scene = |name: &str, cat: &str, f: Option<f64>| SceneResult {
            scene: name.into(),
            category: cat.into(),
            counts: ConfusionCounts::default(),
            report: MetricReport {
                f_measure: f,
                ..Default::default()
            },
        };
        let s = aggregate(&[
            scene("a", "x", Some(0.8)),
            scene("b", "y", Some(0.6)),
            scene("c", "y", Some(1.0)),
            scene("d", "y", None),
        ]);
        assert!((s.overall.means.f_measure.unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(s.categories[1].undefined_count, 1);
        assert_eq!(s.overall.undefined_count, 1);
        let single = aggregate(&[scene("a", "x", Some(0.5)), scene("b", "y", Some(0.7))]);
        assert!((single.overall.means.f_measure.unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictor_curve() {
        use Label::*;
        let gt = mask(&[Motion, Static, Static, Static]);
        let p = ProbabilityMotionMask::new(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let c = pr_curve(&[p], &[gt], &postprocess::default_grid()).unwrap();
        assert_eq!(c.points[0].precision, Some(0.25));
        assert_eq!(c.points[0].recall, Some(1.0));
        assert!(c.points[1..].iter().all(|p| p.precision == Some(1.0) && p.recall == Some(1.0)));
        assert!((c.auc.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_half_predictor_at_half() {
        use Label::*;
        let gt = mask(&[Motion, Static, Static, Motion, Static]);
        let p = ProbabilityMotionMask::filled(1, 5, 0.5);
        let c = pr_curve(&[p], &[gt], &[0.5]).unwrap();
        assert_eq!(c.points[0].recall, Some(1.0));
        assert!((c.points[0].precision.unwrap() - 0.4).abs() < 1e-12);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<bool>, Vec<Label>)> {
        (1usize..100).prop_flat_map(|n| {
            (
                proptest::collection::vec(any::<bool>(), n),
                proptest::collection::vec(
                    prop_oneof![Just(Label::Static), Just(Label::Motion), Just(Label::Ignore)],
                    n,
                ),
            )
        })
    }

    proptest! {
        #[test]
        fn f_lies_between_precision_and_recall(tp in 0u64..50, tn in 0u64..50, fp in 0u64..50, fn_ in 0u64..50) {
            let r = derive(&ConfusionCounts { tp, tn, fp, fn_ });
            if let (Some(p), Some(rec), Some(f)) = (r.precision, r.recall, r.f_measure) {
                prop_assert!(f >= p.min(rec) - 1e-12 && f <= p.max(rec) + 1e-12);
                prop_assert_eq!(f == 1.0, p == 1.0 && rec == 1.0);
            }
            if let (Some(a), Some(b)) = (r.tpr, r.fnr) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
            if let (Some(a), Some(b)) = (r.tnr, r.fpr) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn ignore_pixels_do_not_count((p, g) in arb_case()) {
            let n = p.len();
            let base = count(&pred(&p), &mask(&g)).unwrap();
            let flipped: Vec<bool> = p.iter().zip(&g).map(|(&v, &l)| if l == Label::Ignore { !v } else { v }).collect();
            prop_assert_eq!(count(&pred(&flipped), &mask(&g)).unwrap(), base);
            let evaluated = g.iter().filter(|&&l| l != Label::Ignore).count() as u64;
            prop_assert_eq!(base.total(), evaluated);
            // additivity over a split
            let k = n / 2;
            let left = count(&pred(&p[..k]), &mask(&g[..k])).unwrap();
            let right = count(&pred(&p[k..]), &mask(&g[k..])).unwrap();
            prop_assert_eq!(left + right, base);
        }
    }
}
