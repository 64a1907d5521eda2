//! Binary classification metrics with `Pneumonia` as the positive class.
//!
//! Precision, recall and F1 are reported per class (one-vs-rest) and as
//! support-weighted averages. ROC curves group tied scores into a single step
//! and AUC is the trapezoidal area under the resulting polyline.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::{check_threshold, decide, Label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fn_: u64, fp: u64, tn: u64) -> Self {
        Self { tp, fn_, fp, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn correct(&self) -> u64 {
        self.tp + self.tn
    }

    /// Counts seen from the other class's point of view.
    pub fn swapped(&self) -> Self {
        Self::new(self.tn, self.fp, self.fn_, self.tp)
    }

    #[inline]
    pub(crate) fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Pneumonia, Label::Pneumonia) => self.tp += 1,
            (Label::Pneumonia, Label::Normal) => self.fn_ += 1,
            (Label::Normal, Label::Pneumonia) => self.fp += 1,
            (Label::Normal, Label::Normal) => self.tn += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn confusion(true_labels: &[Label], predicted: &[Label]) -> Result<ConfusionCounts> {
    if true_labels.len() != predicted.len() {
        return Err(domain(format!(
            "length mismatch: {} true labels vs {} predictions",
            true_labels.len(),
            predicted.len()
        )));
    }
    if true_labels.is_empty() {
        return Err(domain("confusion matrix of an empty sample"));
    }
    let mut c = ConfusionCounts::default();
    for (&t, &p) in true_labels.iter().zip(predicted) {
        c.record(t, p);
    }
    Ok(c)
}

/// Confusion counts for thresholded scores.
pub fn confusion_at(scores: &[f64], true_labels: &[Label], threshold: f64) -> Result<ConfusionCounts> {
    check_threshold(threshold)?;
    let predicted: Vec<Label> = scores.iter().map(|&s| decide(s, threshold)).collect();
    confusion(true_labels, &predicted)
}

fn nonempty(c: &ConfusionCounts) -> Result<()> {
    if c.total() == 0 {
        Err(domain("confusion counts have zero total"))
    } else {
        Ok(())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    nonempty(c)?;
    Ok(c.correct() as f64 / c.total() as f64)
}

/// One-vs-rest metrics for `class`. Zero denominators give 0.
pub fn class_metrics(c: &ConfusionCounts, class: Label) -> Result<ClassMetrics> {
    nonempty(c)?;
    let c = match class {
        Label::Pneumonia => *c,
        Label::Normal => c.swapped(),
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    Ok(ClassMetrics {
        precision,
        recall,
        f1: harmonic(precision, recall),
        support: c.tp + c.fn_,
    })
}

/// Support-weighted mean of per-class metrics.
pub fn weighted_average(per_class: &[ClassMetrics]) -> Result<WeightedMetrics> {
    let n: u64 = per_class.iter().map(|m| m.support).sum();
    if n == 0 {
        return Err(domain("weighted average with zero total support"));
    }
    let n = n as f64;
    let avg = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / n;
    Ok(WeightedMetrics {
        precision: avg(|m| m.precision),
        recall: avg(|m| m.recall),
        f1: avg(|m| m.f1),
    })
}

/// Weighted F1 straight from counts; used as the secondary key in ensemble search.
pub(crate) fn weighted_f1(c: &ConfusionCounts) -> f64 {
    let pos = class_metrics(c, Label::Pneumonia).map(|m| m.f1 * m.support as f64);
    let neg = class_metrics(c, Label::Normal).map(|m| m.f1 * m.support as f64);
    match (pos, neg) {
        (Ok(p), Ok(n)) => (p + n) / c.total() as f64,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub pneumonia: ClassMetrics,
    pub normal: ClassMetrics,
    pub weighted: WeightedMetrics,
    pub auc: Option<f64>,
}

impl ClassificationReport {
    pub fn from_counts(counts: ConfusionCounts) -> Result<Self> {
        let pneumonia = class_metrics(&counts, Label::Pneumonia)?;
        let normal = class_metrics(&counts, Label::Normal)?;
        Ok(Self {
            counts,
            accuracy: accuracy(&counts)?,
            pneumonia,
            normal,
            weighted: weighted_average(&[pneumonia, normal])?,
            auc: None,
        })
    }

    /// Full report for scores at `threshold`. AUC is filled in when both
    /// classes are present.
    pub fn evaluate(scores: &[f64], true_labels: &[Label], threshold: f64) -> Result<Self> {
        let mut report = Self::from_counts(confusion_at(scores, true_labels, threshold)?)?;
        if report.pneumonia.support > 0 && report.normal.support > 0 {
            report.auc = Some(auc(&roc_curve(scores, true_labels)?));
        }
        Ok(report)
    }

    pub fn class(&self, label: Label) -> &ClassMetrics {
        match label {
            Label::Pneumonia => &self.pneumonia,
            Label::Normal => &self.normal,
        }
    }
}

/// `x` as a percentage rounded half away from zero to two decimals.
pub fn percent_2dp(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive at this point. The leading
    /// `(0, 0)` point carries `+inf`.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    points: Vec<RocPoint>,
}

impl RocCurve {
    /// Validates a point list: starts at (0,0), ends at (1,1), monotone in both axes.
    pub fn from_points(points: Vec<RocPoint>) -> Result<Self> {
        let bad = |m: &str| Err(domain(format!("invalid ROC curve: {m}")));
        let (Some(first), Some(last)) = (points.first(), points.last()) else {
            return bad("no points");
        };
        if (first.fpr, first.tpr) != (0.0, 0.0) {
            return bad("first point is not (0, 0)");
        }
        if (last.fpr, last.tpr) != (1.0, 1.0) {
            return bad("last point is not (1, 1)");
        }
        for w in points.windows(2) {
            if w[1].fpr < w[0].fpr || w[1].tpr < w[0].tpr {
                return bad("points are not monotone");
            }
        }
        if points.iter().any(|p| !(0.0..=1.0).contains(&p.fpr) || !(0.0..=1.0).contains(&p.tpr)) {
            return bad("rate outside [0, 1]");
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[RocPoint] {
        &self.points
    }
}

/// ROC curve with one point per distinct score, swept from high to low.
pub fn roc_curve(scores: &[f64], true_labels: &[Label]) -> Result<RocCurve> {
    if scores.len() != true_labels.len() {
        return Err(domain("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(domain("NaN score"));
    }
    let pos = true_labels.iter().filter(|l| l.is_positive()).count() as u64;
    let neg = true_labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateInput(
            "ROC curve needs at least one positive and one negative sample".into(),
        ));
    }

    let mut order: Vec<(f64, Label)> = scores.iter().copied().zip(true_labels.iter().copied()).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let threshold = order[i].0;
        while i < order.len() && order[i].0 == threshold {
            if order[i].1.is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold,
        });
    }
    // The last group always reaches (1, 1); nothing to append.
    RocCurve::from_points(points)
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Label::{Normal as N, Pneumonia as P};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn confusion_of_perfect_classifier() {
        let t = [P, N, P, N];
        let c = confusion(&t, &t).unwrap();
        assert_eq!((c.fn_, c.fp, c.tp + c.tn), (0, 0, 4));
        assert!(confusion(&t, &t[..3]).is_err());
        assert!(confusion(&[], &[]).is_err());
    }

    #[test]
    fn accuracy_values() {
        assert!(close(accuracy(&ConfusionCounts::new(417, 6, 2, 161)).unwrap(), 0.98635, 5e-6));
        assert!(close(accuracy(&ConfusionCounts::new(413, 10, 7, 156)).unwrap(), 0.97099, 5e-6));
        assert_eq!(accuracy(&ConfusionCounts::new(0, 0, 0, 10)).unwrap(), 1.0);
        assert!(accuracy(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn per_class_values() {
        let c = ConfusionCounts::new(417, 6, 2, 161);
        let p = class_metrics(&c, P).unwrap();
        assert!(close(p.precision, 0.99523, 5e-6));
        assert!(close(p.recall, 0.98582, 5e-6));
        assert!(close(p.f1, 0.99050, 5e-6));
        assert_eq!(p.support, 423);
        let n = class_metrics(&c, N).unwrap();
        assert!(close(n.precision, 0.96407, 5e-6));
        assert!(close(n.recall, 0.98773, 5e-6));
        assert!(close(n.f1, 0.97576, 5e-6));
        assert_eq!(n.support, 163);

        let empty_pos = class_metrics(&ConfusionCounts::new(0, 0, 0, 4), P).unwrap();
        assert_eq!(
            empty_pos,
            ClassMetrics {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
                support: 0
            }
        );
    }

    #[test]
    fn weighted_values() {
        let c = ConfusionCounts::new(417, 6, 2, 161);
        let w = weighted_average(&[class_metrics(&c, P).unwrap(), class_metrics(&c, N).unwrap()]).unwrap();
        // support-weighted mean by hand: (417/419 * 423 + 161/167 * 163) / 586
        let by_hand = (417.0 / 419.0 * 423.0 + 161.0 / 167.0 * 163.0) / 586.0;
        assert!(close(w.precision, by_hand, 1e-15));
        assert!(close(w.precision, 0.98656, 5e-6));
        assert!(close(w.recall, 0.98635, 5e-6));
        assert!(close(w.f1, 0.98640, 5e-6));
        assert_eq!(
            [w.precision, w.recall, w.f1].map(percent_2dp),
            [98.66, 98.63, 98.64]
        );

        let c = ConfusionCounts::new(410, 13, 9, 154);
        let w = weighted_average(&[class_metrics(&c, P).unwrap(), class_metrics(&c, N).unwrap()]).unwrap();
        assert!(close(w.precision, 0.96284, 5e-6));
        assert!(close(w.recall, 0.96246, 5e-6));
        assert!(close(w.f1, 0.96260, 5e-6));

        let only = ClassMetrics {
            precision: 0.3,
            recall: 0.7,
            f1: 0.42,
            support: 9,
        };
        let w = weighted_average(&[only]).unwrap();
        assert_eq!((w.precision, w.recall, w.f1), (0.3, 0.7, 0.42));
        assert!(weighted_average(&[ClassMetrics { support: 0, ..only }]).is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(percent_2dp(0.986348), 98.63);
        assert_eq!(percent_2dp(0.12345), 12.35);
        assert_eq!(percent_2dp(1.0), 100.0);
    }

    #[test]
    fn roc_examples() {
        let c = roc_curve(&[0.9, 0.9, 0.1, 0.1], &[P, P, N, N]).unwrap();
        let xy: Vec<(f64, f64)> = c.points().iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(xy, [(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        assert_eq!(auc(&c), 1.0);

        let c = roc_curve(&[0.7, 0.7], &[P, N]).unwrap();
        let xy: Vec<(f64, f64)> = c.points().iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(xy, [(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(auc(&c), 0.5);

        let c = roc_curve(&[0.1, 0.1, 0.9, 0.9], &[P, P, N, N]).unwrap();
        assert_eq!(auc(&c), 0.0);

        assert!(matches!(roc_curve(&[0.2, 0.3], &[P, P]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn two_level_reconstruction() {
        let mut scores = vec![];
        let mut labels = vec![];
        for (n, s, l) in [(417, 0.9, P), (2, 0.9, N), (6, 0.1, P), (161, 0.1, N)] {
            scores.extend(std::iter::repeat(s).take(n));
            labels.extend(std::iter::repeat(l).take(n));
        }
        let c = roc_curve(&scores, &labels).unwrap();
        assert_eq!(c.points().len(), 3);
        let mid = c.points()[1];
        assert!(close(mid.fpr, 2.0 / 163.0, 1e-15));
        assert!(close(mid.tpr, 417.0 / 423.0, 1e-15));
        // Hand trapezoid over (0,0), (2/163, 417/423), (1,1).
        let (x, y) = (2.0 / 163.0, 417.0 / 423.0);
        let by_hand = x * y / 2.0 + (1.0 - x) * (y + 1.0) / 2.0;
        assert!(close(auc(&c), by_hand, 1e-15));
        assert!(close(auc(&c), 0.98678, 1e-5));
    }

    #[test]
    fn rejects_invalid_curves() {
        let p = |fpr, tpr| RocPoint { fpr, tpr, threshold: 0.5 };
        assert!(RocCurve::from_points(vec![]).is_err());
        assert!(RocCurve::from_points(vec![p(0.0, 0.0), p(0.5, 0.4), p(0.4, 0.6), p(1.0, 1.0)]).is_err());
        assert!(RocCurve::from_points(vec![p(0.0, 0.1), p(1.0, 1.0)]).is_err());
        assert!(RocCurve::from_points(vec![p(0.0, 0.0), p(1.0, 0.9)]).is_err());
    }

    fn arb_counts() -> impl Strategy<Value = ConfusionCounts> {
        (0u64..500, 0u64..500, 0u64..500, 0u64..500)
            .prop_filter("nonempty", |(a, b, c, d)| a + b + c + d > 0)
            .prop_map(|(a, b, c, d)| ConfusionCounts::new(a, b, c, d))
    }

    fn arb_scored() -> impl Strategy<Value = (Vec<f64>, Vec<Label>)> {
        proptest::collection::vec((0u8..20, any::<bool>()), 2..60)
            .prop_map(|v| {
                let mut s: Vec<f64> = v.iter().map(|(q, _)| *q as f64 / 19.0).collect();
                let mut l: Vec<Label> = v.iter().map(|(_, b)| if *b { P } else { N }).collect();
                // guarantee both classes
                l[0] = P;
                l[1] = N;
                s.truncate(l.len());
                (s, l)
            })
    }

    proptest! {
        #[test]
        fn metrics_in_unit_interval(c in arb_counts()) {
            let r = ClassificationReport::from_counts(c).unwrap();
            for x in [r.accuracy, r.pneumonia.precision, r.pneumonia.recall, r.pneumonia.f1,
                      r.normal.precision, r.normal.recall, r.normal.f1,
                      r.weighted.precision, r.weighted.recall, r.weighted.f1] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }

        #[test]
        fn weighted_recall_is_accuracy(c in arb_counts()) {
            let r = ClassificationReport::from_counts(c).unwrap();
            prop_assert!((r.weighted.recall - r.accuracy).abs() <= 1e-12);
        }

        #[test]
        fn class_symmetry(c in arb_counts()) {
            prop_assert_eq!(class_metrics(&c, P).unwrap(), class_metrics(&c.swapped(), N).unwrap());
        }

        #[test]
        fn confusion_is_order_invariant(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..80), rot in 0usize..80) {
            let to = |b: bool| if b { P } else { N };
            let t: Vec<Label> = pairs.iter().map(|p| to(p.0)).collect();
            let p: Vec<Label> = pairs.iter().map(|p| to(p.1)).collect();
            let k = rot % t.len();
            let (mut t2, mut p2) = (t.clone(), p.clone());
            t2.rotate_left(k);
            p2.rotate_left(k);
            t2.reverse();
            p2.reverse();
            prop_assert_eq!(confusion(&t, &p).unwrap(), confusion(&t2, &p2).unwrap());
        }

        #[test]
        fn auc_monotone_transform_invariant((s, l) in arb_scored()) {
            let a = auc(&roc_curve(&s, &l).unwrap());
            let cubed: Vec<f64> = s.iter().map(|x| x * x * x).collect();
            let b = auc(&roc_curve(&cubed, &l).unwrap());
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn auc_label_swap_symmetry((s, l) in arb_scored()) {
            let a = auc(&roc_curve(&s, &l).unwrap());
            let s2: Vec<f64> = s.iter().map(|x| 1.0 - x).collect();
            let l2: Vec<Label> = l.iter().map(|x| x.flipped()).collect();
            let b = auc(&roc_curve(&s2, &l2).unwrap());
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn roc_is_monotone((s, l) in arb_scored()) {
            let c = roc_curve(&s, &l).unwrap();
            for w in c.points().windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
                prop_assert!(w[1].threshold < w[0].threshold);
            }
        }
    }
}
