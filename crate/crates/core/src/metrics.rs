//! Overlap metrics for segmentations and threshold/ROC metrics for diagnoses.
//!
//! Class 1 is the positive class throughout: vessel voxel for masks,
//! glaucoma for diagnoses.

use alloc::format;
use alloc::vec::Vec;

use crate::volume::MaskVolume;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Exact non-negative fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Equality as rationals.
    pub fn same_as(self, other: Ratio) -> bool {
        self.num as u128 * other.den as u128 == other.num as u128 * self.den as u128
    }
}

/// Threshold metrics; `None` marks an undefined ratio (zero denominator).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2TP / (2TP + FP + FN)`; two empty masks agree perfectly (1/1).
    pub fn dice_ratio(&self) -> Ratio {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            Ratio { num: 1, den: 1 }
        } else {
            Ratio { num: 2 * self.tp, den }
        }
    }

    /// `TP / (TP + FP + FN)`; two empty masks agree perfectly (1/1).
    pub fn jaccard_ratio(&self) -> Ratio {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            Ratio { num: 1, den: 1 }
        } else {
            Ratio { num: self.tp, den }
        }
    }

    pub fn dice(&self) -> f64 {
        self.dice_ratio().value()
    }

    pub fn jaccard(&self) -> f64 {
        self.jaccard_ratio().value()
    }

    pub fn classification(&self) -> ClassificationMetrics {
        ClassificationMetrics {
            accuracy: ratio(self.tp + self.tn, self.total()),
            sensitivity: ratio(self.tp, self.tp + self.fn_),
            specificity: ratio(self.tn, self.tn + self.fp),
        }
    }
}

/// Voxelwise counts between a predicted and a reference mask.
pub fn confusion_masks(pred: &MaskVolume, truth: &MaskVolume) -> Result<ConfusionCounts> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(
            "confusion",
            format!("prediction {:?} vs truth {:?}", pred.dims(), truth.dims()),
        ));
    }
    Ok(count_pairs(pred.voxels().iter().copied().zip(truth.voxels().iter().copied())))
}

/// Samplewise counts between predicted and true class labels in `{0, 1}`.
pub fn confusion_labels(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "confusion",
            format!("{} predictions for {} labels", pred.len(), truth.len()),
        ));
    }
    if pred.iter().chain(truth).any(|&l| l > 1) {
        return Err(Error::invalid("label", "labels must be 0 or 1"));
    }
    Ok(count_pairs(pred.iter().copied().zip(truth.iter().copied())))
}

fn count_pairs(pairs: impl Iterator<Item = (u8, u8)>) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (p, t) in pairs {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(FPR, TPR)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC curve over descending score thresholds, tied scores forming one
/// step. The trapezoid area is accumulated in integers, so it equals the
/// Mann-Whitney statistic (ties count one half) up to one final division.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "roc",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("score", "NaN"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("label", "labels must be 0 or 1"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::with_capacity(scores.len() + 1);
    points.push((0.0, 0.0));
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area, in units of 1 / (pos * neg)
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = area2 as f64 / (2.0 * pos as f64 * neg as f64);
    Ok(RocCurve { points, auc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if si > sj {
                        wins += 1.0;
                    } else if si == sj {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn hand_counted_sets() {
        // pred {a,b,c,d}, truth {c,d,e} over 8 voxels
        let pred = [1, 1, 1, 1, 0, 0, 0, 0];
        let truth = [0, 0, 1, 1, 1, 0, 0, 0];
        let c = confusion_labels(&pred, &truth).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 2, fn_: 1, tn: 3 });
    }

    #[test]
    fn mask_counts() {
        let a = MaskVolume::from_voxels([1, 2, 2], vec![1, 1, 0, 0]).unwrap();
        let b = MaskVolume::from_voxels([1, 2, 2], vec![0, 0, 1, 1]).unwrap();
        let same = confusion_masks(&a, &a).unwrap();
        assert_eq!((same.fp, same.fn_), (0, 0));
        assert_eq!(confusion_masks(&a, &b).unwrap().tp, 0);
        let c = MaskVolume::empty([2, 2, 1]).unwrap();
        assert!(confusion_masks(&a, &c).is_err());
    }

    #[test]
    fn dice_and_jaccard_values() {
        let c = ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 0 };
        assert_eq!(c.dice(), 0.75);
        assert_eq!(c.jaccard(), 0.6);
        assert!((2.0 * 0.6 / 1.6 - 0.75f64).abs() < 1e-15);
        let perfect = ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 9 };
        assert_eq!((perfect.dice(), perfect.jaccard()), (1.0, 1.0));
        let disjoint = ConfusionCounts { tp: 0, fp: 4, fn_: 2, tn: 1 };
        assert_eq!((disjoint.dice(), disjoint.jaccard()), (0.0, 0.0));
        let empty = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 10 };
        assert_eq!((empty.dice(), empty.jaccard()), (1.0, 1.0));
    }

    #[test]
    fn cohort_worked_example() {
        let c = ConfusionCounts { tp: 178, fp: 18, fn_: 42, tn: 110 };
        let m = c.classification();
        assert_eq!(m.accuracy, Some(288.0 / 348.0));
        assert_eq!(m.sensitivity, Some(178.0 / 220.0));
        assert_eq!(m.specificity, Some(110.0 / 128.0));
        assert!((m.accuracy.unwrap() - 0.827).abs() < 1e-3);
        assert!((m.sensitivity.unwrap() - 0.809).abs() < 1e-3);
        assert!((m.specificity.unwrap() - 0.859).abs() < 1e-3);
    }

    #[test]
    fn classification_edge_cases() {
        let all_right = ConfusionCounts { tp: 4, fp: 0, fn_: 0, tn: 6 }.classification();
        assert_eq!(
            all_right,
            ClassificationMetrics { accuracy: Some(1.0), sensitivity: Some(1.0), specificity: Some(1.0) }
        );
        let ones = ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 }.classification();
        assert_eq!(
            ones,
            ClassificationMetrics { accuracy: Some(0.5), sensitivity: Some(0.5), specificity: Some(0.5) }
        );
        let no_pos = ConfusionCounts { tp: 0, fp: 1, fn_: 0, tn: 3 }.classification();
        assert_eq!(no_pos.sensitivity, None);
        assert_eq!(ConfusionCounts::default().classification().accuracy, None);
    }

    #[test]
    fn roc_basics() {
        let r = roc_auc(&[0.9, 0.1], &[1, 0]).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.points, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        let r = roc_auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap();
        assert_eq!(r.auc, 0.5);
        assert_eq!(r.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(roc_auc(&[0.2, 0.4], &[1, 1]), Err(Error::SingleClass));
    }

    proptest! {
        #[test]
        fn dice_jaccard_identity(tp in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000) {
            let c = ConfusionCounts { tp, fp, fn_, tn: 0 };
            let ji = c.jaccard_ratio();
            // 2J/(1+J) as a fraction
            let via_j = Ratio { num: 2 * ji.num, den: ji.den + ji.num };
            prop_assert!(c.dice_ratio().same_as(via_j));
            let swapped = ConfusionCounts { tp, fp: fn_, fn_: fp, tn: 0 };
            prop_assert_eq!(c.dice(), swapped.dice());
        }

        #[test]
        fn auc_matches_pairwise(
            raw in proptest::collection::vec((0u8..20, 0u8..2), 2..120)
        ) {
            let mut labels: Vec<u8> = raw.iter().map(|r| r.1).collect();
            labels[0] = 1;
            labels[1] = 0;
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 7.0).collect();
            let r = roc_auc(&scores, &labels).unwrap();
            prop_assert!((r.auc - pairwise_auc(&scores, &labels)).abs() <= 1e-12);
            prop_assert_eq!(*r.points.first().unwrap(), (0.0, 0.0));
            prop_assert_eq!(*r.points.last().unwrap(), (1.0, 1.0));
            for w in r.points.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
            let squashed: Vec<f64> = scores.iter().map(|s| (s * 3.0 + 1.0).powi(3)).collect();
            prop_assert_eq!(roc_auc(&squashed, &labels).unwrap().auc, r.auc);
        }
    }
}
