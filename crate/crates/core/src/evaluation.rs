//! Pixel-level precision, recall and F-measure of foreground masks.
//!
//! Sequence scores are micro-averaged: confusion counts are summed over the
//! labeled frames before the metrics are computed.

use serde::{Deserialize, Serialize};

use crate::pipeline::MaskSequence;
use crate::video_io::{GroundTruthMasks, Mask};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), |a, b| a + b)
    }
}

pub fn confusion(predicted: &Mask, truth: &Mask) -> Result<ConfusionCounts> {
    if (predicted.height(), predicted.width()) != (truth.height(), truth.width()) {
        return Err(Error::ShapeMismatch(format!(
            "predicted mask {}x{} vs ground truth {}x{}",
            predicted.height(),
            predicted.width(),
            truth.height(),
            truth.width()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in predicted.data().iter().zip(truth.data()) {
        match (p == 1, t == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

/// Precision, recall and their harmonic mean.
///
/// Empty prediction against empty truth scores 1 everywhere. Otherwise a
/// zero denominator gives 0 for that metric, and `tp = 0` gives `F = 0`.
pub fn precision_recall_f(c: &ConfusionCounts) -> Scores {
    let predicted = c.tp + c.fp;
    let actual = c.tp + c.fn_;
    if predicted == 0 && actual == 0 {
        return Scores {
            precision: 1.0,
            recall: 1.0,
            f_measure: 1.0,
        };
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, predicted);
    let recall = ratio(c.tp, actual);
    let f_measure = if c.tp == 0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Scores {
        precision,
        recall,
        f_measure,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub index: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    #[serde(flatten)]
    pub counts: ConfusionCounts,
}

/// Serialized as `{"frames", "precision", "recall", "f_measure", "per_frame"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub per_frame: Vec<FrameMetrics>,
}

impl MetricReport {
    /// Sum of the per-frame confusion counts.
    pub fn confusion(&self) -> ConfusionCounts {
        self.per_frame.iter().map(|f| f.counts).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores `(index, predicted, truth)` triples.
pub fn evaluate_pairs<'a, I>(pairs: I) -> Result<MetricReport>
where
    I: IntoIterator<Item = (usize, &'a Mask, &'a Mask)>,
{
    let per_frame = pairs
        .into_iter()
        .map(|(index, pred, truth)| {
            let counts = confusion(pred, truth)?;
            let s = precision_recall_f(&counts);
            Ok(FrameMetrics {
                index,
                precision: s.precision,
                recall: s.recall,
                f_measure: s.f_measure,
                counts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if per_frame.is_empty() {
        return Err(Error::NoLabeledFrames);
    }
    let total: ConfusionCounts = per_frame.iter().map(|f| f.counts).sum();
    let s = precision_recall_f(&total);
    Ok(MetricReport {
        frames: per_frame.len(),
        precision: s.precision,
        recall: s.recall,
        f_measure: s.f_measure,
        per_frame,
    })
}

/// Scores the labeled frames of `truth`; frame `i` of `masks` is compared
/// with ground-truth frame `i`.
pub fn evaluate_sequence(masks: &MaskSequence, truth: &GroundTruthMasks) -> Result<MetricReport> {
    if truth.labeled_indices().is_empty() {
        return Err(Error::NoLabeledFrames);
    }
    if let Some(&i) = truth.labeled_indices().iter().find(|&&i| i >= masks.len()) {
        return Err(Error::InvalidData(format!(
            "ground truth labels frame {i} but only {} masks were produced",
            masks.len()
        )));
    }
    evaluate_pairs(
        truth
            .labeled_indices()
            .iter()
            .map(|&i| (i, &masks.masks[i], &truth.masks()[i])),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> Mask {
        Mask::from_vec(1, bits.len(), bits.to_vec()).unwrap()
    }

    #[test]
    fn confusion_cases() {
        let ones = mask(&[1; 100]);
        let c = confusion(&ones, &ones).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 100, fp: 0, fn_: 0, tn: 0 });

        let mut truth = vec![0u8; 100];
        truth[..30].fill(1);
        let c = confusion(&mask(&[0; 100]), &mask(&truth)).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 0, fp: 0, fn_: 30, tn: 70 });

        assert!(confusion(&mask(&[0; 4]), &mask(&[0; 5])).is_err());
    }

    #[test]
    fn score_cases() {
        let s = precision_recall_f(&ConfusionCounts { tp: 50, fp: 25, fn_: 25, tn: 0 });
        for v in [s.precision, s.recall, s.f_measure] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
        let s = precision_recall_f(&ConfusionCounts { tp: 10, fp: 0, fn_: 0, tn: 5 });
        assert_eq!((s.precision, s.recall, s.f_measure), (1.0, 1.0, 1.0));
        let s = precision_recall_f(&ConfusionCounts { tp: 0, fp: 3, fn_: 4, tn: 5 });
        assert_eq!(s.f_measure, 0.0);
        let s = precision_recall_f(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 5 });
        assert_eq!((s.precision, s.recall, s.f_measure), (1.0, 1.0, 1.0));
        let s = precision_recall_f(&ConfusionCounts { tp: 0, fp: 0, fn_: 2, tn: 5 });
        assert_eq!((s.precision, s.recall, s.f_measure), (0.0, 0.0, 0.0));
    }

    #[test]
    fn aggregate_of_single_or_repeated_frame() {
        let p = mask(&[1, 1, 0, 0, 1]);
        let t = mask(&[1, 0, 1, 0, 1]);
        let one = evaluate_pairs([(0, &p, &t)]).unwrap();
        assert_eq!(one.f_measure, one.per_frame[0].f_measure);
        let two = evaluate_pairs([(0, &p, &t), (1, &p, &t)]).unwrap();
        assert_eq!(two.f_measure, two.per_frame[0].f_measure);
        assert_eq!(two.frames, 2);
        assert!(matches!(evaluate_pairs(std::iter::empty()), Err(Error::NoLabeledFrames)));
    }

    #[test]
    fn report_json_shape() {
        let p = mask(&[1, 0]);
        let json = evaluate_pairs([(3, &p, &p)]).unwrap().to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["frames", "precision", "recall", "f_measure", "per_frame"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["per_frame"][0]["index"], 3);
        assert_eq!(v["per_frame"][0]["fn"], 0);
    }

    fn arb_pair() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (1usize..60).prop_flat_map(|n| {
            (prop::collection::vec(0u8..=1, n), prop::collection::vec(0u8..=1, n))
        })
    }

    proptest! {
        #[test]
        fn swapping_arguments_swaps_fp_and_fn((a, b) in arb_pair()) {
            let ab = confusion(&mask(&a), &mask(&b)).unwrap();
            let ba = confusion(&mask(&b), &mask(&a)).unwrap();
            prop_assert_eq!((ab.tp, ab.fp, ab.fn_, ab.tn), (ba.tp, ba.fn_, ba.fp, ba.tn));
            prop_assert_eq!(ab.total(), a.len() as u64);
        }

        #[test]
        fn metrics_bounded_and_harmonic(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
            let s = precision_recall_f(&ConfusionCounts { tp, fp, fn_, tn: 0 });
            for v in [s.precision, s.recall, s.f_measure] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if tp > 0 {
                prop_assert!(s.f_measure <= s.precision.max(s.recall) + 1e-12);
                prop_assert!(s.f_measure >= s.precision.min(s.recall) - 1e-12);
            }
        }

        #[test]
        fn aggregate_counts_are_sum_of_frames(frames in prop::collection::vec(arb_pair(), 1..6)) {
            let masks: Vec<(Mask, Mask)> = frames.iter().map(|(a, b)| (mask(a), mask(b))).collect();
            let report = evaluate_pairs(masks.iter().enumerate().map(|(i, (p, t))| (i, p, t))).unwrap();
            let direct: ConfusionCounts = masks.iter().map(|(p, t)| confusion(p, t).unwrap()).sum();
            prop_assert_eq!(report.confusion(), direct);
            let s = precision_recall_f(&direct);
            prop_assert_eq!(report.f_measure, s.f_measure);
        }
    }
}
