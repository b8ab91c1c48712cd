//! Segmentation and score metrics.
//!
//! Error rates are percentages. Two decision conventions appear here:
//!
//! * PAD scores grow with attack likelihood; a score strictly above the
//!   threshold is classified as an attack.
//! * Recognition scores grow with similarity; a score at or above the
//!   threshold is a match.
//!
//! Every curve is swept over the distinct observed scores plus one sentinel
//! beyond each end, so both extreme operating points are always present.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::NUM_CLASSES;

/// `counts[t][p]` is the number of pixels of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Adds another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes(), other.classes(), "confusion matrices differ in size");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_diagonal(&self) -> bool {
        self.counts
            .iter()
            .enumerate()
            .all(|(i, row)| row.iter().enumerate().all(|(j, &v)| i == j || v == 0))
    }
}

/// Counts (true, predicted) label pairs.
pub fn confusion_matrix(pred: &[u8], truth: &[u8], classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::shape("confusion matrix", truth.len().to_string(), pred.len().to_string()));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (index, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        for label in [p, t] {
            if label as usize >= classes {
                return Err(Error::LabelOutOfRange { label, index, classes });
            }
        }
        cm.counts[t as usize][p as usize] += 1;
    }
    Ok(cm)
}

/// Four-class confusion matrix.
pub fn segmentation_confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionMatrix> {
    confusion_matrix(pred, truth, NUM_CLASSES)
}

/// Mean intersection over union; classes with empty union are skipped.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.classes();
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..n {
        let tp = cm.counts[c][c];
        let fn_: u64 = cm.counts[c].iter().sum::<u64>() - tp;
        let fp: u64 = (0..n).map(|t| cm.counts[t][c]).sum::<u64>() - tp;
        let union = tp + fp + fn_;
        if union > 0 {
            sum += tp as f64 / union as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    Ok(sum / present as f64)
}

pub fn pixel_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let trace: u64 = (0..cm.classes()).map(|c| cm.counts[c][c]).sum();
    Ok(trace as f64 / total as f64)
}

fn check_scores(scores: &[f64], what: &'static str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Empty(what));
    }
    if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("{what} contain non-finite score {v}")));
    }
    Ok(())
}

fn distinct_sorted(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    all
}

fn percent(count: usize, total: usize) -> f64 {
    100.0 * count as f64 / total as f64
}

/// Number of values strictly greater than `t` in an ascending slice.
fn count_above(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|&v| v <= t)
}

/// Number of values strictly below `t` in an ascending slice.
fn count_below(sorted: &[f64], t: f64) -> usize {
    sorted.partition_point(|&v| v < t)
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Where a piecewise-linear curve `(x_i, y_i)` first meets `x = y`, taking
/// the curve to start with `x < y`. Returns the common rate.
fn diagonal_crossing(points: impl Iterator<Item = (f64, f64)>) -> f64 {
    let mut prev: Option<(f64, f64)> = None;
    for (x, y) in points {
        let d = x - y;
        if d == 0.0 {
            return x;
        }
        if let Some((px, py)) = prev {
            let pd = px - py;
            if pd < 0.0 && d > 0.0 {
                let lambda = pd / (pd - d);
                return px + lambda * (x - px);
            }
        }
        prev = Some((x, y));
    }
    unreachable!("sweeps always run from one extreme to the other")
}

/// One operating point of a PAD detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    /// Scores strictly above this are classified as attacks. Infinite at the
    /// sentinels.
    #[serde(with = "threshold_repr")]
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
}

mod threshold_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(serde::Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad threshold {s}"))),
        }
    }
}

/// APCER/BPCER at every distinct threshold, thresholds ascending. APCER is
/// non-decreasing and BPCER non-increasing along the curve.
pub fn det_curve(bonafide: &[f64], attacks: &[f64]) -> Result<Vec<DetPoint>> {
    check_scores(bonafide, "bonafide scores")?;
    check_scores(attacks, "attack scores")?;
    let (b, a) = (sorted(bonafide), sorted(attacks));
    let mut thresholds = vec![f64::NEG_INFINITY];
    thresholds.extend(distinct_sorted(bonafide, attacks));
    Ok(thresholds
        .into_iter()
        .map(|t| DetPoint {
            threshold: t,
            apcer: percent(a.len() - count_above(&a, t), a.len()),
            bpcer: percent(count_above(&b, t), b.len()),
        })
        .collect())
}

/// Lowest BPCER among thresholds whose APCER is at most `100 / n` percent.
pub fn bpcer_at(det: &[DetPoint], n: f64) -> f64 {
    let limit = 100.0 / n;
    det.iter()
        .filter(|p| p.apcer <= limit)
        .map(|p| p.bpcer)
        .fold(f64::INFINITY, f64::min)
}

/// Detection equal-error rate, interpolated along the DET polyline.
pub fn d_eer(det: &[DetPoint]) -> f64 {
    diagonal_crossing(det.iter().map(|p| (p.apcer, p.bpcer)))
}

/// Classification accuracy (percent) at a fixed threshold.
pub fn pad_accuracy_at(bonafide: &[f64], attacks: &[f64], threshold: f64) -> f64 {
    let correct =
        bonafide.iter().filter(|&&s| s <= threshold).count() + attacks.iter().filter(|&&s| s > threshold).count();
    percent(correct, bonafide.len() + attacks.len())
}

/// Best accuracy over the DET thresholds, with the first threshold reaching
/// it.
pub fn best_accuracy(bonafide: &[f64], attacks: &[f64], det: &[DetPoint]) -> (f64, f64) {
    let (nb, na) = (bonafide.len() as f64, attacks.len() as f64);
    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in det {
        let correct = nb * (100.0 - p.bpcer) / 100.0 + na * (100.0 - p.apcer) / 100.0;
        let acc = 100.0 * correct / (nb + na);
        if acc > best.0 {
            best = (acc, p.threshold);
        }
    }
    best
}

/// One operating point of a comparison-score matcher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPoint {
    /// Scores at or above this are matches.
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
}

/// FMR/FNMR at every distinct threshold, ascending; FMR falls and FNMR rises.
pub fn match_curve(genuine: &[f64], impostor: &[f64]) -> Result<Vec<MatchPoint>> {
    check_scores(genuine, "genuine scores")?;
    check_scores(impostor, "impostor scores")?;
    let (g, i) = (sorted(genuine), sorted(impostor));
    let mut thresholds = distinct_sorted(genuine, impostor);
    thresholds.push(f64::INFINITY);
    Ok(thresholds
        .into_iter()
        .map(|t| MatchPoint {
            threshold: t,
            fmr: percent(i.len() - count_below(&i, t), i.len()),
            fnmr: percent(count_below(&g, t), g.len()),
        })
        .collect())
}

/// Equal error rate of a matcher, interpolated between thresholds.
pub fn eer(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    let curve = match_curve(genuine, impostor)?;
    Ok(diagonal_crossing(curve.iter().map(|p| (p.fnmr, p.fmr))))
}

/// Lowest FNMR among thresholds with FMR at most `target` percent.
fn fnmr_at(curve: &[MatchPoint], target: f64) -> f64 {
    curve
        .iter()
        .filter(|p| p.fmr <= target)
        .map(|p| p.fnmr)
        .fold(f64::INFINITY, f64::min)
}

/// FNMR at FMR ≤ 1%.
pub fn fmr100(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    Ok(fnmr_at(&match_curve(genuine, impostor)?, 1.0))
}

/// Genuine match rate at FMR ≤ `fmr_target` percent.
pub fn gmr_at_fmr(genuine: &[f64], impostor: &[f64], fmr_target: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&fmr_target) {
        return Err(Error::Invalid(format!("FMR target {fmr_target}% is not a percentage")));
    }
    Ok(100.0 - fnmr_at(&match_curve(genuine, impostor)?, fmr_target))
}
