//! One-class presentation attack detection on pooled latent codes.
//!
//! Every B-scan is encoded, its latent code average-pooled over space, and
//! compared with the reference code: the mean pooled code of a held-out
//! bonafide set. An instance's spoof score is the mean Euclidean distance of
//! its slices to the reference; larger means more attack-like.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{best_accuracy, bpcer_at, d_eer, det_curve, pad_accuracy_at, DetPoint};
use crate::net::Network;
use crate::train::prepare_input;
use crate::types::{LatentCode, OctInstance, PresentationLabel, ReferenceCode, SpoofScore};

/// Spatial mean of every channel of any latent code.
pub fn pool_any(z: &LatentCode) -> Vec<f64> {
    let (_, _, channels) = z.shape();
    (0..channels)
        .map(|c| {
            let plane = z.channel(c);
            plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64
        })
        .collect()
}

/// Pools a full-size 8×24×512 latent code to 512 values.
pub fn pool_latent(z: &LatentCode) -> Result<Vec<f64>> {
    if !z.is_canonical() {
        let (h, w, c) = z.shape();
        return Err(Error::shape("latent code", "8x24x512", format!("{h}x{w}x{c}")));
    }
    Ok(pool_any(z))
}

/// Pooled code of every B-scan of an instance, in slice order.
pub fn instance_codes(net: &Network<f32>, instance: &OctInstance) -> Result<Vec<Vec<f64>>> {
    instance
        .bscans()
        .iter()
        .map(|scan| {
            let (z, _) = net.encoder_forward(&prepare_input(scan, &net.config)?)?;
            let code = LatentCode::new(z.channels, z.rows, z.cols, z.data)?;
            Ok(pool_any(&code))
        })
        .collect()
}

/// Mean of pooled codes.
pub fn reference_from_codes(codes: &[Vec<f64>]) -> Result<ReferenceCode> {
    let first = codes.first().ok_or(Error::Empty("reference B-scan set"))?;
    let mut mean = vec![0.0; first.len()];
    for code in codes {
        if code.len() != mean.len() {
            return Err(Error::shape("pooled code", mean.len().to_string(), code.len().to_string()));
        }
        for (m, v) in mean.iter_mut().zip(code) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= codes.len() as f64);
    ReferenceCode::new(mean, codes.len())
}

/// Reference code over every B-scan of the bonafide reference instances.
pub fn build_reference(instances: &[OctInstance], net: &Network<f32>) -> Result<ReferenceCode> {
    if instances.is_empty() {
        return Err(Error::Empty("reference instance set"));
    }
    let mut codes = Vec::new();
    for inst in instances {
        if inst.meta.label != PresentationLabel::Bonafide {
            return Err(Error::Invalid(format!(
                "reference instance {} is not bonafide",
                inst.meta.subject_id
            )));
        }
        codes.extend(instance_codes(net, inst)?);
    }
    reference_from_codes(&codes)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean distance of pooled slice codes to the reference.
pub fn score_codes(codes: &[Vec<f64>], reference: &ReferenceCode) -> Result<SpoofScore> {
    let mut per_slice = Vec::with_capacity(codes.len());
    for code in codes {
        if code.len() != reference.pooled.len() {
            return Err(Error::shape(
                "pooled code vs reference",
                reference.pooled.len().to_string(),
                code.len().to_string(),
            ));
        }
        per_slice.push(distance(code, &reference.pooled));
    }
    SpoofScore::from_distances(per_slice)
}

pub fn spoof_score(instance: &OctInstance, reference: &ReferenceCode, net: &Network<f32>) -> Result<SpoofScore> {
    score_codes(&instance_codes(net, instance)?, reference)
}

/// How the accuracy operating point is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "threshold")]
pub enum AccuracyThreshold {
    /// The threshold maximizing accuracy on the scored set.
    BestOnTest,
    /// A threshold fixed beforehand, e.g. from reference data.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PadReport {
    /// Percentages.
    pub acc: f64,
    pub acc_threshold: f64,
    pub acc_mode: AccuracyThreshold,
    pub bpcer10: f64,
    pub bpcer20: f64,
    pub d_eer: f64,
    pub det_curve: Vec<DetPoint>,
}

pub fn pad_metrics(bonafide: &[f64], attacks: &[f64], mode: AccuracyThreshold) -> Result<PadReport> {
    let det = det_curve(bonafide, attacks)?;
    let (acc, acc_threshold) = match mode {
        AccuracyThreshold::BestOnTest => best_accuracy(bonafide, attacks, &det),
        AccuracyThreshold::Fixed(t) => (pad_accuracy_at(bonafide, attacks, t), t),
    };
    Ok(PadReport {
        acc,
        acc_threshold,
        acc_mode: mode,
        bpcer10: bpcer_at(&det, 10.0),
        bpcer20: bpcer_at(&det, 20.0),
        d_eer: d_eer(&det),
        det_curve: det,
    })
}

/// Threshold fixed from the reference set alone: the largest score any
/// reference instance receives against the full reference code.
pub fn reference_threshold(reference_scores: &[f64]) -> Result<f64> {
    reference_scores
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(Error::Empty("reference scores"))
}
