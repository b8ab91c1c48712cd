//! Subsurface fingerprints from segmented B-scans: wavelet denoising,
//! surface flattening and per-layer depth projection.

pub mod project;
pub mod straighten;
pub mod wavelet;

pub use project::{mask_indicator, project_foreground, project_layer};
pub use straighten::{straighten, straighten_with, StraightenConfig, SurfaceSource};
pub use wavelet::denoise;

use crate::error::{Error, Result};
use crate::phantom::GroundTruthRidgeMap;
use crate::resample::resize_bilinear;
use crate::types::{AnnotationMask, BScan, Grid, Layer, LayerImage};

/// The three layer images plus the full-foreground projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub stratum_corneum: LayerImage,
    pub viable_epidermis: LayerImage,
    pub dermis: LayerImage,
    pub foreground: Grid<f64>,
}

impl Reconstruction {
    pub fn layers(&self) -> [&LayerImage; 3] {
        [&self.stratum_corneum, &self.viable_epidermis, &self.dermis]
    }
}

/// Denoises, straightens and projects every slice. `scans` and `masks` are
/// paired by position and must share one size.
pub fn reconstruct_instance(scans: &[BScan], masks: &[AnnotationMask], config: &StraightenConfig) -> Result<Reconstruction> {
    if scans.len() != masks.len() {
        return Err(Error::shape("masks per instance", scans.len().to_string(), masks.len().to_string()));
    }
    let slices = scans
        .iter()
        .zip(masks)
        .map(|(scan, mask)| straighten_with(&denoise(scan)?, mask, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(Reconstruction {
        stratum_corneum: project_layer(&slices, Layer::StratumCorneum)?,
        viable_epidermis: project_layer(&slices, Layer::ViableEpidermis)?,
        dermis: project_layer(&slices, Layer::Dermis)?,
        foreground: project_foreground(&slices)?,
    })
}

/// Pearson correlation of two equally long samples.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape("correlation samples", a.len().to_string(), b.len().to_string()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Invalid("correlation of a constant sample".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Correlation of a layer image with a ridge map, after resampling the map
/// to the image's size.
pub fn ridge_correlation(image: &LayerImage, ridges: &GroundTruthRidgeMap) -> Result<f64> {
    let (rows, cols) = image.raw.dims();
    let map = resize_bilinear(&ridges.map.map(f32::from), rows, cols);
    let map: Vec<f64> = map.as_slice().iter().map(|&v| v as f64).collect();
    pearson(image.raw.as_slice(), &map)
}
