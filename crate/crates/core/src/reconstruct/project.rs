//! Per-layer depth projection.

use crate::error::{Error, Result};
use crate::types::{AnnotationMask, Class, Grid, Layer, LayerImage, StraightenedBScan};

/// Projection intensities are snapped to multiples of this step. Every
/// column sum is then an integer multiple of it below 2^53, so sums are exact
/// in any order and the per-layer images add up to the foreground image
/// bit for bit.
pub const QUANTUM: f64 = 1.0 / (1u64 << 24) as f64;

pub fn quantize(v: f32) -> f64 {
    (v as f64 / QUANTUM).round() * QUANTUM
}

/// 1 where the mask holds the layer's class.
pub fn mask_indicator(mask: &AnnotationMask, layer: Layer) -> Grid<u8> {
    let class = layer.class() as u8;
    mask.labels().map(|l| u8::from(l == class))
}

/// Column sums of `pixels` over rows where `member(row, col)` holds.
pub fn project_slice(pixels: &Grid<f32>, member: impl Fn(usize, usize) -> bool) -> Vec<f64> {
    let (rows, cols) = pixels.dims();
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (c, o) in out.iter_mut().enumerate() {
            if member(r, c) {
                *o += quantize(pixels.get(r, c));
            }
        }
    }
    out
}

fn project(slices: &[StraightenedBScan], member: impl Fn(&AnnotationMask, usize, usize) -> bool) -> Result<Grid<f64>> {
    let first = slices.first().ok_or(Error::Empty("straightened slices"))?;
    let (rows, cols) = first.pixels.dims();
    let mut data = Vec::with_capacity(slices.len() * cols);
    for (j, s) in slices.iter().enumerate() {
        if s.pixels.dims() != (rows, cols) || s.mask.dims() != (rows, cols) {
            let (r, c) = s.pixels.dims();
            return Err(Error::shape("straightened slice", format!("{rows}x{cols}"), format!("slice {j}: {r}x{c}")));
        }
        data.extend(project_slice(&s.pixels, |r, c| member(&s.mask, r, c)));
    }
    Ok(Grid::from_vec(slices.len(), cols, data).expect("sized"))
}

/// `R_h(j, n)`: masked intensity sum of column `n` of slice `j`.
pub fn project_layer(slices: &[StraightenedBScan], layer: Layer) -> Result<LayerImage> {
    let class = layer.class();
    Ok(LayerImage {
        layer,
        raw: project(slices, |m, r, c| m.get(r, c) == class)?,
    })
}

/// Projection over every non-background pixel.
pub fn project_foreground(slices: &[StraightenedBScan]) -> Result<Grid<f64>> {
    project(slices, |m, r, c| m.get(r, c) != Class::Background)
}
