//! Separable image resampling.
//!
//! Bilinear resampling uses half-pixel centers (`align_corners = false`):
//! destination index `d` samples source coordinate `(d + 0.5) * in / out - 0.5`,
//! clamped to the valid range. Nearest-neighbour uses the same mapping with
//! `floor`, so hard labels survive untouched.

use crate::types::Grid;

/// One output position of a 1-D linear interpolation: `lo`/`hi` source
/// indices and the weight given to `hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Interpolation taps for resampling `input` samples to `output` samples.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    assert!(input > 0 && output > 0, "resampling needs non-empty axes");
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Source index chosen by nearest-neighbour resampling for each output.
pub fn nearest_indices(input: usize, output: usize) -> Vec<usize> {
    assert!(input > 0 && output > 0, "resampling needs non-empty axes");
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| (((d as f64 + 0.5) * scale).floor() as usize).min(input - 1))
        .collect()
}

/// Bilinear resize of a real-valued grid.
pub fn resize_bilinear(src: &Grid<f32>, rows: usize, cols: usize) -> Grid<f32> {
    let row_taps = bilinear_taps(src.rows(), rows);
    let col_taps = bilinear_taps(src.cols(), cols);

    // Horizontal pass first, then vertical.
    let mut horizontal = vec![0.0f32; src.rows() * cols];
    for r in 0..src.rows() {
        let line = src.row(r);
        let out = &mut horizontal[r * cols..(r + 1) * cols];
        for (o, t) in out.iter_mut().zip(&col_taps) {
            let a = line[t.lo] as f64;
            let b = line[t.hi] as f64;
            *o = (a + (b - a) * t.frac) as f32;
        }
    }
    let mut data = vec![0.0f32; rows * cols];
    for (r, t) in row_taps.iter().enumerate() {
        let lo = &horizontal[t.lo * cols..(t.lo + 1) * cols];
        let hi = &horizontal[t.hi * cols..(t.hi + 1) * cols];
        let out = &mut data[r * cols..(r + 1) * cols];
        for ((o, &a), &b) in out.iter_mut().zip(lo).zip(hi) {
            let (a, b) = (a as f64, b as f64);
            *o = (a + (b - a) * t.frac) as f32;
        }
    }
    Grid::from_vec(rows, cols, data).expect("dimensions are consistent")
}

/// Nearest-neighbour resize; never invents values absent from the input.
pub fn resize_nearest<T: Copy>(src: &Grid<T>, rows: usize, cols: usize) -> Grid<T> {
    let ri = nearest_indices(src.rows(), rows);
    let ci = nearest_indices(src.cols(), cols);
    let mut data = Vec::with_capacity(rows * cols);
    for &r in &ri {
        let line = src.row(r);
        data.extend(ci.iter().map(|&c| line[c]));
    }
    Grid::from_vec(rows, cols, data).expect("dimensions are consistent")
}
