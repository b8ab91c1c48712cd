//! Two-level Daubechies-2 wavelet shrinkage.
//!
//! Each 1-D transform extends the signal by half-sample symmetry and keeps
//! `(n + 3) / 2` coefficients per band, enough for exact reconstruction with
//! the transposed filter bank.

use crate::error::{Error, Result};
use crate::types::{BScan, Grid};

/// Analysis low-pass filter: `(1-√3, 3-√3, 3+√3, 1+√3) / 4√2`.
pub const DB2_LO: [f64; 4] = [
    -0.129_409_522_551_260_37,
    0.224_143_868_042_013_4,
    0.836_516_303_737_807_9,
    0.482_962_913_144_534_16,
];
/// Analysis high-pass filter (quadrature mirror of [`DB2_LO`]).
pub const DB2_HI: [f64; 4] = [-DB2_LO[3], DB2_LO[2], -DB2_LO[1], DB2_LO[0]];

/// Smallest side the two-level transform accepts.
pub const MIN_SIDE: usize = 8;
pub const LEVELS: usize = 2;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

pub fn coefficient_len(n: usize) -> usize {
    (n + DB2_LO.len() - 1) / 2
}

/// One-level 1-D analysis: (approximation, detail).
pub fn dwt(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let len = coefficient_len(n);
    let mut lo = vec![0.0; len];
    let mut hi = vec![0.0; len];
    for i in 0..len {
        for k in 0..4 {
            let v = x[reflect(2 * i as isize + 1 - k as isize, n)];
            lo[i] += DB2_LO[k] * v;
            hi[i] += DB2_HI[k] * v;
        }
    }
    (lo, hi)
}

/// Inverse of [`dwt`] for a signal of length `n`.
pub fn idwt(lo: &[f64], hi: &[f64], n: usize) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for (m, out) in x.iter_mut().enumerate() {
        // Coefficient i touches sample m through tap 2i + 1 - m.
        let first = m.saturating_sub(1).div_ceil(2);
        for i in first..=(m + 2) / 2 {
            let k = 2 * i + 1;
            if k < m || k - m >= 4 || i >= lo.len() {
                continue;
            }
            *out += DB2_LO[k - m] * lo[i] + DB2_HI[k - m] * hi[i];
        }
    }
    x
}

/// Subbands of one 2-D level: low-low plus (row-high, column-high, both).
#[derive(Debug, Clone)]
pub struct Level {
    pub ll: Grid<f64>,
    pub lh: Grid<f64>,
    pub hl: Grid<f64>,
    pub hh: Grid<f64>,
}

fn transform_rows(g: &Grid<f64>) -> (Grid<f64>, Grid<f64>) {
    let len = coefficient_len(g.cols());
    let mut lo = Vec::with_capacity(g.rows() * len);
    let mut hi = Vec::with_capacity(g.rows() * len);
    for r in 0..g.rows() {
        let (l, h) = dwt(g.row(r));
        lo.extend(l);
        hi.extend(h);
    }
    (
        Grid::from_vec(g.rows(), len, lo).expect("sized"),
        Grid::from_vec(g.rows(), len, hi).expect("sized"),
    )
}

fn transpose(g: &Grid<f64>) -> Grid<f64> {
    Grid::from_fn(g.cols(), g.rows(), |r, c| g.get(c, r))
}

fn transform_cols(g: &Grid<f64>) -> (Grid<f64>, Grid<f64>) {
    let (l, h) = transform_rows(&transpose(g));
    (transpose(&l), transpose(&h))
}

fn inverse_rows(lo: &Grid<f64>, hi: &Grid<f64>, cols: usize) -> Grid<f64> {
    let mut data = Vec::with_capacity(lo.rows() * cols);
    for r in 0..lo.rows() {
        data.extend(idwt(lo.row(r), hi.row(r), cols));
    }
    Grid::from_vec(lo.rows(), cols, data).expect("sized")
}

fn inverse_cols(lo: &Grid<f64>, hi: &Grid<f64>, rows: usize) -> Grid<f64> {
    transpose(&inverse_rows(&transpose(lo), &transpose(hi), rows))
}

pub fn dwt2(g: &Grid<f64>) -> Level {
    let (lo, hi) = transform_cols(g);
    let (ll, lh) = transform_rows(&lo);
    let (hl, hh) = transform_rows(&hi);
    Level { ll, lh, hl, hh }
}

pub fn idwt2(level: &Level, rows: usize, cols: usize) -> Grid<f64> {
    let lo = inverse_rows(&level.ll, &level.lh, cols);
    let hi = inverse_rows(&level.hl, &level.hh, cols);
    inverse_cols(&lo, &hi, rows)
}

fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Noise level estimated from the finest diagonal subband.
pub fn noise_sigma(finest_hh: &Grid<f64>) -> f64 {
    median(finest_hh.as_slice().iter().map(|v| v.abs()).collect()) / 0.6745
}

/// Soft-thresholds every detail subband with the universal threshold and
/// reconstructs; the result is clipped to `[0,1]`.
pub fn denoise(scan: &BScan) -> Result<BScan> {
    scan.check_finite()?;
    let (rows, cols) = scan.dims();
    if rows.min(cols) < MIN_SIDE {
        return Err(Error::Invalid(format!(
            "{rows}x{cols} image is smaller than the {MIN_SIDE}-pixel support of the transform"
        )));
    }
    let mut sizes = vec![(rows, cols)];
    let mut levels = Vec::with_capacity(LEVELS);
    let mut current = scan.pixels.map(|v| v as f64);
    for _ in 0..LEVELS {
        let level = dwt2(&current);
        current = level.ll.clone();
        sizes.push(current.dims());
        levels.push(level);
    }
    let sigma = noise_sigma(&levels[0].hh);
    let threshold = sigma * (2.0 * ((rows * cols) as f64).ln()).sqrt();
    for level in &mut levels {
        for band in [&mut level.lh, &mut level.hl, &mut level.hh] {
            band.as_mut_slice().iter_mut().for_each(|v| *v = soft(*v, threshold));
        }
    }
    let mut approx = current;
    for (i, level) in levels.iter_mut().enumerate().rev() {
        level.ll = approx;
        let (r, c) = sizes[i];
        approx = idwt2(level, r, c);
    }
    let pixels = approx.map(|v| v.clamp(0.0, 1.0) as f32);
    Ok(BScan::new(pixels, scan.slice_index))
}
