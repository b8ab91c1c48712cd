//! Surface flattening by per-column vertical shifts.

use crate::error::{Error, Result};
use crate::types::{AnnotationMask, BScan, Class, Grid, StraightenedBScan};

/// Row the flattened surface lands on.
pub const ANCHOR_ROW: usize = 8;
/// Moving-average window over the surface profile, in columns.
pub const SMOOTHING_WINDOW: usize = 15;

/// How the skin surface of each column is located.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SurfaceSource {
    /// First non-background row of the mask.
    #[default]
    Mask,
    /// First row reaching half of the column's peak intensity.
    IntensityPeak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StraightenConfig {
    pub anchor_row: usize,
    pub window: usize,
    pub source: SurfaceSource,
}

impl Default for StraightenConfig {
    fn default() -> Self {
        Self {
            anchor_row: ANCHOR_ROW,
            window: SMOOTHING_WINDOW,
            source: SurfaceSource::Mask,
        }
    }
}

fn first_foreground(mask: &AnnotationMask) -> Vec<Option<usize>> {
    let labels = mask.labels();
    (0..labels.cols())
        .map(|c| (0..labels.rows()).find(|&r| labels.get(r, c) != Class::Background as u8))
        .collect()
}

fn first_bright(pixels: &Grid<f32>) -> Vec<Option<usize>> {
    (0..pixels.cols())
        .map(|c| {
            let peak = (0..pixels.rows()).map(|r| pixels.get(r, c)).fold(0.0f32, f32::max);
            if peak <= 0.0 {
                return None;
            }
            (0..pixels.rows()).find(|&r| pixels.get(r, c) >= 0.5 * peak)
        })
        .collect()
}

/// Fills gaps by linear interpolation between the nearest known columns and
/// by the nearest known value past either end.
pub fn interpolate_profile(profile: &[Option<usize>]) -> Option<Vec<f64>> {
    let known: Vec<(usize, f64)> = profile
        .iter()
        .enumerate()
        .filter_map(|(c, r)| r.map(|r| (c, r as f64)))
        .collect();
    if known.is_empty() {
        return None;
    }
    let mut out = Vec::with_capacity(profile.len());
    let mut k = 0;
    for c in 0..profile.len() {
        while k + 1 < known.len() && known[k + 1].0 <= c {
            k += 1;
        }
        let (c0, r0) = known[k];
        let v = if c <= c0 || k + 1 == known.len() {
            r0
        } else {
            let (c1, r1) = known[k + 1];
            r0 + (r1 - r0) * (c - c0) as f64 / (c1 - c0) as f64
        };
        out.push(v);
    }
    Some(out)
}

/// Centred moving average; the window shrinks at the image edges.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Shifts every column of the scan and its mask so the smoothed surface
/// lands on the anchor row. Pixels leaving the image are dropped; vacated
/// pixels become 0 / background.
pub fn straighten_with(scan: &BScan, mask: &AnnotationMask, config: &StraightenConfig) -> Result<StraightenedBScan> {
    if scan.dims() != mask.dims() {
        let (a, b) = (scan.dims(), mask.dims());
        return Err(Error::shape("mask vs B-scan", format!("{}x{}", a.0, a.1), format!("{}x{}", b.0, b.1)));
    }
    let raw_profile = match config.source {
        SurfaceSource::Mask => first_foreground(mask),
        SurfaceSource::IntensityPeak => first_bright(&scan.pixels),
    };
    let profile = interpolate_profile(&raw_profile)
        .ok_or_else(|| Error::Invalid(format!("B-scan {} has no foreground to straighten", scan.slice_index)))?;
    let smoothed = moving_average(&profile, config.window.max(1));
    let shifts: Vec<i64> = smoothed.iter().map(|s| s.round() as i64 - config.anchor_row as i64).collect();

    let (rows, cols) = scan.dims();
    let mut pixels = Grid::filled(rows, cols, 0.0f32);
    let mut labels = Grid::filled(rows, cols, Class::Background as u8);
    for (c, &shift) in shifts.iter().enumerate() {
        for r in 0..rows {
            let src = r as i64 + shift;
            if (0..rows as i64).contains(&src) {
                pixels.set(r, c, scan.pixels.get(src as usize, c));
                labels.set(r, c, mask.labels().get(src as usize, c));
            }
        }
    }
    let mask = AnnotationMask::new(labels)?;
    let surface_profile = first_foreground(&mask);
    Ok(StraightenedBScan {
        pixels,
        mask,
        surface_profile,
        shifts,
    })
}

pub fn straighten(scan: &BScan, mask: &AnnotationMask) -> Result<StraightenedBScan> {
    straighten_with(scan, mask, &StraightenConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn banded(rows: usize, cols: usize, top: impl Fn(usize) -> usize) -> (BScan, AnnotationMask) {
        let labels = Grid::from_fn(rows, cols, |r, c| {
            let t = top(c);
            match r {
                r if r < t => 0,
                r if r < t + 4 => 1,
                r if r < t + 8 => 2,
                r if r < t + 12 => 3,
                _ => 0,
            }
        });
        let pixels = labels.map(|l| [0.0, 0.9, 0.6, 0.3][l as usize]);
        (BScan::new(pixels, 1), AnnotationMask::new(labels).unwrap())
    }

    #[test]
    fn flat_surface_at_anchor_is_identity() {
        let (scan, mask) = banded(32, 40, |_| ANCHOR_ROW);
        let s = straighten(&scan, &mask).unwrap();
        assert_eq!(s.pixels, scan.pixels);
        assert_eq!(s.mask, mask);
        assert!(s.shifts.iter().all(|&v| v == 0));
    }

    #[test]
    fn ramp_is_flattened() {
        let (scan, mask) = banded(64, 768, |c| 8 + c / 100);
        let s = straighten(&scan, &mask).unwrap();
        for r in &s.surface_profile {
            let r = r.unwrap() as i64;
            assert!((r - 8).abs() <= 1, "{r}");
        }
    }

    #[test]
    fn class_counts_only_lose_dropped_pixels() {
        let (scan, mask) = banded(40, 50, |c| 10 + (c % 7));
        let s = straighten(&scan, &mask).unwrap();
        let before = mask.class_counts();
        let after = s.mask.class_counts();
        // Every band lies well inside the image, so nothing is dropped.
        assert_eq!(before[1..], after[1..]);
    }

    #[test]
    fn empty_columns_are_interpolated() {
        let p = interpolate_profile(&[None, Some(2), None, None, Some(8), None]).unwrap();
        assert_eq!(p, vec![2.0, 2.0, 4.0, 6.0, 8.0, 8.0]);
        assert!(interpolate_profile(&[None, None]).is_none());
    }

    #[test]
    fn all_background_is_rejected() {
        let scan = BScan::new(Grid::filled(16, 16, 0.0f32), 3);
        let mask = AnnotationMask::filled(16, 16, Class::Background);
        assert!(straighten(&scan, &mask).is_err());
    }

    #[test]
    fn straightening_is_idempotent() {
        let (scan, mask) = banded(48, 120, |c| 12 + ((c as f64 / 9.0).sin() * 4.0 + 4.0) as usize);
        let once = straighten(&scan, &mask).unwrap();
        let twice = straighten(&BScan::new(once.pixels.clone(), 1), &once.mask).unwrap();
        let differing = once
            .mask
            .labels()
            .as_slice()
            .iter()
            .zip(twice.mask.labels().as_slice())
            .filter(|(a, b)| a != b)
            .count();
        // Residual rounding moves at most a few boundary pixels.
        assert!(differing <= 120 * 4, "{differing}");
    }

    #[test]
    fn intensity_source_finds_the_same_surface() {
        let (scan, mask) = banded(40, 30, |c| 10 + c / 10);
        let cfg = StraightenConfig {
            source: SurfaceSource::IntensityPeak,
            ..StraightenConfig::default()
        };
        assert_eq!(straighten_with(&scan, &mask, &cfg).unwrap(), straighten(&scan, &mask).unwrap());
    }
}
