//! Shared data model: B-scans, volumes, masks, latent codes and the
//! outputs of the reconstruction and scoring stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample;

/// Raw B-scan size delivered by the scanner (depth × lateral).
pub const RAW_ROWS: usize = 500;
pub const RAW_COLS: usize = 1500;
/// B-scan size consumed by the segmentation network.
pub const NET_ROWS: usize = 256;
pub const NET_COLS: usize = 768;
/// B-scans per fingertip in a full-fidelity volume.
pub const FULL_VOLUME_BSCANS: usize = 400;
/// Background plus three skin layers.
pub const NUM_CLASSES: usize = 4;
/// Canonical latent code shape (height, width, channels).
pub const LATENT_ROWS: usize = 8;
pub const LATENT_COLS: usize = 24;
pub const LATENT_CHANNELS: usize = 512;

/// Row-major 2-D grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "grid",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().copied().map(f).collect(),
        }
    }
}

/// Semantic class of a B-scan pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    StratumCorneum = 1,
    ViableEpidermis = 2,
    Dermis = 3,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [
        Class::Background,
        Class::StratumCorneum,
        Class::ViableEpidermis,
        Class::Dermis,
    ];

    pub fn from_label(label: u8) -> Option<Class> {
        Class::ALL.get(label as usize).copied()
    }
}

/// One of the three reconstructed skin layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layer {
    #[serde(rename = "s")]
    StratumCorneum,
    #[serde(rename = "v")]
    ViableEpidermis,
    #[serde(rename = "d")]
    Dermis,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::StratumCorneum, Layer::ViableEpidermis, Layer::Dermis];

    pub fn class(self) -> Class {
        match self {
            Layer::StratumCorneum => Class::StratumCorneum,
            Layer::ViableEpidermis => Class::ViableEpidermis,
            Layer::Dermis => Class::Dermis,
        }
    }

    /// Single-letter tag used in file names (`R_s`, `R_v`, `R_d`).
    pub fn tag(self) -> &'static str {
        match self {
            Layer::StratumCorneum => "s",
            Layer::ViableEpidermis => "v",
            Layer::Dermis => "d",
        }
    }
}

impl std::str::FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s" => Ok(Layer::StratumCorneum),
            "v" => Ok(Layer::ViableEpidermis),
            "d" => Ok(Layer::Dermis),
            other => Err(Error::Invalid(format!("unknown layer {other:?}, expected s, v or d"))),
        }
    }
}

/// Ground truth of a fingertip presentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresentationLabel {
    Bonafide,
    PresentationAttack,
}

/// One cross-sectional OCT slice. Rows are depth, columns are A-lines.
#[derive(Debug, Clone, PartialEq)]
pub struct BScan {
    pub pixels: Grid<f32>,
    /// 1-based position within its volume.
    pub slice_index: usize,
}

impl BScan {
    pub fn new(pixels: Grid<f32>, slice_index: usize) -> Self {
        Self {
            pixels,
            slice_index,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dims()
    }

    pub fn is_raw_size(&self) -> bool {
        self.dims() == (RAW_ROWS, RAW_COLS)
    }

    pub fn is_network_size(&self) -> bool {
        self.dims() == (NET_ROWS, NET_COLS)
    }

    /// First non-finite pixel, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.pixels.as_slice().iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite {
                row: i / self.pixels.cols(),
                col: i % self.pixels.cols(),
                value: self.pixels.as_slice()[i] as f64,
            }),
        }
    }
}

/// Per-pixel hard labels in `0..4`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationMask {
    labels: Grid<u8>,
}

impl AnnotationMask {
    pub fn new(labels: Grid<u8>) -> Result<Self> {
        if let Some(index) = labels.as_slice().iter().position(|&l| l as usize >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                label: labels.as_slice()[index],
                index,
                classes: NUM_CLASSES,
            });
        }
        Ok(Self { labels })
    }

    pub fn filled(rows: usize, cols: usize, class: Class) -> Self {
        Self {
            labels: Grid::filled(rows, cols, class as u8),
        }
    }

    pub fn labels(&self) -> &Grid<u8> {
        &self.labels
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }

    pub fn get(&self, row: usize, col: usize) -> Class {
        Class::ALL[self.labels.get(row, col) as usize]
    }

    /// Pixel count per class.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in self.labels.as_slice() {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Identity and ground truth of one fingertip volume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub subject_id: String,
    pub finger_id: String,
    pub session: u32,
    pub label: PresentationLabel,
}

/// Ordered B-scans of one fingertip.
#[derive(Debug, Clone, PartialEq)]
pub struct OctInstance {
    bscans: Vec<BScan>,
    pub meta: InstanceMeta,
}

impl OctInstance {
    /// Builds a volume of any positive length with uniformly sized slices.
    /// Use [`OctInstance::ensure_full_volume`] where the 400-slice contract
    /// applies.
    pub fn new(bscans: Vec<BScan>, meta: InstanceMeta) -> Result<Self> {
        let first = bscans.first().ok_or(Error::Empty("instance B-scan sequence"))?;
        let dims = first.dims();
        if let Some(bad) = bscans.iter().find(|b| b.dims() != dims) {
            return Err(Error::shape(
                "instance B-scan",
                format!("{}x{}", dims.0, dims.1),
                format!("{}x{} at slice {}", bad.dims().0, bad.dims().1, bad.slice_index),
            ));
        }
        Ok(Self { bscans, meta })
    }

    pub fn ensure_full_volume(&self) -> Result<()> {
        if self.bscans.len() != FULL_VOLUME_BSCANS {
            return Err(Error::shape(
                "full volume",
                FULL_VOLUME_BSCANS,
                self.bscans.len(),
            ));
        }
        Ok(())
    }

    pub fn bscans(&self) -> &[BScan] {
        &self.bscans
    }

    pub fn len(&self) -> usize {
        self.bscans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bscans.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.bscans[0].dims()
    }

    pub fn into_bscans(self) -> Vec<BScan> {
        self.bscans
    }
}

/// Encoder bottleneck of one B-scan, stored channels-first.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    channels: usize,
    rows: usize,
    cols: usize,
    tensor: Vec<f32>,
    pooled: Option<Vec<f32>>,
}

impl LatentCode {
    pub fn new(channels: usize, rows: usize, cols: usize, tensor: Vec<f32>) -> Result<Self> {
        if tensor.len() != channels * rows * cols || tensor.is_empty() {
            return Err(Error::shape(
                "latent code",
                format!("{channels}x{rows}x{cols}"),
                tensor.len(),
            ));
        }
        Ok(Self {
            channels,
            rows,
            cols,
            tensor,
            pooled: None,
        })
    }

    /// (height, width, channels), matching the network tables.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.channels)
    }

    pub fn is_canonical(&self) -> bool {
        self.shape() == (LATENT_ROWS, LATENT_COLS, LATENT_CHANNELS)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.rows * self.cols;
        &self.tensor[c * plane..(c + 1) * plane]
    }

    pub fn tensor(&self) -> &[f32] {
        &self.tensor
    }

    pub fn pooled(&self) -> Option<&[f32]> {
        self.pooled.as_deref()
    }

    /// Global average pooling, accumulated in f64.
    pub fn pool(&mut self) -> &[f32] {
        if self.pooled.is_none() {
            let pooled = (0..self.channels)
                .map(|c| {
                    let plane = self.channel(c);
                    (plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64) as f32
                })
                .collect();
            self.pooled = Some(pooled);
        }
        self.pooled.as_deref().expect("just pooled")
    }
}

/// Mean pooled latent code of the bonafide reference set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCode {
    pub pooled: Vec<f64>,
    /// Number of reference B-scans averaged.
    pub source_count: usize,
}

impl ReferenceCode {
    pub fn new(pooled: Vec<f64>, source_count: usize) -> Result<Self> {
        if pooled.is_empty() {
            return Err(Error::Empty("reference code"));
        }
        if source_count == 0 {
            return Err(Error::Empty("reference B-scan set"));
        }
        Ok(Self {
            pooled,
            source_count,
        })
    }
}

/// Per-pixel class probabilities, channels-first (`NUM_CLASSES` planes).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutput {
    rows: usize,
    cols: usize,
    probabilities: Vec<f32>,
}

impl SegmentationOutput {
    pub const SIMPLEX_TOLERANCE: f64 = 1e-5;

    pub fn new(rows: usize, cols: usize, probabilities: Vec<f32>) -> Result<Self> {
        let plane = rows * cols;
        if probabilities.len() != NUM_CLASSES * plane {
            return Err(Error::shape(
                "segmentation output",
                format!("{rows}x{cols}x{NUM_CLASSES}"),
                probabilities.len(),
            ));
        }
        for p in 0..plane {
            let mut sum = 0.0f64;
            for c in 0..NUM_CLASSES {
                let v = probabilities[c * plane + p];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Invalid(format!(
                        "probability {v} outside [0,1] at pixel {p}"
                    )));
                }
                sum += v as f64;
            }
            if (sum - 1.0).abs() > Self::SIMPLEX_TOLERANCE {
                return Err(Error::Invalid(format!(
                    "probabilities at pixel {p} sum to {sum}"
                )));
            }
        }
        Ok(Self {
            rows,
            cols,
            probabilities,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn probability(&self, class: Class, row: usize, col: usize) -> f32 {
        self.probabilities[(class as usize * self.rows + row) * self.cols + col]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.probabilities
    }

    /// Most probable class per pixel; ties go to the lower class index.
    pub fn argmax(&self) -> AnnotationMask {
        let plane = self.rows * self.cols;
        let labels = (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..NUM_CLASSES {
                    if self.probabilities[c * plane + p] > self.probabilities[best * plane + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        AnnotationMask::new(Grid::from_vec(self.rows, self.cols, labels).expect("sized"))
            .expect("argmax stays in range")
    }
}

/// A B-scan and its mask after surface flattening.
#[derive(Debug, Clone, PartialEq)]
pub struct StraightenedBScan {
    pub pixels: Grid<f32>,
    pub mask: AnnotationMask,
    /// First foreground row per column after flattening (`None` where a
    /// column has no foreground).
    pub surface_profile: Vec<Option<usize>>,
    /// Upward shift applied to each column.
    pub shifts: Vec<i64>,
}

/// A reconstructed subsurface fingerprint: one row per B-scan, one column
/// per A-line.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerImage {
    pub layer: Layer,
    /// Masked intensity sums before any display scaling.
    pub raw: Grid<f64>,
}

impl LayerImage {
    /// Per-image min-max scaling to 8-bit for export.
    pub fn to_u8(&self) -> Grid<u8> {
        let data = self.raw.as_slice();
        let (lo, hi) = data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        self.raw.map(|v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
    }
}

/// Instance-level spoof score with the per-slice distances it averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpoofScore {
    pub value: f64,
    pub per_slice: Vec<f64>,
}

impl SpoofScore {
    pub fn from_distances(per_slice: Vec<f64>) -> Result<Self> {
        if per_slice.is_empty() {
            return Err(Error::Empty("per-slice distances"));
        }
        let value = per_slice.iter().sum::<f64>() / per_slice.len() as f64;
        Ok(Self { value, per_slice })
    }
}

/// Per-B-scan min-max normalization into `[0,1]`; constant scans map to 0.
pub fn normalize_bscan(raw: &BScan) -> Result<BScan> {
    raw.check_finite()?;
    let (lo, hi) = raw
        .pixels
        .as_slice()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi as f64 - lo as f64;
    let pixels = raw.pixels.map(|v| {
        if span > 0.0 {
            ((v as f64 - lo as f64) / span) as f32
        } else {
            0.0
        }
    });
    Ok(BScan::new(pixels, raw.slice_index))
}

/// Resamples a raw 500×1500 scan (and optional mask) to the 256×768 network
/// input: bilinear for intensities, nearest-neighbour for labels.
pub fn resize_to_network(
    raw: &BScan,
    mask: Option<&AnnotationMask>,
) -> Result<(BScan, Option<AnnotationMask>)> {
    if !raw.is_raw_size() {
        let (r, c) = raw.dims();
        return Err(Error::shape(
            "raw B-scan",
            format!("{RAW_ROWS}x{RAW_COLS}"),
            format!("{r}x{c}"),
        ));
    }
    resize_scan(raw, mask, NET_ROWS, NET_COLS)
}

/// Size-agnostic core of [`resize_to_network`].
pub fn resize_scan(
    scan: &BScan,
    mask: Option<&AnnotationMask>,
    rows: usize,
    cols: usize,
) -> Result<(BScan, Option<AnnotationMask>)> {
    if let Some(m) = mask {
        if m.dims() != scan.dims() {
            return Err(Error::shape(
                "mask vs B-scan",
                format!("{}x{}", scan.dims().0, scan.dims().1),
                format!("{}x{}", m.dims().0, m.dims().1),
            ));
        }
    }
    let pixels = resample::resize_bilinear(&scan.pixels, rows, cols);
    let mask = mask.map(|m| AnnotationMask {
        labels: resample::resize_nearest(m.labels(), rows, cols),
    });
    Ok((BScan::new(pixels, scan.slice_index), mask))
}
