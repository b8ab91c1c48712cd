//! Synthetic OCT fingertip phantoms.
//!
//! A bonafide phantom is a stack of B-scans through layered skin: a stratum
//! corneum band, a viable epidermis band and a dermis band whose bottom fades
//! into background. A 2-D ridge field, shared by every slice, raises the skin
//! surface on ridges, thickens the stratum corneum and pushes the papillary
//! boundaries down, so projecting each layer over depth reproduces the ridge
//! pattern. Sweat ducts are bright one-pixel vertical segments through the
//! stratum corneum at ridge crests. Speckle is multiplicative log-normal.
//!
//! Attack phantoms have no internal layering: either one thick homogeneous
//! band (a moulded 3-D fake) or a thin bright surface line (a 2-D print).

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    AnnotationMask, BScan, Class, Grid, InstanceMeta, OctInstance, PresentationLabel, FULL_VOLUME_BSCANS,
};

/// Intensity of a sweat duct segment.
pub const DUCT_INTENSITY: f64 = 1.0;
/// Reflectance of the homogeneous 3-D attack material.
pub const PA_BULK_INTENSITY: f64 = 0.5;
/// Peak reflectance and thickness of the 2-D print surface line.
pub const PA_PRINT_INTENSITY: f64 = 0.95;
pub const PA_PRINT_THICKNESS: usize = 4;
/// Dermis tail: starts at this fraction of the dermis intensity and decays
/// with the given length (pixels). Tail pixels are labelled background.
const TAIL_FRACTION: f64 = 0.4;
const TAIL_DECAY: f64 = 15.0;
/// Steepness of the ridge profile; larger is closer to a square wave.
const RIDGE_SHARPNESS: f64 = 3.0;
/// Oriented sinusoids making up the ridge field: (weight, angle in degrees,
/// period multiplier). The first has its wave vector along the A-line axis.
const RIDGE_COMPONENTS: [(f64, f64, f64); 3] = [(1.0, 0.0, 1.0), (0.4, 30.0, 1.1), (0.3, -35.0, 0.9)];

/// Attack archetype for [`generate_pa`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaType {
    /// Thin bright print line, no depth structure.
    Layered2d,
    /// One homogeneous band, no internal layers.
    Homogeneous3d,
}

/// Phantom geometry and appearance. Lengths are in pixels of the generated
/// B-scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub seed: u64,
    pub n_bscans: usize,
    pub height: usize,
    pub width: usize,
    /// Mean row of the skin surface at the centre of the scan.
    pub surface_row: f64,
    /// Stratum corneum, viable epidermis, dermis.
    pub layer_depths: [f64; 3],
    pub layer_intensities: [f64; 3],
    pub ridge_period: f64,
    pub ridge_amplitude: f64,
    /// Ducts per 100 columns of each B-scan.
    pub duct_density: f64,
    pub noise_sigma: f64,
    /// Maximum depth excursion of the curved surface.
    pub surface_tilt: f64,
    pub pa_type: PaType,
    /// Require exactly 400 B-scans per volume.
    pub enforce_full_volume: bool,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_bscans: FULL_VOLUME_BSCANS,
            height: 500,
            width: 1500,
            surface_row: 60.0,
            layer_depths: [50.0, 80.0, 140.0],
            layer_intensities: [0.85, 0.6, 0.35],
            ridge_period: 96.0,
            ridge_amplitude: 6.0,
            duct_density: 1.0,
            noise_sigma: 0.1,
            surface_tilt: 40.0,
            pa_type: PaType::Homogeneous3d,
            enforce_full_volume: false,
        }
    }
}

impl PhantomConfig {
    /// Noise-free, flat, ridge-free variant used to check band geometry.
    pub fn flat(&self) -> Self {
        Self {
            noise_sigma: 0.0,
            surface_tilt: 0.0,
            ridge_amplitude: 0.0,
            duct_density: 0.0,
            ..self.clone()
        }
    }

    /// Deepest row any band boundary can reach, relative to the surface row.
    pub fn max_extent(&self) -> f64 {
        self.layer_depths.iter().sum::<f64>() + self.surface_tilt + self.ridge_amplitude
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_bscans == 0 || self.height == 0 || self.width < 3 {
            return fail(format!(
                "need at least one B-scan and a 1x3 image, got {} of {}x{}",
                self.n_bscans, self.height, self.width
            ));
        }
        if self.enforce_full_volume && self.n_bscans != FULL_VOLUME_BSCANS {
            return fail(format!(
                "full-volume mode requires {FULL_VOLUME_BSCANS} B-scans, got {}",
                self.n_bscans
            ));
        }
        if self.layer_depths.iter().any(|&d| !(d > 0.0)) {
            return fail(format!("layer depths must be positive: {:?}", self.layer_depths));
        }
        if self.surface_row < self.ridge_amplitude {
            return fail(format!(
                "surface row {} leaves no room above ridges of amplitude {}",
                self.surface_row, self.ridge_amplitude
            ));
        }
        if self.surface_row + self.max_extent() >= self.height as f64 {
            return fail(format!(
                "layers reach row {} but the scan has {} rows",
                self.surface_row + self.max_extent(),
                self.height
            ));
        }
        if self.layer_intensities.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return fail(format!("layer intensities must lie in [0,1]: {:?}", self.layer_intensities));
        }
        for i in 0..3 {
            for j in i + 1..3 {
                if (self.layer_intensities[i] - self.layer_intensities[j]).abs() < 0.1 {
                    return fail(format!(
                        "layer intensities {:?} must be pairwise separated by at least 0.1",
                        self.layer_intensities
                    ));
                }
            }
        }
        if !(self.ridge_period > 0.0) || self.ridge_amplitude < 0.0 || self.surface_tilt < 0.0 {
            return fail("ridge period must be positive; amplitude and tilt non-negative".into());
        }
        if self.duct_density < 0.0 || self.noise_sigma < 0.0 {
            return fail("duct density and noise sigma must be non-negative".into());
        }
        Ok(())
    }
}

/// Binary ridge (1) / valley (0) map, one row per B-scan, one column per
/// A-line.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthRidgeMap {
    pub map: Grid<u8>,
}

/// Band boundaries of one B-scan column: rows `[top, sc_end)` are stratum
/// corneum, `[sc_end, ve_end)` viable epidermis, `[ve_end, dermis_end)`
/// dermis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnBands {
    pub top: usize,
    pub sc_end: usize,
    pub ve_end: usize,
    pub dermis_end: usize,
}

/// Per-instance random state of the ridge field.
#[derive(Debug, Clone, Copy, PartialEq)]
struct RidgeField {
    phases: [f64; 3],
}

impl RidgeField {
    fn new(rng: &mut impl Rng) -> Self {
        let mut phases = [0.0; 3];
        for p in &mut phases {
            *p = rng.random_range(0.0..std::f64::consts::TAU);
        }
        Self { phases }
    }

    /// Signed ridge field; positive on ridges.
    fn signed(&self, config: &PhantomConfig, slice: usize, col: usize) -> f64 {
        let pitch = config.width as f64 / config.n_bscans as f64;
        let (x, y) = (col as f64, slice as f64 * pitch);
        RIDGE_COMPONENTS
            .iter()
            .zip(&self.phases)
            .map(|(&(weight, angle, period), &phase)| {
                let (s, c) = angle.to_radians().sin_cos();
                let p = config.ridge_period * period;
                weight * (std::f64::consts::TAU * (x * c + y * s) / p + phase).cos()
            })
            .sum()
    }

    /// Ridge height profile in `[0,1]`.
    fn height(&self, config: &PhantomConfig, slice: usize, col: usize) -> f64 {
        0.5 * (1.0 + (RIDGE_SHARPNESS * self.signed(config, slice, col)).tanh())
    }
}

fn base_surface(config: &PhantomConfig, slice: usize, col: usize) -> f64 {
    let centred = |i: usize, n: usize| {
        if n <= 1 {
            0.0
        } else {
            let half = (n - 1) as f64 / 2.0;
            (i as f64 - half) / half
        }
    };
    let u = centred(col, config.width);
    let v = centred(slice, config.n_bscans);
    config.surface_row + config.surface_tilt * (0.8 * u * u + 0.2 * v * v)
}

fn clamp_row(v: f64, height: usize) -> usize {
    v.round().clamp(0.0, height as f64) as usize
}

fn bonafide_bands(config: &PhantomConfig, field: &RidgeField, slice: usize, col: usize) -> ColumnBands {
    let base = base_surface(config, slice, col);
    let r = field.height(config, slice, col);
    let a = config.ridge_amplitude;
    let [ds, dv, dd] = config.layer_depths;
    let h = config.height;
    let top = clamp_row(base - a * r, h);
    let sc_end = clamp_row(base + ds + 0.5 * a * r, h).max(top);
    let ve_end = clamp_row(base + ds + dv + a * r, h).max(sc_end);
    let dermis_end = clamp_row(base + ds + dv + a * r + dd, h).max(ve_end);
    ColumnBands {
        top,
        sc_end,
        ve_end,
        dermis_end,
    }
}

fn slice_rng(seed: u64, slice: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(slice as u64 + 1);
    rng
}

fn apply_speckle(pixels: &mut Grid<f32>, sigma: f64, rng: &mut impl Rng) {
    if sigma == 0.0 {
        return;
    }
    let bias = -0.5 * sigma * sigma;
    for v in pixels.as_mut_slice() {
        let n: f64 = StandardNormal.sample(rng);
        *v = ((*v as f64) * (sigma * n + bias).exp()).clamp(0.0, 1.0) as f32;
    }
}

/// Output of [`generate_bonafide`].
#[derive(Debug, Clone)]
pub struct BonafidePhantom {
    pub instance: OctInstance,
    pub masks: Vec<AnnotationMask>,
    pub ridge_map: GroundTruthRidgeMap,
    /// Duct columns of every slice.
    pub ducts: Vec<Vec<usize>>,
    config: PhantomConfig,
    field: RidgeField,
}

impl BonafidePhantom {
    /// Band boundaries of every column of slice `slice` (0-based).
    pub fn bands(&self, slice: usize) -> Vec<ColumnBands> {
        (0..self.config.width)
            .map(|col| bonafide_bands(&self.config, &self.field, slice, col))
            .collect()
    }

    /// The slice as rendered before speckle noise.
    pub fn clean_slice(&self, slice: usize) -> BScan {
        render_bonafide(&self.config, &self.field, slice).0
    }

    pub fn config(&self) -> &PhantomConfig {
        &self.config
    }
}

/// Renders one bonafide slice: (clean scan, mask, duct columns).
fn render_bonafide(config: &PhantomConfig, field: &RidgeField, slice: usize) -> (BScan, AnnotationMask, Vec<usize>) {
    let (h, w) = (config.height, config.width);
    let [i_sc, i_ve, i_d] = config.layer_intensities;
    let mut pixels = Grid::filled(h, w, 0.0f32);
    let mut labels = Grid::filled(h, w, Class::Background as u8);
    for col in 0..w {
        let b = bonafide_bands(config, field, slice, col);
        for row in b.top..b.sc_end {
            pixels.set(row, col, i_sc as f32);
            labels.set(row, col, Class::StratumCorneum as u8);
        }
        for row in b.sc_end..b.ve_end {
            pixels.set(row, col, i_ve as f32);
            labels.set(row, col, Class::ViableEpidermis as u8);
        }
        for row in b.ve_end..b.dermis_end {
            pixels.set(row, col, i_d as f32);
            labels.set(row, col, Class::Dermis as u8);
        }
        for row in b.dermis_end..h {
            let t = (row - b.dermis_end) as f64;
            pixels.set(row, col, (i_d * TAIL_FRACTION * (-t / TAIL_DECAY).exp()) as f32);
        }
    }

    // Ducts sit on ridge crests: local maxima of the ridge field along the
    // slice, thinned at random to the configured density.
    let mut rng = slice_rng(config.seed ^ 0x6475_6374, slice);
    let signed: Vec<f64> = (0..w).map(|c| field.signed(config, slice, c)).collect();
    let crests: Vec<usize> = (1..w - 1)
        .filter(|&c| signed[c] > 0.0 && signed[c] >= signed[c - 1] && signed[c] > signed[c + 1])
        .collect();
    let wanted = config.duct_density * w as f64 / 100.0;
    let keep = if crests.is_empty() { 0.0 } else { (wanted / crests.len() as f64).min(1.0) };
    let mut ducts = Vec::new();
    for &col in &crests {
        if rng.random::<f64>() < keep {
            let b = bonafide_bands(config, field, slice, col);
            for row in b.top..b.sc_end {
                pixels.set(row, col, DUCT_INTENSITY as f32);
            }
            ducts.push(col);
        }
    }
    let mask = AnnotationMask::new(labels).expect("generator labels are in range");
    (BScan::new(pixels, slice + 1), mask, ducts)
}

fn meta(label: PresentationLabel, seed: u64) -> InstanceMeta {
    InstanceMeta {
        subject_id: format!("phantom-{seed:016x}"),
        finger_id: "f0".into(),
        session: 1,
        label,
    }
}

/// Generates a labelled bonafide volume. Deterministic in the config
/// (including its seed).
pub fn generate_bonafide(config: &PhantomConfig) -> Result<BonafidePhantom> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let field = RidgeField::new(&mut rng);
    let mut bscans = Vec::with_capacity(config.n_bscans);
    let mut masks = Vec::with_capacity(config.n_bscans);
    let mut ducts = Vec::with_capacity(config.n_bscans);
    for slice in 0..config.n_bscans {
        let (mut scan, mask, d) = render_bonafide(config, &field, slice);
        apply_speckle(&mut scan.pixels, config.noise_sigma, &mut slice_rng(config.seed, slice));
        bscans.push(scan);
        masks.push(mask);
        ducts.push(d);
    }
    let ridge_map = GroundTruthRidgeMap {
        map: Grid::from_fn(config.n_bscans, config.width, |j, x| {
            u8::from(field.signed(config, j, x) > 0.0)
        }),
    };
    let instance = OctInstance::new(bscans, meta(PresentationLabel::Bonafide, config.seed))?;
    Ok(BonafidePhantom {
        instance,
        masks,
        ridge_map,
        ducts,
        config: config.clone(),
        field,
    })
}

/// Generates an attack volume of `config.pa_type`. No masks: attacks carry no
/// biological annotation.
pub fn generate_pa(config: &PhantomConfig) -> Result<OctInstance> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let field = RidgeField::new(&mut rng);
    let (h, w) = (config.height, config.width);
    let thickness: f64 = config.layer_depths.iter().sum();
    let mut bscans = Vec::with_capacity(config.n_bscans);
    for slice in 0..config.n_bscans {
        let mut pixels = Grid::filled(h, w, 0.0f32);
        for col in 0..w {
            let base = base_surface(config, slice, col);
            let r = field.height(config, slice, col);
            match config.pa_type {
                PaType::Homogeneous3d => {
                    let top = clamp_row(base - config.ridge_amplitude * r, h);
                    let end = clamp_row(top as f64 + thickness, h);
                    for row in top..end {
                        pixels.set(row, col, PA_BULK_INTENSITY as f32);
                    }
                }
                PaType::Layered2d => {
                    // Flat print: the ridge pattern is ink contrast, not relief.
                    let top = clamp_row(base, h);
                    let end = (top + PA_PRINT_THICKNESS).min(h);
                    let v = PA_PRINT_INTENSITY * (0.7 + 0.3 * r);
                    for row in top..end {
                        pixels.set(row, col, v as f32);
                    }
                }
            }
        }
        let mut scan = BScan::new(pixels, slice + 1);
        apply_speckle(&mut scan.pixels, config.noise_sigma, &mut slice_rng(config.seed, slice));
        bscans.push(scan);
    }
    OctInstance::new(bscans, meta(PresentationLabel::PresentationAttack, config.seed))
}

/// Derives `count` well-mixed seeds from a base seed.
pub fn derive_seeds(base_seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    (0..count).map(|_| rng.next_u64()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig {
            seed: 7,
            n_bscans: 6,
            height: 200,
            width: 240,
            surface_row: 20.0,
            layer_depths: [20.0, 30.0, 50.0],
            ridge_period: 24.0,
            ridge_amplitude: 3.0,
            surface_tilt: 10.0,
            duct_density: 3.0,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        PhantomConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            PhantomConfig { layer_depths: [0.0, 10.0, 10.0], ..small() },
            PhantomConfig { layer_intensities: [0.8, 0.75, 0.3], ..small() },
            PhantomConfig { height: 100, ..small() },
            PhantomConfig { enforce_full_volume: true, ..small() },
            PhantomConfig { n_bscans: 0, ..small() },
        ];
        for cfg in bad {
            assert!(matches!(generate_bonafide(&cfg), Err(Error::Config(_))), "{cfg:?}");
            assert!(generate_pa(&cfg).is_err());
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_bonafide(&small()).unwrap();
        let b = generate_bonafide(&small()).unwrap();
        assert_eq!(a.instance, b.instance);
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.ridge_map, b.ridge_map);
        let c = generate_bonafide(&PhantomConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.instance, c.instance);
        for t in [PaType::Homogeneous3d, PaType::Layered2d] {
            let cfg = PhantomConfig { pa_type: t, ..small() };
            assert_eq!(generate_pa(&cfg).unwrap(), generate_pa(&cfg).unwrap());
        }
    }

    #[test]
    fn flat_noise_free_masks_are_exact_bands() {
        let cfg = small().flat();
        let p = generate_bonafide(&cfg).unwrap();
        let (s, v, d) = (20, 50, 100);
        for mask in &p.masks {
            for col in [0, 100, 239] {
                for row in 0..cfg.height {
                    let expected = match row {
                        r if r < 20 => Class::Background,
                        r if r < 20 + s => Class::StratumCorneum,
                        r if r < 20 + v => Class::ViableEpidermis,
                        r if r < 20 + d => Class::Dermis,
                        _ => Class::Background,
                    };
                    assert_eq!(mask.get(row, col), expected, "row {row} col {col}");
                }
            }
        }
    }

    #[test]
    fn class_counts_match_band_areas() {
        let p = generate_bonafide(&small()).unwrap();
        for (j, mask) in p.masks.iter().enumerate() {
            let mut expected = [0usize; 4];
            for b in p.bands(j) {
                expected[1] += b.sc_end - b.top;
                expected[2] += b.ve_end - b.sc_end;
                expected[3] += b.dermis_end - b.ve_end;
            }
            expected[0] = 200 * 240 - expected[1] - expected[2] - expected[3];
            assert_eq!(mask.class_counts(), expected);
        }
    }

    #[test]
    fn labelled_pixels_carry_their_layer_intensity() {
        let cfg = PhantomConfig { noise_sigma: 0.0, ..small() };
        let p = generate_bonafide(&cfg).unwrap();
        for (j, (scan, mask)) in p.instance.bscans().iter().zip(&p.masks).enumerate() {
            for row in 0..cfg.height {
                for col in 0..cfg.width {
                    let class = mask.get(row, col) as usize;
                    if class == 0 || p.ducts[j].contains(&col) {
                        continue;
                    }
                    assert_eq!(scan.pixels.get(row, col), cfg.layer_intensities[class - 1] as f32);
                }
            }
        }
    }

    #[test]
    fn ducts_cross_the_stratum_corneum_on_ridges() {
        let cfg = PhantomConfig { noise_sigma: 0.0, ..small() };
        let p = generate_bonafide(&cfg).unwrap();
        let total: usize = p.ducts.iter().map(Vec::len).sum();
        assert!(total > 0);
        for (j, cols) in p.ducts.iter().enumerate() {
            let bands = p.bands(j);
            for &c in cols {
                assert_eq!(p.ridge_map.map.get(j, c), 1);
                let b = bands[c];
                for row in b.top..b.sc_end {
                    assert_eq!(p.instance.bscans()[j].pixels.get(row, c), DUCT_INTENSITY as f32);
                }
            }
        }
    }

    #[test]
    fn clean_slice_matches_noise_free_render() {
        let noisy = generate_bonafide(&small()).unwrap();
        let clean = generate_bonafide(&PhantomConfig { noise_sigma: 0.0, ..small() }).unwrap();
        assert_eq!(noisy.clean_slice(2), clean.instance.bscans()[2]);
        assert_ne!(noisy.instance.bscans()[2], clean.instance.bscans()[2]);
    }

    #[test]
    fn speckle_keeps_background_dark_and_values_in_range() {
        let p = generate_bonafide(&small()).unwrap();
        let scan = &p.instance.bscans()[0];
        assert!(scan.pixels.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(scan.pixels.get(0, 0), 0.0);
    }

    #[test]
    fn homogeneous_attack_has_one_plateau_per_a_line() {
        let cfg = PhantomConfig { noise_sigma: 0.0, pa_type: PaType::Homogeneous3d, ..small() };
        let pa = generate_pa(&cfg).unwrap();
        for scan in pa.bscans() {
            for col in (0..cfg.width).step_by(17) {
                let column: Vec<f32> = (0..cfg.height).map(|r| scan.pixels.get(r, col)).collect();
                let runs = column.windows(2).filter(|w| w[0] == 0.0 && w[1] > 0.0).count();
                assert_eq!(runs, 1);
                assert!(column.iter().all(|&v| v == 0.0 || v == PA_BULK_INTENSITY as f32));
            }
        }
    }

    #[test]
    fn seeds_are_distinct() {
        let s = derive_seeds(3, 50);
        let mut d = s.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 50);
        assert_eq!(s, derive_seeds(3, 50));
    }
}
