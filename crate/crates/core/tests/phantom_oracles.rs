use octprint::phantom::{generate_bonafide, generate_pa, PaType, PhantomConfig};
use octprint::reconstruct::wavelet::denoise;
use octprint::types::{BScan, Class};

/// Intensity drop between adjacent rows that counts as a layer boundary.
/// The bonafide tail decays by under 0.01 per row.
const DROP: f32 = 0.05;

fn config(seed: u64) -> PhantomConfig {
    PhantomConfig { seed, n_bscans: 3, noise_sigma: 0.0, ..PhantomConfig::default() }
}

/// Plateaus whose lower neighbour is at least `DROP` darker.
fn shoulders(scan: &BScan, col: usize) -> usize {
    let (rows, _) = scan.dims();
    (1..rows)
        .filter(|&r| scan.pixels.get(r - 1, col) - scan.pixels.get(r, col) > DROP)
        .count()
}

#[test]
fn bonafide_depth_profiles_step_down_three_times_and_attacks_once() {
    let bonafide = generate_bonafide(&config(21)).unwrap();
    let homogeneous = generate_pa(&PhantomConfig { pa_type: PaType::Homogeneous3d, ..config(22) }).unwrap();
    let layered = generate_pa(&PhantomConfig { pa_type: PaType::Layered2d, ..config(23) }).unwrap();
    for col in (0..1500).step_by(37) {
        for s in 0..3 {
            assert!(shoulders(&bonafide.instance.bscans()[s], col) >= 3, "bonafide slice {s} col {col}");
            assert_eq!(shoulders(&homogeneous.bscans()[s], col), 1, "homogeneous slice {s} col {col}");
            assert_eq!(shoulders(&layered.bscans()[s], col), 1, "layered slice {s} col {col}");
        }
    }
}

#[test]
fn stratum_corneum_thickness_carries_the_ridge_frequency() {
    let cfg = PhantomConfig { duct_density: 0.0, ..config(24) };
    let p = generate_bonafide(&cfg).unwrap();
    let mask = &p.masks[1];
    let (rows, cols) = mask.dims();
    let thickness: Vec<f64> = (0..cols)
        .map(|c| (0..rows).filter(|&r| mask.get(r, c) == Class::StratumCorneum).count() as f64)
        .collect();
    let mean = thickness.iter().sum::<f64>() / cols as f64;
    let power = |k: usize| {
        let (mut re, mut im) = (0.0, 0.0);
        for (x, t) in thickness.iter().enumerate() {
            let a = std::f64::consts::TAU * (k * x) as f64 / cols as f64;
            re += (t - mean) * a.cos();
            im -= (t - mean) * a.sin();
        }
        re * re + im * im
    };
    let peak = (1..cols / 2).max_by(|&a, &b| power(a).total_cmp(&power(b))).unwrap();
    let expected = cols as f64 / cfg.ridge_period;
    assert!((peak as f64 - expected).abs() <= 1.0, "peak bin {peak}, expected {expected}");
}

fn mse(a: &BScan, b: &BScan) -> f64 {
    let n = a.pixels.as_slice().len() as f64;
    a.pixels.as_slice().iter().zip(b.pixels.as_slice()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / n
}

#[test]
fn denoising_leaves_clean_slices_alone_and_reduces_speckle_error() {
    let clean = generate_bonafide(&config(25)).unwrap();
    let scan = &clean.instance.bscans()[0];
    let out = denoise(scan).unwrap();
    let n = scan.pixels.as_slice().len() as f64;
    let mae = scan.pixels.as_slice().iter().zip(out.pixels.as_slice()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / n;
    assert!(mae <= 1e-3, "mae {mae}");

    let noisy = generate_bonafide(&PhantomConfig { noise_sigma: 0.1, ..config(25) }).unwrap();
    let truth = noisy.clean_slice(0);
    let raw = &noisy.instance.bscans()[0];
    let (before, after) = (mse(raw, &truth), mse(&denoise(raw).unwrap(), &truth));
    assert!(after < before, "mse {before} -> {after}");
}
