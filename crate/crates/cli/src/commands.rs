use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use octprint::config::{AccuracyMode, ExperimentConfig};
use octprint::dataset::{load_entry, load_ridge_map, plan_dataset, write_dataset, Manifest, Partition, MANIFEST_FILE};
use octprint::io::{read_instance, read_json, write_json, write_npy, write_png_u8};
use octprint::metrics::{eer, fmr100, gmr_at_fmr};
use octprint::net::{checkpoint, Network};
use octprint::pad::{
    instance_codes, pad_metrics, reference_from_codes, reference_threshold, score_codes, AccuracyThreshold, PadReport,
};
use octprint::reconstruct::{reconstruct_instance, ridge_correlation};
use octprint::train::{make_folds, predict_labels, prepare_input, train_fold, EpochRecord, Sample};
use octprint::types::{
    normalize_bscan, resize_scan, AnnotationMask, BScan, Grid, PresentationLabel, ReferenceCode, NET_COLS, NET_ROWS,
};
use octprint::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const MODEL_FILE: &str = "model.ckpt";
pub const REFERENCE_FILE: &str = "reference.json";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_config(out: &Path, config: &ExperimentConfig) -> Result<()> {
    let path = out.join(CONFIG_FILE);
    std::fs::write(&path, config.to_toml()).map_err(|e| Error::io(&path, e))
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::format(path, e.to_string())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    for row in rows {
        w.serialize(row).map_err(csv_error(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn manifest_root(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn generate(config: &ExperimentConfig, out: &Path) -> Result<()> {
    config.validate()?;
    let manifest = plan_dataset(&config.dataset, config.seed, config.phantom.n_bscans);
    write_dataset(out, &config.phantom(), &manifest)?;
    write_config(out, config)?;
    println!("generated {} instances of {} B-scans in {}", manifest.entries.len(), manifest.n_bscans, out.display());
    for (partition, label) in [
        (Partition::Reference, PresentationLabel::Bonafide),
        (Partition::Train, PresentationLabel::Bonafide),
        (Partition::Test, PresentationLabel::Bonafide),
        (Partition::Test, PresentationLabel::PresentationAttack),
    ] {
        let n = manifest
            .partition(partition)
            .iter()
            .filter(|e| e.label == label)
            .count();
        println!("  {:<9} {:<19} {n}", partition.to_string(), format!("{label:?}"));
    }
    println!("manifest sha256 {}", sha256_hex(&out.join(MANIFEST_FILE))?);
    Ok(())
}

#[derive(Serialize)]
struct LogRow {
    fold: usize,
    epoch: usize,
    #[serde(rename = "L_D")]
    l_d: f64,
    #[serde(rename = "L_S")]
    l_s: f64,
    #[serde(rename = "L")]
    l: f64,
    #[serde(rename = "test_mIOU")]
    test_miou: f64,
    #[serde(rename = "test_PA")]
    test_pa: f64,
}

impl From<&EpochRecord> for LogRow {
    fn from(r: &EpochRecord) -> Self {
        Self {
            fold: r.fold + 1,
            epoch: r.epoch,
            l_d: r.l_d,
            l_s: r.l_s,
            l: r.l,
            test_miou: r.test_miou,
            test_pa: r.test_pa,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SummaryRow {
    pub fold: String,
    pub best_epoch: String,
    #[serde(rename = "mIOU")]
    pub miou: f64,
    #[serde(rename = "PA")]
    pub pa: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn train(config: &ExperimentConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    config.validate()?;
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_root(manifest_path);
    let net_config = config.net();
    let train_config = config.train();
    let mut samples = Vec::new();
    for entry in manifest.require(Partition::Train, Some(PresentationLabel::Bonafide))? {
        let (instance, masks) = load_entry(&root, entry)?;
        let masks = masks.ok_or_else(|| Error::Invalid(format!("training instance {} has no annotation masks", entry.id)))?;
        for (scan, mask) in instance.bscans().iter().zip(&masks) {
            samples.push(Sample::prepare(scan, mask, &net_config)?);
        }
    }
    let plan = make_folds(samples.len(), train_config.fold_count, train_config.seed)?;
    create_dir(out)?;
    write_config(out, config)?;
    write_json(&out.join("folds.json"), &plan)?;
    eprintln!(
        "training {} folds on {} B-scans, width divisor {}",
        plan.len(),
        samples.len(),
        net_config.width_divisor
    );

    let mut log = Vec::new();
    let mut summary = Vec::new();
    let mut best: Option<(f64, Network<f32>)> = None;
    for fold in 0..plan.len() {
        let train: Vec<Sample> = plan.train(fold).iter().map(|&i| samples[i].clone()).collect();
        let test: Vec<Sample> = plan.test(fold).iter().map(|&i| samples[i].clone()).collect();
        let outcome = train_fold(&train, &test, net_config, &train_config, fold, |r| {
            eprintln!(
                "fold {} epoch {}: L {:.4} (L_D {:.4}, L_S {:.4}) test mIOU {:.4} PA {:.4}",
                r.fold + 1,
                r.epoch,
                r.l,
                r.l_d,
                r.l_s,
                r.test_miou,
                r.test_pa
            );
        })?;
        log.extend(outcome.trace.iter().map(LogRow::from));
        checkpoint::save(&outcome.network, &out.join(format!("fold_{}.ckpt", fold + 1)))?;
        summary.push(SummaryRow {
            fold: (fold + 1).to_string(),
            best_epoch: outcome.best.epoch.to_string(),
            miou: outcome.best.test_miou,
            pa: outcome.best.test_pa,
        });
        if best.as_ref().is_none_or(|(m, _)| outcome.best.test_miou > *m) {
            best = Some((outcome.best.test_miou, outcome.network));
        }
    }
    let mious: Vec<f64> = summary.iter().map(|r| r.miou).collect();
    let pas: Vec<f64> = summary.iter().map(|r| r.pa).collect();
    let (m_mean, m_std) = mean_std(&mious);
    let (p_mean, p_std) = mean_std(&pas);
    for (name, miou, pa) in [("Mean", m_mean, p_mean), ("Std", m_std, p_std)] {
        summary.push(SummaryRow {
            fold: name.into(),
            best_epoch: String::new(),
            miou,
            pa,
        });
    }
    write_csv(&out.join("train_log.csv"), &log)?;
    write_csv(&out.join("summary.csv"), &summary)?;
    let (_, model) = best.expect("at least two folds");
    checkpoint::save(&model, &out.join(MODEL_FILE))?;
    println!("mIOU {m_mean:.4} ± {m_std:.4}, PA {p_mean:.4} ± {p_std:.4}; model in {}", out.join(MODEL_FILE).display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreRow {
    pub instance_id: String,
    pub label: PresentationLabel,
    pub score: f64,
}

/// Reference code and the thresholds derived when it was built.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub reference: ReferenceCode,
    pub reference_scores: Vec<f64>,
    pub reference_threshold: f64,
    /// Scores above this are flagged as attacks.
    pub decision_threshold: f64,
}

pub fn pad(config: &ExperimentConfig, manifest_path: &Path, checkpoint_path: &Path, out: &Path) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_root(manifest_path);
    let references = manifest.require(Partition::Reference, Some(PresentationLabel::Bonafide))?;
    manifest.require(Partition::Test, Some(PresentationLabel::Bonafide))?;
    manifest.require(Partition::Test, Some(PresentationLabel::PresentationAttack))?;
    let net = checkpoint::load(checkpoint_path)?;

    let mut per_reference = Vec::new();
    for entry in references {
        let (instance, _) = load_entry(&root, entry)?;
        per_reference.push(instance_codes(&net, &instance)?);
    }
    let all: Vec<Vec<f64>> = per_reference.iter().flatten().cloned().collect();
    let reference = reference_from_codes(&all)?;
    let reference_scores = per_reference
        .iter()
        .map(|codes| Ok(score_codes(codes, &reference)?.value))
        .collect::<Result<Vec<f64>>>()?;
    let reference_threshold = reference_threshold(&reference_scores)?;

    let mut rows = Vec::new();
    for entry in manifest.partition(Partition::Test) {
        let (instance, _) = load_entry(&root, entry)?;
        let score = score_codes(&instance_codes(&net, &instance)?, &reference)?;
        eprintln!("{}: {:?} score {:.6}", entry.id, entry.label, score.value);
        rows.push(ScoreRow {
            instance_id: entry.id.clone(),
            label: entry.label,
            score: score.value,
        });
    }
    let scores_of = |l| rows.iter().filter(|r| r.label == l).map(|r| r.score).collect::<Vec<_>>();
    let mode = match config.pad.accuracy_threshold {
        AccuracyMode::BestOnTest => AccuracyThreshold::BestOnTest,
        AccuracyMode::Reference => AccuracyThreshold::Fixed(reference_threshold),
    };
    let report = pad_metrics(
        &scores_of(PresentationLabel::Bonafide),
        &scores_of(PresentationLabel::PresentationAttack),
        mode,
    )?;
    create_dir(out)?;
    write_config(out, config)?;
    write_csv(&out.join("scores.csv"), &rows)?;
    write_json(&out.join("metrics.json"), &report)?;
    write_json(
        &out.join(REFERENCE_FILE),
        &ReferenceRecord {
            reference,
            reference_scores,
            reference_threshold,
            decision_threshold: report.acc_threshold,
        },
    )?;
    println!(
        "Acc {:.2}%  BPCER10 {:.2}%  BPCER20 {:.2}%  D-EER {:.2}%",
        report.acc, report.bpcer10, report.bpcer20, report.d_eer
    );
    Ok(())
}

pub struct ReconstructArgs {
    pub instance: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub pad: Option<PathBuf>,
    pub use_gt_masks: bool,
    pub force: bool,
    pub out: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReconstructionRecord {
    pub instance: String,
    pub slices: usize,
    pub mask_source: String,
    pub spoof_score: Option<f64>,
    pub decision_threshold: Option<f64>,
    /// Set when the instance scored as an attack and `--force` was given.
    pub presentation_attack_warning: bool,
    /// Correlation of the stratum corneum image with the stored ridge map.
    pub ridge_correlation: Option<f64>,
    pub images: Vec<String>,
}

pub fn reconstruct(config: &ExperimentConfig, args: &ReconstructArgs) -> Result<()> {
    let (instance, gt_masks) = read_instance(&args.instance)?;
    let net = match &args.checkpoint {
        Some(p) => Some(checkpoint::load(p)?),
        None if args.use_gt_masks && args.pad.is_none() => None,
        None => {
            return Err(Error::Invalid(
                "--checkpoint is required unless --use-gt-masks is given without --pad".into(),
            ))
        }
    };

    let (mut spoof_score, mut decision_threshold, mut warning) = (None, None, false);
    if let (Some(pad_dir), Some(net)) = (&args.pad, &net) {
        let record: ReferenceRecord = read_json(&pad_dir.join(REFERENCE_FILE))?;
        let score = score_codes(&instance_codes(net, &instance)?, &record.reference)?.value;
        spoof_score = Some(score);
        decision_threshold = Some(record.decision_threshold);
        if score > record.decision_threshold {
            if !args.force {
                return Err(Error::Invalid(format!(
                    "instance scores {score:.6} above the attack threshold {:.6}; rerun with --force to reconstruct anyway",
                    record.decision_threshold
                )));
            }
            eprintln!("warning: instance flagged as a presentation attack; reconstructing because of --force");
            warning = true;
        }
    }

    let (rows, cols) = net
        .as_ref()
        .map(|n| (n.config.input_rows, n.config.input_cols))
        .unwrap_or((NET_ROWS, NET_COLS));
    let mut scans = Vec::with_capacity(instance.len());
    let mut masks = Vec::with_capacity(instance.len());
    for (i, scan) in instance.bscans().iter().enumerate() {
        let normalized = normalize_bscan(scan)?;
        let mask = if args.use_gt_masks {
            let gt = gt_masks
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("{} has no annotation masks", args.instance.display())))?;
            resize_scan(&normalized, Some(&gt[i]), rows, cols)?.1.expect("mask supplied")
        } else {
            let net = net.as_ref().expect("checked above");
            let labels = predict_labels(net, &prepare_input(scan, &net.config)?)?;
            AnnotationMask::new(Grid::from_vec(rows, cols, labels)?)?
        };
        scans.push(BScan::new(resize_scan(&normalized, None, rows, cols)?.0.pixels, scan.slice_index));
        masks.push(mask);
    }
    let result = reconstruct_instance(&scans, &masks, &config.reconstruct.straighten())?;

    create_dir(&args.out)?;
    write_config(&args.out, config)?;
    let mut images = Vec::new();
    for layer in result.layers() {
        let name = format!("R_{}", layer.layer.tag());
        write_png_u8(&args.out.join(format!("{name}.png")), &layer.to_u8())?;
        write_npy(&args.out.join(format!("{name}.npy")), &layer.raw)?;
        images.push(format!("{name}.png"));
    }
    write_npy(&args.out.join("foreground.npy"), &result.foreground)?;
    let ridge_correlation = match load_ridge_map(&args.instance)? {
        Some(map) => Some(ridge_correlation(&result.stratum_corneum, &map)?),
        None => None,
    };
    let record = ReconstructionRecord {
        instance: instance.meta.subject_id.clone(),
        slices: instance.len(),
        mask_source: if args.use_gt_masks { "annotation" } else { "network" }.into(),
        spoof_score,
        decision_threshold,
        presentation_attack_warning: warning,
        ridge_correlation,
        images,
    };
    write_json(&args.out.join("reconstruction.json"), &record)?;
    match ridge_correlation {
        Some(r) => println!("wrote R_s, R_v, R_d to {} (ridge correlation {r:.4})", args.out.display()),
        None => println!("wrote R_s, R_v, R_d to {}", args.out.display()),
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct LabelledScore {
    label: String,
    score: f64,
}

fn read_scores(path: &Path, positive: &str, negative: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error(path))?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (line, row) in reader.deserialize::<LabelledScore>().enumerate() {
        let row = row.map_err(csv_error(path))?;
        match row.label.as_str() {
            l if l == positive => pos.push(row.score),
            l if l == negative => neg.push(row.score),
            other => {
                return Err(Error::format(
                    path,
                    format!("row {}: label {other:?} is neither {positive} nor {negative}", line + 2),
                ))
            }
        }
    }
    Ok((pos, neg))
}

pub fn pad_metrics_from_csv(scores: &Path, out: &Path) -> Result<()> {
    let (bonafide, attacks) = read_scores(scores, "bonafide", "presentation_attack")?;
    let report: PadReport = pad_metrics(&bonafide, &attacks, AccuracyThreshold::BestOnTest)?;
    create_dir(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    println!(
        "Acc {:.2}%  BPCER10 {:.2}%  BPCER20 {:.2}%  D-EER {:.2}%",
        report.acc, report.bpcer10, report.bpcer20, report.d_eer
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MatchReport {
    pub eer: f64,
    pub fmr100: f64,
    pub fmr_target: f64,
    pub gmr: f64,
}

pub fn match_metrics_from_csv(scores: &Path, fmr_target: f64, out: &Path) -> Result<()> {
    let (genuine, impostor) = read_scores(scores, "genuine", "impostor")?;
    let report = MatchReport {
        eer: eer(&genuine, &impostor)?,
        fmr100: fmr100(&genuine, &impostor)?,
        fmr_target,
        gmr: gmr_at_fmr(&genuine, &impostor, fmr_target)?,
    };
    create_dir(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    println!(
        "EER {:.2}%  FMR100 {:.2}%  GMR@FMR{}% {:.2}%",
        report.eer, report.fmr100, fmr_target, report.gmr
    );
    Ok(())
}
