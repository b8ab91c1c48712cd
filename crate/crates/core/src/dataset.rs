//! Phantom datasets on disk and their manifest.
//!
//! A dataset directory holds `manifest.json` and one instance directory per
//! entry under `instances/`. Partition tags decide which commands may read
//! an entry: training reads only `train`, reference building only
//! `reference`, scoring only `test`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_instance, read_png_u8, write_instance, write_json, write_png_u8};
use crate::phantom::{derive_seeds, generate_bonafide, generate_pa, GroundTruthRidgeMap, PaType, PhantomConfig};
use crate::types::{AnnotationMask, OctInstance, PresentationLabel};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
/// Ground-truth ridge map of a bonafide phantom, 0 or 255 per pixel.
pub const RIDGE_MAP_FILE: &str = "ridge_map.png";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Reference,
    Train,
    Test,
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Partition::Reference => "reference",
            Partition::Train => "train",
            Partition::Test => "test",
        })
    }
}

/// Instance counts per partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub reference: usize,
    pub test_bonafide: usize,
    pub test_pa: usize,
    /// Annotated bonafide instances used for segmentation training.
    pub annotated: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            reference: 2,
            test_bonafide: 4,
            test_pa: 4,
            annotated: 4,
        }
    }
}

impl DatasetSpec {
    pub fn total(&self) -> usize {
        self.reference + self.test_bonafide + self.test_pa + self.annotated
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Instance directory relative to the manifest.
    pub dir: String,
    pub label: PresentationLabel,
    pub partition: Partition,
    pub annotated: bool,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pa_type: Option<PaType>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub n_bscans: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn partition(&self, partition: Partition) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.partition == partition).collect()
    }

    /// Entries of a partition, or an error naming the partition when it has
    /// none with the wanted label.
    pub fn require(&self, partition: Partition, label: Option<PresentationLabel>) -> Result<Vec<&ManifestEntry>> {
        let found: Vec<_> = self
            .partition(partition)
            .into_iter()
            .filter(|e| label.is_none_or(|l| e.label == l))
            .collect();
        if found.is_empty() {
            let what = match label {
                Some(PresentationLabel::Bonafide) => format!("{partition} (bonafide)"),
                Some(PresentationLabel::PresentationAttack) => format!("{partition} (presentation attack)"),
                None => partition.to_string(),
            };
            return Err(Error::Invalid(format!("manifest has no instances in partition {what}")));
        }
        Ok(found)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = crate::io::read_json(path)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(path, format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }
}

/// Entry list for a spec: reference, annotated, test bonafide, then test
/// attacks alternating between the two attack types.
pub fn plan_dataset(spec: &DatasetSpec, seed: u64, n_bscans: usize) -> Manifest {
    let seeds = derive_seeds(seed, spec.total());
    let mut seeds = seeds.into_iter();
    let mut entries = Vec::with_capacity(spec.total());
    let mut push = |prefix: &str, count: usize, partition, label, annotated, pa: &dyn Fn(usize) -> Option<PaType>| {
        for i in 0..count {
            let id = format!("{prefix}-{:02}", i + 1);
            entries.push(ManifestEntry {
                dir: format!("instances/{id}"),
                id,
                label,
                partition,
                annotated,
                seed: seeds.next().expect("one seed per entry"),
                pa_type: pa(i),
            });
        }
    };
    let none = |_| None;
    push("ref", spec.reference, Partition::Reference, PresentationLabel::Bonafide, false, &none);
    push("train", spec.annotated, Partition::Train, PresentationLabel::Bonafide, true, &none);
    push("test-bf", spec.test_bonafide, Partition::Test, PresentationLabel::Bonafide, false, &none);
    let alternate = |i: usize| Some(if i % 2 == 0 { PaType::Homogeneous3d } else { PaType::Layered2d });
    push("test-pa", spec.test_pa, Partition::Test, PresentationLabel::PresentationAttack, false, &alternate);
    Manifest {
        version: MANIFEST_VERSION,
        seed,
        n_bscans,
        entries,
    }
}

/// Phantom parameters of one entry.
pub fn entry_config(base: &PhantomConfig, entry: &ManifestEntry) -> PhantomConfig {
    PhantomConfig {
        seed: entry.seed,
        pa_type: entry.pa_type.unwrap_or(base.pa_type),
        ..base.clone()
    }
}

/// A generated instance before it is written.
pub struct GeneratedInstance {
    pub instance: OctInstance,
    pub masks: Option<Vec<AnnotationMask>>,
    pub ridge_map: Option<GroundTruthRidgeMap>,
}

pub fn generate_entry(base: &PhantomConfig, entry: &ManifestEntry) -> Result<GeneratedInstance> {
    let config = entry_config(base, entry);
    let mut out = match entry.label {
        PresentationLabel::Bonafide => {
            let p = generate_bonafide(&config)?;
            GeneratedInstance {
                instance: p.instance,
                masks: entry.annotated.then_some(p.masks),
                ridge_map: Some(p.ridge_map),
            }
        }
        PresentationLabel::PresentationAttack => GeneratedInstance {
            instance: generate_pa(&config)?,
            masks: None,
            ridge_map: None,
        },
    };
    let meta = &mut out.instance.meta;
    meta.subject_id = entry.id.clone();
    // Reference instances come in pairs: one finger, two sessions.
    let (finger, session) = match entry.partition {
        Partition::Reference => {
            let k: usize = entry.id.rsplit('-').next().and_then(|s| s.parse().ok()).unwrap_or(1) - 1;
            (format!("finger-{:02}", k / 2 + 1), (k % 2 + 1) as u32)
        }
        _ => ("finger-01".to_string(), 1),
    };
    meta.finger_id = finger;
    meta.session = session;
    Ok(out)
}

/// Generates every entry of the plan under `root` and writes the manifest.
pub fn write_dataset(root: &Path, base: &PhantomConfig, manifest: &Manifest) -> Result<()> {
    base.validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for entry in &manifest.entries {
        let generated = generate_entry(base, entry)?;
        let dir = root.join(&entry.dir);
        write_instance(&dir, &generated.instance, generated.masks.as_deref())?;
        if let Some(r) = generated.ridge_map {
            write_png_u8(&dir.join(RIDGE_MAP_FILE), &r.map.map(|v| v * 255))?;
        }
    }
    write_json(&root.join(MANIFEST_FILE), manifest)
}

pub fn load_entry(root: &Path, entry: &ManifestEntry) -> Result<(OctInstance, Option<Vec<AnnotationMask>>)> {
    read_instance(&root.join(&entry.dir))
}

/// Ridge map stored beside a bonafide instance, if any.
pub fn load_ridge_map(instance_dir: &Path) -> Result<Option<GroundTruthRidgeMap>> {
    let path = instance_dir.join(RIDGE_MAP_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(GroundTruthRidgeMap {
        map: read_png_u8(&path)?.map(|v| u8::from(v > 127)),
    }))
}
