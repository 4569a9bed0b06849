//! Dataset manifests: one CSV row per sample with label and split metadata,
//! plus the three split rules over them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::train::mix_seed;
use crate::error::{Error, Result};

const SEED_DOMAIN_SPLIT: u64 = 41;

const HEADER: &str = "id,path,label,subject,camera";

/// One sample: a unique id, an optional file path (empty for inline or
/// generated data), its class label, and optional split metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub label: u32,
    pub subject: Option<u32>,
    pub camera: Option<u32>,
}

/// An ordered set of records with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

/// How to partition a manifest into train and evaluation sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum SplitRule {
    /// Samples of the listed subjects train, everything else evaluates.
    CrossSubject { train_subjects: Vec<u32> },
    /// Samples of the listed cameras train, everything else evaluates.
    CrossView { train_cameras: Vec<u32> },
    /// A seeded shuffle puts `round(fraction * n)` samples into training.
    RandomFraction { fraction: f64 },
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<DatasetManifest> {
        let manifest = DatasetManifest { records };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<&str> = self.records.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        for pair in ids.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::Data(format!("duplicate sample id {:?}", pair[0])));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from(HEADER);
        text.push('\n');
        for r in &self.records {
            for field in [&r.id, &r.path] {
                if field.contains(',') || field.contains('\n') {
                    return Err(Error::Data(format!(
                        "field {field:?} cannot hold a comma or newline"
                    )));
                }
            }
            let subject = r.subject.map(|s| s.to_string()).unwrap_or_default();
            let camera = r.camera.map(|c| c.to_string()).unwrap_or_default();
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                r.id, r.path, r.label, subject, camera
            ));
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<DatasetManifest> {
        let shown = path.display().to_string();
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, first)) if first.trim_end() == HEADER => {}
            other => {
                return Err(Error::Parse {
                    path: shown,
                    line: 1,
                    msg: format!(
                        "expected header {HEADER:?}, found {:?}",
                        other.map(|(_, l)| l).unwrap_or_default()
                    ),
                })
            }
        }
        let mut records = Vec::new();
        for (index, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let line_no = index + 1;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Parse {
                    path: shown,
                    line: line_no,
                    msg: format!("expected 5 fields, found {}", fields.len()),
                });
            }
            let label: u32 = fields[2].trim().parse().map_err(|_| Error::Parse {
                path: shown.clone(),
                line: line_no,
                msg: format!("bad label {:?}", fields[2]),
            })?;
            let optional = |text: &str, what: &str| -> Result<Option<u32>> {
                let text = text.trim();
                if text.is_empty() {
                    return Ok(None);
                }
                text.parse().map(Some).map_err(|_| Error::Parse {
                    path: shown.clone(),
                    line: line_no,
                    msg: format!("bad {what} {text:?}"),
                })
            };
            records.push(ManifestRecord {
                id: fields[0].trim().to_string(),
                path: fields[1].trim().to_string(),
                label,
                subject: optional(fields[3], "subject")?,
                camera: optional(fields[4], "camera")?,
            });
        }
        DatasetManifest::new(records)
    }
}

/// Partition a manifest into disjoint, exhaustive train and evaluation id
/// lists. Deterministic: the only randomness is the seeded shuffle of the
/// random-fraction rule.
pub fn split_dataset(
    manifest: &DatasetManifest,
    rule: &SplitRule,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    manifest.validate()?;
    if manifest.is_empty() {
        return Err(Error::Data("cannot split an empty manifest".into()));
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    match rule {
        SplitRule::CrossSubject { train_subjects } => {
            for r in &manifest.records {
                let subject = r.subject.ok_or_else(|| {
                    Error::Data(format!("sample {:?} has no subject id", r.id))
                })?;
                if train_subjects.contains(&subject) {
                    train.push(r.id.clone());
                } else {
                    eval.push(r.id.clone());
                }
            }
        }
        SplitRule::CrossView { train_cameras } => {
            for r in &manifest.records {
                let camera = r.camera.ok_or_else(|| {
                    Error::Data(format!("sample {:?} has no camera id", r.id))
                })?;
                if train_cameras.contains(&camera) {
                    train.push(r.id.clone());
                } else {
                    eval.push(r.id.clone());
                }
            }
        }
        SplitRule::RandomFraction { fraction } => {
            if !(0.0..=1.0).contains(fraction) {
                return Err(Error::Config(format!(
                    "fraction {fraction} must lie in [0, 1]"
                )));
            }
            let mut order: Vec<usize> = (0..manifest.len()).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(&[SEED_DOMAIN_SPLIT, seed]));
            order.shuffle(&mut rng);
            let take = (fraction * manifest.len() as f64).round() as usize;
            for (rank, &i) in order.iter().enumerate() {
                if rank < take {
                    train.push(manifest.records[i].id.clone());
                } else {
                    eval.push(manifest.records[i].id.clone());
                }
            }
        }
    }
    Ok((train, eval))
}
