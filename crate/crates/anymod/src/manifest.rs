//! Cohort directories: a JSON manifest plus one BAV1 file per observed
//! volume and a BAL1 atlas.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anymod_core::cohort::{Cohort, Labels, Split, SubjectRecord, SyntheticAtlas};
use anymod_core::masking::RegionClass;
use anymod_core::volume::Shape3;
use anymod_core::{Error, Modality, ModalitySet, Result};
use serde::{Deserialize, Serialize};

use crate::bav::{io_error, read_labels, read_volume, write_labels, write_volume};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    pub split: Split,
    pub observed: ModalitySet,
    /// Canonical combination tag, e.g. `T1+FLAIR`.
    pub combination: String,
    pub labels: Labels,
    /// Volume path per observed modality, relative to the manifest.
    pub volumes: BTreeMap<Modality, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtlasEntry {
    pub labels: String,
    /// Class of region `k + 1`.
    pub classes: Vec<RegionClass>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub schema_version: u32,
    pub volume_shape: Shape3,
    pub atlas: Option<AtlasEntry>,
    pub subjects: Vec<SubjectEntry>,
}

/// Writes `cohort` (and `atlas`) under `dir`, returning the manifest path.
pub fn write_cohort(dir: &Path, cohort: &Cohort, atlas: Option<&SyntheticAtlas>) -> Result<PathBuf> {
    cohort.validate()?;
    let vol_dir = dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| io_error(&vol_dir, e))?;
    let shape = cohort
        .subjects
        .first()
        .and_then(|s| s.volumes.iter().flatten().next())
        .map(|v| v.shape)
        .ok_or_else(|| Error::Data("empty cohort".into()))?;
    let mut subjects = Vec::with_capacity(cohort.subjects.len());
    for (s, split) in cohort.subjects.iter().zip(&cohort.splits) {
        let mut volumes = BTreeMap::new();
        for m in s.observed.iter() {
            let rel = format!("volumes/{}_{}.bav", s.id, m.key());
            write_volume(&dir.join(&rel), s.volume(m).expect("validated"))?;
            volumes.insert(m, rel);
        }
        subjects.push(SubjectEntry {
            id: s.id.clone(),
            split: *split,
            observed: s.observed,
            combination: s.observed.label(),
            labels: s.labels,
            volumes,
        });
    }
    let atlas = match atlas {
        Some(a) => {
            let atlas_dir = dir.join("atlas");
            fs::create_dir_all(&atlas_dir).map_err(|e| io_error(&atlas_dir, e))?;
            write_labels(&atlas_dir.join("labels.bal"), &a.labels)?;
            Some(AtlasEntry { labels: "atlas/labels.bal".into(), classes: a.classes.clone() })
        }
        None => None,
    };
    let manifest = CohortManifest { schema_version: MANIFEST_SCHEMA, volume_shape: shape, atlas, subjects };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))?;
    Ok(path)
}

/// Accepts a manifest file or the directory containing `manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<CohortManifest> {
    let path = manifest_path(path);
    let text = fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
    let m: CohortManifest = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if m.schema_version != MANIFEST_SCHEMA {
        return Err(Error::Data(format!("manifest schema {} is not supported (expected {MANIFEST_SCHEMA})", m.schema_version)));
    }
    Ok(m)
}

/// Loads and validates every volume of a manifest.
pub fn load_cohort(path: &Path) -> Result<(Cohort, Option<SyntheticAtlas>)> {
    let path = manifest_path(path);
    let manifest = read_manifest(&path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = BTreeSet::new();
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    let mut splits = Vec::with_capacity(manifest.subjects.len());
    for e in &manifest.subjects {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::Data(format!("duplicate subject id {}", e.id)));
        }
        if e.combination != e.observed.label() {
            return Err(Error::Data(format!("subject {}: combination tag {} does not match observed {}", e.id, e.combination, e.observed)));
        }
        let listed: ModalitySet = e.volumes.keys().copied().collect();
        if listed != e.observed {
            return Err(Error::Data(format!("subject {}: volume files do not match the observed set", e.id)));
        }
        let mut volumes: [Option<_>; 4] = Default::default();
        for (m, rel) in &e.volumes {
            let v = read_volume(&base.join(rel))?;
            if v.shape != manifest.volume_shape {
                return Err(Error::Data(format!("subject {}: {m} volume shape differs from the manifest", e.id)));
            }
            volumes[m.index()] = Some(v);
        }
        subjects.push(SubjectRecord { id: e.id.clone(), observed: e.observed, volumes, labels: e.labels });
        splits.push(e.split);
    }
    let cohort = Cohort { subjects, splits };
    cohort.validate()?;
    let atlas = match &manifest.atlas {
        Some(a) => {
            let labels = read_labels(&base.join(&a.labels))?;
            if labels.shape != manifest.volume_shape {
                return Err(Error::Data("atlas shape differs from the volume shape".into()));
            }
            if usize::from(labels.max_label()) > a.classes.len() {
                return Err(Error::Data("atlas has labels without a region class".into()));
            }
            Some(SyntheticAtlas { labels, classes: a.classes.clone() })
        }
        None => None,
    };
    Ok((cohort, atlas))
}
