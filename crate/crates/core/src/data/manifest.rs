//! Dataset manifest (`manifest.json`) tying annotation records to the
//! activation ids of their clips and query, plus a loader for a whole data
//! directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::activations::ActivationStore;
use super::annotations::{build_targets, load_annotations, AnnotationRecord, SaliencyTargets};
use super::DataError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub qid: i64,
    pub vid: String,
    pub num_clips: usize,
    /// One activation id per clip, in clip order.
    pub frame_ids: Vec<String>,
    pub query_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Annotation file, relative to the manifest's directory.
    pub annotations: String,
    pub vision_files: Vec<String>,
    pub text_files: Vec<String>,
    /// Free-form description of how the activations were produced.
    #[serde(default)]
    pub recipe: String,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest always serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), DataError> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        fs::write(&path, self.to_json()).map_err(|e| DataError::io(&path, e))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))
    }
}

/// Everything a data directory holds, loaded and cross-checked.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    /// Annotation records aligned with `manifest.items`.
    pub records: Vec<AnnotationRecord>,
    pub targets: Vec<SaliencyTargets>,
    pub vision: ActivationStore,
    pub text: ActivationStore,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, DataError> {
        let root = dir.as_ref().to_path_buf();
        let manifest = DatasetManifest::read(&root)?;
        let all_records = load_annotations(root.join(&manifest.annotations))?;
        let mut vision = ActivationStore::new();
        for f in &manifest.vision_files {
            vision.load_file(root.join(f))?;
        }
        let mut text = ActivationStore::new();
        for f in &manifest.text_files {
            text.load_file(root.join(f))?;
        }
        Self::assemble(root, manifest, all_records, vision, text)
    }

    /// Cross-checks manifest, annotations, and activations.
    pub fn assemble(
        root: PathBuf,
        manifest: DatasetManifest,
        all_records: Vec<AnnotationRecord>,
        vision: ActivationStore,
        text: ActivationStore,
    ) -> Result<Self, DataError> {
        let by_qid: HashMap<i64, &AnnotationRecord> = all_records.iter().map(|r| (r.qid, r)).collect();
        let mut records = Vec::with_capacity(manifest.items.len());
        let mut targets = Vec::with_capacity(manifest.items.len());
        for item in &manifest.items {
            let record = by_qid
                .get(&item.qid)
                .ok_or_else(|| DataError::Manifest(format!("qid {} has no annotation record", item.qid)))?;
            if record.vid != item.vid {
                return Err(DataError::Manifest(format!(
                    "qid {}: manifest vid {} but annotation vid {}",
                    item.qid, item.vid, record.vid
                )));
            }
            if item.num_clips != record.num_clips() || item.frame_ids.len() != item.num_clips {
                return Err(DataError::Manifest(format!(
                    "qid {}: {} frame ids, num_clips {}, annotation implies {}",
                    item.qid,
                    item.frame_ids.len(),
                    item.num_clips,
                    record.num_clips()
                )));
            }
            for (j, id) in item.frame_ids.iter().enumerate() {
                if vision.get(id).is_none() {
                    return Err(DataError::MissingActivation {
                        vid: item.vid.clone(),
                        clip: Some(j),
                        id: id.clone(),
                    });
                }
            }
            if text.get(&item.query_id).is_none() {
                return Err(DataError::MissingActivation {
                    vid: item.vid.clone(),
                    clip: None,
                    id: item.query_id.clone(),
                });
            }
            targets.push(build_targets(record)?);
            records.push((*record).clone());
        }
        Ok(Self {
            root,
            manifest,
            records,
            targets,
            vision,
            text,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.items.is_empty()
    }
}
