//! Dataset model and I/O: annotations and targets, activation files, the
//! manifest, and synthetic data generation.

pub mod activations;
pub mod annotations;
pub mod manifest;
pub mod synth;

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::container::ContainerError;

pub use activations::{encode_activation_file, read_activation_file, write_activation_file, ActivationFile, ActivationStore};
pub use annotations::{
    build_targets, load_annotations, normalize_rating, parse_annotations, serialize_annotations,
    write_annotations, AnnotationRecord, SaliencyTargets, MAX_RATING,
};
pub use manifest::{Dataset, DatasetManifest, ManifestItem};
pub use synth::{generate_synthetic, SynthSpec, SyntheticData};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("annotations line {line}, field {field}: {message}")]
    Annotation {
        line: usize,
        field: String,
        message: String,
    },
    #[error("rating {0} outside 0..=4")]
    Rating(u8),
    #[error("{}: {source}", path.display())]
    Container { path: PathBuf, source: ContainerError },
    #[error("{}: {message}", path.display())]
    Activation { path: PathBuf, message: String },
    #[error("{}: item {item} truncated: {message}", path.display())]
    Truncated {
        path: PathBuf,
        item: String,
        message: String,
    },
    #[error("duplicate item id {0:?}")]
    DuplicateId(String),
    #[error("invalid item id {0:?}")]
    InvalidId(String),
    #[error("item {item}: width {found}, expected {expected}")]
    WidthMismatch {
        item: String,
        expected: usize,
        found: usize,
    },
    #[error("no activation with id {0:?}")]
    MissingItem(String),
    #[error("missing activation {id:?} for video {vid}{}", .clip.map(|c| format!(" clip {c}")).unwrap_or_else(|| " query".into()))]
    MissingActivation {
        vid: String,
        clip: Option<usize>,
        id: String,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("synthetic spec: {0}")]
    Spec(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
