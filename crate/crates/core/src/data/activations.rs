//! `HLCA` activation files: token states leaving the frozen trunk.
//!
//! Header lines are `model_dim=<d>` followed by one
//! `item=<id>\t<num_tokens>\t<pool_index>\t<byte offset>` per sequence.
//! Offsets are relative to the start of the payload.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use crate::container::{self, ContainerError};
use crate::encoder::ActivationSequence;
use crate::tensor::Tensor;

use super::DataError;

pub const ACTIVATION_MAGIC: &[u8; 4] = b"HLCA";
pub const ACTIVATION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectoryEntry {
    pub item_id: String,
    pub num_tokens: usize,
    pub pool_index: usize,
    pub offset: usize,
}

impl DirectoryEntry {
    fn byte_len(&self, model_dim: usize) -> usize {
        self.num_tokens * model_dim * 4
    }
}

fn bad(path: &Path, message: impl Into<String>) -> DataError {
    DataError::Activation {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Serializes sequences in the given order.
pub fn encode_activation_file(model_dim: usize, sequences: &[ActivationSequence]) -> Result<Vec<u8>, DataError> {
    let mut header = format!("model_dim={model_dim}\n");
    let mut payload = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for s in sequences {
        if !seen.insert(s.item_id.as_str()) {
            return Err(DataError::DuplicateId(s.item_id.clone()));
        }
        if s.item_id.is_empty() || s.item_id.contains(['\t', '\n', '\r']) {
            return Err(DataError::InvalidId(s.item_id.clone()));
        }
        if s.model_dim() != model_dim {
            return Err(DataError::WidthMismatch {
                item: s.item_id.clone(),
                expected: model_dim,
                found: s.model_dim(),
            });
        }
        let _ = writeln!(
            header,
            "item={}\t{}\t{}\t{}",
            s.item_id,
            s.num_tokens(),
            s.pool_index,
            payload.len()
        );
        container::f32s_to_le(s.tokens.data(), &mut payload);
    }
    Ok(container::encode(ACTIVATION_MAGIC, ACTIVATION_VERSION, &header, &payload))
}

pub fn write_activation_file(
    path: impl AsRef<Path>,
    model_dim: usize,
    sequences: &[ActivationSequence],
) -> Result<(), DataError> {
    let path = path.as_ref();
    let bytes = encode_activation_file(model_dim, sequences)?;
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

fn parse_header(path: &Path, header: &str) -> Result<(usize, Vec<DirectoryEntry>), DataError> {
    let mut model_dim = None;
    let mut entries: Vec<DirectoryEntry> = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for line in header.lines().filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(path, format!("header line without '=': {line:?}")))?;
        match key {
            "model_dim" => {
                model_dim = Some(
                    value
                        .parse::<usize>()
                        .map_err(|_| bad(path, format!("bad model_dim {value:?}")))?,
                )
            }
            "item" => {
                let parts: Vec<&str> = value.split('\t').collect();
                let [id, n, pool, off] = parts[..] else {
                    return Err(bad(path, format!("bad item entry {value:?}")));
                };
                let int = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| bad(path, format!("item {id}: bad integer {s:?}")))
                };
                let entry = DirectoryEntry {
                    item_id: id.to_string(),
                    num_tokens: int(n)?,
                    pool_index: int(pool)?,
                    offset: int(off)?,
                };
                if entry.num_tokens == 0 || entry.pool_index >= entry.num_tokens {
                    return Err(bad(path, format!("item {id}: pool_index {} outside {} tokens", entry.pool_index, entry.num_tokens)));
                }
                if !ids.insert(entry.item_id.clone()) {
                    return Err(DataError::DuplicateId(entry.item_id));
                }
                entries.push(entry);
            }
            other => return Err(bad(path, format!("unknown header key {other:?}"))),
        }
    }
    let model_dim = model_dim.ok_or_else(|| bad(path, "header lacks model_dim"))?;
    Ok((model_dim, entries))
}

fn check_bounds(path: &Path, model_dim: usize, entries: &[DirectoryEntry], payload_len: usize) -> Result<(), DataError> {
    for e in entries {
        if e.offset + e.byte_len(model_dim) > payload_len {
            return Err(DataError::Truncated {
                path: path.to_path_buf(),
                item: e.item_id.clone(),
                message: format!(
                    "bytes {}..{} requested from a {payload_len}-byte payload",
                    e.offset,
                    e.offset + e.byte_len(model_dim)
                ),
            });
        }
    }
    Ok(())
}

fn sequence_from(path: &Path, model_dim: usize, e: &DirectoryEntry, bytes: &[u8]) -> Result<ActivationSequence, DataError> {
    let tokens = Tensor::from_vec(e.num_tokens, model_dim, container::le_to_f32s(bytes))
        .map_err(|err| bad(path, format!("item {}: {err}", e.item_id)))?;
    ActivationSequence::new(e.item_id.clone(), tokens, e.pool_index).map_err(|err| bad(path, err.to_string()))
}

/// An activation file opened for random access: only the header is read up
/// front, and each sequence is read with a single seek on request.
#[derive(Debug)]
pub struct ActivationFile {
    path: PathBuf,
    model_dim: usize,
    entries: Vec<DirectoryEntry>,
    index: HashMap<String, usize>,
    payload_start: u64,
}

impl ActivationFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let mut file = File::open(path).map_err(|e| DataError::io(path, e))?;
        let file_len = file.metadata().map_err(|e| DataError::io(path, e))?.len() as usize;
        let mut prefix = [0u8; 12];
        let got = read_up_to(&mut file, &mut prefix).map_err(|e| DataError::io(path, e))?;
        // decode the fixed prefix first to learn the header length
        let header_len = match container::decode(&prefix[..got], ACTIVATION_MAGIC, ACTIVATION_VERSION) {
            Ok(_) => 0,
            Err(ContainerError::Truncated(_)) if got == 12 => {
                u32::from_le_bytes([prefix[8], prefix[9], prefix[10], prefix[11]]) as usize
            }
            Err(e) => return Err(DataError::Container { path: path.to_path_buf(), source: e }),
        };
        let mut head = prefix[..got].to_vec();
        head.resize(12 + header_len, 0);
        let read = read_up_to(&mut file, &mut head[12..]).map_err(|e| DataError::io(path, e))?;
        head.truncate(12 + read);
        let decoded = container::decode(&head, ACTIVATION_MAGIC, ACTIVATION_VERSION)
            .map_err(|e| DataError::Container { path: path.to_path_buf(), source: e })?;
        let (model_dim, entries) = parse_header(path, decoded.header)?;
        check_bounds(path, model_dim, &entries, file_len - decoded.payload_start)?;
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.item_id.clone(), i))
            .collect();
        Ok(Self {
            path: path.to_path_buf(),
            model_dim,
            entries,
            index,
            payload_start: decoded.payload_start as u64,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    pub fn entries(&self) -> &[DirectoryEntry] {
        &self.entries
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Result<ActivationSequence, DataError> {
        let e = self
            .index
            .get(id)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| DataError::MissingItem(id.to_string()))?;
        let mut file = File::open(&self.path).map_err(|err| DataError::io(&self.path, err))?;
        file.seek(SeekFrom::Start(self.payload_start + e.offset as u64))
            .map_err(|err| DataError::io(&self.path, err))?;
        let mut buf = vec![0u8; e.byte_len(self.model_dim)];
        file.read_exact(&mut buf).map_err(|err| DataError::io(&self.path, err))?;
        sequence_from(&self.path, self.model_dim, e, &buf)
    }
}

fn read_up_to(file: &mut File, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match file.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

/// In-memory mapping from item id to sequence. Iteration follows insertion
/// order, so re-serializing a loaded file reproduces it byte for byte.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationStore {
    model_dim: Option<usize>,
    order: Vec<String>,
    items: HashMap<String, ActivationSequence>,
}

impl ActivationStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn model_dim(&self) -> Option<usize> {
        self.model_dim
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn insert(&mut self, seq: ActivationSequence) -> Result<(), DataError> {
        match self.model_dim {
            Some(d) if d != seq.model_dim() => {
                return Err(DataError::WidthMismatch {
                    item: seq.item_id.clone(),
                    expected: d,
                    found: seq.model_dim(),
                })
            }
            _ => self.model_dim = Some(seq.model_dim()),
        }
        if self.items.contains_key(&seq.item_id) {
            return Err(DataError::DuplicateId(seq.item_id));
        }
        self.order.push(seq.item_id.clone());
        self.items.insert(seq.item_id.clone(), seq);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ActivationSequence> {
        self.items.get(id)
    }

    pub fn require(&self, id: &str) -> Result<&ActivationSequence, DataError> {
        self.get(id).ok_or_else(|| DataError::MissingItem(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ActivationSequence> {
        self.order.iter().map(|id| &self.items[id])
    }

    pub fn sequences(&self) -> Vec<ActivationSequence> {
        self.iter().cloned().collect()
    }

    /// Loads every sequence of `path` into the store.
    pub fn load_file(&mut self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
        let decoded = container::decode(&bytes, ACTIVATION_MAGIC, ACTIVATION_VERSION)
            .map_err(|e| DataError::Container { path: path.to_path_buf(), source: e })?;
        let (model_dim, entries) = parse_header(path, decoded.header)?;
        check_bounds(path, model_dim, &entries, decoded.payload.len())?;
        if entries.is_empty() && self.model_dim.is_none() {
            self.model_dim = Some(model_dim);
        }
        for e in &entries {
            let bytes = &decoded.payload[e.offset..e.offset + e.byte_len(model_dim)];
            self.insert(sequence_from(path, model_dim, e, bytes)?)?;
        }
        Ok(())
    }
}

pub fn read_activation_file(path: impl AsRef<Path>) -> Result<ActivationStore, DataError> {
    let mut store = ActivationStore::new();
    store.load_file(path)?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(id: &str, rows: usize, d: usize, pool: usize, base: f32) -> ActivationSequence {
        let data = (0..rows * d).map(|i| base + i as f32 * 0.25).collect();
        ActivationSequence::new(id, Tensor::from_vec(rows, d, data).unwrap(), pool).unwrap()
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.hlca");
        let seqs = vec![seq("f#0", 3, 4, 0, 1.0), seq("f#1", 2, 4, 1, -3.5), seq("q 7", 4, 4, 3, 0.1)];
        write_activation_file(&path, 4, &seqs).unwrap();
        let store = read_activation_file(&path).unwrap();
        assert_eq!(store.sequences(), seqs);
        assert_eq!(encode_activation_file(4, &store.sequences()).unwrap(), fs::read(&path).unwrap());

        let lazy = ActivationFile::open(&path).unwrap();
        assert_eq!(lazy.get("q 7").unwrap(), seqs[2]);
        assert_eq!(lazy.get("f#0").unwrap(), seqs[0]);
        assert!(matches!(lazy.get("nope"), Err(DataError::MissingItem(_))));
    }

    #[test]
    fn duplicate_id_rejected_on_write() {
        let seqs = vec![seq("a", 1, 2, 0, 0.0), seq("a", 1, 2, 0, 1.0)];
        assert!(matches!(encode_activation_file(2, &seqs), Err(DataError::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn width_mismatch_rejected_on_write() {
        let seqs = vec![seq("a", 1, 2, 0, 0.0), seq("b", 1, 3, 0, 1.0)];
        assert!(matches!(encode_activation_file(2, &seqs), Err(DataError::WidthMismatch { .. })));
    }

    #[test]
    fn offset_past_end_names_item() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.hlca");
        let header = "model_dim=2\nitem=ok\t1\t0\t0\nitem=late\t1\t0\t64\n";
        let payload = vec![0u8; 16];
        fs::write(&path, container::encode(ACTIVATION_MAGIC, ACTIVATION_VERSION, header, &payload)).unwrap();
        for err in [read_activation_file(&path).unwrap_err(), ActivationFile::open(&path).unwrap_err()] {
            match err {
                DataError::Truncated { item, .. } => assert_eq!(item, "late"),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn truncated_payload_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.hlca");
        let bytes = encode_activation_file(4, &[seq("x", 3, 4, 0, 0.0)]).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_activation_file(&path), Err(DataError::Truncated { .. })));
        assert!(matches!(ActivationFile::open(&path), Err(DataError::Truncated { .. })));

        let mut wrong = bytes.clone();
        wrong[..4].copy_from_slice(b"HLCK");
        fs::write(&path, &wrong).unwrap();
        assert!(matches!(
            read_activation_file(&path),
            Err(DataError::Container { source: ContainerError::BadMagic { .. }, .. })
        ));
        assert!(matches!(
            ActivationFile::open(&path),
            Err(DataError::Container { source: ContainerError::BadMagic { .. }, .. })
        ));
        let mut version = bytes;
        version[4] = 2;
        fs::write(&path, &version).unwrap();
        assert!(matches!(
            ActivationFile::open(&path),
            Err(DataError::Container { source: ContainerError::Version { found: 2, .. }, .. })
        ));
    }

    #[test]
    fn duplicate_id_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.hlca");
        let header = "model_dim=1\nitem=a\t1\t0\t0\nitem=a\t1\t0\t4\n";
        fs::write(&path, container::encode(ACTIVATION_MAGIC, ACTIVATION_VERSION, header, &[0u8; 8])).unwrap();
        assert!(matches!(read_activation_file(&path), Err(DataError::DuplicateId(_))));
    }

    #[test]
    fn empty_file_round_trips() {
        let bytes = encode_activation_file(16, &[]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.hlca");
        fs::write(&path, &bytes).unwrap();
        let store = read_activation_file(&path).unwrap();
        assert!(store.is_empty());
        assert_eq!(store.model_dim(), Some(16));
    }
}
