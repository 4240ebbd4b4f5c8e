//! `HLCK` checkpoint files holding both encoder tops, their configs, and
//! the training step.
//!
//! The header is `key=value` text: `step`, `vision.<field>` and
//! `text.<field>` for every config field, then one
//! `tensor=<name> <rows> <cols> <byte offset>` line per tensor in payload
//! order. Tensor names carry a `vision.` or `text.` prefix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::container::{self, ContainerError};
use crate::tensor::Tensor;

use super::{DualEncoder, EncoderTopParams, TransformerTopConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint not found: {}", .0.display())]
    Missing(PathBuf),
    #[error("checkpoint i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("shape mismatch at tensor {tensor}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Option<(usize, usize)>,
        found: Option<(usize, usize)>,
    },
    #[error("config mismatch for {tower}: expected {expected:?}, found {found:?}")]
    ConfigMismatch {
        tower: &'static str,
        expected: Box<TransformerTopConfig>,
        found: Box<TransformerTopConfig>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DualEncoder<f32>,
    pub step: u64,
}

const TOWERS: [&str; 2] = ["vision", "text"];

fn config_lines(out: &mut String, tower: &str, c: &TransformerTopConfig) {
    let _ = writeln!(out, "{tower}.model_dim={}", c.model_dim);
    let _ = writeln!(out, "{tower}.num_heads={}", c.num_heads);
    let _ = writeln!(out, "{tower}.mlp_dim={}", c.mlp_dim);
    let _ = writeln!(out, "{tower}.num_layers={}", c.num_layers);
    let _ = writeln!(out, "{tower}.joint_dim={}", c.joint_dim);
    let _ = writeln!(out, "{tower}.seq_len_max={}", c.seq_len_max);
    let _ = writeln!(out, "{tower}.causal={}", c.causal);
}

fn parse_config(kv: &BTreeMap<String, String>, tower: &str) -> Result<TransformerTopConfig, CheckpointError> {
    let get = |field: &str| -> Result<&String, CheckpointError> {
        kv.get(&format!("{tower}.{field}"))
            .ok_or_else(|| CheckpointError::Header(format!("missing key {tower}.{field}")))
    };
    let num = |field: &str| -> Result<usize, CheckpointError> {
        get(field)?
            .parse()
            .map_err(|_| CheckpointError::Header(format!("bad integer for {tower}.{field}")))
    };
    let config = TransformerTopConfig {
        model_dim: num("model_dim")?,
        num_heads: num("num_heads")?,
        mlp_dim: num("mlp_dim")?,
        num_layers: num("num_layers")?,
        joint_dim: num("joint_dim")?,
        seq_len_max: num("seq_len_max")?,
        causal: get("causal")?
            .parse()
            .map_err(|_| CheckpointError::Header(format!("bad flag for {tower}.causal")))?,
    };
    config
        .validate()
        .map_err(|e| CheckpointError::Header(format!("{tower}: {e}")))?;
    Ok(config)
}

impl Checkpoint {
    pub fn new(model: DualEncoder<f32>, step: u64) -> Self {
        Self { model, step }
    }

    fn towers(&self) -> [(&'static str, &TransformerTopConfig, &EncoderTopParams<f32>); 2] {
        let m = &self.model;
        [
            (TOWERS[0], &m.vision_config, &m.vision),
            (TOWERS[1], &m.text_config, &m.text),
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        let _ = writeln!(header, "step={}", self.step);
        for (tower, config, _) in self.towers() {
            config_lines(&mut header, tower, config);
        }
        let mut payload = Vec::new();
        for (tower, config, params) in self.towers() {
            for (name, t) in params.named_tensors(config) {
                let _ = writeln!(
                    header,
                    "tensor={tower}.{name} {} {} {}",
                    t.rows(),
                    t.cols(),
                    payload.len()
                );
                container::f32s_to_le(t.data(), &mut payload);
            }
        }
        container::encode(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let decoded = container::decode(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let mut kv = BTreeMap::new();
        let mut directory = Vec::new();
        for line in decoded.header.lines().filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Header(format!("line without '=': {line:?}")))?;
            if key == "tensor" {
                let parts: Vec<&str> = value.split(' ').collect();
                let [name, rows, cols, offset] = parts[..] else {
                    return Err(CheckpointError::Header(format!("bad tensor entry: {value:?}")));
                };
                let int = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| CheckpointError::Header(format!("bad tensor entry: {value:?}")))
                };
                directory.push((name.to_string(), (int(rows)?, int(cols)?), int(offset)?));
            } else if kv.insert(key.to_string(), value.to_string()).is_some() {
                return Err(CheckpointError::Header(format!("duplicate key {key}")));
            }
        }
        let step = kv
            .get("step")
            .ok_or_else(|| CheckpointError::Header("missing key step".into()))?
            .parse()
            .map_err(|_| CheckpointError::Header("bad integer for step".into()))?;
        let vision_config = parse_config(&kv, "vision")?;
        let text_config = parse_config(&kv, "text")?;

        let mut entries = directory.into_iter();
        let mut end = 0usize;
        let mut read_tower = |tower: &str, config: &TransformerTopConfig| -> Result<EncoderTopParams<f32>, CheckpointError> {
            let mut params = EncoderTopParams::<f32>::zeros(config);
            for ((name, shape), t) in config.tensor_shapes().into_iter().zip(params.tensors_mut()) {
                let full = format!("{tower}.{name}");
                let (found_name, found_shape, offset) = entries.next().ok_or_else(|| CheckpointError::ShapeMismatch {
                    tensor: full.clone(),
                    expected: Some(shape),
                    found: None,
                })?;
                if found_name != full || found_shape != shape {
                    return Err(CheckpointError::ShapeMismatch {
                        tensor: full,
                        expected: Some(shape),
                        found: Some(found_shape),
                    });
                }
                let len = shape.0 * shape.1 * 4;
                let bytes = decoded.payload.get(offset..offset + len).ok_or_else(|| {
                    CheckpointError::Container(ContainerError::Truncated(format!(
                        "tensor {full} needs bytes {offset}..{} of a {}-byte payload",
                        offset + len,
                        decoded.payload.len()
                    )))
                })?;
                let values = container::le_to_f32s(bytes);
                *t = Tensor::from_vec(shape.0, shape.1, values)
                    .map_err(|e| CheckpointError::Header(format!("tensor {full}: {e}")))?;
                end = end.max(offset + len);
            }
            Ok(params)
        };
        let vision = read_tower("vision", &vision_config)?;
        let text = read_tower("text", &text_config)?;
        if let Some((name, shape, _)) = entries.next() {
            return Err(CheckpointError::ShapeMismatch {
                tensor: name,
                expected: None,
                found: Some(shape),
            });
        }
        if end != decoded.payload.len() {
            return Err(CheckpointError::Header(format!(
                "payload is {} bytes but the directory covers {end}",
                decoded.payload.len()
            )));
        }
        let model = DualEncoder::new(vision_config, text_config, vision, text)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        Ok(Self { model, step })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let tmp = path.with_extension("hlck.tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => CheckpointError::Missing(path.to_path_buf()),
            _ => CheckpointError::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the stored configs against the expected ones. A
    /// mismatch names the first tensor whose shape differs.
    pub fn load_expecting(
        path: impl AsRef<Path>,
        vision_config: &TransformerTopConfig,
        text_config: &TransformerTopConfig,
    ) -> Result<Self, CheckpointError> {
        let ckpt = Self::load(path)?;
        for (tower, expected, found) in [
            ("vision", vision_config, &ckpt.model.vision_config),
            ("text", text_config, &ckpt.model.text_config),
        ] {
            if expected == found {
                continue;
            }
            let want = expected.tensor_shapes();
            let have = found.tensor_shapes();
            for i in 0..want.len().max(have.len()) {
                let (w, h) = (want.get(i), have.get(i));
                if w.map(|x| x.1) != h.map(|x| x.1) || w.map(|x| &x.0) != h.map(|x| &x.0) {
                    let name = w.or(h).map(|x| x.0.clone()).unwrap_or_default();
                    return Err(CheckpointError::ShapeMismatch {
                        tensor: format!("{tower}.{name}"),
                        expected: w.map(|x| x.1),
                        found: h.map(|x| x.1),
                    });
                }
            }
            return Err(CheckpointError::ConfigMismatch {
                tower,
                expected: Box::new(*expected),
                found: Box::new(*found),
            });
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;

    fn config(layers: usize, d: usize) -> TransformerTopConfig {
        TransformerTopConfig {
            model_dim: d,
            num_heads: 2,
            mlp_dim: 2 * d,
            num_layers: layers,
            joint_dim: 3,
            seq_len_max: 5,
            causal: false,
        }
    }

    fn sample() -> Checkpoint {
        let v = config(1, 4);
        let t = TransformerTopConfig { causal: true, ..config(2, 6) };
        let t = TransformerTopConfig { joint_dim: 3, ..t };
        Checkpoint::new(DualEncoder::new(v, t, init_params(&v, 1), init_params(&t, 2)).unwrap(), 42)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.hlck");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        assert_eq!(loaded.to_bytes(), fs::read(&path).unwrap());
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Checkpoint::load(dir.path().join("nope.hlck")),
            Err(CheckpointError::Missing(_))
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = sample().to_bytes();
        for cut in [3, 10, 40, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, CheckpointError::Container(ContainerError::Truncated(_)) | CheckpointError::Container(ContainerError::BadMagic { .. })),
                "cut {cut}: {err}"
            );
        }
    }

    #[test]
    fn magic_and_version() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Container(ContainerError::BadMagic { .. }))
        ));
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Container(ContainerError::Version { found: 9, .. }))
        ));
    }

    #[test]
    fn expectation_mismatch_names_first_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.hlck");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        // wider MLP: the first differing tensor is layers.0.mlp.w1
        let other = TransformerTopConfig { mlp_dim: 9, ..ckpt.model.vision_config };
        match Checkpoint::load_expecting(&path, &other, &ckpt.model.text_config) {
            Err(CheckpointError::ShapeMismatch { tensor, expected, found }) => {
                assert_eq!(tensor, "vision.layers.0.mlp.w1");
                assert_eq!(expected, Some((4, 9)));
                assert_eq!(found, Some((4, 8)));
            }
            other => panic!("unexpected {other:?}"),
        }
        let deeper = TransformerTopConfig { num_layers: 3, ..ckpt.model.text_config };
        match Checkpoint::load_expecting(&path, &ckpt.model.vision_config, &deeper) {
            Err(CheckpointError::ShapeMismatch { tensor, .. }) => assert_eq!(tensor, "text.layers.2.ln1.gain"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Checkpoint::load_expecting(&path, &ckpt.model.vision_config, &ckpt.model.text_config).is_ok());
    }

    #[test]
    fn inconsistent_directory_is_a_shape_error() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let decoded = container::decode(&bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION).unwrap();
        let header = decoded.header.replace("vision.mlp_dim=8", "vision.mlp_dim=10");
        let rebuilt = container::encode(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, decoded.payload);
        match Checkpoint::from_bytes(&rebuilt) {
            Err(CheckpointError::ShapeMismatch { tensor, .. }) => assert_eq!(tensor, "vision.layers.0.mlp.w1"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
