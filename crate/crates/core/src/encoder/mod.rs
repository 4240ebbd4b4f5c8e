//! Trainable encoder top: `L` pre-norm transformer blocks, a final layer
//! norm, pooling of one token, and a projection into the joint embedding
//! space. The frozen trunk below it is consumed as cached activations.

mod backward;
pub mod checkpoint;
mod forward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Real, ShapeError, Tensor};

pub use backward::{encode_top_backward, encode_top_backward_from_cache};
pub use forward::{encode_top, encode_top_cached, ForwardCache};

/// Layer norm epsilon used by every norm in the top.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("sequence {item}: {message}")]
    Sequence { item: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerTopConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub num_layers: usize,
    pub joint_dim: usize,
    pub seq_len_max: usize,
    pub causal: bool,
}

impl TransformerTopConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |m: String| Err(EncoderError::Config(m));
        if self.model_dim == 0 {
            return fail("model_dim must be >= 1".into());
        }
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.num_layers > 0 && self.mlp_dim == 0 {
            return fail("mlp_dim must be >= 1".into());
        }
        if self.joint_dim == 0 {
            return fail("joint_dim must be >= 1".into());
        }
        if self.seq_len_max == 0 {
            return fail("seq_len_max must be >= 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Every trainable tensor name and shape, in canonical order.
    pub fn tensor_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (d, m) = (self.model_dim, self.mlp_dim);
        let mut out = Vec::with_capacity(16 * self.num_layers + 3);
        for l in 0..self.num_layers {
            let p = format!("layers.{l}");
            for (name, shape) in [
                ("ln1.gain", (1, d)),
                ("ln1.bias", (1, d)),
                ("attn.w_q", (d, d)),
                ("attn.b_q", (1, d)),
                ("attn.w_k", (d, d)),
                ("attn.b_k", (1, d)),
                ("attn.w_v", (d, d)),
                ("attn.b_v", (1, d)),
                ("attn.w_o", (d, d)),
                ("attn.b_o", (1, d)),
                ("ln2.gain", (1, d)),
                ("ln2.bias", (1, d)),
                ("mlp.w1", (d, m)),
                ("mlp.b1", (1, m)),
                ("mlp.w2", (m, d)),
                ("mlp.b2", (1, d)),
            ] {
                out.push((format!("{p}.{name}"), shape));
            }
        }
        out.push(("ln_f.gain".into(), (1, d)));
        out.push(("ln_f.bias".into(), (1, d)));
        out.push(("proj".into(), (d, self.joint_dim)));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Real> BlockParams<T> {
    fn tensors(&self) -> [&Tensor<T>; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Parameters of one encoder top. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTopParams<T> {
    pub layers: Vec<BlockParams<T>>,
    pub ln_f_gain: Tensor<T>,
    pub ln_f_bias: Tensor<T>,
    pub proj: Tensor<T>,
}

impl<T: Real> EncoderTopParams<T> {
    /// All-zero tensors with the shapes `config` declares.
    pub fn zeros(config: &TransformerTopConfig) -> Self {
        let mut shapes = config.tensor_shapes().into_iter().map(|(_, s)| s);
        let mut next = || {
            let (r, c) = shapes.next().expect("shape census covers every tensor");
            Tensor::zeros(r, c)
        };
        let layers = (0..config.num_layers)
            .map(|_| BlockParams {
                ln1_gain: next(),
                ln1_bias: next(),
                w_q: next(),
                b_q: next(),
                w_k: next(),
                b_k: next(),
                w_v: next(),
                b_v: next(),
                w_o: next(),
                b_o: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        Self {
            layers,
            ln_f_gain: next(),
            ln_f_bias: next(),
            proj: next(),
        }
    }

    /// Tensors in the same order as [`TransformerTopConfig::tensor_shapes`].
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.layers.iter().flat_map(|b| b.tensors()).collect();
        out.extend([&self.ln_f_gain, &self.ln_f_bias, &self.proj]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self
            .layers
            .iter_mut()
            .flat_map(|b| b.tensors_mut())
            .collect();
        out.extend([&mut self.ln_f_gain, &mut self.ln_f_bias, &mut self.proj]);
        out
    }

    pub fn named_tensors(&self, config: &TransformerTopConfig) -> Vec<(String, &Tensor<T>)> {
        config
            .tensor_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.tensors())
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> EncoderTopParams<U> {
        let block = |b: &BlockParams<T>| BlockParams {
            ln1_gain: b.ln1_gain.cast(),
            ln1_bias: b.ln1_bias.cast(),
            w_q: b.w_q.cast(),
            b_q: b.b_q.cast(),
            w_k: b.w_k.cast(),
            b_k: b.b_k.cast(),
            w_v: b.w_v.cast(),
            b_v: b.b_v.cast(),
            w_o: b.w_o.cast(),
            b_o: b.b_o.cast(),
            ln2_gain: b.ln2_gain.cast(),
            ln2_bias: b.ln2_bias.cast(),
            w1: b.w1.cast(),
            b1: b.b1.cast(),
            w2: b.w2.cast(),
            b2: b.b2.cast(),
        };
        EncoderTopParams {
            layers: self.layers.iter().map(block).collect(),
            ln_f_gain: self.ln_f_gain.cast(),
            ln_f_bias: self.ln_f_bias.cast(),
            proj: self.proj.cast(),
        }
    }

    /// `self += other`, tensor by tensor in canonical order.
    pub fn accumulate(&mut self, other: &Self) -> Result<(), ShapeError> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn squared_norm(&self) -> T {
        self.tensors()
            .iter()
            .fold(T::zero(), |acc, t| acc + t.squared_norm())
    }

    /// Checks every tensor against the shapes `config` declares and returns
    /// the first offending tensor name.
    pub fn check_shapes(&self, config: &TransformerTopConfig) -> Result<(), String> {
        let shapes = config.tensor_shapes();
        let tensors = self.tensors();
        for (i, (name, shape)) in shapes.iter().enumerate() {
            match tensors.get(i) {
                Some(t) if t.shape() == *shape => {}
                _ => return Err(name.clone()),
            }
        }
        if tensors.len() != shapes.len() {
            return Err(format!("tensor #{}", shapes.len()));
        }
        Ok(())
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self, config: &TransformerTopConfig) -> Option<String> {
        self.named_tensors(config)
            .into_iter()
            .find(|(_, t)| !t.all_finite())
            .map(|(n, _)| n)
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases, unit
/// norm gains. Values are sampled in `f64` and cast, so the `f32` and `f64`
/// instantiations for the same seed agree up to rounding.
pub fn init_params<T: Real>(config: &TransformerTopConfig, seed: u64) -> EncoderTopParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = EncoderTopParams::<T>::zeros(config);
    let shapes = config.tensor_shapes();
    for ((name, (rows, _)), t) in shapes.iter().zip(params.tensors_mut()) {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        if leaf == "gain" {
            t.data_mut().iter_mut().for_each(|v| *v = T::one());
        } else if leaf == "proj" || leaf.starts_with('w') {
            let bound = 1.0 / (*rows as f64).sqrt();
            for v in t.data_mut() {
                *v = T::from_f64(rng.random_range(-bound..bound));
            }
        }
    }
    params
}

/// The vision and text tops together. Embeddings of both land in the same
/// joint space, so their `joint_dim` must agree.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder<T> {
    pub vision_config: TransformerTopConfig,
    pub text_config: TransformerTopConfig,
    pub vision: EncoderTopParams<T>,
    pub text: EncoderTopParams<T>,
}

impl<T: Real> DualEncoder<T> {
    pub fn new(
        vision_config: TransformerTopConfig,
        text_config: TransformerTopConfig,
        vision: EncoderTopParams<T>,
        text: EncoderTopParams<T>,
    ) -> Result<Self, EncoderError> {
        vision_config.validate()?;
        text_config.validate()?;
        if vision_config.joint_dim != text_config.joint_dim {
            return Err(EncoderError::Config(format!(
                "vision joint_dim {} differs from text joint_dim {}",
                vision_config.joint_dim, text_config.joint_dim
            )));
        }
        for (tower, config, params) in [("vision", &vision_config, &vision), ("text", &text_config, &text)] {
            params
                .check_shapes(config)
                .map_err(|name| EncoderError::Config(format!("{tower}.{name} has the wrong shape")))?;
        }
        Ok(Self {
            vision_config,
            text_config,
            vision,
            text,
        })
    }

    /// Fresh parameters; the text tower uses a seed derived from `seed`.
    pub fn init(
        vision_config: TransformerTopConfig,
        text_config: TransformerTopConfig,
        seed: u64,
    ) -> Result<Self, EncoderError> {
        let vision = init_params(&vision_config, seed);
        let text = init_params(&text_config, seed ^ TEXT_SEED_SALT);
        Self::new(vision_config, text_config, vision, text)
    }

    pub fn joint_dim(&self) -> usize {
        self.vision_config.joint_dim
    }

    pub fn cast<U: Real>(&self) -> DualEncoder<U> {
        DualEncoder {
            vision_config: self.vision_config,
            text_config: self.text_config,
            vision: self.vision.cast(),
            text: self.text.cast(),
        }
    }

    pub fn encode_frame(&self, tokens: &Tensor<T>, pool_index: usize) -> Result<Embedding<T>, EncoderError> {
        encode_top(&self.vision, &self.vision_config, tokens, pool_index)
    }

    pub fn encode_query(&self, tokens: &Tensor<T>, pool_index: usize) -> Result<Embedding<T>, EncoderError> {
        encode_top(&self.text, &self.text_config, tokens, pool_index)
    }

    /// Both towers' tensors with `vision.` / `text.` prefixed names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .vision
            .named_tensors(&self.vision_config)
            .into_iter()
            .map(|(n, t)| (format!("vision.{n}"), t))
            .collect();
        out.extend(
            self.text
                .named_tensors(&self.text_config)
                .into_iter()
                .map(|(n, t)| (format!("text.{n}"), t)),
        );
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = self.vision.tensors();
        out.extend(self.text.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.vision.tensors_mut();
        out.extend(self.text.tensors_mut());
        out
    }

    /// Same configs, every tensor zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            vision_config: self.vision_config,
            text_config: self.text_config,
            vision: EncoderTopParams::zeros(&self.vision_config),
            text: EncoderTopParams::zeros(&self.text_config),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.vision.num_parameters() + self.text.num_parameters()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.named_tensors()
            .into_iter()
            .find(|(_, t)| !t.all_finite())
            .map(|(n, _)| n)
    }
}

impl DualEncoder<f32> {
    pub fn embed_frame(&self, seq: &ActivationSequence) -> Result<Embedding<f32>, EncoderError> {
        self.encode_frame(&seq.tokens, seq.pool_index).map_err(|e| e.for_item(&seq.item_id))
    }

    pub fn embed_query(&self, seq: &ActivationSequence) -> Result<Embedding<f32>, EncoderError> {
        self.encode_query(&seq.tokens, seq.pool_index).map_err(|e| e.for_item(&seq.item_id))
    }
}

const TEXT_SEED_SALT: u64 = 0x7465_7874;

impl EncoderError {
    fn for_item(self, item: &str) -> Self {
        match self {
            EncoderError::Sequence { message, .. } => EncoderError::Sequence {
                item: item.to_string(),
                message,
            },
            EncoderError::Shape(e) => EncoderError::Sequence {
                item: item.to_string(),
                message: e.to_string(),
            },
            other => other,
        }
    }
}

/// Token-level hidden states for one frame or one query, as they leave the
/// frozen trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSequence {
    pub item_id: String,
    pub tokens: Tensor<f32>,
    pub pool_index: usize,
}

impl ActivationSequence {
    pub fn new(
        item_id: impl Into<String>,
        tokens: Tensor<f32>,
        pool_index: usize,
    ) -> Result<Self, EncoderError> {
        let item_id = item_id.into();
        if pool_index >= tokens.rows() {
            return Err(EncoderError::Sequence {
                item: item_id,
                message: format!(
                    "pool_index {pool_index} out of range for {} tokens",
                    tokens.rows()
                ),
            });
        }
        Ok(Self {
            item_id,
            tokens,
            pool_index,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn model_dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// A vector in the joint embedding space. Not normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T = f32> {
    pub values: Vec<T>,
}

impl<T> Embedding<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub(crate) fn check_sequence<T: Real>(
    config: &TransformerTopConfig,
    tokens: &Tensor<T>,
    pool_index: usize,
) -> Result<(), EncoderError> {
    if tokens.cols() != config.model_dim {
        return Err(ShapeError::Length {
            op: "encode_top",
            expected: config.model_dim,
            actual: tokens.cols(),
        }
        .into());
    }
    if tokens.rows() == 0 || pool_index >= tokens.rows() {
        return Err(EncoderError::Sequence {
            item: String::new(),
            message: format!(
                "pool_index {pool_index} out of range for {} tokens",
                tokens.rows()
            ),
        });
    }
    if tokens.rows() > config.seq_len_max {
        return Err(EncoderError::Sequence {
            item: String::new(),
            message: format!(
                "{} tokens exceeds seq_len_max {}",
                tokens.rows(),
                config.seq_len_max
            ),
        });
    }
    Ok(())
}
