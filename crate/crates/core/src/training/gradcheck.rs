//! End-to-end gradient check: analytic batch gradients of both towers
//! against central differences of the batch loss, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{DualEncoder, TransformerTopConfig};
use crate::tensor::Tensor;

use super::batch::{batch_gradients, batch_loss, SeqRef, TrainBatch};
use super::TrainError;

pub const FD_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged by absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    pub vision: TransformerTopConfig,
    pub text: TransformerTopConfig,
    pub num_videos: usize,
    pub num_clips: usize,
    /// Test hook: scale this tensor's analytic gradient by 2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupt: Option<String>,
}

impl GradCheckConfig {
    /// A small pair of towers; `flip` swaps which tower is causal.
    pub fn tiny(num_layers: usize, flip: bool) -> Self {
        let base = TransformerTopConfig {
            model_dim: 8,
            num_heads: 2,
            mlp_dim: 12,
            num_layers,
            joint_dim: 4,
            seq_len_max: 4,
            causal: false,
        };
        Self {
            vision: TransformerTopConfig { causal: flip, ..base },
            text: TransformerTopConfig {
                causal: !flip,
                model_dim: 6,
                num_heads: 3,
                seq_len_max: 5,
                ..base
            },
            num_videos: 2,
            num_clips: 3,
            corrupt: None,
        }
    }

    /// Depths 0, 1, 2, each with the default and the flipped causal masks.
    pub fn suite() -> Vec<Self> {
        (0..=2)
            .flat_map(|l| [Self::tiny(l, false), Self::tiny(l, true)])
            .collect()
    }

    pub fn label(&self) -> String {
        format!(
            "L={} vision_causal={} text_causal={}",
            self.vision.num_layers, self.vision.causal, self.text.causal
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Every tensor whose coordinates were checked.
    pub tensors: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRADCHECK_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

struct Fixture {
    frames: Vec<(Tensor<f64>, usize)>,
    queries: Vec<(Tensor<f64>, usize)>,
    targets: Vec<Vec<f64>>,
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(rows, cols, data).expect("finite samples")
}

fn fixture(config: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Fixture {
    let mut frames = Vec::new();
    let mut queries = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..config.num_videos {
        let t = rng.random_range(1..=config.text.seq_len_max);
        let pool = rng.random_range(0..t);
        queries.push((random_tensor(rng, t, config.text.model_dim), pool));
        for _ in 0..config.num_clips {
            let t = rng.random_range(1..=config.vision.seq_len_max);
            let pool = rng.random_range(0..t);
            frames.push((random_tensor(rng, t, config.vision.model_dim), pool));
        }
        targets.push((0..config.num_clips).map(|_| rng.random::<f64>()).collect());
    }
    Fixture {
        frames,
        queries,
        targets,
    }
}

fn batch_of(fx: &Fixture, clips: usize) -> Result<TrainBatch<'_, f64>, TrainError> {
    let mut batch = TrainBatch::new();
    for (i, (q, qp)) in fx.queries.iter().enumerate() {
        let frames: Vec<_> = fx.frames[i * clips..(i + 1) * clips]
            .iter()
            .map(|(t, p)| SeqRef::new(t, *p))
            .collect();
        batch.push_video(format!("v{i}"), SeqRef::new(q, *qp), &frames, &fx.targets[i])?;
    }
    Ok(batch)
}

pub fn grad_check(config: &GradCheckConfig, seed: u64) -> Result<GradCheckReport, TrainError> {
    if config.num_videos == 0 || config.num_clips == 0 {
        return Err(TrainError::Config("gradcheck needs at least one video and one clip".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = DualEncoder::<f64>::init(config.vision, config.text, seed)?;
    // move gains and biases away from 1 and 0 so every path is exercised
    for t in model.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let fx = fixture(config, &mut rng);
    let batch = batch_of(&fx, config.num_clips)?;

    let mut analytic = batch_gradients(&model, &batch)?.grads;
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    if let Some(target) = &config.corrupt {
        let idx = names
            .iter()
            .position(|n| n == target)
            .ok_or_else(|| TrainError::Config(format!("no tensor named {target}")))?;
        analytic.tensors_mut()[idx].scale(2.0);
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        tensors: names.clone(),
    };
    let analytic_tensors = analytic.tensors();
    for (ti, name) in names.iter().enumerate() {
        for c in 0..analytic_tensors[ti].len() {
            let original = model.tensors()[ti].data()[c];
            model.tensors_mut()[ti].data_mut()[c] = original + FD_STEP;
            let (plus, _) = batch_loss(&model, &batch)?;
            model.tensors_mut()[ti].data_mut()[c] = original - FD_STEP;
            let (minus, _) = batch_loss(&model, &batch)?;
            model.tensors_mut()[ti].data_mut()[c] = original;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic_tensors[ti].data()[c];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_relative_error || report.worst_tensor.is_empty() {
                report.max_relative_error = err;
                report.worst_tensor = name.clone();
                report.worst_index = c;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_zero_checks_only_final_norm_and_projection() {
        let report = grad_check(&GradCheckConfig::tiny(0, false), 3).unwrap();
        let expected: Vec<String> = ["vision", "text"]
            .iter()
            .flat_map(|t| ["ln_f.gain", "ln_f.bias", "proj"].map(|n| format!("{t}.{n}")))
            .collect();
        assert_eq!(report.tensors, expected);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_named() {
        let config = GradCheckConfig {
            corrupt: Some("text.layers.0.attn.w_k".into()),
            ..GradCheckConfig::tiny(1, false)
        };
        let report = grad_check(&config, 4).unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst_tensor, "text.layers.0.attn.w_k");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
