//! Fine-tuning both encoder tops on the saliency regression objective.

mod batch;
mod config;
mod gradcheck;
mod optim;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::encoder::checkpoint::{Checkpoint, CheckpointError};
use crate::encoder::{DualEncoder, EncoderError};
use crate::saliency::SaliencyError;
use crate::tensor::ShapeError;

pub use batch::{batch_gradients, batch_loss, build_batch, BatchGradients, SeqRef, TrainBatch};
pub use config::TrainConfig;
pub use gradcheck::{
    grad_check, relative_error, GradCheckConfig, GradCheckReport, FD_STEP, GRADCHECK_TOLERANCE, RELATIVE_FLOOR,
};
pub use optim::{global_norm, AdamW, OptimizerState};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.hlck";
pub const CONFIG_COPY: &str = "config.toml";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("bad batch: {0}")]
    Batch(String),
    #[error("step {step}: non-finite {what} in {tensor}")]
    NonFinite { step: u64, what: &'static str, tensor: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStepReport {
    pub step: u64,
    pub loss: f64,
    /// Global norm before clipping.
    pub grad_norm: f64,
    pub wall_time: Duration,
}

#[derive(Serialize)]
struct LogLine {
    step: u64,
    loss: f64,
    grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_time_ms: Option<f64>,
}

impl TrainStepReport {
    /// One JSON log line. Wall time is left out unless asked for, so logs of
    /// identical runs are byte-identical.
    pub fn to_log_line(&self, with_timing: bool) -> String {
        let line = LogLine {
            step: self.step,
            loss: self.loss,
            grad_norm: self.grad_norm,
            wall_time_ms: with_timing.then_some(self.wall_time.as_secs_f64() * 1e3),
        };
        serde_json::to_string(&line).expect("log line always serializes")
    }
}

/// Forward, backward and one optimizer update. On error the model and the
/// optimizer state are left untouched.
pub fn train_step(
    model: &mut DualEncoder<f32>,
    state: &mut OptimizerState,
    batch: &TrainBatch<'_, f32>,
    optimizer: &AdamW,
) -> Result<TrainStepReport, TrainError> {
    let start = Instant::now();
    let step = state.step + 1;
    let out = batch_gradients(model, batch)?;
    if !out.loss.is_finite() {
        return Err(TrainError::NonFinite {
            step,
            what: "loss",
            tensor: "loss".into(),
        });
    }
    if let Some(tensor) = out.grads.first_non_finite() {
        return Err(TrainError::NonFinite {
            step,
            what: "gradient",
            tensor,
        });
    }
    let grad_norm = global_norm(&out.grads);
    let mut next = model.clone();
    let mut next_state = state.clone();
    optimizer.update(&mut next, &mut next_state, &out.grads, grad_norm);
    if let Some(tensor) = next.first_non_finite() {
        return Err(TrainError::NonFinite {
            step,
            what: "parameter",
            tensor,
        });
    }
    *model = next;
    *state = next_state;
    Ok(TrainStepReport {
        step,
        loss: out.loss as f64,
        grad_norm,
        wall_time: start.elapsed(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where the log, checkpoints and a copy of the config go.
    pub out_dir: Option<PathBuf>,
    /// Starting weights; fresh initialization from the config seed otherwise.
    pub init: Option<DualEncoder<f32>>,
    pub log_timing: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DualEncoder<f32>,
    pub optimizer: OptimizerState,
    pub reports: Vec<TrainStepReport>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.model.clone(), self.optimizer.step)
    }
}

/// Seeded epoch order: a fresh shuffle of all items at the start of each
/// pass, consumed in batches of `batch` (the last one may be short).
struct BatchSchedule {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSchedule {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT),
        }
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor = (start + self.batch).min(self.order.len());
        &self.order[start..self.cursor]
    }
}

const SHUFFLE_SALT: u64 = 0x7368_7566;

fn check_widths(dataset: &Dataset, config: &TrainConfig) -> Result<(), TrainError> {
    for (tower, store, want) in [
        ("vision", &dataset.vision, config.vision_model_dim),
        ("text", &dataset.text, config.text_model_dim),
    ] {
        if let Some(found) = store.model_dim() {
            if found != want {
                return Err(TrainError::Config(format!(
                    "{tower}_model_dim is {want} but the activations have width {found}"
                )));
            }
        }
    }
    Ok(())
}

pub fn train(dataset: &Dataset, config: &TrainConfig, options: TrainOptions) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_widths(dataset, config)?;
    let mut model = match options.init {
        Some(m) => {
            if m.vision_config != config.vision_config() || m.text_config != config.text_config() {
                return Err(TrainError::Config("initial weights do not match the configured towers".into()));
            }
            m
        }
        None => DualEncoder::init(config.vision_config(), config.text_config(), config.seed)?,
    };
    let mut state = OptimizerState::new(&model);
    let optimizer = AdamW::from(config);

    let mut log = match &options.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
            let cfg = dir.join(CONFIG_COPY);
            fs::write(&cfg, config.to_toml()).map_err(|e| TrainError::io(&cfg, e))?;
            let path = dir.join(LOG_FILE);
            let file = File::create(&path).map_err(|e| TrainError::io(&path, e))?;
            Some((path, BufWriter::new(file)))
        }
        None => None,
    };

    let mut schedule = BatchSchedule::new(dataset.len(), config.batch_videos, config.seed);
    let mut reports = Vec::with_capacity(config.steps as usize);
    for _ in 0..config.steps {
        let items = schedule.next_batch().to_vec();
        let batch = build_batch(dataset, &items)?;
        let report = train_step(&mut model, &mut state, &batch, &optimizer)?;
        if let Some((path, w)) = log.as_mut() {
            writeln!(w, "{}", report.to_log_line(options.log_timing))
                .and_then(|_| w.flush())
                .map_err(|e| TrainError::io(path, e))?;
        }
        if let Some(dir) = &options.out_dir {
            if config.checkpoint_every > 0 && report.step % config.checkpoint_every == 0 {
                Checkpoint::new(model.clone(), report.step).save(dir.join(format!("step_{:06}.hlck", report.step)))?;
            }
        }
        reports.push(report);
    }

    let outcome = TrainOutcome {
        model,
        optimizer: state,
        reports,
    };
    if let Some(dir) = &options.out_dir {
        outcome.checkpoint().save(dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(outcome)
}
