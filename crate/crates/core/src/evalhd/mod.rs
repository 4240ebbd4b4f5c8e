//! Highlight-detection evaluation: mAP and HIT@1 at the top rating band,
//! inference over a dataset, and the saliency-pooling comparison.

mod metrics;
mod predictions;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{build_targets, generate_synthetic, AnnotationRecord, DataError, Dataset, SynthSpec};
use crate::encoder::{DualEncoder, EncoderError};
use crate::saliency::{saliency_pool, score_video, SaliencyError, SaliencyPrediction};

pub use metrics::{aggregate, average_precision, evaluate_query, rank_order, QueryEval};
pub use predictions::{
    parse_predictions, read_predictions, serialize_predictions, write_predictions, PredictionRecord,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("average precision is undefined without positives")]
    NoPositives,
    #[error("{scores} scores but {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("qid {qid}: labeled clip {clip} outside {len} predicted scores")]
    Coverage { qid: i64, clip: usize, len: usize },
    #[error("no prediction for qid {0}")]
    MissingPrediction(i64),
    #[error("qid {0} predicted more than once")]
    DuplicatePrediction(i64),
    #[error("qid {qid}: prediction vid {found} but annotation vid {expected}")]
    VidMismatch { qid: i64, expected: String, found: String },
    #[error("predictions line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no pool radii given")]
    NoRadii,
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("{vid}: {source}")]
    Saliency { vid: String, source: SaliencyError },
}

impl EvalError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        EvalError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub pool_radius: usize,
    pub n_queries: usize,
    pub map: f64,
    pub hit_at_1: f64,
    pub map_x100: f64,
    pub hit_at_1_x100: f64,
    pub per_query: Vec<QueryEval>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report always serializes");
        s.push('\n');
        s
    }
}

pub fn variant_label(radius: usize) -> String {
    format!("r={radius}")
}

/// Pools each prediction with `pool_radius`, then scores it against its
/// annotation record. Queries are reduced in qid order.
pub fn evaluate_predictions(
    predictions: &[PredictionRecord],
    records: &[AnnotationRecord],
    pool_radius: usize,
) -> Result<EvalReport, EvalError> {
    let mut by_qid: HashMap<i64, &PredictionRecord> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_qid.insert(p.qid, p).is_some() {
            return Err(EvalError::DuplicatePrediction(p.qid));
        }
    }
    let mut order: Vec<&AnnotationRecord> = records.iter().collect();
    order.sort_by_key(|r| r.qid);
    let evaluated = order
        .par_iter()
        .map(|r| {
            let p = by_qid.get(&r.qid).ok_or(EvalError::MissingPrediction(r.qid))?;
            if p.vid != r.vid {
                return Err(EvalError::VidMismatch {
                    qid: r.qid,
                    expected: r.vid.clone(),
                    found: p.vid.clone(),
                });
            }
            let scores = saliency_pool(&p.pred_saliency_scores, pool_radius);
            evaluate_query(&scores, r)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let per_query: Vec<QueryEval> = evaluated.into_iter().flatten().collect();
    let (map, hit_at_1) = aggregate(&per_query);
    Ok(EvalReport {
        variant: variant_label(pool_radius),
        pool_radius,
        n_queries: per_query.len(),
        map,
        hit_at_1,
        map_x100: map * 100.0,
        hit_at_1_x100: hit_at_1 * 100.0,
        per_query,
    })
}

/// Scores every (video, query) item of the dataset, then pools.
pub fn predict(model: &DualEncoder<f32>, dataset: &Dataset, pool_radius: usize) -> Result<Vec<SaliencyPrediction>, EvalError> {
    dataset
        .manifest
        .items
        .par_iter()
        .map(|item| {
            let query = model.embed_query(dataset.text.require(&item.query_id)?)?;
            let frames = item
                .frame_ids
                .iter()
                .map(|id| Ok(model.embed_frame(dataset.vision.require(id)?)?.values))
                .collect::<Result<Vec<_>, EvalError>>()?;
            let raw = score_video(&frames, &query.values).map_err(|source| EvalError::Saliency {
                vid: item.vid.clone(),
                source,
            })?;
            Ok(SaliencyPrediction::new(item.qid, item.vid.clone(), raw).with_pooling(pool_radius))
        })
        .collect()
}

pub fn to_records(predictions: &[SaliencyPrediction]) -> Vec<PredictionRecord> {
    predictions.iter().map(PredictionRecord::from).collect()
}

fn raw_records(predictions: &[SaliencyPrediction]) -> Vec<PredictionRecord> {
    predictions
        .iter()
        .map(|p| PredictionRecord {
            qid: p.qid,
            vid: p.vid.clone(),
            pred_saliency_scores: p.raw.clone(),
        })
        .collect()
}

pub fn evaluate(model: &DualEncoder<f32>, dataset: &Dataset, pool_radius: usize) -> Result<EvalReport, EvalError> {
    let preds = predict(model, dataset, 0)?;
    evaluate_predictions(&raw_records(&preds), &dataset.records, pool_radius)
}

/// One report per radius, in the order given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingTable {
    pub rows: Vec<EvalReport>,
}

impl PoolingTable {
    pub fn from_predictions(
        raw: &[PredictionRecord],
        records: &[AnnotationRecord],
        radii: &[usize],
    ) -> Result<Self, EvalError> {
        if radii.is_empty() {
            return Err(EvalError::NoRadii);
        }
        let rows = radii
            .iter()
            .map(|&r| evaluate_predictions(raw, records, r))
            .collect::<Result<_, _>>()?;
        Ok(Self { rows })
    }

    /// Row with the highest mAP; the first such row on ties.
    pub fn best_by_map(&self) -> &EvalReport {
        let mut best = &self.rows[0];
        for r in &self.rows[1..] {
            if r.map > best.map {
                best = r;
            }
        }
        best
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<8} {:>6} {:>8} {:>8} {:>9}\n", "variant", "radius", "queries", "mAP", "HIT@1");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<8} {:>6} {:>8} {:>8.2} {:>9.2}",
                r.variant, r.pool_radius, r.n_queries, r.map_x100, r.hit_at_1_x100
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,pool_radius,n_queries,map,hit_at_1\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.variant, r.pool_radius, r.n_queries, r.map, r.hit_at_1);
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("table always serializes");
        s.push('\n');
        s
    }
}

/// Inference once, then one evaluation per pooling radius.
pub fn compare_pooling(model: &DualEncoder<f32>, dataset: &Dataset, radii: &[usize]) -> Result<PoolingTable, EvalError> {
    let preds = predict(model, dataset, 0)?;
    PoolingTable::from_predictions(&raw_records(&preds), &dataset.records, radii)
}

/// Pooling trial on synthetic annotations: predictions are the targets plus
/// Gaussian noise, so only the temporal structure of the labels can make
/// pooling help.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingTrial {
    pub num_queries: usize,
    pub num_clips: usize,
    pub noise_std: f64,
    pub radii: Vec<usize>,
}

impl Default for PoolingTrial {
    fn default() -> Self {
        Self {
            num_queries: 30,
            num_clips: 75,
            noise_std: 0.5,
            radii: vec![0, 1, 2],
        }
    }
}

impl PoolingTrial {
    pub fn run(&self, seed: u64) -> Result<PoolingTable, EvalError> {
        let spec = SynthSpec {
            num_videos: self.num_queries,
            num_clips: self.num_clips,
            num_tokens: 1,
            model_dim: 1,
            joint_dim: 1,
            seed,
            planted_correlation: 1.0,
        };
        let records = generate_synthetic(&spec)?.records;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973);
        let preds = records
            .iter()
            .map(|r| {
                let y = build_targets(r)?.y;
                let noisy = y
                    .iter()
                    .map(|&v| (v as f64 + self.noise_std * rng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect();
                Ok(PredictionRecord {
                    qid: r.qid,
                    vid: r.vid.clone(),
                    pred_saliency_scores: noisy,
                })
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        PoolingTable::from_predictions(&preds, &records, &self.radii)
    }
}
