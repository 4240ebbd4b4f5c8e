//! Prediction files: one JSON object per line with `qid`, `vid` and
//! `pred_saliency_scores`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::saliency::SaliencyPrediction;

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub qid: i64,
    pub vid: String,
    pub pred_saliency_scores: Vec<f32>,
}

impl From<&SaliencyPrediction> for PredictionRecord {
    fn from(p: &SaliencyPrediction) -> Self {
        Self {
            qid: p.qid,
            vid: p.vid.clone(),
            pred_saliency_scores: p.scores().to_vec(),
        }
    }
}

pub fn serialize_predictions(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("prediction always serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>, EvalError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: PredictionRecord = serde_json::from_str(line).map_err(|e| EvalError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Some(bad) = r.pred_saliency_scores.iter().position(|s| !s.is_finite()) {
            return Err(EvalError::Parse {
                line: i + 1,
                message: format!("non-finite score at clip {bad}"),
            });
        }
        if !seen.insert(r.qid) {
            return Err(EvalError::DuplicatePrediction(r.qid));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_predictions(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<(), EvalError> {
    let path = path.as_ref();
    fs::write(path, serialize_predictions(records)).map_err(|e| EvalError::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>, EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
    parse_predictions(&text)
}
