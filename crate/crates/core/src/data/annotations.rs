//! Line-delimited JSON annotations in the public benchmark's field layout,
//! Likert normalization, and per-clip training targets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Highest rating ("Very Good"). Ratings run 0..=4.
pub const MAX_RATING: u8 = 4;

fn default_clip_len() -> f64 {
    2.0
}

/// One query over one video with per-annotator clip ratings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub qid: i64,
    pub query: String,
    pub vid: String,
    pub duration: f64,
    #[serde(default = "default_clip_len")]
    pub clip_len: f64,
    pub relevant_clip_ids: Vec<usize>,
    pub saliency_scores: Vec<Vec<u8>>,
}

/// Wire shape used only for validation: ratings are read as wide integers
/// so out-of-range values get a precise error instead of a parse failure.
#[derive(Deserialize)]
struct RawRecord {
    qid: i64,
    query: String,
    vid: String,
    duration: f64,
    #[serde(default = "default_clip_len")]
    clip_len: f64,
    relevant_clip_ids: Vec<i64>,
    saliency_scores: Vec<Vec<i64>>,
}

impl AnnotationRecord {
    /// Number of clips, `ceil(duration / clip_len)`.
    pub fn num_clips(&self) -> usize {
        clip_count(self.duration, self.clip_len)
    }

    /// Annotators per labeled clip; 0 when nothing is labeled.
    pub fn num_annotators(&self) -> usize {
        self.saliency_scores.first().map_or(0, Vec::len)
    }

    /// Checks every record invariant, reporting the offending field.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(("duration", format!("must be positive, got {}", self.duration)));
        }
        if !(self.clip_len.is_finite() && self.clip_len > 0.0) {
            return Err(("clip_len", format!("must be positive, got {}", self.clip_len)));
        }
        if self.saliency_scores.len() != self.relevant_clip_ids.len() {
            return Err((
                "saliency_scores",
                format!(
                    "{} rating lists for {} relevant clips",
                    self.saliency_scores.len(),
                    self.relevant_clip_ids.len()
                ),
            ));
        }
        let k = self.num_clips();
        let mut seen = vec![false; k];
        for &id in &self.relevant_clip_ids {
            if id >= k {
                return Err(("relevant_clip_ids", format!("clip id {id} out of range for K={k}")));
            }
            if std::mem::replace(&mut seen[id], true) {
                return Err(("relevant_clip_ids", format!("duplicate clip id {id}")));
            }
        }
        let a = self.num_annotators();
        for ratings in &self.saliency_scores {
            if ratings.is_empty() || ratings.len() != a {
                return Err((
                    "saliency_scores",
                    format!("inconsistent annotator count: {} vs {a}", ratings.len()),
                ));
            }
            if let Some(r) = ratings.iter().find(|&&r| r > MAX_RATING) {
                return Err(("saliency_scores", format!("rating {r} outside 0..=4")));
            }
        }
        Ok(())
    }

    /// Serializes to a single JSON line (without the newline).
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("annotation records always serialize")
    }
}

pub fn clip_count(duration: f64, clip_len: f64) -> usize {
    (duration / clip_len).ceil() as usize
}

fn parse_line(line: &str, line_no: usize) -> Result<AnnotationRecord, DataError> {
    let err = |field: &str, message: String| DataError::Annotation {
        line: line_no,
        field: field.to_string(),
        message,
    };
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| {
        // serde reports "missing field `x`" / "invalid type ... " without a field
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.contains("field"))
            .unwrap_or("record")
            .to_string();
        err(&field, msg)
    })?;
    let mut relevant = Vec::with_capacity(raw.relevant_clip_ids.len());
    for id in raw.relevant_clip_ids {
        let id = usize::try_from(id).map_err(|_| err("relevant_clip_ids", format!("negative clip id {id}")))?;
        relevant.push(id);
    }
    let mut scores = Vec::with_capacity(raw.saliency_scores.len());
    for ratings in raw.saliency_scores {
        let mut out = Vec::with_capacity(ratings.len());
        for r in ratings {
            if !(0..=MAX_RATING as i64).contains(&r) {
                return Err(err("saliency_scores", format!("rating {r} outside 0..=4")));
            }
            out.push(r as u8);
        }
        scores.push(out);
    }
    let record = AnnotationRecord {
        qid: raw.qid,
        query: raw.query,
        vid: raw.vid,
        duration: raw.duration,
        clip_len: raw.clip_len,
        relevant_clip_ids: relevant,
        saliency_scores: scores,
    };
    record.validate().map_err(|(field, message)| err(field, message))?;
    Ok(record)
}

/// Parses annotation text; blank lines are skipped, line numbers are 1-based.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line, i + 1)?);
    }
    Ok(out)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_annotations(&text)
}

pub fn serialize_annotations(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

pub fn write_annotations(path: impl AsRef<Path>, records: &[AnnotationRecord]) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, serialize_annotations(records)).map_err(|e| DataError::io(path, e))
}

/// Linear map of a 0..=4 rating onto `[0, 1]`.
pub fn normalize_rating(rating: u8) -> Result<f32, DataError> {
    if rating > MAX_RATING {
        return Err(DataError::Rating(rating));
    }
    Ok(rating as f32 / MAX_RATING as f32)
}

/// Ground-truth saliency for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyTargets {
    pub qid: i64,
    pub y: Vec<f32>,
}

impl SaliencyTargets {
    pub fn num_clips(&self) -> usize {
        self.y.len()
    }
}

/// Labeled clips get the annotator mean of normalized ratings; every
/// unlabeled clip is treated as "Very Bad" (0).
pub fn build_targets(record: &AnnotationRecord) -> Result<SaliencyTargets, DataError> {
    record.validate().map_err(|(field, message)| DataError::Annotation {
        line: 0,
        field: field.into(),
        message,
    })?;
    let mut y = vec![0.0f32; record.num_clips()];
    for (&clip, ratings) in record.relevant_clip_ids.iter().zip(&record.saliency_scores) {
        let sum: f64 = ratings.iter().map(|&r| r as f64 / MAX_RATING as f64).sum();
        y[clip] = (sum / ratings.len() as f64) as f32;
    }
    Ok(SaliencyTargets { qid: record.qid, y })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{"qid": 1, "query": "a man cooks", "vid": "v1", "duration": 10, "relevant_clip_ids": [1, 2], "saliency_scores": [[4, 4, 3], [1, 2, 3]]}
{"qid": 2, "query": "dog runs", "vid": "v2", "duration": 150.0, "clip_len": 2.0, "relevant_clip_ids": [], "saliency_scores": [], "relevant_windows": [[0, 4]]}
"#;

    #[test]
    fn parses_fixture() {
        let recs = parse_annotations(FIXTURE).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].clip_len, 2.0);
        assert_eq!(recs[0].num_clips(), 5);
        assert_eq!(recs[1].num_clips(), 75);
        assert_eq!(recs[0].num_annotators(), 3);
    }

    #[test]
    fn rejects_rating_out_of_range_with_line_and_field() {
        let text = format!("{FIXTURE}{}\n", r#"{"qid": 3, "query": "q", "vid": "v3", "duration": 8, "relevant_clip_ids": [0], "saliency_scores": [[5, 1, 1]]}"#);
        match parse_annotations(&text).unwrap_err() {
            DataError::Annotation { line, field, .. } => {
                assert_eq!(line, 3);
                assert_eq!(field, "saliency_scores");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_clip_id_past_k() {
        let line = r#"{"qid": 9, "query": "q", "vid": "v", "duration": 150, "clip_len": 2, "relevant_clip_ids": [75], "saliency_scores": [[1, 1, 1]]}"#;
        match parse_annotations(line).unwrap_err() {
            DataError::Annotation { line, field, message } => {
                assert_eq!((line, field.as_str()), (1, "relevant_clip_ids"));
                assert!(message.contains("75") && message.contains("K=75"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_misaligned_and_ragged() {
        let misaligned = r#"{"qid": 1, "query": "q", "vid": "v", "duration": 8, "relevant_clip_ids": [0, 1], "saliency_scores": [[1, 1, 1]]}"#;
        assert!(matches!(parse_annotations(misaligned), Err(DataError::Annotation { field, .. }) if field == "saliency_scores"));
        let ragged = r#"{"qid": 1, "query": "q", "vid": "v", "duration": 8, "relevant_clip_ids": [0, 1], "saliency_scores": [[1, 1, 1], [1, 1]]}"#;
        assert!(matches!(parse_annotations(ragged), Err(DataError::Annotation { field, .. }) if field == "saliency_scores"));
        let missing = r#"{"qid": 1, "vid": "v", "duration": 8, "relevant_clip_ids": [], "saliency_scores": []}"#;
        assert!(matches!(parse_annotations(missing), Err(DataError::Annotation { field, .. }) if field == "query"));
        assert!(matches!(parse_annotations("{not json"), Err(DataError::Annotation { line: 1, .. })));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_rating(0).unwrap(), 0.0);
        assert_eq!(normalize_rating(4).unwrap(), 1.0);
        assert_eq!(normalize_rating(2).unwrap(), 0.5);
        assert!(normalize_rating(5).is_err());
    }

    #[test]
    fn targets() {
        let recs = parse_annotations(FIXTURE).unwrap();
        let t = build_targets(&recs[0]).unwrap();
        // clip 1: mean(1, 1, 0.75); clip 2: mean(0.25, 0.5, 0.75)
        assert_eq!(t.y.len(), 5);
        assert!((t.y[1] - 2.75 / 3.0).abs() < 1e-7);
        assert_eq!(t.y[2], 0.5);
        assert_eq!([t.y[0], t.y[3], t.y[4]], [0.0; 3]);
        let t = build_targets(&recs[1]).unwrap();
        assert!(t.y.iter().all(|&v| v == 0.0) && t.y.len() == 75);
        let mut unanimous = recs[0].clone();
        unanimous.saliency_scores[0] = vec![4, 4, 4];
        assert_eq!(build_targets(&unanimous).unwrap().y[1], 1.0);
    }

    #[test]
    fn serialize_then_parse_is_identity() {
        let recs = parse_annotations(FIXTURE).unwrap();
        let text = serialize_annotations(&recs);
        let again = parse_annotations(&text).unwrap();
        assert_eq!(again, recs);
        assert_eq!(serialize_annotations(&again), text);
    }
}
