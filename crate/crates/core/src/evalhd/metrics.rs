//! Highlight-detection metrics over labeled clips, binarized at the top
//! rating per annotator.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{AnnotationRecord, MAX_RATING};

use super::EvalError;

/// Indices sorted by score descending, ties by ascending index.
pub fn rank_order<T: PartialOrd + Copy>(scores: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Mean over positives of the precision at each positive's rank.
pub fn average_precision<T: PartialOrd + Copy>(scores: &[T], positives: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != positives.len() {
        return Err(EvalError::Length {
            scores: scores.len(),
            labels: positives.len(),
        });
    }
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in rank_order(scores).iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEval {
    pub qid: i64,
    /// `None` for annotators without any top-rated clip.
    pub ap_per_annotator: Vec<Option<f64>>,
    pub hit_per_annotator: Vec<u8>,
    /// Mean of the defined per-annotator APs.
    pub ap: Option<f64>,
    pub hit: f64,
}

/// Metrics of one query, or `None` when it has no labeled clip.
pub fn evaluate_query(scores: &[f32], record: &AnnotationRecord) -> Result<Option<QueryEval>, EvalError> {
    let ids = &record.relevant_clip_ids;
    if ids.is_empty() {
        return Ok(None);
    }
    if let Some(&bad) = ids.iter().find(|&&c| c >= scores.len()) {
        return Err(EvalError::Coverage {
            qid: record.qid,
            clip: bad,
            len: scores.len(),
        });
    }
    let labeled: Vec<f32> = ids.iter().map(|&c| scores[c]).collect();
    // ties go to the lowest clip index, not the lowest position in the label list
    let top = ids
        .iter()
        .enumerate()
        .max_by(|(_, &a), (_, &b)| {
            scores[a]
                .partial_cmp(&scores[b])
                .unwrap_or(Ordering::Equal)
                .then(b.cmp(&a))
        })
        .map(|(pos, _)| pos)
        .expect("nonempty");
    let by_clip = sorted_by_clip(ids);
    let labeled_by_clip: Vec<f32> = by_clip.iter().map(|&pos| labeled[pos]).collect();

    let mut ap_per_annotator = Vec::with_capacity(record.num_annotators());
    let mut hit_per_annotator = Vec::with_capacity(record.num_annotators());
    for a in 0..record.num_annotators() {
        let positives: Vec<bool> = by_clip
            .iter()
            .map(|&pos| record.saliency_scores[pos][a] == MAX_RATING)
            .collect();
        ap_per_annotator.push(match average_precision(&labeled_by_clip, &positives) {
            Ok(ap) => Some(ap),
            Err(EvalError::NoPositives) => None,
            Err(e) => return Err(e),
        });
        hit_per_annotator.push(u8::from(record.saliency_scores[top][a] == MAX_RATING));
    }
    let defined: Vec<f64> = ap_per_annotator.iter().flatten().copied().collect();
    let ap = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let hit = hit_per_annotator.iter().map(|&h| h as f64).sum::<f64>() / hit_per_annotator.len().max(1) as f64;
    Ok(Some(QueryEval {
        qid: record.qid,
        ap_per_annotator,
        hit_per_annotator,
        ap,
        hit,
    }))
}

/// Positions into `ids` ordered by clip index, so index ties in ranking
/// follow clip order even when the label list is not sorted.
fn sorted_by_clip(ids: &[usize]) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..ids.len()).collect();
    pos.sort_by_key(|&p| ids[p]);
    pos
}

/// mAP over queries with a defined AP, and HIT@1 over queries with a
/// labeled clip.
pub fn aggregate(per_query: &[QueryEval]) -> (f64, f64) {
    let aps: Vec<f64> = per_query.iter().filter_map(|q| q.ap).collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    let hit = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|q| q.hit).sum::<f64>() / per_query.len() as f64
    };
    (map, hit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(ids: Vec<usize>, ratings: Vec<Vec<u8>>) -> AnnotationRecord {
        AnnotationRecord {
            qid: 1,
            query: "q".into(),
            vid: "v".into(),
            duration: 20.0,
            clip_len: 2.0,
            relevant_clip_ids: ids,
            saliency_scores: ratings,
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.1, 0.5], &[true, false, true]).unwrap(), 1.0);
        let ap = average_precision(&[0.9, 0.8, 0.7], &[false, true, true]).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[0.3], &[true]).unwrap(), 1.0);
        assert!(matches!(average_precision(&[0.3, 0.2], &[false, false]), Err(EvalError::NoPositives)));
    }

    #[test]
    fn ties_rank_lower_index_first() {
        assert_eq!(rank_order(&[0.5, 0.5, 0.7, 0.5]), vec![2, 0, 1, 3]);
        // the positive at index 1 ties with a negative at index 0 and loses
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
    }

    #[test]
    fn hit_fraction_of_annotators() {
        let r = record(vec![0, 1, 2], vec![vec![4, 0, 1], vec![2, 2, 2], vec![0, 0, 0]]);
        let q = evaluate_query(&[0.9, 0.2, 0.1], &r).unwrap().unwrap();
        assert_eq!(q.hit_per_annotator, vec![1, 0, 0]);
        assert!((q.hit - 1.0 / 3.0).abs() < 1e-15);
        // annotators 2 and 3 have no top rating and are skipped for AP
        assert_eq!(q.ap_per_annotator, vec![Some(1.0), None, None]);
        assert_eq!(q.ap, Some(1.0));
    }

    #[test]
    fn tie_at_max_selects_lowest_clip_index() {
        let r = record(vec![5, 2], vec![vec![0], vec![4]]);
        let q = evaluate_query(&[0.0, 0.0, 0.7, 0.0, 0.0, 0.7], &r).unwrap().unwrap();
        assert_eq!(q.hit, 1.0);
    }

    #[test]
    fn unlabeled_query_is_skipped_and_coverage_checked() {
        assert!(evaluate_query(&[0.1], &record(vec![], vec![])).unwrap().is_none());
        assert!(matches!(
            evaluate_query(&[0.1], &record(vec![3], vec![vec![4]])),
            Err(EvalError::Coverage { clip: 3, .. })
        ));
    }
}
