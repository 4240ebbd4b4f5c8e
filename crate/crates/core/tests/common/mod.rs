//! Helpers shared by the integration tests.
#![allow(dead_code)]

use highlight::data::AnnotationRecord;
use highlight::encoder::TransformerTopConfig;
use highlight::tensor::Tensor;
use highlight::training::{SeqRef, TrainBatch};
use highlight::evalhd::PredictionRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force reference metrics, written without the library's ranking
/// code: a clip's rank is one plus the number of clips that beat it.
pub fn brute_force(preds: &[PredictionRecord], records: &[AnnotationRecord]) -> (f64, f64) {
    let mut ap_sum = 0.0;
    let mut ap_count = 0;
    let mut hit_sum = 0.0;
    let mut hit_count = 0;
    for r in records {
        let p = preds.iter().find(|p| p.qid == r.qid).expect("prediction present");
        let clips = &r.relevant_clip_ids;
        if clips.is_empty() {
            continue;
        }
        let score = |c: usize| p.pred_saliency_scores[c];
        let beats = |a: usize, b: usize| score(a) > score(b) || (score(a) == score(b) && a < b);
        let rank = |c: usize| 1 + clips.iter().filter(|&&o| o != c && beats(o, c)).count();

        let annotators = r.saliency_scores[0].len();
        let mut query_aps = Vec::new();
        for a in 0..annotators {
            let positive = |c: usize| {
                let pos = clips.iter().position(|&x| x == c).unwrap();
                r.saliency_scores[pos][a] == 4
            };
            let positives: Vec<usize> = clips.iter().copied().filter(|&c| positive(c)).collect();
            if positives.is_empty() {
                continue;
            }
            let mut total = 0.0;
            for &c in &positives {
                let rc = rank(c);
                let above = positives.iter().filter(|&&o| rank(o) <= rc).count();
                total += above as f64 / rc as f64;
            }
            query_aps.push(total / positives.len() as f64);
        }
        if !query_aps.is_empty() {
            ap_sum += query_aps.iter().sum::<f64>() / query_aps.len() as f64;
            ap_count += 1;
        }

        let top = clips.iter().copied().find(|&c| rank(c) == 1).unwrap();
        let pos = clips.iter().position(|&x| x == top).unwrap();
        let hits = r.saliency_scores[pos].iter().filter(|&&s| s == 4).count();
        hit_sum += hits as f64 / annotators as f64;
        hit_count += 1;
    }
    let map = if ap_count == 0 { 0.0 } else { ap_sum / ap_count as f64 };
    let hit = if hit_count == 0 { 0.0 } else { hit_sum / hit_count as f64 };
    (map, hit)
}

/// Up to 5 queries, up to 8 labeled clips each, 3 annotators, and scores
/// drawn from a small grid so ties are common.
pub fn random_fixture(seed: u64) -> (Vec<PredictionRecord>, Vec<AnnotationRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=5);
    let mut preds = Vec::new();
    let mut records = Vec::new();
    for q in 0..n {
        let k = rng.random_range(1..=12);
        let mut clips: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            clips.swap(i, rng.random_range(0..=i));
        }
        clips.truncate(rng.random_range(1..=k.min(8)));
        let ratings = clips
            .iter()
            .map(|_| (0..3).map(|_| rng.random_range(0..=4u8)).collect())
            .collect();
        records.push(AnnotationRecord {
            qid: q as i64 * 7 - 3,
            query: format!("query {q}"),
            vid: format!("vid{q}"),
            duration: 2.0 * k as f64,
            clip_len: 2.0,
            relevant_clip_ids: clips,
            saliency_scores: ratings,
        });
        preds.push(PredictionRecord {
            qid: q as i64 * 7 - 3,
            vid: format!("vid{q}"),
            pred_saliency_scores: (0..k).map(|_| rng.random_range(0..6) as f32 / 5.0).collect(),
        });
    }
    (preds, records)
}

pub fn towers(d: usize) -> (TransformerTopConfig, TransformerTopConfig) {
    let v = TransformerTopConfig {
        model_dim: d,
        num_heads: 2,
        mlp_dim: 2 * d,
        num_layers: 1,
        joint_dim: 5,
        seq_len_max: 6,
        causal: false,
    };
    (v, TransformerTopConfig { causal: true, ..v })
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Queries, per-video frames and targets for a random fixture.
pub struct Fixture {
    pub queries: Vec<Tensor<f64>>,
    pub frames: Vec<Vec<Tensor<f64>>>,
    pub targets: Vec<Vec<f64>>,
}

pub fn fixture(rng: &mut ChaCha8Rng, d: usize) -> Fixture {
    let n = rng.random_range(1..=3);
    let mut f = Fixture {
        queries: Vec::new(),
        frames: Vec::new(),
        targets: Vec::new(),
    };
    for _ in 0..n {
        let k = rng.random_range(1..=4);
        let t = rng.random_range(1..=6);
        f.queries.push(random_tensor(rng, t, d));
        f.frames.push(
            (0..k)
                .map(|_| {
                    let rows = rng.random_range(1..=6);
                    random_tensor(rng, rows, d)
                })
                .collect(),
        );
        f.targets.push((0..k).map(|_| rng.random::<f64>()).collect());
    }
    f
}

pub fn batch_of(f: &Fixture) -> TrainBatch<'_, f64> {
    let mut b = TrainBatch::new();
    for (i, q) in f.queries.iter().enumerate() {
        let frames: Vec<_> = f.frames[i].iter().map(|t| SeqRef::new(t, 0)).collect();
        b.push_video(format!("v{i}"), SeqRef::new(q, q.rows() - 1), &frames, &f.targets[i])
            .unwrap();
    }
    b
}
