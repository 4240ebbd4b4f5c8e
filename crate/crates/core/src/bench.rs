//! Throughput measurements for clip-query scoring.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPoolBuilder;
use serde::Serialize;

use crate::data::Dataset;
use crate::encoder::DualEncoder;
use crate::evalhd::{predict, EvalError};
use crate::saliency::score_video;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Throughput {
    pub label: String,
    pub workers: usize,
    pub items: usize,
    pub seconds: f64,
    pub per_second: f64,
    pub per_second_per_worker: f64,
}

impl Throughput {
    fn new(label: &str, workers: usize, items: usize, seconds: f64) -> Self {
        let per_second = items as f64 / seconds.max(1e-9);
        Self {
            label: label.to_string(),
            workers,
            items,
            seconds,
            per_second,
            per_second_per_worker: per_second / workers as f64,
        }
    }
}

fn pool(workers: usize) -> rayon::ThreadPool {
    ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}

/// Cosine scoring of random `joint_dim`-wide embeddings: `videos` videos of
/// `clips` frames, each scored against its own query, `rounds` times over.
pub fn bench_cosine(joint_dim: usize, videos: usize, clips: usize, rounds: usize, workers: usize) -> Throughput {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut vec = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let frames: Vec<Vec<Vec<f32>>> = (0..videos).map(|_| (0..clips).map(|_| vec(joint_dim)).collect()).collect();
    let queries: Vec<Vec<f32>> = (0..videos).map(|_| vec(joint_dim)).collect();

    let start = Instant::now();
    let checksum: f64 = pool(workers).install(|| {
        (0..rounds)
            .map(|_| {
                frames
                    .par_iter()
                    .zip(&queries)
                    .map(|(f, q)| {
                        score_video(f, q)
                            .expect("random embeddings have nonzero norm")
                            .iter()
                            .map(|&s| s as f64)
                            .sum::<f64>()
                    })
                    .sum::<f64>()
            })
            .sum()
    });
    let seconds = start.elapsed().as_secs_f64();
    std::hint::black_box(checksum);
    Throughput::new("cosine", workers, videos * clips * rounds, seconds)
}

/// End-to-end scoring of every clip of the dataset: both encoder tops plus
/// cosine scoring.
pub fn bench_scoring(model: &DualEncoder<f32>, dataset: &Dataset, workers: usize) -> Result<Throughput, EvalError> {
    let clips: usize = dataset.manifest.items.iter().map(|i| i.num_clips).sum();
    let start = Instant::now();
    let preds = pool(workers).install(|| predict(model, dataset, 0))?;
    let seconds = start.elapsed().as_secs_f64();
    std::hint::black_box(preds);
    Ok(Throughput::new("clips", workers, clips, seconds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_every_evaluation() {
        let t = bench_cosine(8, 3, 5, 2, 2);
        assert_eq!(t.items, 30);
        assert_eq!(t.workers, 2);
        assert!(t.per_second > 0.0);
        assert!((t.per_second_per_worker * 2.0 - t.per_second).abs() < 1e-6 * t.per_second);
    }
}
