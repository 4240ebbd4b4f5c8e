//! Batch assembly and the batched loss with its gradients.
//!
//! Frames of every video in the batch are stacked video-major, clip-minor.
//! Each query is encoded once and shared by all of its frame pairs; its
//! gradient is the sum of the per-pair contributions.

use rayon::prelude::*;

use crate::data::{DataError, Dataset};
use crate::encoder::{
    encode_top, encode_top_backward_from_cache, encode_top_cached, DualEncoder, EncoderTopParams, ForwardCache,
    TransformerTopConfig,
};
use crate::saliency::{cosine_backward, cosine_similarity, saliency_loss_and_grads, SaliencyError};
use crate::tensor::{Real, Tensor};

use super::TrainError;

/// Borrowed token states plus the pooled position.
#[derive(Debug, Clone, Copy)]
pub struct SeqRef<'a, T> {
    pub tokens: &'a Tensor<T>,
    pub pool_index: usize,
}

impl<'a, T> SeqRef<'a, T> {
    pub fn new(tokens: &'a Tensor<T>, pool_index: usize) -> Self {
        Self { tokens, pool_index }
    }
}

#[derive(Debug, Clone)]
pub struct TrainBatch<'a, T = f32> {
    pub vids: Vec<String>,
    /// Stacked frame sequences, one per (video, clip) pair.
    pub frames: Vec<SeqRef<'a, T>>,
    /// For each stacked frame, the index of its query in `queries`.
    pub frame_query: Vec<usize>,
    pub queries: Vec<SeqRef<'a, T>>,
    /// Targets aligned with `frames`.
    pub targets: Vec<T>,
}

impl<'a, T: Real> Default for TrainBatch<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> TrainBatch<'a, T> {
    pub fn new() -> Self {
        Self {
            vids: Vec::new(),
            frames: Vec::new(),
            frame_query: Vec::new(),
            queries: Vec::new(),
            targets: Vec::new(),
        }
    }

    /// Appends one video: its query and its clips in order.
    pub fn push_video(
        &mut self,
        vid: impl Into<String>,
        query: SeqRef<'a, T>,
        frames: &[SeqRef<'a, T>],
        targets: &[T],
    ) -> Result<(), TrainError> {
        let vid = vid.into();
        if frames.is_empty() || frames.len() != targets.len() {
            return Err(TrainError::Batch(format!(
                "video {vid}: {} frames but {} targets",
                frames.len(),
                targets.len()
            )));
        }
        let qi = self.queries.len();
        self.queries.push(query);
        self.frames.extend_from_slice(frames);
        self.frame_query.extend(std::iter::repeat_n(qi, frames.len()));
        self.targets.extend_from_slice(targets);
        self.vids.push(vid);
        Ok(())
    }

    pub fn num_pairs(&self) -> usize {
        self.frames.len()
    }

    /// How many frame slots each query is replicated over.
    pub fn replication(&self) -> Vec<usize> {
        let mut counts = vec![0; self.queries.len()];
        for &q in &self.frame_query {
            counts[q] += 1;
        }
        counts
    }

    fn check(&self) -> Result<(), TrainError> {
        if self.frames.is_empty() {
            return Err(TrainError::Batch("empty batch".into()));
        }
        if self.frame_query.len() != self.frames.len() || self.targets.len() != self.frames.len() {
            return Err(TrainError::Batch(format!(
                "{} frames, {} owners, {} targets",
                self.frames.len(),
                self.frame_query.len(),
                self.targets.len()
            )));
        }
        if let Some(&q) = self.frame_query.iter().find(|&&q| q >= self.queries.len()) {
            return Err(TrainError::Batch(format!("frame owner {q} out of {} queries", self.queries.len())));
        }
        Ok(())
    }
}

/// Stacks the dataset items `items` (indices into the manifest) into a batch.
pub fn build_batch<'a>(dataset: &'a Dataset, items: &[usize]) -> Result<TrainBatch<'a, f32>, TrainError> {
    let mut batch = TrainBatch::new();
    for &i in items {
        let item = dataset
            .manifest
            .items
            .get(i)
            .ok_or_else(|| TrainError::Batch(format!("item {i} out of {}", dataset.len())))?;
        let missing = |clip: Option<usize>, id: &str| DataError::MissingActivation {
            vid: item.vid.clone(),
            clip,
            id: id.to_string(),
        };
        let query = dataset
            .text
            .get(&item.query_id)
            .ok_or_else(|| missing(None, &item.query_id))?;
        let frames = item
            .frame_ids
            .iter()
            .enumerate()
            .map(|(j, id)| {
                dataset
                    .vision
                    .get(id)
                    .map(|s| SeqRef::new(&s.tokens, s.pool_index))
                    .ok_or_else(|| missing(Some(j), id))
            })
            .collect::<Result<Vec<_>, _>>()?;
        batch.push_video(
            item.vid.clone(),
            SeqRef::new(&query.tokens, query.pool_index),
            &frames,
            &dataset.targets[i].y,
        )?;
    }
    Ok(batch)
}

/// Upper bound on how many partial gradient sums a reduction keeps alive.
const MAX_PARTIALS: usize = 16;
const MIN_CHUNK: usize = 4;

/// Chunk length for `n` items. It depends only on `n`, never on the worker
/// count, so the reduction tree is identical for any pool size.
fn chunk_len(n: usize) -> usize {
    n.div_ceil(MAX_PARTIALS).max(MIN_CHUNK)
}

fn item_error(kind: &str, index: usize, e: impl std::fmt::Display) -> TrainError {
    TrainError::Batch(format!("{kind} {index}: {e}"))
}

/// Forward pass only: batch loss and the per-pair predictions.
pub fn batch_loss<T: Real>(model: &DualEncoder<T>, batch: &TrainBatch<'_, T>) -> Result<(T, Vec<T>), TrainError> {
    batch.check()?;
    let queries = batch
        .queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| encode_top(&model.text, &model.text_config, q.tokens, q.pool_index).map_err(|e| item_error("query", i, e)))
        .collect::<Result<Vec<_>, _>>()?;
    let preds = batch
        .frames
        .par_iter()
        .enumerate()
        .map(|(p, f)| {
            let emb = encode_top(&model.vision, &model.vision_config, f.tokens, f.pool_index)
                .map_err(|e| item_error("frame", p, e))?;
            cosine_similarity(&emb.values, &queries[batch.frame_query[p]].values).map_err(|e| pair_error(p, e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (loss, _) = saliency_loss_and_grads(&preds, &batch.targets)?;
    Ok((loss, preds))
}

fn pair_error(p: usize, e: SaliencyError) -> TrainError {
    TrainError::Batch(format!("pair {p}: {e}"))
}

#[derive(Debug, Clone)]
pub struct BatchGradients<T> {
    pub loss: T,
    pub predictions: Vec<T>,
    /// Gradients with the model's shapes and names.
    pub grads: DualEncoder<T>,
}

struct FrameChunk<T> {
    grads: EncoderTopParams<T>,
    preds: Vec<T>,
    query_cotangents: Vec<Vec<T>>,
}

/// Loss, predictions, and exact gradients for both towers.
///
/// Per-sequence work runs on the current rayon pool. Partial gradient sums
/// cover fixed chunks of items and are added in item order, so the result
/// is bitwise independent of the number of workers.
pub fn batch_gradients<T: Real>(model: &DualEncoder<T>, batch: &TrainBatch<'_, T>) -> Result<BatchGradients<T>, TrainError> {
    batch.check()?;
    let m = batch.num_pairs();
    let (two, m_real) = (T::from_f64(2.0), T::from_f64(m as f64));

    let queries: Vec<_> = batch
        .queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            encode_top_cached(&model.text, &model.text_config, q.tokens, q.pool_index).map_err(|e| item_error("query", i, e))
        })
        .collect::<Result<_, _>>()?;

    let step = chunk_len(m);
    let chunks: Vec<FrameChunk<T>> = (0..m.div_ceil(step))
        .into_par_iter()
        .map(|c| {
            let range = c * step..((c + 1) * step).min(m);
            let mut out = FrameChunk {
                grads: EncoderTopParams::zeros(&model.vision_config),
                preds: Vec::with_capacity(range.len()),
                query_cotangents: Vec::with_capacity(range.len()),
            };
            for p in range {
                let f = &batch.frames[p];
                let (emb, cache) = encode_top_cached(&model.vision, &model.vision_config, f.tokens, f.pool_index)
                    .map_err(|e| item_error("frame", p, e))?;
                let q = &queries[batch.frame_query[p]].0.values;
                let pred = cosine_similarity(&emb.values, q).map_err(|e| pair_error(p, e))?;
                // identical to the per-element gradient of saliency_loss_and_grads
                let g = two * (pred - batch.targets[p]) / m_real;
                let (gf, gq) = cosine_backward(&emb.values, q, g).map_err(|e| pair_error(p, e))?;
                encode_top_backward_from_cache(&model.vision, &model.vision_config, &cache, &gf, &mut out.grads)
                    .map_err(|e| item_error("frame", p, e))?;
                out.preds.push(pred);
                out.query_cotangents.push(gq);
            }
            Ok(out)
        })
        .collect::<Result<_, TrainError>>()?;

    let mut grads = model.zeros_like();
    let mut predictions = Vec::with_capacity(m);
    let mut query_cotangents = vec![vec![T::zero(); model.joint_dim()]; batch.queries.len()];
    let mut p = 0;
    for chunk in chunks {
        grads.vision.accumulate(&chunk.grads)?;
        predictions.extend(chunk.preds);
        for gq in chunk.query_cotangents {
            for (acc, v) in query_cotangents[batch.frame_query[p]].iter_mut().zip(gq) {
                *acc = *acc + v;
            }
            p += 1;
        }
    }

    grads.text = reduce_backward(&model.text, &model.text_config, &queries, &query_cotangents)?;
    let (loss, _) = saliency_loss_and_grads(&predictions, &batch.targets)?;
    Ok(BatchGradients {
        loss,
        predictions,
        grads,
    })
}

fn reduce_backward<T: Real>(
    params: &EncoderTopParams<T>,
    config: &TransformerTopConfig,
    forwards: &[(crate::encoder::Embedding<T>, ForwardCache<T>)],
    cotangents: &[Vec<T>],
) -> Result<EncoderTopParams<T>, TrainError> {
    let n = forwards.len();
    let step = chunk_len(n);
    let partials: Vec<EncoderTopParams<T>> = (0..n.div_ceil(step))
        .into_par_iter()
        .map(|c| {
            let mut g = EncoderTopParams::zeros(config);
            for i in c * step..((c + 1) * step).min(n) {
                encode_top_backward_from_cache(params, config, &forwards[i].1, &cotangents[i], &mut g)
                    .map_err(|e| item_error("query", i, e))?;
            }
            Ok(g)
        })
        .collect::<Result<_, TrainError>>()?;
    let mut total = EncoderTopParams::zeros(config);
    for g in &partials {
        total.accumulate(g)?;
    }
    Ok(total)
}
