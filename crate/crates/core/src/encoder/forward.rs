use crate::tensor::{activation, normalize, softmax_in_place, Real, Tensor};

use super::{check_sequence, EncoderError, EncoderTopParams, Embedding, TransformerTopConfig, LN_EPS};

/// Intermediates of one block, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache<T> {
    pub ln1_norm: Tensor<T>,
    pub ln1_inv: Vec<T>,
    pub h1: Tensor<T>,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// One `T × T` attention matrix per head.
    pub probs: Vec<Tensor<T>>,
    pub ctx: Tensor<T>,
    pub ln2_norm: Tensor<T>,
    pub ln2_inv: Vec<T>,
    pub h2: Tensor<T>,
    pub pre_act: Tensor<T>,
    pub act: Tensor<T>,
}

/// Everything `encode_top_backward_from_cache` needs for one sequence.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub(crate) blocks: Vec<BlockCache<T>>,
    pub(crate) num_tokens: usize,
    pub(crate) pool_index: usize,
    pub(crate) final_norm: Vec<T>,
    pub(crate) final_inv: T,
    /// `LN_f(x[pool_index])`, the vector fed to the projection.
    pub(crate) pooled: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn pooled(&self) -> &[T] {
        &self.pooled
    }
}

pub(crate) fn layer_norm_rows<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let eps = T::from_f64(LN_EPS);
    let mut out = Tensor::zeros(x.rows(), x.cols());
    let mut norm = Tensor::zeros(x.rows(), x.cols());
    let mut invs = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let (n, inv) = normalize(x.row(r), eps);
        for (c, &v) in n.iter().enumerate() {
            out.set(r, c, gain.data()[c] * v + bias.data()[c]);
        }
        norm.row_mut(r).copy_from_slice(&n);
        invs.push(inv);
    }
    (out, norm, invs)
}

fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, EncoderError> {
    let mut y = x.matmul(w)?;
    y.add_row_broadcast(b)?;
    Ok(y)
}

/// Scaled dot-product scores for one head with optional causal masking,
/// softmaxed over key positions.
pub(crate) fn attention_probs<T: Real>(q_h: &Tensor<T>, k_h: &Tensor<T>, causal: bool) -> Result<Tensor<T>, EncoderError> {
    let scale = T::one() / T::from_f64(q_h.cols() as f64).sqrt();
    let mut scores = q_h.matmul_transposed(k_h)?;
    let n = scores.rows();
    for i in 0..n {
        let row = scores.row_mut(i);
        for (j, s) in row.iter_mut().enumerate() {
            *s = if causal && j > i { T::neg_infinity() } else { *s * scale };
        }
        softmax_in_place(row);
    }
    Ok(scores)
}

/// Full forward pass, keeping every intermediate needed by backward.
pub fn encode_top_cached<T: Real>(
    params: &EncoderTopParams<T>,
    config: &TransformerTopConfig,
    tokens: &Tensor<T>,
    pool_index: usize,
) -> Result<(Embedding<T>, ForwardCache<T>), EncoderError> {
    check_sequence(config, tokens, pool_index)?;
    let heads = config.num_heads;
    let hd = config.head_dim();
    let mut x = tokens.clone();
    let mut blocks = Vec::with_capacity(params.layers.len());

    for block in &params.layers {
        let (h1, ln1_norm, ln1_inv) = layer_norm_rows(&x, &block.ln1_gain, &block.ln1_bias);
        let q = linear(&h1, &block.w_q, &block.b_q)?;
        let k = linear(&h1, &block.w_k, &block.b_k)?;
        let v = linear(&h1, &block.w_v, &block.b_v)?;
        let mut ctx = Tensor::zeros(x.rows(), config.model_dim);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let p = attention_probs(&q.column_block(h * hd, hd), &k.column_block(h * hd, hd), config.causal)?;
            ctx.set_column_block(h * hd, &p.matmul(&v.column_block(h * hd, hd))?);
            probs.push(p);
        }
        let attn_out = linear(&ctx, &block.w_o, &block.b_o)?;
        x.add_assign(&attn_out)?;

        let (h2, ln2_norm, ln2_inv) = layer_norm_rows(&x, &block.ln2_gain, &block.ln2_bias);
        let pre_act = linear(&h2, &block.w1, &block.b1)?;
        let act = pre_act.map(activation);
        let mlp_out = linear(&act, &block.w2, &block.b2)?;
        x.add_assign(&mlp_out)?;

        blocks.push(BlockCache {
            ln1_norm,
            ln1_inv,
            h1,
            q,
            k,
            v,
            probs,
            ctx,
            ln2_norm,
            ln2_inv,
            h2,
            pre_act,
            act,
        });
    }

    let (final_norm, final_inv) = normalize(x.row(pool_index), T::from_f64(LN_EPS));
    let pooled: Vec<T> = final_norm
        .iter()
        .zip(params.ln_f_gain.data())
        .zip(params.ln_f_bias.data())
        .map(|((&n, &g), &b)| g * n + b)
        .collect();
    let z = Tensor::from_vec(1, pooled.len(), pooled.clone())?;
    let embedding = Embedding::new(z.matmul(&params.proj)?.into_vec());

    Ok((
        embedding,
        ForwardCache {
            blocks,
            num_tokens: tokens.rows(),
            pool_index,
            final_norm,
            final_inv,
            pooled,
        },
    ))
}

/// Embeds one sequence: `LN_f(blocks(tokens)[pool_index]) · W_p`.
pub fn encode_top<T: Real>(
    params: &EncoderTopParams<T>,
    config: &TransformerTopConfig,
    tokens: &Tensor<T>,
    pool_index: usize,
) -> Result<Embedding<T>, EncoderError> {
    encode_top_cached(params, config, tokens, pool_index).map(|(e, _)| e)
}
