use crate::tensor::{activation_grad, Real, Tensor};

use super::forward::{encode_top_cached, ForwardCache};
use super::{EncoderError, EncoderTopParams, TransformerTopConfig};

/// Reverse of `gain ⊙ norm + bias` for one row; returns the input gradient
/// and accumulates into the gain/bias gradients.
fn layer_norm_row_backward<T: Real>(
    grad_out: &[T],
    norm: &[T],
    inv: T,
    gain: &[T],
    grad_gain: &mut [T],
    grad_bias: &mut [T],
) -> Vec<T> {
    let n = T::from_f64(grad_out.len() as f64);
    let mut gn = Vec::with_capacity(grad_out.len());
    for i in 0..grad_out.len() {
        grad_gain[i] = grad_gain[i] + grad_out[i] * norm[i];
        grad_bias[i] = grad_bias[i] + grad_out[i];
        gn.push(grad_out[i] * gain[i]);
    }
    let mean_gn = gn.iter().fold(T::zero(), |a, &v| a + v) / n;
    let mean_gn_n = gn
        .iter()
        .zip(norm)
        .fold(T::zero(), |a, (&g, &x)| a + g * x)
        / n;
    gn.iter()
        .zip(norm)
        .map(|(&g, &x)| inv * (g - mean_gn - x * mean_gn_n))
        .collect()
}

fn layer_norm_rows_backward<T: Real>(
    grad_out: &Tensor<T>,
    norm: &Tensor<T>,
    invs: &[T],
    gain: &Tensor<T>,
    grad_gain: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(grad_out.rows(), grad_out.cols());
    for r in 0..grad_out.rows() {
        let row = layer_norm_row_backward(
            grad_out.row(r),
            norm.row(r),
            invs[r],
            gain.data(),
            grad_gain.data_mut(),
            grad_bias.data_mut(),
        );
        dx.row_mut(r).copy_from_slice(&row);
    }
    dx
}

/// Accumulates the gradients of `x·W + b` and returns the gradient w.r.t. `x`.
fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_w: &mut Tensor<T>,
    grad_b: &mut Tensor<T>,
) -> Result<Tensor<T>, EncoderError> {
    grad_w.add_assign(&x.transposed_matmul(grad_out)?)?;
    grad_b.add_assign(&grad_out.column_sums())?;
    Ok(grad_out.matmul_transposed(w)?)
}

/// Gradients of `⟨encode_top(params, tokens), grad_embedding⟩` w.r.t. every
/// trainable tensor, accumulated into `grads`.
pub fn encode_top_backward_from_cache<T: Real>(
    params: &EncoderTopParams<T>,
    config: &TransformerTopConfig,
    cache: &ForwardCache<T>,
    grad_embedding: &[T],
    grads: &mut EncoderTopParams<T>,
) -> Result<(), EncoderError> {
    let (d, e) = (config.model_dim, config.joint_dim);
    if grad_embedding.len() != e {
        return Err(crate::tensor::ShapeError::Length {
            op: "encode_top_backward",
            expected: e,
            actual: grad_embedding.len(),
        }
        .into());
    }

    // projection
    for i in 0..d {
        let z = cache.pooled[i];
        let row = grads.proj.row_mut(i);
        for (g, &ge) in row.iter_mut().zip(grad_embedding) {
            *g = *g + z * ge;
        }
    }
    let grad_pooled: Vec<T> = (0..d)
        .map(|i| crate::tensor::dot(params.proj.row(i), grad_embedding))
        .collect();
    let grad_row = layer_norm_row_backward(
        &grad_pooled,
        &cache.final_norm,
        cache.final_inv,
        params.ln_f_gain.data(),
        grads.ln_f_gain.data_mut(),
        grads.ln_f_bias.data_mut(),
    );
    let mut dx = Tensor::zeros(cache.num_tokens, d);
    dx.row_mut(cache.pool_index).copy_from_slice(&grad_row);

    let hd = config.head_dim();
    let scale = T::one() / T::from_f64(hd as f64).sqrt();
    for (l, block) in params.layers.iter().enumerate().rev() {
        let c = &cache.blocks[l];
        let g = &mut grads.layers[l];

        // MLP branch: x2 = x1 + W2·act(W1·LN2(x1))
        let d_act = linear_backward(&c.act, &block.w2, &dx, &mut g.w2, &mut g.b2)?;
        let mut d_pre = d_act;
        for (dv, &u) in d_pre.data_mut().iter_mut().zip(c.pre_act.data()) {
            *dv = *dv * activation_grad(u);
        }
        let d_h2 = linear_backward(&c.h2, &block.w1, &d_pre, &mut g.w1, &mut g.b1)?;
        let d_x1_branch = layer_norm_rows_backward(
            &d_h2,
            &c.ln2_norm,
            &c.ln2_inv,
            &block.ln2_gain,
            &mut g.ln2_gain,
            &mut g.ln2_bias,
        );
        dx.add_assign(&d_x1_branch)?;

        // attention branch: x1 = x + W_o·MHA(LN1(x))
        let d_ctx = linear_backward(&c.ctx, &block.w_o, &dx, &mut g.w_o, &mut g.b_o)?;
        let mut d_q = Tensor::zeros(cache.num_tokens, d);
        let mut d_k = Tensor::zeros(cache.num_tokens, d);
        let mut d_v = Tensor::zeros(cache.num_tokens, d);
        for (h, p) in c.probs.iter().enumerate() {
            let off = h * hd;
            let d_ctx_h = d_ctx.column_block(off, hd);
            let v_h = c.v.column_block(off, hd);
            let d_p = d_ctx_h.matmul_transposed(&v_h)?;
            d_v.set_column_block(off, &p.transposed_matmul(&d_ctx_h)?);
            let mut d_s = Tensor::zeros(p.rows(), p.cols());
            for i in 0..p.rows() {
                let pr = p.row(i);
                let dpr = d_p.row(i);
                let inner = crate::tensor::dot(pr, dpr);
                for (j, out) in d_s.row_mut(i).iter_mut().enumerate() {
                    *out = pr[j] * (dpr[j] - inner) * scale;
                }
            }
            d_q.set_column_block(off, &d_s.matmul(&c.k.column_block(off, hd))?);
            d_k.set_column_block(off, &d_s.transposed_matmul(&c.q.column_block(off, hd))?);
        }
        let mut d_h1 = linear_backward(&c.h1, &block.w_q, &d_q, &mut g.w_q, &mut g.b_q)?;
        d_h1.add_assign(&linear_backward(&c.h1, &block.w_k, &d_k, &mut g.w_k, &mut g.b_k)?)?;
        d_h1.add_assign(&linear_backward(&c.h1, &block.w_v, &d_v, &mut g.w_v, &mut g.b_v)?)?;
        let d_x_branch = layer_norm_rows_backward(
            &d_h1,
            &c.ln1_norm,
            &c.ln1_inv,
            &block.ln1_gain,
            &mut g.ln1_gain,
            &mut g.ln1_bias,
        );
        dx.add_assign(&d_x_branch)?;
    }
    Ok(())
}

/// Recomputes the forward pass and returns fresh gradients.
pub fn encode_top_backward<T: Real>(
    params: &EncoderTopParams<T>,
    config: &TransformerTopConfig,
    tokens: &Tensor<T>,
    pool_index: usize,
    grad_embedding: &[T],
) -> Result<EncoderTopParams<T>, EncoderError> {
    let (_, cache) = encode_top_cached(params, config, tokens, pool_index)?;
    let mut grads = EncoderTopParams::zeros(config);
    encode_top_backward_from_cache(params, config, &cache, grad_embedding, &mut grads)?;
    Ok(grads)
}
