use crate::encoder::DualEncoder;

use super::TrainConfig;

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// 0 disables clipping.
    pub grad_clip_norm: f64,
}

impl From<&TrainConfig> for AdamW {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps_opt,
            weight_decay: c.weight_decay,
            grad_clip_norm: c.grad_clip_norm,
        }
    }
}

/// First and second moments with the model's shapes, plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: DualEncoder<f32>,
    pub second: DualEncoder<f32>,
}

impl OptimizerState {
    pub fn new(model: &DualEncoder<f32>) -> Self {
        Self {
            step: 0,
            first: model.zeros_like(),
            second: model.zeros_like(),
        }
    }
}

/// `sqrt(Σ g²)` over every tensor, accumulated in `f64`.
pub fn global_norm(grads: &DualEncoder<f32>) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

impl AdamW {
    /// Factor applied to the gradients so their global norm is at most the
    /// clipping bound.
    pub fn clip_scale(&self, norm: f64) -> f64 {
        if self.grad_clip_norm > 0.0 && norm > self.grad_clip_norm {
            self.grad_clip_norm / norm
        } else {
            1.0
        }
    }

    /// One update of every tensor. Weight decay is decoupled from the
    /// adaptive step and applied to all tensors.
    pub fn update(&self, model: &mut DualEncoder<f32>, state: &mut OptimizerState, grads: &DualEncoder<f32>, grad_norm: f64) {
        state.step += 1;
        let t = state.step as i32;
        let scale = self.clip_scale(grad_norm) as f32;
        let bc1 = (1.0 - self.beta1.powi(t)) as f32;
        let bc2 = (1.0 - self.beta2.powi(t)) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let (lr, eps) = (self.learning_rate as f32, self.eps as f32);
        let decay = (self.learning_rate * self.weight_decay) as f32;

        let params = model.tensors_mut();
        let firsts = state.first.tensors_mut();
        let seconds = state.second.tensors_mut();
        for (((p, m), v), g) in params.into_iter().zip(firsts).zip(seconds).zip(grads.tensors()) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data());
            for (((p, m), v), &g) in it {
                let g = g * scale;
                if decay != 0.0 {
                    *p -= decay * *p;
                }
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
    }
}
