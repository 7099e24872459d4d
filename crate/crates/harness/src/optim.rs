//! Adaptive-moment optimizer with decoupled weight decay: the decay acts on
//! the weights directly rather than through the gradients.

use ftsp_core::tensor::Tensor;
use ftsp_core::Real;

pub struct AdamW {
    params: Vec<Tensor>,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
    step_count: usize,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
}

impl AdamW {
    pub fn new(params: Vec<Tensor>, beta1: Real, beta2: Real, weight_decay: Real) -> AdamW {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamW {
            params,
            m,
            v,
            step_count: 0,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Global gradient-norm clip; returns the pre-clip norm.
    pub fn clip_grad_norm(&self, max_norm: Real) -> Real {
        let mut sq = 0.0;
        for p in &self.params {
            if let Some(g) = p.grad() {
                sq += g.iter().map(|v| v * v).sum::<Real>();
            }
        }
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for p in &self.params {
                if let Some(mut g) = p.grad() {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                    p.set_grad(g);
                }
            }
        }
        norm
    }

    pub fn step(&mut self, lr: Real) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, p) in self.params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let mut data = p.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
        }
    }
}
