//! Parameterised layers on top of the tensor engine, plus weight init and
//! the named-tensor visitor every module implements so the optimizer and
//! checkpoint writer can walk the whole model deterministically.

use rand::Rng;

use crate::tensor::Tensor;
use crate::Real;

/// Deterministic walk over a module's tensors. Trainable parameters have
/// `requires_grad`; running-statistic buffers do not but are still visited
/// (they belong in checkpoints).
pub trait Module {
    fn visit_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>);

    fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_tensors(prefix, &mut out);
        out
    }

    /// Trainable parameters only.
    fn parameters(&self) -> Vec<(String, Tensor)> {
        self.named_tensors("")
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Bias putting a sigmoid classifier at a 0.05 prior, so rare-positive
/// heads start near the base rate instead of 0.5.
pub const NEGATIVE_PRIOR_BIAS: Real = -2.9444389791664403;

/// Glorot-uniform initialized weight `[fan_in, fan_out]`.
pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as Real).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::param(&[fan_in, fan_out], data)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: Real, hi: Real) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Affine map `x @ w + b` applied to the last axis.
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: xavier(rng, d_in, d_out),
            b: Tensor::param(&[d_out], vec![0.0; d_out]),
        }
    }

    /// All-zero weights and bias; used for heads that must start as no-ops
    /// (point refinement deltas, deformable offsets).
    pub fn zeros(d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: Tensor::param(&[d_in, d_out], vec![0.0; d_in * d_out]),
            b: Tensor::param(&[d_out], vec![0.0; d_out]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w).add(&self.b)
    }
}

impl Module for Linear {
    fn visit_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "w"), self.w.clone()));
        out.push((join(prefix, "b"), self.b.clone()));
    }
}

/// LayerNorm over the last axis with learnable gain and bias.
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: Real,
}

impl LayerNorm {
    pub fn new(d: usize) -> LayerNorm {
        LayerNorm {
            gain: Tensor::param(&[d], vec![1.0; d]),
            bias: Tensor::param(&[d], vec![0.0; d]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gain, &self.bias, self.eps)
    }
}

impl Module for LayerNorm {
    fn visit_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "gain"), self.gain.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

/// BatchNorm over the row axis of `[n, d]` with running statistics.
pub struct BatchNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: Real,
    pub eps: Real,
}

impl BatchNorm {
    pub fn new(d: usize) -> BatchNorm {
        BatchNorm {
            gain: Tensor::param(&[d], vec![1.0; d]),
            bias: Tensor::param(&[d], vec![0.0; d]),
            running_mean: Tensor::zeros(&[d]),
            running_var: Tensor::from_vec(&[d], vec![1.0; d]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        x.batch_norm(
            &self.gain,
            &self.bias,
            &self.running_mean,
            &self.running_var,
            self.momentum,
            self.eps,
            train,
        )
    }
}

impl Module for BatchNorm {
    fn visit_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "gain"), self.gain.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
        out.push((join(prefix, "running_mean"), self.running_mean.clone()));
        out.push((join(prefix, "running_var"), self.running_var.clone()));
    }
}

/// Two affine layers with a ReLU between.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(rng: &mut impl Rng, d_in: usize, d_hidden: usize, d_out: usize) -> Mlp {
        Mlp {
            fc1: Linear::new(rng, d_in, d_hidden),
            fc2: Linear::new(rng, d_hidden, d_out),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.fc2.forward(&self.fc1.forward(x).relu())
    }
}

impl Module for Mlp {
    fn visit_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.fc1.visit_tensors(&join(prefix, "fc1"), out);
        self.fc2.visit_tensors(&join(prefix, "fc2"), out);
    }
}
