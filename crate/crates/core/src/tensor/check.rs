//! Central-difference gradient checking. This is the independent oracle for
//! every backward implementation: it perturbs leaf storage directly and
//! re-runs the caller's forward closure, so it shares no code with the
//! reverse-mode path it verifies.

use super::Tensor;
use crate::Real;

/// Relative error with an absolute floor of one, so near-zero gradients are
/// compared absolutely.
pub fn rel_err(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

pub fn max_rel_err(analytic: &[Real], numeric: &[Real]) -> Real {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, Real::max)
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Worst relative error over all checked coordinates.
    pub max_rel_err: Real,
    /// Coordinates compared.
    pub checked: usize,
}

/// Checks the gradient of `f` (a scalar-valued forward pass rebuilt on every
/// call) against central differences on every coordinate of every leaf in
/// `leaves`. Step is `1e-6 * max(1, |x|)` per coordinate.
pub fn gradcheck(leaves: &[Tensor], f: impl Fn() -> Tensor) -> GradcheckReport {
    gradcheck_impl(leaves, f, None)
}

/// Like [`gradcheck`] but comparing only `per_leaf` evenly spread coordinates
/// of each leaf; used where exhaustive checking is too slow (whole-model
/// sweeps).
pub fn gradcheck_sampled(
    leaves: &[Tensor],
    per_leaf: usize,
    f: impl Fn() -> Tensor,
) -> GradcheckReport {
    gradcheck_impl(leaves, f, Some(per_leaf))
}

fn gradcheck_impl(
    leaves: &[Tensor],
    f: impl Fn() -> Tensor,
    per_leaf: Option<usize>,
) -> GradcheckReport {
    for leaf in leaves {
        assert!(leaf.requires_grad(), "gradcheck leaf must require grad");
        leaf.zero_grad();
    }
    let loss = f();
    loss.backward();
    let analytic: Vec<Vec<Real>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let mut worst: Real = 0.0;
    let mut checked = 0;
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let coords: Vec<usize> = match per_leaf {
            Some(k) if k < n => {
                // Evenly spread deterministic sample.
                (0..k).map(|i| i * n / k).collect()
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let x0 = leaf.data()[c];
            let h = 1e-6 * x0.abs().max(1.0);
            leaf.data_mut()[c] = x0 + h;
            let up = f().item();
            leaf.data_mut()[c] = x0 - h;
            let down = f().item();
            leaf.data_mut()[c] = x0;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[li][c], numeric));
            checked += 1;
        }
    }
    GradcheckReport {
        max_rel_err: worst,
        checked,
    }
}
