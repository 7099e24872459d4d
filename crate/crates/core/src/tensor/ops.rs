//! Differentiable operations. Each constructor builds the forward value and
//! registers a backward closure mapping the output gradient to per-parent
//! gradients.

use super::{BackwardCtx, Tensor};
use crate::Real;

/// Axis geometry of a row-major tensor: extents flattened to
/// (outer, len-of-axis, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Leading-broadcast contract: either shapes match, or one shape is a strict
/// suffix of the other (tiled across the leading extents). Returns the number
/// of elements of the shorter operand, or panics.
fn suffix_len(op: &str, a: &[usize], b: &[usize]) -> (bool, usize) {
    if a == b {
        return (true, a.iter().product());
    }
    let (long, short) = if a.len() > b.len() { (a, b) } else { (b, a) };
    assert!(
        long.ends_with(short),
        "op `{op}`: shape {b:?} does not match or suffix-broadcast against {a:?}"
    );
    (a.len() >= b.len(), short.iter().product())
}

fn binary_elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    fwd: impl Fn(Real, Real) -> Real,
    // (out_grad, a_val, b_val) -> (da, db)
    bwd: impl Fn(Real, Real, Real) -> (Real, Real) + 'static,
) -> Tensor {
    let (a_is_long, short_n) = suffix_len(op, a.shape(), b.shape());
    let (long, short) = if a_is_long { (a, b) } else { (b, a) };
    let ld = long.data();
    let sd = short.data();
    let data: Vec<Real> = if short_n == 0 {
        Vec::new()
    } else {
        ld.iter()
            .enumerate()
            .map(|(i, &lv)| {
                let sv = sd[i % short_n];
                if a_is_long { fwd(lv, sv) } else { fwd(sv, lv) }
            })
            .collect()
    };
    let shape = long.shape().to_vec();
    drop(ld);
    drop(sd);
    Tensor::from_op(
        op,
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |ctx: &BackwardCtx| {
            let a = &ctx.parents[0];
            let b = &ctx.parents[1];
            let ad = a.data();
            let bd = b.data();
            let an = ad.len();
            let bn = bd.len();
            let mut ga = vec![0.0; an];
            let mut gb = vec![0.0; bn];
            for (i, &g) in ctx.out_grad.iter().enumerate() {
                let av = ad[i % an];
                let bv = bd[i % bn];
                let (da, db) = bwd(g, av, bv);
                ga[i % an] += da;
                gb[i % bn] += db;
            }
            vec![Some(ga), Some(gb)]
        }),
    )
}

fn unary_elementwise(
    op: &'static str,
    x: &Tensor,
    fwd: impl Fn(Real) -> Real,
    // (out_grad, x_val, out_val) -> dx
    bwd: impl Fn(Real, Real, Real) -> Real + 'static,
) -> Tensor {
    let data: Vec<Real> = x.data().iter().map(|&v| fwd(v)).collect();
    Tensor::from_op(
        op,
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |ctx: &BackwardCtx| {
            let xd = ctx.parents[0].data();
            let g: Vec<Real> = ctx
                .out_grad
                .iter()
                .zip(xd.iter())
                .zip(ctx.out_data.iter())
                .map(|((&g, &x), &y)| bwd(g, x, y))
                .collect();
            vec![Some(g)]
        }),
    )
}

// ── dense kernels ────────────────────────────────────────────────────

/// c[m,n] += a[m,k] @ b[k,n]
pub(crate) fn mm_acc(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, c: &mut [Real]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,k] += g[m,n] @ b[k,n]^T
fn mm_abt_acc(g: &[Real], b: &[Real], m: usize, k: usize, n: usize, c: &mut [Real]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            c[i * k + p] += acc;
        }
    }
}

/// c[k,n] += a[m,k]^T @ g[m,n]
fn mm_atb_acc(a: &[Real], g: &[Real], m: usize, k: usize, n: usize, c: &mut [Real]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

impl Tensor {
    // ── arithmetic ───────────────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Tensor {
        binary_elementwise("add", self, other, |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary_elementwise("sub", self, other, |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary_elementwise("mul", self, other, |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        binary_elementwise(
            "div",
            self,
            other,
            |a, b| a / b,
            |g, a, b| (g / b, -g * a / (b * b)),
        )
    }

    pub fn min_elem(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "min_elem requires equal shapes");
        binary_elementwise(
            "min_elem",
            self,
            other,
            Real::min,
            |g, a, b| if a <= b { (g, 0.0) } else { (0.0, g) },
        )
    }

    pub fn max_elem(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "max_elem requires equal shapes");
        binary_elementwise(
            "max_elem",
            self,
            other,
            Real::max,
            |g, a, b| if a >= b { (g, 0.0) } else { (0.0, g) },
        )
    }

    pub fn neg(&self) -> Tensor {
        unary_elementwise("neg", self, |v| -v, |g, _, _| -g)
    }

    pub fn scale(&self, c: Real) -> Tensor {
        unary_elementwise("scale", self, move |v| v * c, move |g, _, _| g * c)
    }

    pub fn add_scalar(&self, c: Real) -> Tensor {
        unary_elementwise("add_scalar", self, move |v| v + c, |g, _, _| g)
    }

    pub fn relu(&self) -> Tensor {
        unary_elementwise(
            "relu",
            self,
            |v| if v > 0.0 { v } else { 0.0 },
            |g, x, _| if x > 0.0 { g } else { 0.0 },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        unary_elementwise(
            "sigmoid",
            self,
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            |g, _, y| g * y * (1.0 - y),
        )
    }

    pub fn exp(&self) -> Tensor {
        unary_elementwise("exp", self, Real::exp, |g, _, y| g * y)
    }

    pub fn ln(&self) -> Tensor {
        unary_elementwise("ln", self, Real::ln, |g, x, _| g / x)
    }

    pub fn abs(&self) -> Tensor {
        unary_elementwise(
            "abs",
            self,
            Real::abs,
            |g, x, _| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 },
        )
    }

    pub fn powf(&self, p: Real) -> Tensor {
        unary_elementwise(
            "powf",
            self,
            move |v| v.powf(p),
            move |g, x, _| g * p * x.powf(p - 1.0),
        )
    }

    /// Inverse sigmoid with clamping: ln(p) - ln(1 - p) on p in [eps, 1-eps].
    pub fn logit(&self, eps: Real) -> Tensor {
        let p = self.clamp(eps, 1.0 - eps);
        p.ln().sub(&p.neg().add_scalar(1.0).ln())
    }

    /// Elementwise clamp; gradient flows where the input lies inside
    /// `[lo, hi]` and is zero outside.
    pub fn clamp(&self, lo: Real, hi: Real) -> Tensor {
        unary_elementwise(
            "clamp",
            self,
            move |v| v.clamp(lo, hi),
            move |g, x, _| if x >= lo && x <= hi { g } else { 0.0 },
        )
    }

    // ── matmul ───────────────────────────────────────────────────────

    /// Batched matrix product `[.., m, k] × [.., k, n] -> [.., m, n]`.
    /// Leading batch extents must agree once right-aligned; the operand with
    /// fewer batch dims is tiled across the missing leading extents.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul requires rank >= 2, got {sa:?} x {sb:?}");
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(ka, kb, "matmul inner extents disagree: {sa:?} x {sb:?}");
        let k = ka;
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (long_b, short_b) = if ba.len() >= bb.len() { (ba, bb) } else { (bb, ba) };
        assert!(
            long_b.ends_with(short_b),
            "matmul batch extents not broadcastable: {sa:?} x {sb:?}"
        );
        let batch: usize = long_b.iter().product();
        let short_batch: usize = short_b.iter().product::<usize>().max(1);
        let a_batched = ba.len() >= bb.len();

        let ad = self.data();
        let bd = other.data();
        let mut data = vec![0.0; batch * m * n];
        for t in 0..batch {
            let (ta, tb) = if a_batched { (t, t % short_batch) } else { (t % short_batch, t) };
            mm_acc(
                &ad[ta * m * k..(ta + 1) * m * k],
                &bd[tb * k * n..(tb + 1) * k * n],
                m,
                k,
                n,
                &mut data[t * m * n..(t + 1) * m * n],
            );
        }
        drop(ad);
        drop(bd);
        let mut shape = long_b.to_vec();
        shape.push(m);
        shape.push(n);
        Tensor::from_op(
            "matmul",
            shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let ad = ctx.parents[0].data();
                let bd = ctx.parents[1].data();
                let g = ctx.out_grad;
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; bd.len()];
                for t in 0..batch {
                    let (ta, tb) = if a_batched { (t, t % short_batch) } else { (t % short_batch, t) };
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    mm_abt_acc(gt, &bd[tb * k * n..(tb + 1) * k * n], m, k, n, &mut ga[ta * m * k..(ta + 1) * m * k]);
                    mm_atb_acc(&ad[ta * m * k..(ta + 1) * m * k], gt, m, k, n, &mut gb[tb * k * n..(tb + 1) * k * n]);
                }
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    // ── shape ────────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape {:?} -> {:?} changes element count",
            self.shape(),
            shape
        );
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| vec![Some(ctx.out_grad.to_vec())]),
        )
    }

    /// Axis permutation; materializes the result.
    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let rank = self.rank();
        assert_eq!(perm.len(), rank, "permute arity mismatch");
        let mut seen = vec![false; rank];
        for &p in perm {
            assert!(p < rank && !seen[p], "invalid permutation {perm:?}");
            seen[p] = true;
        }
        let src_shape = self.shape().to_vec();
        let dst_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
        let data = permute_copy(&self.data(), &src_shape, perm);
        let perm_owned = perm.to_vec();
        Tensor::from_op(
            "permute",
            dst_shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut inverse = vec![0usize; perm_owned.len()];
                for (i, &p) in perm_owned.iter().enumerate() {
                    inverse[p] = i;
                }
                vec![Some(permute_copy(ctx.out_grad, &dst_shape, &inverse))]
            }),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Tensor {
        let rank = self.rank();
        assert!(rank >= 2);
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Contiguous sub-range along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let (outer, alen, inner) = axis_split(self.shape(), axis);
        assert!(start + len <= alen, "narrow range out of bounds");
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let total = outer * alen * inner;
        Tensor::from_op(
            "narrow",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut g = vec![0.0; total];
                for o in 0..outer {
                    let dst = o * alen * inner + start * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&ctx.out_grad[src..src + len * inner]);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Reverses order along one axis.
    pub fn flip(&self, axis: usize) -> Tensor {
        let (outer, alen, inner) = axis_split(self.shape(), axis);
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..alen {
                let s = (o * alen + i) * inner;
                let d = (o * alen + (alen - 1 - i)) * inner;
                data[d..d + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
        drop(src);
        Tensor::from_op(
            "flip",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut g = vec![0.0; ctx.out_grad.len()];
                for o in 0..outer {
                    for i in 0..alen {
                        let s = (o * alen + i) * inner;
                        let d = (o * alen + (alen - 1 - i)) * inner;
                        g[d..d + inner].copy_from_slice(&ctx.out_grad[s..s + inner]);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Concatenation along one axis.
    pub fn concat(axis: usize, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let rank = parts[0].rank();
        for p in parts {
            assert_eq!(p.rank(), rank, "concat rank mismatch");
            for a in 0..rank {
                if a != axis {
                    assert_eq!(p.shape()[a], parts[0].shape()[a], "concat off-axis extent mismatch");
                }
            }
        }
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let (outer, _, inner) = axis_split(&shape, axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_len: usize = lens.iter().sum();
        let mut data = vec![0.0; outer * total_len * inner];
        let mut offset = 0;
        for (p, &len) in parts.iter().zip(&lens) {
            let src = p.data();
            for o in 0..outer {
                let d = (o * total_len + offset) * inner;
                let s = o * len * inner;
                data[d..d + len * inner].copy_from_slice(&src[s..s + len * inner]);
            }
            offset += len;
        }
        Tensor::from_op(
            "concat",
            shape,
            data,
            parts.to_vec(),
            Box::new(move |ctx: &BackwardCtx| {
                let mut grads = Vec::with_capacity(lens.len());
                let mut offset = 0;
                for &len in &lens {
                    let mut g = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let s = (o * total_len + offset) * inner;
                        let d = o * len * inner;
                        g[d..d + len * inner].copy_from_slice(&ctx.out_grad[s..s + len * inner]);
                    }
                    grads.push(Some(g));
                    offset += len;
                }
                grads
            }),
        )
    }

    /// Embedding-style row gather along axis 0; indices may repeat.
    pub fn index_select(&self, indices: &[usize]) -> Tensor {
        assert!(self.rank() >= 1);
        let rows = self.shape()[0];
        let row_len: usize = self.shape()[1..].iter().product();
        let src = self.data();
        let mut data = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            assert!(i < rows, "index {i} out of range for {rows} rows");
            data.extend_from_slice(&src[i * row_len..(i + 1) * row_len]);
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let indices = indices.to_vec();
        let total = rows * row_len;
        Tensor::from_op(
            "index_select",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut g = vec![0.0; total];
                for (n, &i) in indices.iter().enumerate() {
                    let src = &ctx.out_grad[n * row_len..(n + 1) * row_len];
                    for (gv, sv) in g[i * row_len..(i + 1) * row_len].iter_mut().zip(src) {
                        *gv += *sv;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor {
        let total: Real = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum_all",
            vec![],
            vec![total],
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| vec![Some(vec![ctx.out_grad[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum_all().scale(1.0 / n as Real)
    }

    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let (outer, alen, inner) = axis_split(self.shape(), axis);
        let src = self.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..alen {
                let base = (o * alen + i) * inner;
                for j in 0..inner {
                    data[o * inner + j] += src[base + j];
                }
            }
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Tensor::from_op(
            "sum_axis",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut g = vec![0.0; outer * alen * inner];
                for o in 0..outer {
                    for i in 0..alen {
                        let base = (o * alen + i) * inner;
                        g[base..base + inner].copy_from_slice(&ctx.out_grad[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor {
        let alen = self.shape()[axis].max(1);
        self.sum_axis(axis).scale(1.0 / alen as Real)
    }

    // ── normalization & classification ───────────────────────────────

    /// Numerically stable softmax along `axis`; every slice sums to one.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let (outer, alen, inner) = axis_split(self.shape(), axis);
        assert!(alen >= 1, "softmax over empty axis");
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * alen + i) * inner + j;
                let mut mx = Real::NEG_INFINITY;
                for i in 0..alen {
                    mx = mx.max(src[idx(i)]);
                }
                let mut z = 0.0;
                for i in 0..alen {
                    let e = (src[idx(i)] - mx).exp();
                    data[idx(i)] = e;
                    z += e;
                }
                for i in 0..alen {
                    data[idx(i)] /= z;
                }
            }
        }
        drop(src);
        Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let y = ctx.out_data;
                let g = ctx.out_grad;
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * alen + i) * inner + j;
                        let mut dot = 0.0;
                        for i in 0..alen {
                            dot += g[idx(i)] * y[idx(i)];
                        }
                        for i in 0..alen {
                            dx[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// LayerNorm over the last axis with per-feature gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: Real) -> Tensor {
        let rank = self.rank();
        assert!(rank >= 1, "layer_norm requires rank >= 1");
        let d = self.shape()[rank - 1];
        assert!(d >= 1, "layer_norm over empty feature axis");
        assert_eq!(gain.shape(), &[d], "layer_norm gain shape");
        assert_eq!(bias.shape(), &[d], "layer_norm bias shape");
        let rows = self.numel() / d;
        let src = self.data();
        let gd = gain.data();
        let bd = bias.data();
        let mut data = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu: Real = row.iter().sum::<Real>() / d as Real;
            let var: Real = row.iter().map(|v| (v - mu) * (v - mu)).sum::<Real>() / d as Real;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mu) * rs;
                xhat[r * d + j] = xh;
                data[r * d + j] = gd[j] * xh + bd[j];
            }
        }
        drop(src);
        drop(gd);
        drop(bd);
        Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let gd = ctx.parents[1].data();
                let g = ctx.out_grad;
                let mut dx = vec![0.0; rows * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let gs = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for j in 0..d {
                        let gh = gs[j] * gd[j];
                        mean_gh += gh;
                        mean_ghx += gh * xh[j];
                        dgain[j] += gs[j] * xh[j];
                        dbias[j] += gs[j];
                    }
                    mean_gh /= d as Real;
                    mean_ghx /= d as Real;
                    for j in 0..d {
                        let gh = gs[j] * gd[j];
                        dx[r * d + j] = (gh - mean_gh - xh[j] * mean_ghx) * rstd[r];
                    }
                }
                vec![Some(dx), Some(dgain), Some(dbias)]
            }),
        )
    }

    /// BatchNorm over axis 0 of a `[n, d]` input. In train mode the batch
    /// statistics normalize the output and the running buffers are updated
    /// in place (momentum 0.1 convention: new = (1-m)*old + m*batch); in
    /// eval mode the running buffers normalize.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        gain: &Tensor,
        bias: &Tensor,
        running_mean: &Tensor,
        running_var: &Tensor,
        momentum: Real,
        eps: Real,
        train: bool,
    ) -> Tensor {
        assert_eq!(self.rank(), 2, "batch_norm expects [n, d]");
        let (n, d) = (self.shape()[0], self.shape()[1]);
        assert!(!train || n >= 1, "batch_norm: empty batch in train mode");
        assert_eq!(gain.shape(), &[d]);
        assert_eq!(bias.shape(), &[d]);
        assert_eq!(running_mean.shape(), &[d]);
        assert_eq!(running_var.shape(), &[d]);

        let src = self.data();
        let gd = gain.data();
        let bd = bias.data();
        let (mean, var): (Vec<Real>, Vec<Real>) = if train {
            let mut mean = vec![0.0; d];
            let mut var = vec![0.0; d];
            for r in 0..n {
                for j in 0..d {
                    mean[j] += src[r * d + j];
                }
            }
            for m in mean.iter_mut() {
                *m /= n as Real;
            }
            for r in 0..n {
                for j in 0..d {
                    let c = src[r * d + j] - mean[j];
                    var[j] += c * c;
                }
            }
            for v in var.iter_mut() {
                *v /= n as Real;
            }
            {
                let mut rm = running_mean.data_mut();
                let mut rv = running_var.data_mut();
                for j in 0..d {
                    rm[j] = (1.0 - momentum) * rm[j] + momentum * mean[j];
                    rv[j] = (1.0 - momentum) * rv[j] + momentum * var[j];
                }
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };

        let rstd: Vec<Real> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut data = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        for r in 0..n {
            for j in 0..d {
                let xh = (src[r * d + j] - mean[j]) * rstd[j];
                xhat[r * d + j] = xh;
                data[r * d + j] = gd[j] * xh + bd[j];
            }
        }
        drop(src);
        drop(gd);
        drop(bd);
        Tensor::from_op(
            "batch_norm",
            vec![n, d],
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let gd = ctx.parents[1].data();
                let g = ctx.out_grad;
                let mut dx = vec![0.0; n * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                if train {
                    for j in 0..d {
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for r in 0..n {
                            let gh = g[r * d + j] * gd[j];
                            mean_gh += gh;
                            mean_ghx += gh * xhat[r * d + j];
                            dgain[j] += g[r * d + j] * xhat[r * d + j];
                            dbias[j] += g[r * d + j];
                        }
                        mean_gh /= n as Real;
                        mean_ghx /= n as Real;
                        for r in 0..n {
                            let gh = g[r * d + j] * gd[j];
                            dx[r * d + j] = (gh - mean_gh - xhat[r * d + j] * mean_ghx) * rstd[j];
                        }
                    }
                } else {
                    for r in 0..n {
                        for j in 0..d {
                            dx[r * d + j] = g[r * d + j] * gd[j] * rstd[j];
                            dgain[j] += g[r * d + j] * xhat[r * d + j];
                            dbias[j] += g[r * d + j];
                        }
                    }
                }
                vec![Some(dx), Some(dgain), Some(dbias)]
            }),
        )
    }

    /// Per-row cross-entropy of `[rows, classes]` logits against integer
    /// targets, via a stable log-sum-exp. Returns `[rows]`.
    pub fn cross_entropy_rows(&self, targets: &[usize]) -> Tensor {
        assert_eq!(self.rank(), 2, "cross_entropy_rows expects [rows, classes]");
        let (rows, classes) = (self.shape()[0], self.shape()[1]);
        assert_eq!(targets.len(), rows, "one target per row");
        let src = self.data();
        let mut data = vec![0.0; rows];
        let mut probs = vec![0.0; rows * classes];
        for r in 0..rows {
            let t = targets[r];
            assert!(t < classes, "target class {t} out of range");
            let row = &src[r * classes..(r + 1) * classes];
            let mx = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * classes + j] = e;
                z += e;
            }
            for j in 0..classes {
                probs[r * classes + j] /= z;
            }
            data[r] = z.ln() + mx - row[t];
        }
        drop(src);
        let targets = targets.to_vec();
        Tensor::from_op(
            "cross_entropy_rows",
            vec![rows],
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut dx = vec![0.0; rows * classes];
                for r in 0..rows {
                    let g = ctx.out_grad[r];
                    for j in 0..classes {
                        let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                        dx[r * classes + j] = g * (probs[r * classes + j] - onehot);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }
}

fn permute_copy(src: &[Real], src_shape: &[usize], perm: &[usize]) -> Vec<Real> {
    let rank = src_shape.len();
    if rank == 0 {
        return src.to_vec();
    }
    let mut src_strides = vec![1usize; rank];
    for a in (0..rank - 1).rev() {
        src_strides[a] = src_strides[a + 1] * src_shape[a + 1];
    }
    let dst_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let dst_strides_in_src: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut out = vec![0.0; src.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut s = 0;
        for a in 0..rank {
            s += idx[a] * dst_strides_in_src[a];
        }
        *slot = src[s];
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < dst_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[Real], b: &[Real], tol: Real) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} !~ {b:?}");
        }
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(i2.matmul(&m).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]);
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]);
        assert_eq!(a.matmul(&b).to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_batch_broadcast() {
        // [2,2,2] x [2,2] tiles the rhs across the batch.
        let a = Tensor::from_vec(&[2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0]);
        let b = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let c = a.matmul(&b);
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    #[should_panic(expected = "inner extents disagree")]
    fn matmul_shape_mismatch_panics() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let x = Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]);
        let y = x.softmax(0);
        assert_close(&y.to_vec(), &[1.0 / 3.0; 3], 1e-12);

        let x = Tensor::from_vec(&[2], vec![1000.0, 0.0]);
        let y = x.softmax(0).to_vec();
        assert!((y[0] - 1.0).abs() < 1e-9 && y[1].abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(&[2, 3], vec![0.3, -2.0, 5.0, 1.0, 1.0, -9.0]);
        let y = x.softmax(1);
        let d = y.to_vec();
        for r in 0..2 {
            let s: Real = d[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(d[r * 3..(r + 1) * 3].iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let x = Tensor::from_vec(&[1, 4], vec![7.0; 4]);
        let gain = Tensor::from_vec(&[4], vec![1.0; 4]);
        let bias = Tensor::zeros(&[4]);
        let y = x.layer_norm(&gain, &bias, 1e-5);
        assert_close(&y.to_vec(), &[0.0; 4], 1e-12);
    }

    #[test]
    fn layer_norm_two_point_case() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 3.0]);
        let gain = Tensor::from_vec(&[2], vec![1.0, 1.0]);
        let bias = Tensor::zeros(&[2]);
        let y = x.layer_norm(&gain, &bias, 1e-5);
        assert_close(&y.to_vec(), &[-1.0, 1.0], 1e-5);
    }

    #[test]
    fn batch_norm_eval_identity() {
        let x = Tensor::from_vec(&[2, 2], vec![0.5, -1.0, 2.0, 0.25]);
        let gain = Tensor::from_vec(&[2], vec![1.0, 1.0]);
        let bias = Tensor::zeros(&[2]);
        let rm = Tensor::zeros(&[2]);
        let rv = Tensor::from_vec(&[2], vec![1.0, 1.0]);
        let y = x.batch_norm(&gain, &bias, &rm, &rv, 0.1, 1e-5, false);
        assert_close(&y.to_vec(), &x.to_vec(), 1e-5);
    }

    #[test]
    fn batch_norm_train_two_sample_case() {
        let x = Tensor::from_vec(&[2, 1], vec![-1.0, 1.0]);
        let gain = Tensor::from_vec(&[1], vec![1.0]);
        let bias = Tensor::zeros(&[1]);
        let rm = Tensor::zeros(&[1]);
        let rv = Tensor::from_vec(&[1], vec![1.0]);
        let y = x.batch_norm(&gain, &bias, &rm, &rv, 0.1, 1e-5, true);
        let e = 1.0 / (1.0 as Real + 1e-5).sqrt();
        assert_close(&y.to_vec(), &[-e, e], 1e-12);
        // Running stats moved toward the batch stats.
        assert_close(&rm.to_vec(), &[0.0], 1e-12);
        assert_close(&rv.to_vec(), &[0.9 * 1.0 + 0.1 * 1.0], 1e-12);
    }

    #[test]
    #[should_panic(expected = "empty batch")]
    fn batch_norm_empty_train_panics() {
        let x = Tensor::zeros(&[0, 2]);
        let gain = Tensor::from_vec(&[2], vec![1.0; 2]);
        let bias = Tensor::zeros(&[2]);
        let rm = Tensor::zeros(&[2]);
        let rv = Tensor::from_vec(&[2], vec![1.0; 2]);
        let _ = x.batch_norm(&gain, &bias, &rm, &rv, 0.1, 1e-5, true);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let x = Tensor::from_vec(&[1, 4], vec![0.0; 4]);
        let ce = x.cross_entropy_rows(&[2]);
        assert!((ce.item() - (4.0 as Real).ln()).abs() < 1e-12);
    }

    #[test]
    fn suffix_broadcast_add() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(&[3], vec![10.0, 20.0, 30.0]);
        let c = a.add(&b);
        assert_eq!(c.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        // Gradient of the tiled operand sums over the leading extents.
        let a = Tensor::param(&[2, 3], vec![1.0; 6]);
        let b = Tensor::param(&[3], vec![0.0; 3]);
        a.add(&b).sum_all().backward();
        assert_eq!(b.grad().unwrap(), vec![2.0; 3]);
    }

    #[test]
    #[should_panic(expected = "suffix-broadcast")]
    fn interior_broadcast_rejected() {
        let a = Tensor::zeros(&[2, 1, 3]);
        let b = Tensor::zeros(&[2, 4, 3]);
        let _ = a.add(&b);
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::from_vec(&[2, 3, 4], (0..24).map(|v| v as Real).collect());
        let y = x.permute(&[2, 0, 1]);
        assert_eq!(y.shape(), &[4, 2, 3]);
        let z = y.permute(&[1, 2, 0]);
        assert_eq!(z.to_vec(), x.to_vec());
    }

    #[test]
    fn flip_and_narrow() {
        let x = Tensor::from_vec(&[4, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(x.flip(0).to_vec(), vec![6.0, 7.0, 4.0, 5.0, 2.0, 3.0, 0.0, 1.0]);
        assert_eq!(x.narrow(0, 1, 2).to_vec(), vec![2.0, 3.0, 4.0, 5.0]);
        assert_eq!(x.narrow(1, 1, 1).to_vec(), vec![1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn index_select_gathers_and_scatters() {
        let x = Tensor::param(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.index_select(&[2, 0, 2]);
        assert_eq!(y.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        y.sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
