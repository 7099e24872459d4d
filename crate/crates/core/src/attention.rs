//! Attention mechanisms: scaled dot-product multi-head attention, factorized
//! intra/inter-group attention, local circular convolution, the SAC2 fusion
//! block, and multi-scale deformable cross-attention with bilinear sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{join, BatchNorm, LayerNorm, Linear, Module};
use crate::tensor::{BackwardCtx, Tensor};
use crate::Real;

const TAU: Real = std::f64::consts::TAU as Real;

/// Shared attention hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d: usize,
    pub levels: usize,
    /// Sampling points per head per level in deformable attention.
    pub sampling_points: usize,
    /// Circular convolution kernel width (odd).
    pub kernel: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            heads: 8,
            d: 64,
            levels: 2,
            sampling_points: 4,
            kernel: 3,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) {
        assert!(self.d % self.heads == 0, "model dim must divide across heads");
        assert!(self.kernel % 2 == 1, "circular conv kernel must be odd");
        assert!(self.levels >= 1 && self.sampling_points >= 1);
    }
}

/// One pyramid of feature grids; level l+1 halves the resolution of level l
/// and all levels share the channel count.
pub struct MultiScaleFeatures {
    pub levels: Vec<FeatureLevel>,
}

pub struct FeatureLevel {
    pub h: usize,
    pub w: usize,
    /// `[h, w, d]`
    pub grid: Tensor,
}

impl FeatureLevel {
    pub fn new(h: usize, w: usize, grid: Tensor) -> FeatureLevel {
        assert_eq!(grid.rank(), 3);
        assert_eq!(&grid.shape()[..2], &[h, w]);
        assert!(h >= 1 && w >= 1);
        FeatureLevel { h, w, grid }
    }

    pub fn d(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    /// Normalized token-center coordinates, `[h*w, 2]` as (x, y).
    pub fn coords(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.h * self.w * 2);
        for i in 0..self.h {
            for j in 0..self.w {
                data.push((j as Real + 0.5) / self.w as Real);
                data.push((i as Real + 0.5) / self.h as Real);
            }
        }
        Tensor::from_vec(&[self.h * self.w, 2], data)
    }
}

impl MultiScaleFeatures {
    pub fn new(levels: Vec<FeatureLevel>) -> MultiScaleFeatures {
        assert!(!levels.is_empty());
        let d = levels[0].d();
        for pair in levels.windows(2) {
            assert_eq!(pair[1].d(), d, "channel count must be shared across levels");
            assert_eq!(pair[0].h, pair[1].h * 2, "level l+1 must halve level l's height");
            assert_eq!(pair[0].w, pair[1].w * 2, "level l+1 must halve level l's width");
        }
        MultiScaleFeatures { levels }
    }

    pub fn d(&self) -> usize {
        self.levels[0].d()
    }

    pub fn total_tokens(&self) -> usize {
        self.levels.iter().map(|l| l.tokens()).sum()
    }

    /// All levels' tokens concatenated in level order, `[total, d]`.
    pub fn flatten(&self) -> Tensor {
        let parts: Vec<Tensor> = self
            .levels
            .iter()
            .map(|l| l.grid.reshape(&[l.tokens(), l.d()]))
            .collect();
        Tensor::concat(0, &parts)
    }

    /// Token-center coordinates for the flattened token list, `[total, 2]`.
    pub fn flat_coords(&self) -> Tensor {
        let parts: Vec<Tensor> = self.levels.iter().map(|l| l.coords()).collect();
        Tensor::concat(0, &parts)
    }
}

// ── multi-head scaled dot-product attention ──────────────────────────

/// Multi-head attention over given q/k/v: per head softmax(q k^T / sqrt(d_h)) v,
/// heads concatenated, then output-projected. Input projections, where
/// wanted, belong to the caller (see [`ProjectedAttention`]).
pub struct MultiHeadAttention {
    pub heads: usize,
    pub out_proj: Linear,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut impl Rng, d: usize, heads: usize) -> MultiHeadAttention {
        assert!(d % heads == 0, "model dim must divide across heads");
        MultiHeadAttention {
            heads,
            out_proj: Linear::new(rng, d, d),
        }
    }

    /// q, k, v: `[.., n, d]` with identical shapes; leading axes are batch.
    pub fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        assert_eq!(q.shape(), k.shape(), "q/k shape mismatch");
        assert_eq!(q.shape(), v.shape(), "q/v shape mismatch");
        let rank = q.rank();
        assert!(rank >= 2);
        let d = q.shape()[rank - 1];
        let n = q.shape()[rank - 2];
        assert!(d % self.heads == 0);
        let dh = d / self.heads;
        let b = q.numel() / (n * d);
        let shape_out = q.shape().to_vec();

        let split = |t: &Tensor| {
            t.reshape(&[b, n, self.heads, dh]).permute(&[0, 2, 1, 3]) // [b, heads, n, dh]
        };
        let qs = split(q);
        let ks = split(k);
        let vs = split(v);
        let scores = qs
            .matmul(&ks.transpose_last2())
            .scale(1.0 / (dh as Real).sqrt());
        let weights = scores.softmax(3);
        let ctx = weights.matmul(&vs); // [b, heads, n, dh]
        let merged = ctx.permute(&[0, 2, 1, 3]).reshape(&shape_out);
        self.out_proj.forward(&merged)
    }
}

impl Module for MultiHeadAttention {
    fn visit_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.out_proj.visit_tensors(&join(prefix, "out_proj"), out);
    }
}

/// Multi-head attention with learned q/k/v input projections, used by the
/// factorized blocks. Keys carry positional parts; values never do.
pub struct ProjectedAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub attn: MultiHeadAttention,
}

impl ProjectedAttention {
    pub fn new(rng: &mut impl Rng, d: usize, heads: usize) -> ProjectedAttention {
        ProjectedAttention {
            wq: Linear::new(rng, d, d),
            wk: Linear::new(rng, d, d),
            wv: Linear::new(rng, d, d),
            attn: MultiHeadAttention::new(rng, d, heads),
        }
    }

    /// Attention within each group: batched over axis 0 of `[K, M, d]`,
    /// attending across the M sub-queries. Queries and keys see content +
    /// positional, values the content only.
    pub fn intra(&self, content: &Tensor, pos: &Tensor) -> Tensor {
        let qk = content.add(pos);
        self.attn.attend(
            &self.wq.forward(&qk),
            &self.wk.forward(&qk),
            &self.wv.forward(content),
        )
    }

    /// Attention across the K groups independently per sub-query index:
    /// transpose, attend, transpose back.
    pub fn inter(&self, content: &Tensor, pos: &Tensor) -> Tensor {
        let flip = |t: &Tensor| t.permute(&[1, 0, 2]);
        flip(&self.intra(&flip(content), &flip(pos)))
    }

    /// Plain self-attention of `[.., n, d]` without positional parts.
    pub fn forward_plain(&self, x: &Tensor) -> Tensor {
        self.attn.attend(
            &self.wq.forward(x),
            &self.wk.forward(x),
            &self.wv.forward(x),
        )
    }
}

impl Module for ProjectedAttention {
    fn visit_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.wq.visit_tensors(&join(prefix, "wq"), out);
        self.wk.visit_tensors(&join(prefix, "wk"), out);
        self.wv.visit_tensors(&join(prefix, "wv"), out);
        self.attn.visit_tensors(&join(prefix, "attn"), out);
    }
}

// ── circular convolution ──────────────────────────────────────────────

/// Convolution along the M axis of `[K, M, d_in]` with wrap-around padding,
/// treating the M positions as a closed contour:
/// `out[k,m,o] = sum_j w[j,:,o] . x[k, (m + j - kernel/2) mod M, :]`.
pub fn circular_conv1d(x: &Tensor, w: &Tensor) -> Tensor {
    assert_eq!(x.rank(), 3, "circular conv input is [K, M, d_in]");
    assert_eq!(w.rank(), 3, "circular conv weight is [kernel, d_in, d_out]");
    let (k, m, d_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kernel, wd_in, d_out) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(d_in, wd_in, "channel mismatch");
    assert!(kernel % 2 == 1, "kernel width must be odd");
    let kc = kernel / 2;

    let xd = x.data();
    let wd = w.data();
    let mut data = vec![0.0; k * m * d_out];
    for g in 0..k {
        for t in 0..m {
            let out_row = &mut data[(g * m + t) * d_out..(g * m + t + 1) * d_out];
            for j in 0..kernel {
                let src = (t + j + m - kc) % m;
                let x_row = &xd[(g * m + src) * d_in..(g * m + src + 1) * d_in];
                for (i, &xv) in x_row.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let w_row = &wd[(j * d_in + i) * d_out..(j * d_in + i + 1) * d_out];
                    for (o, wv) in out_row.iter_mut().zip(w_row) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
    drop(xd);
    drop(wd);
    Tensor::from_op(
        "circular_conv1d",
        vec![k, m, d_out],
        data,
        vec![x.clone(), w.clone()],
        Box::new(move |ctx: &BackwardCtx| {
            let xd = ctx.parents[0].data();
            let wd = ctx.parents[1].data();
            let g_out = ctx.out_grad;
            let mut dx = vec![0.0; k * m * d_in];
            let mut dw = vec![0.0; kernel * d_in * d_out];
            for g in 0..k {
                for t in 0..m {
                    let grow = &g_out[(g * m + t) * d_out..(g * m + t + 1) * d_out];
                    for j in 0..kernel {
                        let src = (t + j + m - kc) % m;
                        let x_row = &xd[(g * m + src) * d_in..(g * m + src + 1) * d_in];
                        let dx_row = &mut dx[(g * m + src) * d_in..(g * m + src + 1) * d_in];
                        for i in 0..d_in {
                            let w_row = &wd[(j * d_in + i) * d_out..(j * d_in + i + 1) * d_out];
                            let mut acc = 0.0;
                            for (gv, wv) in grow.iter().zip(w_row) {
                                acc += gv * wv;
                            }
                            dx_row[i] += acc;
                            let dw_row = &mut dw[(j * d_in + i) * d_out..(j * d_in + i + 1) * d_out];
                            for (dwv, gv) in dw_row.iter_mut().zip(grow) {
                                *dwv += x_row[i] * gv;
                            }
                        }
                    }
                }
            }
            vec![Some(dx), Some(dw)]
        }),
    )
}

/// Circular convolution layer with bias, full channel mixing.
pub struct CircularConv {
    pub w: Tensor,
    pub bias: Tensor,
}

impl CircularConv {
    pub fn new(rng: &mut impl Rng, kernel: usize, d: usize) -> CircularConv {
        let bound = (6.0 / (kernel * d + d) as Real).sqrt();
        let data = (0..kernel * d * d).map(|_| rng.gen_range(-bound..bound)).collect();
        CircularConv {
            w: Tensor::param(&[kernel, d, d], data),
            bias: Tensor::param(&[d], vec![0.0; d]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        circular_conv1d(x, &self.w).add(&self.bias)
    }
}

impl Module for CircularConv {
    fn visit_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "w"), self.w.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

// ── SAC2 block ────────────────────────────────────────────────────────

/// Local-enhancement branch of SAC2: circular conv, batch norm over the
/// flattened group x point positions, ReLU, then the content-shortcut
/// fusion `LN(FC(C + LN(Q_intra + Q_local)))`.
pub struct Sac2Branch {
    pub conv: CircularConv,
    pub bn: BatchNorm,
    pub fuse_fc: Linear,
    pub ln_inner: LayerNorm,
    pub ln_outer: LayerNorm,
}

impl Sac2Branch {
    pub fn new(rng: &mut impl Rng, kernel: usize, d: usize) -> Sac2Branch {
        Sac2Branch {
            conv: CircularConv::new(rng, kernel, d),
            bn: BatchNorm::new(d),
            fuse_fc: Linear::new(rng, d, d),
            ln_inner: LayerNorm::new(d),
            ln_outer: LayerNorm::new(d),
        }
    }

    /// Trainable parameters this branch adds over a vanilla block (the
    /// assertable SAC2-vs-vanilla difference).
    pub fn extra_parameter_count(kernel: usize, d: usize) -> usize {
        (kernel * d * d + d) + 2 * d + (d * d + d) + 2 * (2 * d)
    }
}

impl Module for Sac2Branch {
    fn visit_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv.visit_tensors(&join(prefix, "conv"), out);
        self.bn.visit_tensors(&join(prefix, "bn"), out);
        self.fuse_fc.visit_tensors(&join(prefix, "fuse_fc"), out);
        self.ln_inner.visit_tensors(&join(prefix, "ln_inner"), out);
        self.ln_outer.visit_tensors(&join(prefix, "ln_outer"), out);
    }
}

/// Decoder self-attention sub-block. SAC2 mode runs
/// `sa_inter(LN(FC(C + LN(sa_intra(Q) + ReLU(BN(CirConv(Q)))))))`;
/// vanilla factorized mode runs `sa_inter(sa_intra(Q))` with no local branch.
pub struct DecoderSelfAttention {
    pub intra: ProjectedAttention,
    pub inter: ProjectedAttention,
    pub branch: Option<Sac2Branch>,
}

impl DecoderSelfAttention {
    pub fn new(rng: &mut impl Rng, cfg: &AttentionConfig, sac2: bool) -> DecoderSelfAttention {
        DecoderSelfAttention {
            intra: ProjectedAttention::new(rng, cfg.d, cfg.heads),
            inter: ProjectedAttention::new(rng, cfg.d, cfg.heads),
            branch: sac2.then(|| Sac2Branch::new(rng, cfg.kernel, cfg.d)),
        }
    }

    /// content, pos: `[K, M, d]`; shared_content: `[M, d]` (the content
    /// queries acting as the fusion shortcut). `train` drives batch norm.
    pub fn forward(
        &self,
        content: &Tensor,
        pos: &Tensor,
        shared_content: &Tensor,
        train: bool,
    ) -> Tensor {
        let q_intra = self.intra.intra(content, pos);
        let q_fuse = match &self.branch {
            Some(b) => {
                let (k, m, d) = (content.shape()[0], content.shape()[1], content.shape()[2]);
                let q = content.add(pos);
                let local = b.conv.forward(&q).reshape(&[k * m, d]);
                let local = b.bn.forward(&local, train).relu().reshape(&[k, m, d]);
                let inner = b.ln_inner.forward(&q_intra.add(&local));
                b.ln_outer
                    .forward(&b.fuse_fc.forward(&inner.add(shared_content)))
            }
            None => q_intra,
        };
        self.inter.inter(&q_fuse, pos)
    }
}

impl Module for DecoderSelfAttention {
    fn visit_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.intra.visit_tensors(&join(prefix, "intra"), out);
        self.inter.visit_tensors(&join(prefix, "inter"), out);
        if let Some(b) = &self.branch {
            b.visit_tensors(&join(prefix, "sac2"), out);
        }
    }
}

// ── bilinear sampling & deformable attention ──────────────────────────

/// Neighbor geometry shared by the sampling forward and backward passes.
struct Cell {
    i0: isize,
    j0: isize,
    fu: Real,
    fv: Real,
}

fn cell_of(x: Real, y: Real, h: usize, w: usize) -> Cell {
    let u = x * w as Real - 0.5;
    let v = y * h as Real - 0.5;
    let j0 = u.floor();
    let i0 = v.floor();
    Cell {
        i0: i0 as isize,
        j0: j0 as isize,
        fu: u - j0,
        fv: v - i0,
    }
}

fn fetch(fd: &[Real], h: usize, w: usize, d: usize, i: isize, j: isize, c: usize) -> Real {
    if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
        0.0
    } else {
        fd[(i as usize * w + j as usize) * d + c]
    }
}

/// out += bilinear(features channels [c0, c0+dh) at normalized (x, y))
#[allow(clippy::too_many_arguments)]
fn sample_head(
    fd: &[Real],
    h: usize,
    w: usize,
    d: usize,
    c0: usize,
    dh: usize,
    x: Real,
    y: Real,
    out: &mut [Real],
) {
    let cell = cell_of(x, y, h, w);
    let wts = [
        (cell.i0, cell.j0, (1.0 - cell.fv) * (1.0 - cell.fu)),
        (cell.i0, cell.j0 + 1, (1.0 - cell.fv) * cell.fu),
        (cell.i0 + 1, cell.j0, cell.fv * (1.0 - cell.fu)),
        (cell.i0 + 1, cell.j0 + 1, cell.fv * cell.fu),
    ];
    for (i, j, wt) in wts {
        if wt == 0.0 || i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            continue;
        }
        let base = (i as usize * w + j as usize) * d + c0;
        for (o, f) in out.iter_mut().zip(&fd[base..base + dh]) {
            *o += wt * f;
        }
    }
}

/// Scatters the feature gradient (`g` spans the head's channel slice) and
/// returns the (x, y) location gradient.
#[allow(clippy::too_many_arguments)]
fn sample_head_backward(
    fd: &[Real],
    h: usize,
    w: usize,
    d: usize,
    c0: usize,
    x: Real,
    y: Real,
    g: &[Real],
    dfeat: &mut [Real],
) -> (Real, Real) {
    let cell = cell_of(x, y, h, w);
    let (i0, j0) = (cell.i0, cell.j0);
    let (i1, j1) = (i0 + 1, j0 + 1);
    let (fu, fv) = (cell.fu, cell.fv);
    let wts = [
        (i0, j0, (1.0 - fv) * (1.0 - fu)),
        (i0, j1, (1.0 - fv) * fu),
        (i1, j0, fv * (1.0 - fu)),
        (i1, j1, fv * fu),
    ];
    for (i, j, wt) in wts {
        if wt == 0.0 || i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            continue;
        }
        let base = (i as usize * w + j as usize) * d + c0;
        for (c, &gv) in g.iter().enumerate() {
            dfeat[base + c] += wt * gv;
        }
    }
    let mut du = 0.0;
    let mut dv = 0.0;
    for (c, &gv) in g.iter().enumerate() {
        let f00 = fetch(fd, h, w, d, i0, j0, c0 + c);
        let f01 = fetch(fd, h, w, d, i0, j1, c0 + c);
        let f10 = fetch(fd, h, w, d, i1, j0, c0 + c);
        let f11 = fetch(fd, h, w, d, i1, j1, c0 + c);
        du += gv * ((1.0 - fv) * (f01 - f00) + fv * (f11 - f10));
        dv += gv * ((1.0 - fu) * (f10 - f00) + fu * (f11 - f01));
    }
    (du * w as Real, dv * h as Real)
}

/// Bilinear interpolation of `[H, W, d]` features at normalized locations
/// `[.., 2]` (x, y): align-corners=false (pixel centers at (i+0.5)/H),
/// out-of-grid neighbors contribute zeros. Differentiable in features and
/// locations. Returns `[.., d]`.
pub fn bilinear_sample(features: &Tensor, locs: &Tensor) -> Tensor {
    assert_eq!(features.rank(), 3, "features are [H, W, d]");
    let (h, w, d) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    assert_eq!(locs.shape()[locs.rank() - 1], 2, "locations are (x, y) pairs");
    let n = locs.numel() / 2;
    let fd = features.data();
    let ld = locs.data();
    let mut data = vec![0.0; n * d];
    for q in 0..n {
        sample_head(&fd, h, w, d, 0, d, ld[2 * q], ld[2 * q + 1], &mut data[q * d..(q + 1) * d]);
    }
    drop(fd);
    drop(ld);
    let mut shape = locs.shape().to_vec();
    let rank = shape.len();
    shape[rank - 1] = d;
    Tensor::from_op(
        "bilinear_sample",
        shape,
        data,
        vec![features.clone(), locs.clone()],
        Box::new(move |ctx: &BackwardCtx| {
            let fd = ctx.parents[0].data();
            let ld = ctx.parents[1].data();
            let mut dfeat = vec![0.0; h * w * d];
            let mut dloc = vec![0.0; n * 2];
            for q in 0..n {
                let g = &ctx.out_grad[q * d..(q + 1) * d];
                let (dx, dy) =
                    sample_head_backward(&fd, h, w, d, 0, ld[2 * q], ld[2 * q + 1], g, &mut dfeat);
                dloc[2 * q] = dx;
                dloc[2 * q + 1] = dy;
            }
            vec![Some(dfeat), Some(dloc)]
        }),
    )
}

/// Fused deformable sampling: head h of query q samples level l at
/// `refs[q] + offsets[q,h,l,p]`, reading its own channel slice of that
/// level's value map. values: per-level `[H_l, W_l, d]`; refs `[n, 2]`;
/// offsets `[n, heads, L, P, 2]`. Returns `[n, heads, L, P, d/heads]`.
pub fn deform_sample(values: &[Tensor], refs: &Tensor, offsets: &Tensor) -> Tensor {
    let l_count = values.len();
    assert!(l_count >= 1);
    let d = values[0].shape()[2];
    assert_eq!(refs.rank(), 2);
    assert_eq!(refs.shape()[1], 2);
    let n = refs.shape()[0];
    assert_eq!(offsets.shape()[0], n);
    let heads = offsets.shape()[1];
    assert_eq!(offsets.shape()[2], l_count);
    let p_count = offsets.shape()[3];
    assert_eq!(offsets.shape()[4], 2);
    assert!(d % heads == 0);
    let dh = d / heads;

    let dims: Vec<(usize, usize)> = values.iter().map(|v| (v.shape()[0], v.shape()[1])).collect();
    let rd = refs.data();
    let od = offsets.data();
    let mut data = vec![0.0; n * heads * l_count * p_count * dh];
    {
        let vds: Vec<_> = values.iter().map(|v| v.data()).collect();
        let mut slot = 0;
        for q in 0..n {
            for hh in 0..heads {
                for l in 0..l_count {
                    let (gh, gw) = dims[l];
                    for p in 0..p_count {
                        let o = (((q * heads + hh) * l_count + l) * p_count + p) * 2;
                        let x = rd[2 * q] + od[o];
                        let y = rd[2 * q + 1] + od[o + 1];
                        sample_head(&vds[l], gh, gw, d, hh * dh, dh, x, y, &mut data[slot..slot + dh]);
                        slot += dh;
                    }
                }
            }
        }
    }
    drop(rd);
    drop(od);
    let mut parents: Vec<Tensor> = values.to_vec();
    parents.push(refs.clone());
    parents.push(offsets.clone());
    Tensor::from_op(
        "deform_sample",
        vec![n, heads, l_count, p_count, dh],
        data,
        parents,
        Box::new(move |ctx: &BackwardCtx| {
            let rd = ctx.parents[l_count].data();
            let od = ctx.parents[l_count + 1].data();
            let vds: Vec<_> = (0..l_count).map(|l| ctx.parents[l].data()).collect();
            let mut dvals: Vec<Vec<Real>> =
                dims.iter().map(|&(gh, gw)| vec![0.0; gh * gw * d]).collect();
            let mut drefs = vec![0.0; n * 2];
            let mut doffs = vec![0.0; od.len()];
            let mut slot = 0;
            for q in 0..n {
                for hh in 0..heads {
                    for l in 0..l_count {
                        let (gh, gw) = dims[l];
                        for p in 0..p_count {
                            let o = (((q * heads + hh) * l_count + l) * p_count + p) * 2;
                            let x = rd[2 * q] + od[o];
                            let y = rd[2 * q + 1] + od[o + 1];
                            let g = &ctx.out_grad[slot..slot + dh];
                            let (dx, dy) = sample_head_backward(
                                &vds[l], gh, gw, d, hh * dh, x, y, g, &mut dvals[l],
                            );
                            doffs[o] += dx;
                            doffs[o + 1] += dy;
                            drefs[2 * q] += dx;
                            drefs[2 * q + 1] += dy;
                            slot += dh;
                        }
                    }
                }
            }
            let mut grads: Vec<Option<Vec<Real>>> = dvals.into_iter().map(Some).collect();
            grads.push(Some(drefs));
            grads.push(Some(doffs));
            grads
        }),
    )
}

/// Multi-scale deformable cross-attention: a linear map of each query
/// predicts per-head L*P sampling offsets and logits; softmax over the L*P
/// slots per head weights the bilinear samples; heads are concatenated and
/// output-projected.
pub struct DeformableAttention {
    pub cfg: AttentionConfig,
    pub value_proj: Linear,
    pub offset_head: Linear,
    pub weight_head: Linear,
    pub out_proj: Linear,
}

impl DeformableAttention {
    pub fn new(rng: &mut impl Rng, cfg: &AttentionConfig) -> DeformableAttention {
        cfg.validate();
        let slots = cfg.heads * cfg.levels * cfg.sampling_points;
        // Offsets start as a small per-head star around the reference
        // (zero weights, direction bias only); attention logits start
        // uniform.
        let offset_head = Linear::zeros(cfg.d, slots * 2);
        {
            let mut bias = offset_head.b.data_mut();
            for h in 0..cfg.heads {
                let angle = TAU * h as Real / cfg.heads as Real;
                for l in 0..cfg.levels {
                    for p in 0..cfg.sampling_points {
                        let r = 0.02 * (p + 1) as Real;
                        let idx = ((h * cfg.levels + l) * cfg.sampling_points + p) * 2;
                        bias[idx] = r * angle.cos();
                        bias[idx + 1] = r * angle.sin();
                    }
                }
            }
        }
        DeformableAttention {
            cfg: *cfg,
            value_proj: Linear::new(rng, cfg.d, cfg.d),
            offset_head,
            weight_head: Linear::zeros(cfg.d, slots),
            out_proj: Linear::new(rng, cfg.d, cfg.d),
        }
    }

    /// queries `[n, d]`, refs `[n, 2]` normalized. Returns `[n, d]`.
    pub fn forward(&self, queries: &Tensor, refs: &Tensor, feats: &MultiScaleFeatures) -> Tensor {
        self.forward_detail(queries, refs, feats).0
    }

    /// Forward that also exposes the per-head attention weights
    /// `[n, heads, L*P]` and the raw offsets `[n, heads, L, P, 2]`.
    pub fn forward_detail(
        &self,
        queries: &Tensor,
        refs: &Tensor,
        feats: &MultiScaleFeatures,
    ) -> (Tensor, Tensor, Tensor) {
        let cfg = &self.cfg;
        assert_eq!(feats.levels.len(), cfg.levels, "level count mismatch");
        assert_eq!(queries.rank(), 2);
        let n = queries.shape()[0];
        let (heads, lp) = (cfg.heads, cfg.levels * cfg.sampling_points);
        let dh = cfg.d / heads;

        let values: Vec<Tensor> = feats
            .levels
            .iter()
            .map(|lvl| {
                self.value_proj
                    .forward(&lvl.grid.reshape(&[lvl.tokens(), cfg.d]))
                    .reshape(&[lvl.h, lvl.w, cfg.d])
            })
            .collect();
        let offsets = self
            .offset_head
            .forward(queries)
            .reshape(&[n, heads, cfg.levels, cfg.sampling_points, 2]);
        let weights = self
            .weight_head
            .forward(queries)
            .reshape(&[n, heads, lp])
            .softmax(2);
        let sampled = deform_sample(&values, refs, &offsets).reshape(&[n * heads, lp, dh]);
        let mixed = weights
            .reshape(&[n * heads, 1, lp])
            .matmul(&sampled)
            .reshape(&[n, cfg.d]);
        (self.out_proj.forward(&mixed), weights, offsets)
    }
}

impl Module for DeformableAttention {
    fn visit_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.value_proj.visit_tensors(&join(prefix, "value_proj"), out);
        self.offset_head.visit_tensors(&join(prefix, "offset_head"), out);
        self.weight_head.visit_tensors(&join(prefix, "weight_head"), out);
        self.out_proj.visit_tensors(&join(prefix, "out_proj"), out);
    }
}
