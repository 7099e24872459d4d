//! Deformable transformer encoder over flattened multi-scale tokens, plus
//! the shared proposal head that scores every token and regresses a box
//! around its grid location. The top-K tokens by score seed the decoders.

use rand::Rng;

use crate::attention::{
    AttentionConfig, DeformableAttention, FeatureLevel, MultiScaleFeatures,
};
use crate::nn::{join, LayerNorm, Linear, Mlp, Module};
use crate::query::sine_encode;
use crate::tensor::Tensor;
use crate::Real;

struct EncoderLayer {
    attn: DeformableAttention,
    norm_attn: LayerNorm,
    ffn: Mlp,
    norm_ffn: LayerNorm,
}

impl EncoderLayer {
    fn new(rng: &mut impl Rng, cfg: &AttentionConfig, ffn_dim: usize) -> EncoderLayer {
        EncoderLayer {
            attn: DeformableAttention::new(rng, cfg),
            norm_attn: LayerNorm::new(cfg.d),
            ffn: Mlp::new(rng, cfg.d, ffn_dim, cfg.d),
            norm_ffn: LayerNorm::new(cfg.d),
        }
    }
}

/// Encoder output: refined memory tokens plus per-layer attention records
/// (weights `[T, heads, L*P]` and offsets `[T, heads, L, P, 2]`) kept for
/// inspection and heatmap export.
pub struct EncoderOutput {
    pub memory: Tensor,
    pub attention: Vec<(Tensor, Tensor)>,
}

pub struct Encoder {
    cfg: AttentionConfig,
    layers: Vec<EncoderLayer>,
    level_embed: Tensor,
    score_head: Linear,
    box_head: Linear,
}

impl Encoder {
    pub fn new(rng: &mut impl Rng, cfg: &AttentionConfig, layers: usize, ffn_dim: usize) -> Encoder {
        let scale = 1.0 / (cfg.d as Real).sqrt();
        // Objectness starts at a low prior so the first steps are not spent
        // crushing hundreds of background scores.
        let score_head = Linear::new(rng, cfg.d, 1);
        score_head.b.data_mut()[0] = crate::nn::NEGATIVE_PRIOR_BIAS;
        Encoder {
            cfg: *cfg,
            layers: (0..layers).map(|_| EncoderLayer::new(rng, cfg, ffn_dim)).collect(),
            level_embed: crate::nn::uniform(rng, &[cfg.levels, cfg.d], -scale, scale),
            score_head,
            box_head: Linear::zeros(cfg.d, 4),
        }
    }

    /// Per-token positional embedding: sine encoding of the token center
    /// plus a learned per-level embedding.
    fn positional(&self, feats: &MultiScaleFeatures) -> Tensor {
        let coords = feats.flat_coords();
        let mut level_ids = Vec::new();
        for (l, level) in feats.levels.iter().enumerate() {
            level_ids.extend(std::iter::repeat(l).take(level.tokens()));
        }
        sine_encode(&coords, self.cfg.d).add(&self.level_embed.index_select(&level_ids))
    }

    /// Runs the deformable self-attention stack over the flattened pyramid.
    pub fn encode(&self, feats: &MultiScaleFeatures) -> EncoderOutput {
        let dims: Vec<(usize, usize)> = feats.levels.iter().map(|l| (l.h, l.w)).collect();
        let pos = self.positional(feats);
        let refs = feats.flat_coords();
        let mut tokens = feats.flatten();
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let pyramid = split_levels(&tokens, &dims);
            let (attended, weights, offsets) =
                layer.attn.forward_detail(&tokens.add(&pos), &refs, &pyramid);
            attention.push((weights, offsets));
            tokens = layer.norm_attn.forward(&tokens.add(&attended));
            tokens = layer.norm_ffn.forward(&tokens.add(&layer.ffn.forward(&tokens)));
        }
        EncoderOutput { memory: tokens, attention }
    }

    /// Scores every memory token and regresses a box around its location in
    /// inverse-sigmoid space. Returns (`[T]` scores in (0,1), `[T, 4]`
    /// (cx, cy, w, h) boxes in (0,1)).
    pub fn propose(&self, memory: &Tensor, feats: &MultiScaleFeatures) -> (Tensor, Tensor) {
        let t = memory.shape()[0];
        let scores = self.score_head.forward(memory).sigmoid().reshape(&[t]);
        let mut base = Vec::with_capacity(t * 4);
        for (l, level) in feats.levels.iter().enumerate() {
            let (bw, bh) = base_extent(l);
            for i in 0..level.h {
                for j in 0..level.w {
                    base.push(inv_sig((j as Real + 0.5) / level.w as Real));
                    base.push(inv_sig((i as Real + 0.5) / level.h as Real));
                    base.push(inv_sig(bw));
                    base.push(inv_sig(bh));
                }
            }
        }
        let base = Tensor::from_vec(&[t, 4], base);
        let boxes = self.box_head.forward(memory).add(&base).sigmoid();
        (scores, boxes)
    }

    /// Top-k token indices by descending score, ties broken by token index.
    pub fn select_top(scores: &[Real], k: usize) -> Vec<usize> {
        assert!(
            scores.len() >= k,
            "token count {} below proposal count {k}",
            scores.len()
        );
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }
}

/// Base proposal extents per pyramid level, in normalized units. Text
/// instances run wide and thin, so the prior does too; coarser levels
/// propose larger boxes.
fn base_extent(level: usize) -> (Real, Real) {
    let s = (1 << level) as Real;
    (0.3 * s, 0.12 * s)
}

fn inv_sig(p: Real) -> Real {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Rebuilds per-level grids from flattened tokens.
pub fn split_levels(tokens: &Tensor, dims: &[(usize, usize)]) -> MultiScaleFeatures {
    let d = tokens.shape()[1];
    let mut levels = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for &(h, w) in dims {
        let grid = tokens.narrow(0, offset, h * w).reshape(&[h, w, d]);
        levels.push(FeatureLevel::new(h, w, grid));
        offset += h * w;
    }
    MultiScaleFeatures::new(levels)
}

impl Module for Encoder {
    fn visit_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layer{i}"));
            layer.attn.visit_tensors(&join(&p, "attn"), out);
            layer.norm_attn.visit_tensors(&join(&p, "norm_attn"), out);
            layer.ffn.visit_tensors(&join(&p, "ffn"), out);
            layer.norm_ffn.visit_tensors(&join(&p, "norm_ffn"), out);
        }
        out.push((join(prefix, "level_embed"), self.level_embed.clone()));
        self.score_head.visit_tensors(&join(prefix, "score_head"), out);
        self.box_head.visit_tensors(&join(prefix, "box_head"), out);
    }
}
