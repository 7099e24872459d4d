//! Text location decoder (confidence + control points, refined layer by
//! layer) and text recognition decoder (character logits), sharing the same
//! layer structure: factorized/SAC2 self-attention, deformable
//! cross-attention at the current reference points, and a feed-forward
//! block, each with residual + layer norm.

use rand::Rng;

use crate::attention::{
    AttentionConfig, DecoderSelfAttention, DeformableAttention, MultiScaleFeatures,
};
use crate::nn::{join, LayerNorm, Linear, Mlp, Module};
use crate::query::{CompositeQuerySet, QueryBuilder};
use crate::tensor::Tensor;

pub(crate) struct DecoderLayer {
    self_attn: DecoderSelfAttention,
    norm_sa: LayerNorm,
    cross: DeformableAttention,
    norm_ca: LayerNorm,
    ffn: Mlp,
    norm_ffn: LayerNorm,
}

impl DecoderLayer {
    fn new(rng: &mut impl Rng, cfg: &AttentionConfig, ffn_dim: usize, sac2: bool) -> DecoderLayer {
        DecoderLayer {
            self_attn: DecoderSelfAttention::new(rng, cfg, sac2),
            norm_sa: LayerNorm::new(cfg.d),
            cross: DeformableAttention::new(rng, cfg),
            norm_ca: LayerNorm::new(cfg.d),
            ffn: Mlp::new(rng, cfg.d, ffn_dim, cfg.d),
            norm_ffn: LayerNorm::new(cfg.d),
        }
    }

    /// content, pos: `[K, n, d]`; shared: `[n, d]`; refs: `[K, n, 2]`.
    fn forward(
        &self,
        content: &Tensor,
        pos: &Tensor,
        shared: &Tensor,
        refs: &Tensor,
        memory: &MultiScaleFeatures,
        train: bool,
    ) -> Tensor {
        let (k, n, d) = (content.shape()[0], content.shape()[1], content.shape()[2]);
        let sa = self.self_attn.forward(content, pos, shared, train);
        let content = self.norm_sa.forward(&content.add(&sa));
        let flat_q = content.add(pos).reshape(&[k * n, d]);
        let flat_refs = refs.reshape(&[k * n, 2]);
        let ca = self.cross.forward(&flat_q, &flat_refs, memory).reshape(&[k, n, d]);
        let content = self.norm_ca.forward(&content.add(&ca));
        self.norm_ffn.forward(&content.add(&self.ffn.forward(&content)))
    }

    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.self_attn.visit_tensors(&join(prefix, "self_attn"), out);
        self.norm_sa.visit_tensors(&join(prefix, "norm_sa"), out);
        self.cross.visit_tensors(&join(prefix, "cross"), out);
        self.norm_ca.visit_tensors(&join(prefix, "norm_ca"), out);
        self.ffn.visit_tensors(&join(prefix, "ffn"), out);
        self.norm_ffn.visit_tensors(&join(prefix, "norm_ffn"), out);
    }
}

/// Per-layer location outputs: instance confidence `[K]` and control points
/// `[K, M, 2]` after that layer's inverse-sigmoid refinement.
pub struct LocationDecoder {
    layers: Vec<DecoderLayer>,
    class_head: Linear,
    delta_head: Linear,
}

impl LocationDecoder {
    pub fn new(
        rng: &mut impl Rng,
        cfg: &AttentionConfig,
        dec_layers: usize,
        ffn_dim: usize,
        sac2: bool,
    ) -> LocationDecoder {
        // Confidence starts at a low prior (most queries are background).
        let class_head = Linear::new(rng, cfg.d, 1);
        class_head.b.data_mut()[0] = crate::nn::NEGATIVE_PRIOR_BIAS;
        LocationDecoder {
            layers: (0..dec_layers)
                .map(|_| DecoderLayer::new(rng, cfg, ffn_dim, sac2))
                .collect(),
            class_head,
            // Zero-init so refinement starts as a no-op.
            delta_head: Linear::zeros(cfg.d, 2),
        }
    }

    /// `dynamic` re-encodes the positional prior from the current reference
    /// points each layer (point formulation); otherwise the positional part
    /// stays fixed (box formulation).
    pub fn forward(
        &self,
        qb: &QueryBuilder,
        queries: &CompositeQuerySet,
        memory: &MultiScaleFeatures,
        dynamic: bool,
        train: bool,
    ) -> Vec<(Tensor, Tensor)> {
        let k = queries.groups();
        let (m, d) = (qb.m, qb.d);
        let mut content = Tensor::zeros(&[k, m, d]).add(&queries.point_content);
        let mut refs = queries.point_refs.clone();
        let mut outputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let pos = if dynamic { qb.phi(&refs) } else { queries.point_pos.clone() };
            content = layer.forward(&content, &pos, &queries.point_content, &refs, memory, train);
            let delta = self.delta_head.forward(&content);
            refs = refs.logit(1e-6).add(&delta).sigmoid();
            let conf = self
                .class_head
                .forward(&content.mean_axis(1))
                .sigmoid()
                .reshape(&[k]);
            outputs.push((conf, refs.clone()));
        }
        outputs
    }
}

impl Module for LocationDecoder {
    fn visit_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layer{i}")), out);
        }
        self.class_head.visit_tensors(&join(prefix, "class_head"), out);
        self.delta_head.visit_tensors(&join(prefix, "delta_head"), out);
    }
}

/// Per-layer character logits `[K, A, vocab+1]` for the character queries
/// paired (by instance index) with the location decoder's groups.
pub struct RecognitionDecoder {
    layers: Vec<DecoderLayer>,
    char_head: Linear,
}

impl RecognitionDecoder {
    pub fn new(
        rng: &mut impl Rng,
        cfg: &AttentionConfig,
        dec_layers: usize,
        ffn_dim: usize,
        vocab: usize,
        sac2: bool,
    ) -> RecognitionDecoder {
        RecognitionDecoder {
            layers: (0..dec_layers)
                .map(|_| DecoderLayer::new(rng, cfg, ffn_dim, sac2))
                .collect(),
            char_head: Linear::new(rng, cfg.d, vocab + 1),
        }
    }

    pub fn forward(
        &self,
        qb: &QueryBuilder,
        queries: &CompositeQuerySet,
        memory: &MultiScaleFeatures,
        train: bool,
    ) -> Vec<Tensor> {
        let k = queries.groups();
        let (a, d) = (qb.a, qb.d);
        let mut content = Tensor::zeros(&[k, a, d]).add(&queries.char_content);
        let refs = &queries.char_refs;
        let mut outputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            content = layer.forward(&content, &queries.char_pos, &queries.char_content, refs, memory, train);
            outputs.push(self.char_head.forward(&content));
        }
        outputs
    }
}

impl Module for RecognitionDecoder {
    fn visit_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layer{i}")), out);
        }
        self.char_head.visit_tensors(&join(prefix, "char_head"), out);
    }
}
