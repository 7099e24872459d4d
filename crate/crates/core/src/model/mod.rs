//! End-to-end network: backbone, deformable encoder with proposal
//! selection, box-to-polygon query seeding, and the paired location /
//! recognition decoders.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::nn::{join, Module};
use crate::query::QueryBuilder;
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

mod backbone;
mod decoder;
mod encoder;

pub use backbone::{Backbone, BackboneConfig, BackboneKind};
pub use decoder::{LocationDecoder, RecognitionDecoder};
pub use encoder::{split_levels, Encoder, EncoderOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Model width.
    pub d: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Composite query count K.
    pub queries: usize,
    /// Control points per instance M (even).
    pub control_points: usize,
    /// Character slots per instance A.
    pub char_slots: usize,
    /// Alphabet size |V|; class |V| is the padding class.
    pub vocab: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub sampling_points: usize,
    pub conv_kernel: usize,
    pub backbone: BackboneConfig,
    /// SAC2 self-attention in the location decoder (vanilla factorized
    /// attention otherwise).
    pub sac2_location: bool,
    /// SAC2 self-attention in the recognition decoder.
    pub sac2_recognition: bool,
    /// Point-formulation queries seeded by box-to-polygon resampling; when
    /// false, box-formulation queries with a shared positional prior.
    pub resample_points: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            enc_layers: 2,
            dec_layers: 2,
            queries: 20,
            control_points: 8,
            char_slots: 8,
            vocab: 10,
            ffn_dim: 256,
            heads: 8,
            sampling_points: 4,
            conv_kernel: 3,
            backbone: BackboneConfig::default(),
            sac2_location: true,
            sac2_recognition: true,
            resample_points: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) {
        assert!(self.d >= 8 && self.d % 8 == 0, "model dim must be a multiple of 8");
        assert!(self.control_points >= 4 && self.control_points % 2 == 0, "M must be even, >= 4");
        assert!(
            self.enc_layers >= 1
                && self.dec_layers >= 1
                && self.queries >= 1
                && self.char_slots >= 1
                && self.vocab >= 1
        );
        self.attention().validate();
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            d: self.d,
            levels: self.backbone.stages,
            sampling_points: self.sampling_points,
            kernel: self.conv_kernel,
        }
    }
}

/// One decoder layer's heads: confidence `[K]`, control points `[K, M, 2]`,
/// character logits `[K, A, vocab+1]`.
pub struct LayerPrediction {
    pub confidence: Tensor,
    pub points: Tensor,
    pub char_logits: Tensor,
}

/// Full forward output: every decoder layer's heads (for auxiliary
/// supervision), the per-token encoder proposals, the selected proposal
/// indices, and the encoder attention records for export.
pub struct Predictions {
    pub layers: Vec<LayerPrediction>,
    /// `[T]` per-token objectness scores.
    pub proposal_scores: Tensor,
    /// `[T, 4]` per-token (cx, cy, w, h) boxes.
    pub proposal_boxes: Tensor,
    /// Top-K token indices, descending score.
    pub selected: Vec<usize>,
    /// Per encoder layer: (weights `[T, heads, L*P]`, offsets `[T, heads, L, P, 2]`).
    pub enc_attention: Vec<(Tensor, Tensor)>,
    /// Pyramid grid dims per level, for splatting heatmaps.
    pub level_dims: Vec<(usize, usize)>,
}

impl Predictions {
    pub fn final_layer(&self) -> &LayerPrediction {
        self.layers.last().expect("at least one decoder layer")
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub encoder: Encoder,
    pub query_builder: QueryBuilder,
    pub location_decoder: LocationDecoder,
    pub recognition_decoder: RecognitionDecoder,
}

impl Model {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Model {
        cfg.validate();
        let attn = cfg.attention();
        Model {
            cfg: cfg.clone(),
            backbone: Backbone::new(rng, &cfg.backbone, cfg.d),
            encoder: Encoder::new(rng, &attn, cfg.enc_layers, cfg.ffn_dim),
            query_builder: QueryBuilder::new(rng, cfg.d, cfg.control_points, cfg.char_slots),
            location_decoder: LocationDecoder::new(
                rng,
                &attn,
                cfg.dec_layers,
                cfg.ffn_dim,
                cfg.sac2_location,
            ),
            recognition_decoder: RecognitionDecoder::new(
                rng,
                &attn,
                cfg.dec_layers,
                cfg.ffn_dim,
                cfg.vocab,
                cfg.sac2_recognition,
            ),
        }
    }

    pub fn seeded(seed: u64, cfg: &ModelConfig) -> Model {
        Model::new(&mut ChaCha8Rng::seed_from_u64(seed), cfg)
    }

    /// image: `[H, W, 3]`, values in [0, 1]. Deterministic given weights and
    /// input; `train` enables batch-statistic normalization inside SAC2.
    pub fn forward(&self, image: &Tensor, train: bool) -> Predictions {
        let cfg = &self.cfg;
        let feats = self.backbone.forward(image);
        let level_dims: Vec<(usize, usize)> = feats.levels.iter().map(|l| (l.h, l.w)).collect();
        let enc = self.encoder.encode(&feats);
        let (scores, boxes) = self.encoder.propose(&enc.memory, &feats);
        let selected = Encoder::select_top(&scores.data(), cfg.queries);
        let top_boxes = boxes.index_select(&selected);

        let queries = if cfg.resample_points {
            self.query_builder.compose_resampled_queries_t(&top_boxes)
        } else {
            self.query_builder.compose_box_queries_t(&top_boxes)
        };

        let memory = split_levels(&enc.memory, &level_dims);
        let location = self.location_decoder.forward(
            &self.query_builder,
            &queries,
            &memory,
            cfg.resample_points,
            train,
        );
        let chars = self
            .recognition_decoder
            .forward(&self.query_builder, &queries, &memory, train);
        assert_eq!(location.len(), chars.len());
        let layers = location
            .into_iter()
            .zip(chars)
            .map(|((confidence, points), char_logits)| LayerPrediction {
                confidence,
                points,
                char_logits,
            })
            .collect();
        Predictions {
            layers,
            proposal_scores: scores,
            proposal_boxes: boxes,
            selected,
            enc_attention: enc.attention,
            level_dims,
        }
    }
}

impl Module for Model {
    fn visit_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.backbone.visit_tensors(&join(prefix, "backbone"), out);
        self.encoder.visit_tensors(&join(prefix, "encoder"), out);
        self.query_builder.visit_tensors(&join(prefix, "queries"), out);
        self.location_decoder.visit_tensors(&join(prefix, "tld"), out);
        self.recognition_decoder.visit_tensors(&join(prefix, "trd"), out);
    }
}

// ── checkpoints ──────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 8] = b"FTSPCKPT";

impl Model {
    /// Writes a textual config header followed by the named tensor table in
    /// the raw binary tensor format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        let cfg = serde_json::to_vec(&self.cfg).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        let tensors = self.named_tensors("model");
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, t) in tensors {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            t.write_blob(&mut w)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let cfg_len = u32::from_le_bytes(b4) as usize;
        let mut cfg_buf = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_buf)?;
        let cfg: ModelConfig =
            serde_json::from_slice(&cfg_buf).map_err(|e| Error::Config(e.to_string()))?;
        let model = Model::seeded(0, &cfg);
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        let slots = model.named_tensors("model");
        if count != slots.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} tensors, model expects {}",
                slots.len()
            )));
        }
        let by_name: std::collections::HashMap<String, Tensor> = slots.into_iter().collect();
        for _ in 0..count {
            r.read_exact(&mut b4)?;
            let name_len = u32::from_le_bytes(b4) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let blob = Tensor::read_blob(&mut r)?;
            let slot = by_name
                .get(&name)
                .ok_or_else(|| Error::Format(format!("unknown tensor `{name}`")))?;
            if slot.shape() != blob.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` shape {:?} != expected {:?}",
                    blob.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(&blob.data());
        }
        Ok(model)
    }

    /// Order-independent digest of all weights; used to assert that
    /// benchmarking and evaluation never mutate the model.
    pub fn weight_checksum(&self) -> u64 {
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in self.named_tensors("model") {
            for b in name.as_bytes() {
                acc = (acc ^ *b as u64).wrapping_mul(0x1000_0000_01b3);
            }
            for v in t.data().iter() {
                acc = (acc ^ (*v as f64).to_bits()).wrapping_mul(0x1000_0000_01b3);
            }
        }
        acc
    }
}

/// Decodes per-slot argmax classes, stripping everything at and after the
/// padding class behaves as "not a character": padding positions are
/// dropped wherever they appear.
pub fn decode_transcript(char_logits: &[Real], slots: usize, classes: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for a in 0..slots {
        let row = &char_logits[a * classes..(a + 1) * classes];
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best != classes - 1 {
            out.push(best);
        }
    }
    out
}
