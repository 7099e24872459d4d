//! Hierarchical feature backbone: patch embedding followed by stages of
//! windowed multi-head self-attention with alternating shifted windows and
//! 2x patch merging. Emits one feature level per stage. A strided-conv
//! variant (same pyramid, no attention) is available as a faster fallback.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{FeatureLevel, MultiScaleFeatures, ProjectedAttention};
use crate::nn::{join, LayerNorm, Linear, Mlp, Module};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Windowed,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub patch: usize,
    pub stages: usize,
    pub window: usize,
    pub blocks_per_stage: usize,
    pub heads: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Windowed,
            patch: 4,
            stages: 2,
            window: 4,
            blocks_per_stage: 2,
            heads: 4,
        }
    }
}

impl BackboneConfig {
    /// Input dims must be divisible by this.
    pub fn divisor(&self) -> usize {
        self.patch << (self.stages - 1)
    }
}

/// One pre-norm windowed attention block; `shift` cyclically rotates the
/// grid by half a window before partitioning so successive blocks mix
/// across window boundaries.
struct WindowBlock {
    norm1: LayerNorm,
    attn: ProjectedAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    shift: bool,
}

impl WindowBlock {
    fn new(rng: &mut impl Rng, d: usize, heads: usize, shift: bool) -> WindowBlock {
        WindowBlock {
            norm1: LayerNorm::new(d),
            attn: ProjectedAttention::new(rng, d, heads),
            norm2: LayerNorm::new(d),
            mlp: Mlp::new(rng, d, 4 * d, d),
        shift,
        }
    }

    /// x: `[h, w, d]` grid.
    fn forward(&self, x: &Tensor, window: usize) -> Tensor {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let ws = window.min(h).min(w);
        assert!(
            h % ws == 0 && w % ws == 0,
            "grid {h}x{w} not divisible by window {ws}"
        );
        let shift = if self.shift { ws / 2 } else { 0 };

        let normed = self.norm1.forward(x);
        let shifted = if shift > 0 { roll_grid(&normed, shift, shift) } else { normed };
        let windows = partition_windows(&shifted, ws); // [nw, ws*ws, d]
        let attended = self.attn.forward_plain(&windows);
        let merged = merge_windows(&attended, h, w, ws); // [h, w, d]
        let unshifted = if shift > 0 {
            roll_grid(&merged, (h - shift) % h, (w - shift) % w)
        } else {
            merged
        };
        let x = x.add(&unshifted);
        x.add(&self.mlp.forward(&self.norm2.forward(&x)))
    }
}

/// Cyclic rotation of a `[h, w, d]` grid by `si` rows and `sj` columns.
fn roll_grid(x: &Tensor, si: usize, sj: usize) -> Tensor {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let d = x.shape()[2];
    let mut indices = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            indices.push(((i + si) % h) * w + (j + sj) % w);
        }
    }
    x.reshape(&[h * w, d]).index_select(&indices).reshape(&[h, w, d])
}

/// `[h, w, d] -> [num_windows, ws*ws, d]`
fn partition_windows(x: &Tensor, ws: usize) -> Tensor {
    let (h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    x.reshape(&[h / ws, ws, w / ws, ws, d])
        .permute(&[0, 2, 1, 3, 4])
        .reshape(&[(h / ws) * (w / ws), ws * ws, d])
}

fn merge_windows(x: &Tensor, h: usize, w: usize, ws: usize) -> Tensor {
    let d = x.shape()[2];
    x.reshape(&[h / ws, w / ws, ws, ws, d])
        .permute(&[0, 2, 1, 3, 4])
        .reshape(&[h, w, d])
}

impl Module for WindowBlock {
    fn visit_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm1.visit_tensors(&join(prefix, "norm1"), out);
        self.attn.visit_tensors(&join(prefix, "attn"), out);
        self.norm2.visit_tensors(&join(prefix, "norm2"), out);
        self.mlp.visit_tensors(&join(prefix, "mlp"), out);
    }
}

/// 2x2 neighborhood concatenation followed by a linear back to d channels.
struct PatchMerge {
    reduce: Linear,
}

impl PatchMerge {
    fn forward(&self, x: &Tensor) -> Tensor {
        let (h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "grid {h}x{w} not mergeable");
        let grouped = x
            .reshape(&[h / 2, 2, w / 2, 2, d])
            .permute(&[0, 2, 1, 3, 4])
            .reshape(&[(h / 2) * (w / 2), 4 * d]);
        self.reduce.forward(&grouped).reshape(&[h / 2, w / 2, d])
    }
}

struct Stage {
    blocks: Vec<WindowBlock>,
    relu_only: bool,
}

pub struct Backbone {
    pub cfg: BackboneConfig,
    pub d: usize,
    patch_embed: Linear,
    stages: Vec<Stage>,
    merges: Vec<PatchMerge>,
}

impl Backbone {
    pub fn new(rng: &mut impl Rng, cfg: &BackboneConfig, d: usize) -> Backbone {
        assert!(cfg.stages >= 1 && cfg.patch >= 1);
        let mut stages = Vec::new();
        for _ in 0..cfg.stages {
            let blocks = match cfg.kind {
                BackboneKind::Windowed => (0..cfg.blocks_per_stage)
                    .map(|b| WindowBlock::new(rng, d, cfg.heads, b % 2 == 1))
                    .collect(),
                BackboneKind::Conv => Vec::new(),
            };
            stages.push(Stage {
                blocks,
                relu_only: cfg.kind == BackboneKind::Conv,
            });
        }
        let merges = (1..cfg.stages)
            .map(|_| PatchMerge { reduce: Linear::new(rng, 4 * d, d) })
            .collect();
        Backbone {
            cfg: *cfg,
            d,
            patch_embed: Linear::new(rng, cfg.patch * cfg.patch * 3, d),
            stages,
            merges,
        }
    }

    /// image: `[H, W, 3]` with H, W divisible by patch * 2^(stages-1).
    pub fn forward(&self, image: &Tensor) -> MultiScaleFeatures {
        assert_eq!(image.rank(), 3);
        assert_eq!(image.shape()[2], 3, "expected an RGB image");
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let div = self.cfg.divisor();
        assert!(
            h % div == 0 && w % div == 0,
            "image {h}x{w} not divisible by backbone requirement {div}"
        );
        let p = self.cfg.patch;
        let (gh, gw) = (h / p, w / p);
        let patches = image
            .reshape(&[gh, p, gw, p, 3])
            .permute(&[0, 2, 1, 3, 4])
            .reshape(&[gh * gw, p * p * 3]);
        let mut grid = self.patch_embed.forward(&patches).reshape(&[gh, gw, self.d]);

        let mut levels = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                grid = self.merges[s - 1].forward(&grid);
            }
            if stage.relu_only {
                grid = grid.relu();
            } else {
                for block in &stage.blocks {
                    grid = block.forward(&grid, self.cfg.window);
                }
            }
            levels.push(FeatureLevel::new(grid.shape()[0], grid.shape()[1], grid.clone()));
        }
        MultiScaleFeatures::new(levels)
    }
}

impl Module for Backbone {
    fn visit_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.patch_embed.visit_tensors(&join(prefix, "patch_embed"), out);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.blocks.iter().enumerate() {
                block.visit_tensors(&join(prefix, &format!("stage{s}.block{b}")), out);
            }
        }
        for (s, merge) in self.merges.iter().enumerate() {
            merge.reduce.visit_tensors(&join(prefix, &format!("merge{s}.reduce")), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Real;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pyramid_shapes_follow_downsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&mut rng, &BackboneConfig::default(), 16);
        let img = Tensor::zeros(&[32, 32, 3]);
        let feats = bb.forward(&img);
        assert_eq!(feats.levels.len(), 2);
        assert_eq!((feats.levels[0].h, feats.levels[0].w), (8, 8));
        assert_eq!((feats.levels[1].h, feats.levels[1].w), (4, 4));
    }

    #[test]
    #[should_panic(expected = "not divisible by backbone requirement")]
    fn indivisible_image_panics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&mut rng, &BackboneConfig::default(), 16);
        bb.forward(&Tensor::zeros(&[30, 32, 3]));
    }

    #[test]
    fn constant_image_gives_spatially_constant_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::new(&mut rng, &BackboneConfig::default(), 16);
        let img = Tensor::full(&[32, 32, 3], 0.4);
        let feats = bb.forward(&img);
        for level in &feats.levels {
            let d = level.d();
            let data = level.grid.to_vec();
            let first = &data[..d];
            for tok in data.chunks_exact(d) {
                for c in 0..d {
                    assert!((tok[c] - first[c]).abs() < 1e-5 as Real);
                }
            }
        }
    }

    #[test]
    fn conv_fallback_runs_and_matches_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = BackboneConfig { kind: BackboneKind::Conv, ..Default::default() };
        let bb = Backbone::new(&mut rng, &cfg, 16);
        let feats = bb.forward(&Tensor::zeros(&[32, 32, 3]));
        assert_eq!(feats.levels.len(), 2);
        assert_eq!((feats.levels[0].h, feats.levels[1].h), (8, 4));
    }
}
