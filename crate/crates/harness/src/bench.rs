//! Wall-clock throughput of eval-mode forwards, single-threaded, fixed
//! input; and the SAC2-vs-vanilla latency comparison at identical configs.

use std::time::Instant;

use ftsp_core::model::{Model, ModelConfig};
use ftsp_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const FPS_DISCLAIMER: &str =
    "absolute FPS depends on hardware and model scale and is not reproduced here; figures are relative";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub disclaimer: String,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Times eval-mode forwards after warmup. Weights are checksummed before
/// and after: timing must not mutate the model.
pub fn bench(model: &Model, image: &Tensor, warmup: usize, timed: usize) -> BenchReport {
    assert!(timed >= 1, "need at least one timed run");
    let checksum = model.weight_checksum();
    for _ in 0..warmup {
        let _ = model.forward(image, false);
    }
    let mut samples_ms = Vec::with_capacity(timed);
    for _ in 0..timed {
        let start = Instant::now();
        let _ = model.forward(image, false);
        samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    assert_eq!(model.weight_checksum(), checksum, "benchmark mutated weights");
    let mut sorted = samples_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    BenchReport {
        median_ms: percentile(&sorted, 0.5),
        p10_ms: percentile(&sorted, 0.1),
        p90_ms: percentile(&sorted, 0.9),
        samples_ms,
        disclaimer: FPS_DISCLAIMER.to_string(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeComparison {
    pub sac2: BenchReport,
    pub vanilla: BenchReport,
    /// (sac2 - vanilla) / vanilla median latency.
    pub overhead: f64,
}

/// Relative SAC2 overhead at an identical configuration (fresh models with
/// the same dims; weights are irrelevant to latency).
pub fn compare_modes(cfg: &ModelConfig, image: &Tensor, warmup: usize, timed: usize) -> ModeComparison {
    let sac2_cfg = ModelConfig {
        sac2_location: true,
        sac2_recognition: true,
        ..cfg.clone()
    };
    let vanilla_cfg = ModelConfig {
        sac2_location: false,
        sac2_recognition: false,
        ..cfg.clone()
    };
    let sac2 = bench(&Model::seeded(0, &sac2_cfg), image, warmup, timed);
    let vanilla = bench(&Model::seeded(0, &vanilla_cfg), image, warmup, timed);
    let overhead = (sac2.median_ms - vanilla.median_ms) / vanilla.median_ms;
    ModeComparison { sac2, vanilla, overhead }
}

pub fn random_image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[h, w, 3], (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ftsp_core::model::BackboneConfig;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d: 16,
            enc_layers: 1,
            dec_layers: 1,
            queries: 4,
            control_points: 4,
            char_slots: 3,
            vocab: 5,
            ffn_dim: 32,
            heads: 2,
            sampling_points: 2,
            conv_kernel: 3,
            backbone: BackboneConfig { heads: 2, ..Default::default() },
            sac2_location: true,
            sac2_recognition: true,
            resample_points: true,
        }
    }

    #[test]
    fn single_sample_report_is_that_sample() {
        let model = Model::seeded(1, &tiny_cfg());
        let img = random_image(0, 32, 32);
        let report = bench(&model, &img, 0, 1);
        assert_eq!(report.samples_ms.len(), 1);
        assert_eq!(report.median_ms, report.samples_ms[0]);
        assert_eq!(report.p10_ms, report.median_ms);
        assert!(!report.disclaimer.is_empty());
    }
}
