//! Deterministic training loop: seeded shuffle over the scene list,
//! optional augmentation, AdamW with step decay, a per-step loss CSV, and a
//! NaN abort that names the offending batch seed.

use std::panic::AssertUnwindSafe;
use std::path::Path;

use ftsp_core::criterion::{total_losses, LossWeights};
use ftsp_core::model::Model;
use ftsp_core::nn::Module;
use ftsp_core::synthdata::{augment, render_scene, AugmentConfig, SceneSpec, SynthConfig};
use ftsp_core::Real;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, TrainConfig};
use crate::eval::{evaluate, Lexicon};
use crate::optim::AdamW;

pub const LOSS_CSV_HEADER: &str = "iter,total,enc_cls,enc_coord,enc_giou,dec_cls,dec_coord,dec_char";
pub const CURVE_CSV_HEADER: &str = "iter,detection_f,e2e_hmean";

pub struct TrainSummary {
    /// Per-step loss rows, starting with the header.
    pub loss_csv: String,
    /// Periodic validation rows (empty unless eval_interval is set).
    pub curve_csv: String,
    pub first_loss: Real,
    pub final_loss: Real,
}

/// Deterministic scene order: a fresh seeded shuffle per epoch.
struct SceneSchedule {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl SceneSchedule {
    fn new(len: usize, seed: u64) -> SceneSchedule {
        let mut s = SceneSchedule {
            order: (0..len).collect(),
            cursor: 0,
            epoch: 0,
            seed,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (0x9e37 + self.epoch));
        self.order.shuffle(&mut rng);
    }

    fn next(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.cursor = 0;
            self.epoch += 1;
            self.shuffle();
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        i
    }
}

/// Trains in place. `scenes` is the full manifest; the first
/// `cfg.train.train_scenes` entries form the training split and the next
/// `cfg.train.val_scenes` the validation split for curve rows. With an
/// output directory, checkpoints land there and the CSVs stream to
/// `loss.csv` / `curve.csv` as training runs.
pub fn train(model: &Model, scenes: &[SceneSpec], cfg: &RunConfig, out_dir: Option<&Path>) -> anyhow::Result<TrainSummary> {
    cfg.train.validate()?;
    let tc = &cfg.train;
    let train_count = if tc.train_scenes == 0 { scenes.len() } else { tc.train_scenes.min(scenes.len()) };
    anyhow::ensure!(train_count >= 1, "no training scenes");
    let train_split = &scenes[..train_count];
    let val_split = &scenes[train_count..(train_count + tc.val_scenes).min(scenes.len())];

    let params: Vec<_> = model.parameters().into_iter().map(|(_, t)| t).collect();
    let mut opt = AdamW::new(params, tc.beta1, tc.beta2, tc.weight_decay);
    let mut schedule = SceneSchedule::new(train_count, tc.seed);

    let mut loss_csv = String::from(LOSS_CSV_HEADER);
    loss_csv.push('\n');
    let mut curve_csv = String::from(CURVE_CSV_HEADER);
    curve_csv.push('\n');
    let mut stream = CsvStream::open(out_dir)?;
    stream.loss(LOSS_CSV_HEADER)?;
    stream.curve(CURVE_CSV_HEADER)?;
    let mut first_loss = 0.0;
    let mut final_loss = 0.0;

    for iter in 0..tc.iterations {
        opt.zero_grads();
        let step = step_losses(model, train_split, &cfg.synth, &cfg.augment, &cfg.loss, tc, &mut schedule, iter);
        let (total, parts) = match step {
            Ok(v) => v,
            Err(diag) => {
                anyhow::bail!("non-finite loss at iteration {iter}: {diag}");
            }
        };
        if iter == 0 {
            first_loss = total;
        }
        final_loss = total;
        let row = format!(
            "{iter},{total},{},{},{},{},{},{}",
            parts.enc_cls, parts.enc_coord, parts.enc_giou, parts.dec_cls, parts.dec_coord, parts.dec_char
        );
        loss_csv.push_str(&row);
        loss_csv.push('\n');
        stream.loss(&row)?;
        if tc.grad_clip > 0.0 {
            opt.clip_grad_norm(tc.grad_clip);
        }
        opt.step(tc.lr_at(iter));

        if tc.eval_interval > 0 && !val_split.is_empty() && (iter + 1) % tc.eval_interval == 0 {
            let report = evaluate(model, val_split, &cfg.synth, &cfg.eval, Lexicon::None);
            let row = format!("{},{},{}", iter + 1, report.detection.f, report.e2e_none.f);
            curve_csv.push_str(&row);
            curve_csv.push('\n');
            stream.curve(&row)?;
        }
        if let Some(dir) = out_dir {
            if tc.checkpoint_interval > 0 && (iter + 1) % tc.checkpoint_interval == 0 {
                model.save(&dir.join(format!("model_{:06}.ckpt", iter + 1)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        model.save(&dir.join("model_final.ckpt"))?;
    }
    Ok(TrainSummary {
        loss_csv,
        curve_csv,
        first_loss,
        final_loss,
    })
}

/// Line-buffered CSV writers, active only when an output directory exists.
struct CsvStream {
    loss: Option<std::io::BufWriter<std::fs::File>>,
    curve: Option<std::io::BufWriter<std::fs::File>>,
}

impl CsvStream {
    fn open(dir: Option<&Path>) -> anyhow::Result<CsvStream> {
        let Some(dir) = dir else {
            return Ok(CsvStream { loss: None, curve: None });
        };
        std::fs::create_dir_all(dir)?;
        Ok(CsvStream {
            loss: Some(std::io::BufWriter::new(std::fs::File::create(dir.join("loss.csv"))?)),
            curve: Some(std::io::BufWriter::new(std::fs::File::create(dir.join("curve.csv"))?)),
        })
    }

    fn loss(&mut self, row: &str) -> anyhow::Result<()> {
        if let Some(w) = self.loss.as_mut() {
            use std::io::Write;
            writeln!(w, "{row}")?;
            w.flush()?;
        }
        Ok(())
    }

    fn curve(&mut self, row: &str) -> anyhow::Result<()> {
        if let Some(w) = self.curve.as_mut() {
            use std::io::Write;
            writeln!(w, "{row}")?;
            w.flush()?;
        }
        Ok(())
    }
}

/// One optimization step over `batch_size` scenes; returns the batch loss
/// and its (averaged) breakdown, or a diagnostic string naming the batch
/// seeds when any op produced a non-finite value.
#[allow(clippy::too_many_arguments)]
fn step_losses(
    model: &Model,
    split: &[SceneSpec],
    synth: &SynthConfig,
    aug: &AugmentConfig,
    weights: &LossWeights,
    tc: &TrainConfig,
    schedule: &mut SceneSchedule,
    iter: usize,
) -> Result<(Real, ftsp_core::criterion::LossBreakdown), String> {
    let mut batch_seeds = Vec::with_capacity(tc.batch_size);
    let mut picks = Vec::with_capacity(tc.batch_size);
    for _ in 0..tc.batch_size {
        let idx = schedule.next();
        batch_seeds.push(split[idx].seed);
        picks.push(idx);
    }
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| {
        let mut total_val = 0.0;
        let mut parts = ftsp_core::criterion::LossBreakdown::default();
        let scale = 1.0 / tc.batch_size as Real;
        for (b, &idx) in picks.iter().enumerate() {
            let scene = &split[idx];
            let (image, gt) = render_scene(scene, synth);
            let (image, gt) = if tc.augment {
                let aug_seed = tc.seed ^ (iter as u64) << 20 ^ (b as u64) << 8 ^ scene.seed;
                augment(&image, &gt, aug_seed, aug)
            } else {
                (image, gt)
            };
            let preds = model.forward(&image, true);
            let (loss, breakdown) = total_losses(&preds, &gt, weights);
            let scaled = loss.scale(scale);
            scaled.backward();
            total_val += scaled.item();
            parts.enc_cls += breakdown.enc_cls * scale;
            parts.enc_coord += breakdown.enc_coord * scale;
            parts.enc_giou += breakdown.enc_giou * scale;
            parts.dec_cls += breakdown.dec_cls * scale;
            parts.dec_coord += breakdown.dec_coord * scale;
            parts.dec_char += breakdown.dec_char * scale;
        }
        (total_val, parts)
    }));
    match outcome {
        Ok(v) if v.0.is_finite() => Ok(v),
        Ok(v) => Err(format!("loss {} from batch scene seeds {batch_seeds:?}", v.0)),
        Err(_) => Err(format!(
            "numeric panic while processing batch scene seeds {batch_seeds:?}"
        )),
    }
}
