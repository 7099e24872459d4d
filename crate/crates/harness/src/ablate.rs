//! Ablation over reference-point resampling and SAC2 placement: five
//! configurations trained under identical seeds and schedules, reported as
//! a detection / end-to-end table in the standard row order.

use ftsp_core::model::Model;
use ftsp_core::synthdata::SceneSpec;
use ftsp_core::Real;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::eval::{evaluate, Lexicon, PrF};
use crate::train::train;

/// Rows in table order: all off; resampling only; resampling + SAC2 in the
/// recognition decoder; resampling + SAC2 in the location decoder; all on.
pub const ABLATION_ROWS: [(bool, bool, bool); 5] = [
    (false, false, false),
    (true, false, false),
    (true, false, true),
    (true, true, false),
    (true, true, true),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub resample: bool,
    pub sac2_location: bool,
    pub sac2_recognition: bool,
    /// Median-of-seeds detection metrics.
    pub detection: PrF,
    /// Median-of-seeds end-to-end h-mean (no lexicon).
    pub e2e_hmean: Real,
    pub per_seed_e2e: Vec<Real>,
}

fn median(values: &mut [Real]) -> Real {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

/// Runs the five-row ablation; every row trains one fresh model per seed
/// with identical data and schedule, then evaluates on the validation
/// split.
pub fn ablate(cfg: &RunConfig, scenes: &[SceneSpec], seeds: &[u64]) -> anyhow::Result<Vec<AblationRow>> {
    assert!(!seeds.is_empty());
    let train_count = if cfg.train.train_scenes == 0 {
        scenes.len()
    } else {
        cfg.train.train_scenes.min(scenes.len())
    };
    let val = &scenes[train_count..(train_count + cfg.train.val_scenes).min(scenes.len())];
    anyhow::ensure!(!val.is_empty(), "ablation needs a validation split (set val_scenes)");

    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for &(resample, ld, cd) in &ABLATION_ROWS {
        let mut run_cfg = cfg.clone();
        run_cfg.model.resample_points = resample;
        run_cfg.model.sac2_location = ld;
        run_cfg.model.sac2_recognition = cd;
        let mut e2e = Vec::with_capacity(seeds.len());
        let mut det_p = Vec::with_capacity(seeds.len());
        let mut det_r = Vec::with_capacity(seeds.len());
        let mut det_f = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut seeded = run_cfg.clone();
            seeded.train.seed = seed;
            let model = Model::seeded(seed, &seeded.model);
            let summary = train(&model, scenes, &seeded, None)?;
            anyhow::ensure!(summary.final_loss.is_finite(), "ablation run diverged");
            let report = evaluate(&model, val, &seeded.synth, &seeded.eval, Lexicon::None);
            e2e.push(report.e2e_none.f);
            det_p.push(report.detection.precision);
            det_r.push(report.detection.recall);
            det_f.push(report.detection.f);
        }
        rows.push(AblationRow {
            resample,
            sac2_location: ld,
            sac2_recognition: cd,
            detection: PrF {
                precision: median(&mut det_p),
                recall: median(&mut det_r),
                f: median(&mut det_f),
            },
            e2e_hmean: median(&mut e2e.clone()),
            per_seed_e2e: e2e,
        });
    }
    Ok(rows)
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str("resample  sac2-ld  sac2-cd  |      P      R      F  |  e2e-hmean\n");
    for r in rows {
        let mark = |b: bool| if b { "yes" } else { " no" };
        out.push_str(&format!(
            "     {}      {}      {}  |  {:.3}  {:.3}  {:.3}  |      {:.3}\n",
            mark(r.resample),
            mark(r.sac2_location),
            mark(r.sac2_recognition),
            r.detection.precision,
            r.detection.recall,
            r.detection.f,
            r.e2e_hmean
        ));
    }
    out
}
