//! Detection and end-to-end evaluation: confidence-thresholded predictions
//! greedily matched one-to-one to ground truth at polygon IoU, exact
//! transcript matching for end-to-end, and optional full-lexicon correction
//! by edit distance.

use ftsp_core::geometry::{polygon_iou, ControlPolygon};
use ftsp_core::model::{decode_transcript, Model};
use ftsp_core::synthdata::{render_scene, SceneSpec, SynthConfig};
use ftsp_core::Real;
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lexicon {
    /// Raw decoding, no correction.
    None,
    /// Replace each decoded string by the nearest word (edit distance, ties
    /// lexicographic) from the full vocabulary of the evaluated split.
    Full,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrF {
    pub precision: Real,
    pub recall: Real,
    /// Harmonic mean of precision and recall (h-mean).
    pub f: Real,
}

fn prf(tp: usize, predictions: usize, ground_truths: usize) -> PrF {
    let precision = if predictions == 0 { 0.0 } else { tp as Real / predictions as Real };
    let recall = if ground_truths == 0 { 0.0 } else { tp as Real / ground_truths as Real };
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    PrF { precision, recall, f }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneDiag {
    pub scene_seed: u64,
    pub ground_truths: usize,
    pub detections: usize,
    pub detection_tp: usize,
    pub e2e_tp: usize,
    pub e2e_tp_full: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub detection: PrF,
    pub e2e_none: PrF,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e2e_full: Option<PrF>,
    pub scenes: Vec<SceneDiag>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Levenshtein distance over class-id sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Nearest lexicon word by edit distance; ties break lexicographically.
pub fn correct_with_lexicon<'a>(decoded: &'a [usize], lexicon: &'a [Vec<usize>]) -> &'a [usize] {
    let mut best: Option<(&[usize], usize)> = None;
    for word in lexicon {
        let d = edit_distance(decoded, word);
        let better = match best {
            None => true,
            Some((bw, bd)) => d < bd || (d == bd && word.as_slice() < bw),
        };
        if better {
            best = Some((word, d));
        }
    }
    best.map_or(decoded, |(w, _)| w)
}

/// One scene's decoded predictions, independent of where they came from.
pub struct ScenePredictions {
    pub confidence: Vec<Real>,
    pub polygons: Vec<ControlPolygon>,
    pub transcripts: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SceneCounts {
    pub ground_truths: usize,
    pub detections: usize,
    pub detection_tp: usize,
    pub e2e_tp: usize,
    pub e2e_tp_full: usize,
}

/// Greedy one-to-one scoring of a single scene: predictions above the
/// confidence threshold, in descending confidence order, each claim the
/// best unmatched ground truth at IoU above the threshold. End-to-end true
/// positives additionally require the transcript to match exactly (after
/// lexicon correction for the `full` counter).
pub fn score_scene(
    preds: &ScenePredictions,
    gt: &ftsp_core::synthdata::GroundTruth,
    cfg: &EvalConfig,
    lexicon_words: Option<&[Vec<usize>]>,
) -> SceneCounts {
    let k = preds.confidence.len();
    let mut order: Vec<usize> = (0..k).filter(|&q| preds.confidence[q] >= cfg.confidence).collect();
    order.sort_by(|&x, &y| {
        preds.confidence[y]
            .partial_cmp(&preds.confidence[x])
            .unwrap()
            .then(x.cmp(&y))
    });

    let mut counts = SceneCounts {
        ground_truths: gt.instances.len(),
        detections: order.len(),
        ..Default::default()
    };
    let mut gt_taken = vec![false; gt.instances.len()];
    for &q in &order {
        let mut best: Option<(usize, Real)> = None;
        for (g, inst) in gt.instances.iter().enumerate() {
            if gt_taken[g] {
                continue;
            }
            let iou = polygon_iou(&preds.polygons[q], &inst.polygon);
            if iou >= cfg.iou && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            gt_taken[g] = true;
            counts.detection_tp += 1;
            let decoded = &preds.transcripts[q];
            if *decoded == gt.instances[g].transcript.chars {
                counts.e2e_tp += 1;
            }
            if let Some(words) = lexicon_words {
                let corrected = correct_with_lexicon(decoded, words);
                if corrected == gt.instances[g].transcript.chars.as_slice() {
                    counts.e2e_tp_full += 1;
                }
            }
        }
    }
    counts
}

/// Decodes a forward pass's final layer into scene predictions.
pub fn decode_predictions(preds: &ftsp_core::model::Predictions) -> ScenePredictions {
    let last = preds.final_layer();
    let conf = last.confidence.to_vec();
    let points = last.points.to_vec();
    let chars = last.char_logits.to_vec();
    let (k, m) = (last.points.shape()[0], last.points.shape()[1]);
    let (a, classes) = (last.char_logits.shape()[1], last.char_logits.shape()[2]);
    let polygons = (0..k)
        .map(|q| {
            let pts = points[q * m * 2..(q + 1) * m * 2]
                .chunks_exact(2)
                .map(|c| (c[0], c[1]))
                .collect();
            ControlPolygon::new(pts)
        })
        .collect();
    let transcripts = (0..k)
        .map(|q| decode_transcript(&chars[q * a * classes..(q + 1) * a * classes], a, classes))
        .collect();
    ScenePredictions {
        confidence: conf,
        polygons,
        transcripts,
    }
}

/// Evaluates the model on rendered scenes; see [`score_scene`] for the
/// per-scene protocol.
pub fn evaluate(
    model: &Model,
    scenes: &[SceneSpec],
    synth: &SynthConfig,
    cfg: &EvalConfig,
    lexicon: Lexicon,
) -> EvalReport {
    let mut lexicon_words: Vec<Vec<usize>> = Vec::new();
    if lexicon == Lexicon::Full {
        for scene in scenes {
            let (_, gt) = render_scene(scene, synth);
            for inst in &gt.instances {
                if !lexicon_words.contains(&inst.transcript.chars) {
                    lexicon_words.push(inst.transcript.chars.clone());
                }
            }
        }
        lexicon_words.sort();
    }

    let mut diags = Vec::with_capacity(scenes.len());
    let (mut tp_det, mut tp_e2e, mut tp_full, mut n_det, mut n_gt) = (0, 0, 0, 0, 0);
    for scene in scenes {
        let (image, gt) = render_scene(scene, synth);
        let decoded = decode_predictions(&model.forward(&image, false));
        let counts = score_scene(
            &decoded,
            &gt,
            cfg,
            (lexicon == Lexicon::Full).then_some(lexicon_words.as_slice()),
        );
        tp_det += counts.detection_tp;
        tp_e2e += counts.e2e_tp;
        tp_full += counts.e2e_tp_full;
        n_det += counts.detections;
        n_gt += counts.ground_truths;
        diags.push(SceneDiag {
            scene_seed: scene.seed,
            ground_truths: counts.ground_truths,
            detections: counts.detections,
            detection_tp: counts.detection_tp,
            e2e_tp: counts.e2e_tp,
            e2e_tp_full: counts.e2e_tp_full,
        });
    }
    EvalReport {
        detection: prf(tp_det, n_det, n_gt),
        e2e_none: prf(tp_e2e, n_det, n_gt),
        e2e_full: (lexicon == Lexicon::Full).then(|| prf(tp_full, n_det, n_gt)),
        scenes: diags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_distance_basics() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[], &[1, 2]), 2);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(edit_distance(&[5], &[6]), 1);
    }

    #[test]
    fn lexicon_ties_break_lexicographically() {
        let lex = vec![vec![2, 2], vec![1, 1]];
        // Distance 1 to both candidates.
        let got = correct_with_lexicon(&[1, 2], &lex);
        assert_eq!(got, &[1, 1]);
    }

    #[test]
    fn prf_identities_hold() {
        let r = prf(3, 4, 6);
        assert!((r.f - 2.0 * r.precision * r.recall / (r.precision + r.recall)).abs() < 1e-12);
        let zero = prf(0, 0, 5);
        assert_eq!((zero.precision, zero.recall, zero.f), (0.0, 0.0, 0.0));
    }

    use ftsp_core::geometry::{sample_reference_points, AnchorBox, Transcript};
    use ftsp_core::synthdata::{GroundTruth, GtInstance};

    fn square_gt(bx: AnchorBox, chars: Vec<usize>) -> GroundTruth {
        let polygon = sample_reference_points(&bx, 4);
        GroundTruth {
            instances: vec![GtInstance {
                bbox: polygon.bbox(),
                transcript: Transcript::new(chars, 9),
                polygon,
            }],
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt = square_gt(AnchorBox::new(0.5, 0.5, 0.4, 0.2), vec![1, 2]);
        let preds = ScenePredictions {
            confidence: vec![0.95],
            polygons: vec![gt.instances[0].polygon.clone()],
            transcripts: vec![vec![1, 2]],
        };
        let c = score_scene(&preds, &gt, &EvalConfig::default(), None);
        assert_eq!((c.detection_tp, c.e2e_tp, c.detections, c.ground_truths), (1, 1, 1, 1));
    }

    #[test]
    fn one_to_one_matching_counts_duplicates_as_false_positives() {
        let gt = square_gt(AnchorBox::new(0.5, 0.5, 0.4, 0.2), vec![3]);
        // Two near-identical detections over one instance: one TP, one FP.
        let poly = gt.instances[0].polygon.clone();
        let preds = ScenePredictions {
            confidence: vec![0.9, 0.8],
            polygons: vec![poly.clone(), poly],
            transcripts: vec![vec![3], vec![3]],
        };
        let c = score_scene(&preds, &gt, &EvalConfig::default(), None);
        assert_eq!(c.detections, 2);
        assert_eq!(c.detection_tp, 1);
    }

    #[test]
    fn no_predictions_above_threshold_scores_zero() {
        let gt = square_gt(AnchorBox::new(0.5, 0.5, 0.4, 0.2), vec![3]);
        let preds = ScenePredictions {
            confidence: vec![0.2],
            polygons: vec![gt.instances[0].polygon.clone()],
            transcripts: vec![vec![3]],
        };
        let c = score_scene(&preds, &gt, &EvalConfig::default(), None);
        assert_eq!((c.detections, c.detection_tp), (0, 0));
    }

    #[test]
    fn lexicon_correction_never_reduces_e2e() {
        // Wrong decode one edit away from the true word: the full-lexicon
        // counter fixes it, the raw counter does not.
        let gt = square_gt(AnchorBox::new(0.5, 0.5, 0.4, 0.2), vec![1, 2, 3]);
        let preds = ScenePredictions {
            confidence: vec![0.9],
            polygons: vec![gt.instances[0].polygon.clone()],
            transcripts: vec![vec![1, 2, 4]],
        };
        let words = vec![vec![1, 2, 3]];
        let c = score_scene(&preds, &gt, &EvalConfig::default(), Some(&words));
        assert_eq!(c.e2e_tp, 0);
        assert_eq!(c.e2e_tp_full, 1);
    }
}
