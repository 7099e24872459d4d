//! Set-prediction supervision: exact bipartite matching between ground-truth
//! instances and query slots, focal classification, control-point L1,
//! character cross-entropy, GIoU, and the encoder/decoder aggregates.

use serde::{Deserialize, Serialize};

use crate::model::Predictions;
use crate::synthdata::GroundTruth;
use crate::tensor::Tensor;
use crate::Real;

const CONF_CLAMP: Real = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: Real,
    pub coord: Real,
    pub chr: Real,
    pub giou: Real,
    pub focal_alpha: Real,
    pub focal_gamma: Real,
    /// Adds the character cross-entropy to the matching cost (off by
    /// default: matching is on location + class only).
    pub match_char_cost: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            coord: 5.0,
            chr: 4.0,
            giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            match_char_cost: false,
        }
    }
}

/// Injective assignment of ground-truth instances to query indices:
/// `assigned[i]` is the query matched to ground-truth instance i.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub assigned: Vec<usize>,
    pub total_cost: Real,
}

impl MatchResult {
    pub fn len(&self) -> usize {
        self.assigned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assigned.is_empty()
    }

    /// Query indices not matched to any instance, ascending.
    pub fn unmatched(&self, queries: usize) -> Vec<usize> {
        let mut taken = vec![false; queries];
        for &q in &self.assigned {
            taken[q] = true;
        }
        (0..queries).filter(|&q| !taken[q]).collect()
    }
}

/// Exact minimum-cost assignment of `rows <= cols` via shortest augmenting
/// paths with potentials (O(rows^2 * cols)). Returns the matched column per
/// row.
pub fn hungarian(cost: &[Vec<Real>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "assignment needs at least as many columns as rows");
    let inf = Real::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut matched_row = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![usize::MAX; n];
    for j in 1..=m {
        let r = matched_row[j];
        if r != 0 {
            out[r - 1] = j - 1;
        }
    }
    assert!(out.iter().all(|&c| c != usize::MAX));
    out
}

fn focal_pos_cost(b: Real, alpha: Real, gamma: Real) -> Real {
    let b = b.clamp(CONF_CLAMP, 1.0 - CONF_CLAMP);
    alpha * (1.0 - b).powf(gamma) * (-b.ln())
}

fn focal_neg_cost(b: Real, alpha: Real, gamma: Real) -> Real {
    let b = b.clamp(CONF_CLAMP, 1.0 - CONF_CLAMP);
    (1.0 - alpha) * b.powf(gamma) * (-(1.0 - b).ln())
}

/// Matching cost of assigning ground truth `i` to query `j`:
/// class term (positive-focal minus negative-focal, so confident wrong
/// queries pay) plus the coordinate L1; optionally the character CE.
#[allow(clippy::too_many_arguments)]
fn pair_cost(
    conf: Real,
    pred_coords: &[Real],
    gt_coords: &[Real],
    char_ce: Option<Real>,
    w: &LossWeights,
) -> Real {
    let cls = focal_pos_cost(conf, w.focal_alpha, w.focal_gamma)
        - focal_neg_cost(conf, w.focal_alpha, w.focal_gamma);
    let coord: Real = pred_coords
        .iter()
        .zip(gt_coords)
        .map(|(p, g)| (p - g).abs())
        .sum();
    w.cls * cls + w.coord * coord + char_ce.map_or(0.0, |c| w.chr * c)
}

/// Optimal assignment of ground-truth instances to decoder queries from the
/// confidence vector and control-point predictions of one layer.
pub fn match_instances(
    conf: &[Real],
    points: &[Real],
    m: usize,
    gt: &GroundTruth,
    char_logits: Option<(&[Real], usize, usize)>,
    w: &LossWeights,
) -> MatchResult {
    let k = conf.len();
    let g = gt.instances.len();
    assert!(g <= k, "ground-truth instances ({g}) exceed query count ({k})");
    if g == 0 {
        return MatchResult { assigned: Vec::new(), total_cost: 0.0 };
    }
    let mut cost = vec![vec![0.0; k]; g];
    for (i, inst) in gt.instances.iter().enumerate() {
        assert_eq!(inst.polygon.len(), m, "ground-truth polygon must have M points");
        let gt_coords: Vec<Real> = inst.polygon.points.iter().flat_map(|&(x, y)| [x, y]).collect();
        for j in 0..k {
            let pred_coords = &points[j * m * 2..(j + 1) * m * 2];
            let char_ce = match (&char_logits, w.match_char_cost) {
                (Some((logits, a, classes)), true) => {
                    let padded = inst.transcript.padded(*a, classes - 1);
                    let mut ce = 0.0;
                    for (slot, &target) in padded.iter().enumerate() {
                        let row = &logits[(j * a + slot) * classes..(j * a + slot + 1) * classes];
                        ce += row_cross_entropy(row, target);
                    }
                    Some(ce)
                }
                _ => None,
            };
            cost[i][j] = pair_cost(conf[j], pred_coords, &gt_coords, char_ce, w);
        }
    }
    let assigned = hungarian(&cost);
    let total_cost = assigned.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    MatchResult { assigned, total_cost }
}

/// Box-level matching for the encoder proposals: class term plus L1 over
/// the four box parameters.
pub fn match_boxes(scores: &[Real], boxes: &[Real], gt: &GroundTruth, w: &LossWeights) -> MatchResult {
    let t = scores.len();
    let g = gt.instances.len();
    assert!(g <= t, "ground-truth instances ({g}) exceed token count ({t})");
    if g == 0 {
        return MatchResult { assigned: Vec::new(), total_cost: 0.0 };
    }
    let mut cost = vec![vec![0.0; t]; g];
    for (i, inst) in gt.instances.iter().enumerate() {
        let b = inst.bbox;
        let gt_coords = [b.cx, b.cy, b.w, b.h];
        for j in 0..t {
            cost[i][j] = pair_cost(scores[j], &boxes[j * 4..(j + 1) * 4], &gt_coords, None, w);
        }
    }
    let assigned = hungarian(&cost);
    let total_cost = assigned.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    MatchResult { assigned, total_cost }
}

fn row_cross_entropy(row: &[Real], target: usize) -> Real {
    let mx = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let z: Real = row.iter().map(|&v| (v - mx).exp()).sum();
    z.ln() + mx - row[target]
}

// ── differentiable loss terms ────────────────────────────────────────

/// Focal classification loss over all K confidences: matched queries pay
/// the positive term, unmatched the negative term; normalized by
/// max(1, matched).
pub fn focal_loss(conf: &Tensor, mat: &MatchResult, alpha: Real, gamma: Real) -> Tensor {
    assert_eq!(conf.rank(), 1);
    let k = conf.shape()[0];
    let b = conf.clamp(CONF_CLAMP, 1.0 - CONF_CLAMP);
    let norm = 1.0 / mat.len().max(1) as Real;
    let pos = {
        let bm = b.index_select(&mat.assigned);
        bm.neg()
            .add_scalar(1.0)
            .powf(gamma)
            .mul(&bm.ln())
            .scale(-alpha)
            .sum_all()
    };
    let neg = {
        let bu = b.index_select(&mat.unmatched(k));
        bu.powf(gamma)
            .mul(&bu.neg().add_scalar(1.0).ln())
            .scale(-(1.0 - alpha))
            .sum_all()
    };
    pos.add(&neg).scale(norm)
}

/// L1 control-point loss over matched instances, normalized by matched
/// count. `gt_points` holds the instances' polygons in match order.
pub fn coord_loss(points: &Tensor, mat: &MatchResult, gt: &GroundTruth) -> Tensor {
    assert_eq!(points.rank(), 3);
    let m = points.shape()[1];
    if mat.is_empty() {
        return Tensor::scalar(0.0);
    }
    let sel = points.index_select(&mat.assigned);
    let mut gt_data = Vec::with_capacity(mat.len() * m * 2);
    for inst in &gt.instances {
        for &(x, y) in &inst.polygon.points {
            gt_data.push(x);
            gt_data.push(y);
        }
    }
    let gt_t = Tensor::from_vec(&[mat.len(), m, 2], gt_data);
    sel.sub(&gt_t).abs().sum_all().scale(1.0 / mat.len() as Real)
}

/// Character cross-entropy over the A slots of each matched instance
/// (padding class supervised like any other), normalized by matched count.
pub fn char_loss(char_logits: &Tensor, mat: &MatchResult, gt: &GroundTruth) -> Tensor {
    assert_eq!(char_logits.rank(), 3);
    let (a, classes) = (char_logits.shape()[1], char_logits.shape()[2]);
    if mat.is_empty() {
        return Tensor::scalar(0.0);
    }
    let sel = char_logits
        .index_select(&mat.assigned)
        .reshape(&[mat.len() * a, classes]);
    let mut targets = Vec::with_capacity(mat.len() * a);
    for inst in &gt.instances {
        targets.extend(inst.transcript.padded(a, classes - 1));
    }
    sel.cross_entropy_rows(&targets)
        .sum_all()
        .scale(1.0 / mat.len() as Real)
}

/// Sum of (1 - GIoU) over matched boxes, normalized by matched count.
pub fn giou_loss(boxes: &Tensor, mat: &MatchResult, gt: &GroundTruth) -> Tensor {
    assert_eq!(boxes.rank(), 2);
    if mat.is_empty() {
        return Tensor::scalar(0.0);
    }
    let sel = boxes.index_select(&mat.assigned);
    let mut gt_data = Vec::with_capacity(mat.len() * 4);
    for inst in &gt.instances {
        let b = inst.bbox;
        gt_data.extend([b.cx, b.cy, b.w, b.h]);
    }
    let gt_t = Tensor::from_vec(&[mat.len(), 4], gt_data);
    crate::geometry::box_giou_pairs(&sel, &gt_t)
        .neg()
        .add_scalar(1.0)
        .sum_all()
        .scale(1.0 / mat.len() as Real)
}

/// Weighted per-term totals, already scaled by their lambda factors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub enc_cls: Real,
    pub enc_coord: Real,
    pub enc_giou: Real,
    pub dec_cls: Real,
    pub dec_coord: Real,
    pub dec_char: Real,
}

impl LossBreakdown {
    pub fn total(&self) -> Real {
        self.enc_cls + self.enc_coord + self.enc_giou + self.dec_cls + self.dec_coord + self.dec_char
    }
}

/// Losses of one decoder layer (its own independent matching):
/// (lambda-scaled tensor, [cls, coord, char] components as values).
pub fn decoder_layer_losses(
    confidence: &Tensor,
    points: &Tensor,
    char_logits: &Tensor,
    gt: &GroundTruth,
    w: &LossWeights,
) -> (Tensor, [Real; 3]) {
    let m = points.shape()[1];
    let (a, classes) = (char_logits.shape()[1], char_logits.shape()[2]);
    let conf_vals = confidence.to_vec();
    let point_vals = points.to_vec();
    let char_vals = char_logits.to_vec();
    let mat = match_instances(
        &conf_vals,
        &point_vals,
        m,
        gt,
        Some((&char_vals, a, classes)),
        w,
    );
    let cls = focal_loss(confidence, &mat, w.focal_alpha, w.focal_gamma).scale(w.cls);
    let coord = coord_loss(points, &mat, gt).scale(w.coord);
    let chr = char_loss(char_logits, &mat, gt).scale(w.chr);
    let parts = [cls.item(), coord.item(), chr.item()];
    (cls.add(&coord).add(&chr), parts)
}

/// Encoder loss over every token proposal plus decoder losses summed over
/// all layers, each layer matched independently.
pub fn total_losses(preds: &Predictions, gt: &GroundTruth, w: &LossWeights) -> (Tensor, LossBreakdown) {
    let mut breakdown = LossBreakdown::default();

    let scores = preds.proposal_scores.to_vec();
    let boxes = preds.proposal_boxes.to_vec();
    let enc_match = match_boxes(&scores, &boxes, gt, w);
    let enc_cls = focal_loss(&preds.proposal_scores, &enc_match, w.focal_alpha, w.focal_gamma)
        .scale(w.cls);
    let enc_coord = box_coord_loss(&preds.proposal_boxes, &enc_match, gt).scale(w.coord);
    let enc_giou = giou_loss(&preds.proposal_boxes, &enc_match, gt).scale(w.giou);
    breakdown.enc_cls = enc_cls.item();
    breakdown.enc_coord = enc_coord.item();
    breakdown.enc_giou = enc_giou.item();
    let mut total = enc_cls.add(&enc_coord).add(&enc_giou);

    for layer in &preds.layers {
        let (layer_loss, [cls, coord, chr]) =
            decoder_layer_losses(&layer.confidence, &layer.points, &layer.char_logits, gt, w);
        breakdown.dec_cls += cls;
        breakdown.dec_coord += coord;
        breakdown.dec_char += chr;
        total = total.add(&layer_loss);
    }
    (total, breakdown)
}

/// L1 over the four box parameters of matched proposals.
fn box_coord_loss(boxes: &Tensor, mat: &MatchResult, gt: &GroundTruth) -> Tensor {
    if mat.is_empty() {
        return Tensor::scalar(0.0);
    }
    let sel = boxes.index_select(&mat.assigned);
    let mut gt_data = Vec::with_capacity(mat.len() * 4);
    for inst in &gt.instances {
        let b = inst.bbox;
        gt_data.extend([b.cx, b.cy, b.w, b.h]);
    }
    let gt_t = Tensor::from_vec(&[mat.len(), 4], gt_data);
    sel.sub(&gt_t).abs().sum_all().scale(1.0 / mat.len() as Real)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_reference_points, AnchorBox, ControlPolygon, Transcript};
    use crate::synthdata::GtInstance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt_of(polys: Vec<ControlPolygon>, transcripts: Vec<Vec<usize>>, vocab: usize) -> GroundTruth {
        GroundTruth {
            instances: polys
                .into_iter()
                .zip(transcripts)
                .map(|(polygon, chars)| GtInstance {
                    bbox: polygon.bbox(),
                    transcript: Transcript::new(chars, vocab),
                    polygon,
                })
                .collect(),
        }
    }

    #[test]
    fn dominant_assignment_wins() {
        let poly = sample_reference_points(&AnchorBox::new(0.5, 0.5, 0.4, 0.2), 4);
        let gt = gt_of(vec![poly.clone()], vec![vec![1]], 3);
        // Query 0 sits exactly on the instance with high confidence;
        // query 1 is far away with low confidence.
        let mut points = Vec::new();
        for &(x, y) in &poly.points {
            points.extend([x, y]);
        }
        points.extend([0.05, 0.05, 0.06, 0.05, 0.06, 0.06, 0.05, 0.06]);
        let mat = match_instances(&[0.9, 0.1], &points, 4, &gt, None, &LossWeights::default());
        assert_eq!(mat.assigned, vec![0]);
    }

    #[test]
    fn zero_instances_give_empty_match() {
        let gt = GroundTruth::default();
        let mat = match_instances(&[0.5, 0.5], &[0.0; 16], 4, &gt, None, &LossWeights::default());
        assert!(mat.is_empty());
        assert_eq!(mat.unmatched(2), vec![0, 1]);
    }

    #[test]
    #[should_panic(expected = "exceed query count")]
    fn too_many_instances_panic() {
        let poly = sample_reference_points(&AnchorBox::new(0.5, 0.5, 0.4, 0.2), 4);
        let gt = gt_of(vec![poly.clone(), poly.clone()], vec![vec![0], vec![1]], 3);
        match_instances(&[0.5], &[0.0; 8], 4, &gt, None, &LossWeights::default());
    }

    fn brute_force_min(cost: &[Vec<Real>]) -> Real {
        fn rec(cost: &[Vec<Real>], row: usize, used: &mut Vec<bool>) -> Real {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = Real::INFINITY;
            for j in 0..cost[row].len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row][j] + rec(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost[0].len()])
    }

    #[test]
    fn hungarian_matches_exhaustive_minimum() {
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = rng.gen_range(1..=4);
            let cols = rng.gen_range(rows..=6);
            let cost: Vec<Vec<Real>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.gen_range(-3.0..7.0)).collect())
                .collect();
            let assigned = hungarian(&cost);
            let total: Real = assigned.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            let best = brute_force_min(&cost);
            assert!((total - best).abs() < 1e-9, "seed {seed}: {total} vs {best}");
            // Injectivity.
            let mut seen = vec![false; cols];
            for &j in &assigned {
                assert!(!seen[j]);
                seen[j] = true;
            }
        }
    }

    #[test]
    fn row_shift_leaves_assignment_unchanged() {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<Vec<Real>> = (0..3)
                .map(|_| (0..5).map(|_| rng.gen_range(0.0..9.0)).collect())
                .collect();
            let base = hungarian(&cost);
            let shifted: Vec<Vec<Real>> = cost
                .iter()
                .map(|row| row.iter().map(|c| c + 11.25).collect())
                .collect();
            assert_eq!(base, hungarian(&shifted));
        }
    }

    #[test]
    fn focal_golden_value() {
        let conf = Tensor::from_vec(&[1], vec![0.5]);
        let mat = MatchResult { assigned: vec![0], total_cost: 0.0 };
        let loss = focal_loss(&conf, &mat, 0.25, 2.0);
        assert!((loss.item() - 0.043322).abs() < 1e-5, "{}", loss.item());
    }

    #[test]
    fn focal_vanishes_at_perfect_predictions() {
        let conf = Tensor::from_vec(&[2], vec![1.0 - 1e-9, 1e-9]);
        let mat = MatchResult { assigned: vec![0], total_cost: 0.0 };
        assert!(focal_loss(&conf, &mat, 0.25, 2.0).item() < 1e-12);
    }

    #[test]
    fn coord_half_fixture_and_perfect_zero() {
        let points = Tensor::from_vec(&[1, 1, 2], vec![0.5, 0.5]);
        let poly = ControlPolygon::new(vec![(0.25, 0.75); 4]);
        let mut gt = gt_of(vec![poly], vec![vec![0]], 3);
        gt.instances[0].polygon = ControlPolygon { points: vec![(0.25, 0.75)] };
        let mat = MatchResult { assigned: vec![0], total_cost: 0.0 };
        let loss = coord_loss(&points, &mat, &gt);
        assert!((loss.item() - 0.5).abs() < 1e-12);

        let perfect = Tensor::from_vec(&[1, 1, 2], vec![0.25, 0.75]);
        assert!(coord_loss(&perfect, &mat, &gt).item() < 1e-12);
    }

    #[test]
    fn char_uniform_logits_give_log4() {
        let logits = Tensor::zeros(&[1, 1, 4]);
        let gt = gt_of(
            vec![sample_reference_points(&AnchorBox::new(0.5, 0.5, 0.2, 0.2), 4)],
            vec![vec![2]],
            3,
        );
        let mat = MatchResult { assigned: vec![0], total_cost: 0.0 };
        let loss = char_loss(&logits, &mat, &gt);
        assert!((loss.item() - (4.0 as Real).ln()).abs() < 1e-9);
    }

    #[test]
    fn char_loss_vanishes_for_one_hot_logits() {
        // Big correct logit ~ scaled one-hot.
        let logits = Tensor::from_vec(&[1, 1, 4], vec![0.0, 0.0, 40.0, 0.0]);
        let gt = gt_of(
            vec![sample_reference_points(&AnchorBox::new(0.5, 0.5, 0.2, 0.2), 4)],
            vec![vec![2]],
            3,
        );
        let mat = MatchResult { assigned: vec![0], total_cost: 0.0 };
        assert!(char_loss(&logits, &mat, &gt).item() < 1e-12);
    }

    #[test]
    fn giou_touching_boxes_cost_one_and_perfect_zero() {
        let gt = gt_of(
            vec![sample_reference_points(&AnchorBox::new(0.5, 0.5, 1.0, 1.0), 4)],
            vec![vec![0]],
            3,
        );
        let mat = MatchResult { assigned: vec![0], total_cost: 0.0 };
        let touching = Tensor::from_vec(&[1, 4], vec![1.5, 0.5, 1.0, 1.0]);
        assert!((giou_loss(&touching, &mat, &gt).item() - 1.0).abs() < 1e-12);
        let perfect = Tensor::from_vec(&[1, 4], vec![0.5, 0.5, 1.0, 1.0]);
        assert!(giou_loss(&perfect, &mat, &gt).item() < 1e-12);
    }

    #[test]
    fn layerwise_matching_is_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = gt_of(
            vec![sample_reference_points(&AnchorBox::new(0.4, 0.5, 0.3, 0.2), 4)],
            vec![vec![1, 2]],
            3,
        );
        let mk = |rng: &mut ChaCha8Rng| {
            let conf = Tensor::from_vec(&[3], (0..3).map(|_| rng.gen_range(0.1..0.9)).collect());
            let pts = Tensor::from_vec(&[3, 4, 2], (0..24).map(|_| rng.gen_range(0.0..1.0)).collect());
            let chars = Tensor::from_vec(&[3, 2, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());
            (conf, pts, chars)
        };
        let (c1, p1, l1) = mk(&mut rng);
        let (c2, p2, l2) = mk(&mut rng);
        let w = LossWeights::default();
        let a1 = decoder_layer_losses(&c1, &p1, &l1, &gt, &w).1;
        let a2 = decoder_layer_losses(&c2, &p2, &l2, &gt, &w).1;
        // Same layers in the other order produce the same per-layer values.
        let b2 = decoder_layer_losses(&c2, &p2, &l2, &gt, &w).1;
        let b1 = decoder_layer_losses(&c1, &p1, &l1, &gt, &w).1;
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
    }

    #[test]
    fn doubling_lambda_doubles_exactly_that_component() {
        use crate::model::{Model, ModelConfig};
        use crate::synthdata::{generate_scene, render_scene, SynthConfig};
        let cfg = ModelConfig {
            d: 16,
            enc_layers: 1,
            dec_layers: 1,
            queries: 6,
            control_points: 4,
            char_slots: 4,
            vocab: 5,
            ffn_dim: 32,
            heads: 2,
            sampling_points: 2,
            conv_kernel: 3,
            backbone: crate::model::BackboneConfig {
                heads: 2,
                ..Default::default()
            },
            sac2_location: true,
            sac2_recognition: true,
            resample_points: true,
        };
        let model = Model::seeded(3, &cfg);
        let synth = SynthConfig {
            canvas: 32,
            alphabet: 5,
            max_instances: 2,
            max_chars: 4,
            control_points: 4,
            };
        let scene = generate_scene(12, &synth);
        let (img, gt) = render_scene(&scene, &synth);
        let preds = model.forward(&img, false);
        let w = LossWeights::default();
        let (_, base) = total_losses(&preds, &gt, &w);
        let (_, doubled) = total_losses(
            &preds,
            &gt,
            &LossWeights { coord: 2.0 * w.coord, ..w },
        );
        assert!((doubled.dec_coord - 2.0 * base.dec_coord).abs() < 1e-9);
        assert!((doubled.enc_coord - 2.0 * base.enc_coord).abs() < 1e-9);
        assert_eq!(doubled.enc_cls, base.enc_cls);
        assert_eq!(doubled.dec_char, base.dec_char);
        assert_eq!(doubled.enc_giou, base.enc_giou);
    }

    #[test]
    fn empty_scene_leaves_only_focal_negatives() {
        use crate::model::{Model, ModelConfig};
        let cfg = ModelConfig {
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
            backbone: crate::model::BackboneConfig {
                heads: 2,
                ..Default::default()
            },
            sac2_location: true,
            sac2_recognition: true,
            resample_points: true,
        };
        let model = Model::seeded(9, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::from_vec(&[32, 32, 3], (0..32 * 32 * 3).map(|_| rng.gen_range(0.0..1.0)).collect());
        let preds = model.forward(&img, false);
        let (total, b) = total_losses(&preds, &GroundTruth::default(), &LossWeights::default());
        assert_eq!(b.enc_coord, 0.0);
        assert_eq!(b.enc_giou, 0.0);
        assert_eq!(b.dec_coord, 0.0);
        assert_eq!(b.dec_char, 0.0);
        assert!(b.enc_cls > 0.0 && b.dec_cls > 0.0);
        assert!((total.item() - b.total()).abs() < 1e-9);
    }
}
