//! Anchor boxes, control-point polygons, reference-point sampling, and the
//! overlap measures feeding the GIoU loss and the evaluator.
//!
//! Coordinates are normalized to the unit square with y growing downward;
//! "clockwise from top-left" therefore has positive shoelace sum.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::Real;

/// Center + scale box in normalized image coordinates. May extend past the
/// image bounds; clamping happens only at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorBox {
    pub cx: Real,
    pub cy: Real,
    pub w: Real,
    pub h: Real,
}

impl AnchorBox {
    pub fn new(cx: Real, cy: Real, w: Real, h: Real) -> AnchorBox {
        assert!(w > 0.0 && h > 0.0, "anchor box extents must be positive");
        AnchorBox { cx, cy, w, h }
    }

    /// (x1, y1, x2, y2)
    pub fn corners(&self) -> (Real, Real, Real, Real) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> Real {
        self.w * self.h
    }

    pub fn iou(&self, other: &AnchorBox) -> Real {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Polygon of M control points, clockwise starting from the top-left corner,
/// with M/2 points along the top edge left-to-right and M/2 along the bottom
/// right-to-left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPolygon {
    pub points: Vec<(Real, Real)>,
}

impl ControlPolygon {
    pub fn new(points: Vec<(Real, Real)>) -> ControlPolygon {
        assert!(
            points.len() >= 4 && points.len() % 2 == 0,
            "control polygon needs an even point count >= 4"
        );
        ControlPolygon { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Shoelace sum; positive for clockwise order in y-down coordinates.
    pub fn signed_area(&self) -> Real {
        let n = self.points.len();
        let mut s = 0.0;
        for i in 0..n {
            let (x0, y0) = self.points[i];
            let (x1, y1) = self.points[(i + 1) % n];
            s += x0 * y1 - x1 * y0;
        }
        s / 2.0
    }

    pub fn area(&self) -> Real {
        self.signed_area().abs()
    }

    pub fn is_clockwise(&self) -> bool {
        self.signed_area() > 0.0
    }

    /// Tight axis-aligned bounding box.
    pub fn bbox(&self) -> AnchorBox {
        let mut x1 = Real::INFINITY;
        let mut y1 = Real::INFINITY;
        let mut x2 = Real::NEG_INFINITY;
        let mut y2 = Real::NEG_INFINITY;
        for &(x, y) in &self.points {
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x);
            y2 = y2.max(y);
        }
        AnchorBox {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: (x2 - x1).max(1e-12),
            h: (y2 - y1).max(1e-12),
        }
    }

    /// Even-odd point containment.
    pub fn contains(&self, x: Real, y: Real) -> bool {
        let n = self.points.len();
        let mut inside = false;
        for i in 0..n {
            let (x0, y0) = self.points[i];
            let (x1, y1) = self.points[(i + 1) % n];
            if (y0 > y) != (y1 > y) {
                let xi = x0 + (y - y0) / (y1 - y0) * (x1 - x0);
                if x < xi {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

/// Character-class sequence over an alphabet of `vocab` symbols; class id
/// `vocab` is the padding / end-of-text class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub chars: Vec<usize>,
}

impl Transcript {
    pub fn new(chars: Vec<usize>, vocab: usize) -> Transcript {
        assert!(chars.iter().all(|&c| c <= vocab), "class index beyond padding id");
        Transcript { chars }
    }

    /// Pads (or truncates) to `slots` with the padding class `vocab`.
    pub fn padded(&self, slots: usize, vocab: usize) -> Vec<usize> {
        let mut out = self.chars.clone();
        out.truncate(slots);
        out.resize(slots, vocab);
        out
    }
}

/// Places M/2 points evenly along the top edge left-to-right and M/2 along
/// the bottom edge right-to-left, yielding a clockwise polygon whose first
/// point is the box's top-left corner.
pub fn sample_reference_points(bx: &AnchorBox, m: usize) -> ControlPolygon {
    assert!(m >= 4 && m % 2 == 0, "point count must be even and >= 4, got {m}");
    let half = m / 2;
    let (x1, y1, _, y2) = bx.corners();
    let step = bx.w / (half - 1) as Real;
    let mut points = Vec::with_capacity(m);
    for i in 0..half {
        points.push((x1 + i as Real * step, y1));
    }
    for i in 0..half {
        points.push((x1 + (half - 1 - i) as Real * step, y2));
    }
    ControlPolygon::new(points)
}

/// Raster grid edge used by [`polygon_iou`].
pub const IOU_RASTER_CELLS: usize = 256;

/// Rasterized IoU: even-odd scanline fill of both polygons on a 256x256 grid
/// spanning the union's bounding box. Symmetric; self-IoU is 1; degenerate
/// (zero-area) polygons give 0. Accuracy is about ±0.01.
pub fn polygon_iou(a: &ControlPolygon, b: &ControlPolygon) -> Real {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return 0.0;
    }
    let pts = a.points.iter().chain(b.points.iter());
    let mut x1 = Real::INFINITY;
    let mut y1 = Real::INFINITY;
    let mut x2 = Real::NEG_INFINITY;
    let mut y2 = Real::NEG_INFINITY;
    for &(x, y) in pts {
        x1 = x1.min(x);
        y1 = y1.min(y);
        x2 = x2.max(x);
        y2 = y2.max(y);
    }
    if x2 <= x1 || y2 <= y1 {
        return 0.0;
    }
    let n = IOU_RASTER_CELLS;
    let dx = (x2 - x1) / n as Real;
    let dy = (y2 - y1) / n as Real;
    let mut inter = 0usize;
    let mut union = 0usize;
    let mut row_a = vec![false; n];
    let mut row_b = vec![false; n];
    for r in 0..n {
        let y = y1 + (r as Real + 0.5) * dy;
        fill_row(a, y, x1, dx, &mut row_a);
        fill_row(b, y, x1, dx, &mut row_b);
        for c in 0..n {
            match (row_a[c], row_b[c]) {
                (true, true) => {
                    inter += 1;
                    union += 1;
                }
                (false, false) => {}
                _ => union += 1,
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as Real / union as Real
    }
}

/// Marks cells of one scanline row whose centers are inside the polygon
/// (even-odd rule).
fn fill_row(poly: &ControlPolygon, y: Real, x_origin: Real, dx: Real, row: &mut [bool]) {
    row.fill(false);
    let n = poly.points.len();
    let mut crossings: Vec<Real> = Vec::with_capacity(8);
    for i in 0..n {
        let (x0, y0) = poly.points[i];
        let (x1, y1) = poly.points[(i + 1) % n];
        if (y0 > y) != (y1 > y) {
            crossings.push(x0 + (y - y0) / (y1 - y0) * (x1 - x0));
        }
    }
    crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for pair in crossings.chunks_exact(2) {
        for (c, cell) in row.iter_mut().enumerate() {
            let x = x_origin + (c as Real + 0.5) * dx;
            if x >= pair[0] && x <= pair[1] {
                *cell = true;
            }
        }
    }
}

/// Generalized IoU of two axis-aligned boxes: IoU minus the fraction of the
/// smallest enclosing box not covered by the union. Range (-1, 1].
pub fn box_giou(a: &AnchorBox, b: &AnchorBox) -> Real {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let c = cw * ch;
    inter / union - (c - union) / c
}

/// Differentiable GIoU of paired `[g, 4]` (cx, cy, w, h) box tensors.
/// Returns `[g, 1]`, one value per pair. Extents must be positive.
pub fn box_giou_pairs(pred: &Tensor, gt: &Tensor) -> Tensor {
    assert_eq!(pred.rank(), 2);
    assert_eq!(pred.shape()[1], 4, "boxes are (cx, cy, w, h)");
    assert_eq!(pred.shape(), gt.shape());
    let col = |t: &Tensor, c: usize| t.narrow(1, c, 1);
    let corners = |t: &Tensor| {
        let cx = col(t, 0);
        let cy = col(t, 1);
        let w2 = col(t, 2).scale(0.5);
        let h2 = col(t, 3).scale(0.5);
        (cx.sub(&w2), cy.sub(&h2), cx.add(&w2), cy.add(&h2))
    };
    let (ax1, ay1, ax2, ay2) = corners(pred);
    let (bx1, by1, bx2, by2) = corners(gt);
    let iw = ax2.min_elem(&bx2).sub(&ax1.max_elem(&bx1)).relu();
    let ih = ay2.min_elem(&by2).sub(&ay1.max_elem(&by1)).relu();
    let inter = iw.mul(&ih);
    let area_a = ax2.sub(&ax1).mul(&ay2.sub(&ay1));
    let area_b = bx2.sub(&bx1).mul(&by2.sub(&by1));
    let union = area_a.add(&area_b).sub(&inter);
    let cw = ax2.max_elem(&bx2).sub(&ax1.min_elem(&bx1));
    let ch = ay2.max_elem(&by2).sub(&ay1.min_elem(&by1));
    let encl = cw.mul(&ch);
    inter.div(&union).sub(&encl.sub(&union).div(&encl))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_points_m4_fixture() {
        let bx = AnchorBox::new(0.5, 0.5, 1.0, 0.5);
        let poly = sample_reference_points(&bx, 4);
        assert_eq!(poly.points, vec![(0.0, 0.25), (1.0, 0.25), (1.0, 0.75), (0.0, 0.75)]);
    }

    #[test]
    fn reference_points_m6_fixture() {
        let bx = AnchorBox::new(0.5, 0.5, 1.0, 0.5);
        let poly = sample_reference_points(&bx, 6);
        assert_eq!(
            poly.points,
            vec![
                (0.0, 0.25),
                (0.5, 0.25),
                (1.0, 0.25),
                (1.0, 0.75),
                (0.5, 0.75),
                (0.0, 0.75)
            ]
        );
    }

    #[test]
    fn reference_points_m20_corners() {
        let bx = AnchorBox::new(0.3, 0.6, 0.4, 0.2);
        let poly = sample_reference_points(&bx, 20);
        let (x1, y1, x2, y2) = bx.corners();
        assert_eq!(poly.points[0], (x1, y1));
        assert_eq!(poly.points[9], (x2, y1));
        assert_eq!(poly.points[10], (x2, y2));
        assert_eq!(poly.points[19], (x1, y2));
        assert!(poly.is_clockwise());
    }

    #[test]
    #[should_panic(expected = "even and >= 4")]
    fn odd_point_count_panics() {
        sample_reference_points(&AnchorBox::new(0.5, 0.5, 0.2, 0.2), 5);
    }

    #[test]
    fn reference_point_bbox_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let bx = AnchorBox::new(
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.01..0.9),
                rng.gen_range(0.01..0.9),
            );
            let poly = sample_reference_points(&bx, 8);
            let back = poly.bbox();
            assert!((back.cx - bx.cx).abs() < 1e-12);
            assert!((back.cy - bx.cy).abs() < 1e-12);
            assert!((back.w - bx.w).abs() < 1e-12);
            assert!((back.h - bx.h).abs() < 1e-12);
        }
    }

    fn square(x: Real, y: Real, s: Real) -> ControlPolygon {
        ControlPolygon::new(vec![(x, y), (x + s, y), (x + s, y + s), (x, y + s)])
    }

    #[test]
    fn polygon_iou_identity_and_offset() {
        let a = square(0.0, 0.0, 1.0);
        assert!((polygon_iou(&a, &a) - 1.0).abs() < 1e-12);
        let b = square(0.5, 0.0, 1.0);
        let iou = polygon_iou(&a, &b);
        assert!((iou - 1.0 / 3.0).abs() < 0.01, "iou {iou}");
        assert!((polygon_iou(&a, &b) - polygon_iou(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_polygon_iou_is_zero() {
        let a = square(0.0, 0.0, 1.0);
        let line = ControlPolygon::new(vec![(0.0, 0.0), (1.0, 0.0), (1.0, 0.0), (0.0, 0.0)]);
        assert_eq!(polygon_iou(&a, &line), 0.0);
    }

    /// Sutherland-Hodgman convex clip: the exact-area oracle for the raster.
    fn clip_area(subject: &[(Real, Real)], clip: &[(Real, Real)]) -> Real {
        let mut poly: Vec<(Real, Real)> = subject.to_vec();
        let n = clip.len();
        for i in 0..n {
            let a = clip[i];
            let b = clip[(i + 1) % n];
            let side = |p: (Real, Real)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            let input = poly.clone();
            poly.clear();
            for k in 0..input.len() {
                let p = input[k];
                let q = input[(k + 1) % input.len()];
                let sp = side(p);
                let sq = side(q);
                if sp >= 0.0 {
                    poly.push(p);
                }
                if (sp > 0.0) != (sq > 0.0) && sp != sq {
                    let t = sp / (sp - sq);
                    poly.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
                }
            }
            if poly.is_empty() {
                return 0.0;
            }
        }
        let mut s = 0.0;
        for i in 0..poly.len() {
            let (x0, y0) = poly[i];
            let (x1, y1) = poly[(i + 1) % poly.len()];
            s += x0 * y1 - x1 * y0;
        }
        (s / 2.0).abs()
    }

    fn random_convex_quad(rng: &mut ChaCha8Rng) -> ControlPolygon {
        // Rotated rectangle: always convex, clockwise in y-down coords.
        let cx = rng.gen_range(0.3..0.7);
        let cy = rng.gen_range(0.3..0.7);
        let w = rng.gen_range(0.1..0.4);
        let h = rng.gen_range(0.1..0.4);
        let th: Real = rng.gen_range(0.0..std::f64::consts::PI as Real);
        let rot = |x: Real, y: Real| {
            (
                cx + x * th.cos() - y * th.sin(),
                cy + x * th.sin() + y * th.cos(),
            )
        };
        ControlPolygon::new(vec![
            rot(-w / 2.0, -h / 2.0),
            rot(w / 2.0, -h / 2.0),
            rot(w / 2.0, h / 2.0),
            rot(-w / 2.0, h / 2.0),
        ])
    }

    #[test]
    fn raster_iou_matches_exact_clipping_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..60 {
            let a = random_convex_quad(&mut rng);
            let b = random_convex_quad(&mut rng);
            let inter = clip_area(&a.points, &b.points);
            let union = a.area() + b.area() - inter;
            let exact = if union > 0.0 { inter / union } else { 0.0 };
            let raster = polygon_iou(&a, &b);
            assert!(
                (raster - exact).abs() <= 0.01,
                "raster {raster} vs exact {exact}"
            );
        }
    }

    #[test]
    fn iou_monotone_under_dilation_of_intersection() {
        // Growing b toward a's footprint only increases overlap.
        let a = square(0.2, 0.2, 0.5);
        let mut prev = 0.0;
        for s in [0.1, 0.2, 0.3, 0.4, 0.5] {
            let b = square(0.2, 0.2, s);
            let iou = polygon_iou(&a, &b);
            assert!(iou >= prev - 1e-9);
            prev = iou;
        }
    }

    #[test]
    fn giou_identity_touching_and_far() {
        let a = AnchorBox::new(0.5, 0.5, 1.0, 1.0);
        assert!((box_giou(&a, &a) - 1.0).abs() < 1e-12);
        // Unit boxes sharing an edge: IoU 0, union fills the enclosing box.
        let b = AnchorBox::new(1.5, 0.5, 1.0, 1.0);
        assert!(box_giou(&a, &b).abs() < 1e-12);
        // Widely separated boxes approach -1 monotonically in the gap.
        let mut prev = box_giou(&a, &AnchorBox::new(3.0, 0.5, 1.0, 1.0));
        for gap in [10.0, 100.0, 1000.0] {
            let g = box_giou(&a, &AnchorBox::new(gap, 0.5, 1.0, 1.0));
            assert!(g < prev);
            prev = g;
        }
        assert!(prev > -1.0 && prev < -0.99);
    }

    #[test]
    fn giou_never_exceeds_iou() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let a = AnchorBox::new(
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
            );
            let b = AnchorBox::new(
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
            );
            assert!(box_giou(&a, &b) <= a.iou(&b) + 1e-12);
        }
    }

    #[test]
    fn giou_tensor_matches_scalar_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a = [
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
            ];
            let b = [
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
            ];
            let t = box_giou_pairs(
                &Tensor::from_vec(&[1, 4], a.to_vec()),
                &Tensor::from_vec(&[1, 4], b.to_vec()),
            );
            let s = box_giou(
                &AnchorBox::new(a[0], a[1], a[2], a[3]),
                &AnchorBox::new(b[0], b[1], b[2], b[3]),
            );
            assert!((t.item() - s).abs() < 1e-12);
        }
    }
}
