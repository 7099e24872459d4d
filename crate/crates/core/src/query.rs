//! Positional encodings and composite query assembly.
//!
//! Two interchangeable formulations build the decoder queries: the box form
//! (one shared positional vector per instance, derived from its anchor box)
//! and the point form (an explicit position prior per sub-query, derived
//! from resampled reference points). Content embeddings are shared across
//! all instance groups in both modes.

use rand::Rng;

use crate::geometry::{AnchorBox, ControlPolygon};
use crate::nn::{join, LayerNorm, Linear, Mlp, Module};
use crate::tensor::{BackwardCtx, Tensor};
use crate::Real;

const TAU: Real = std::f64::consts::TAU as Real;

/// Interleaved sine/cosine encoding of the last axis of `coords` (n values
/// per position) into `d` features: frequency i of coordinate t contributes
/// sin(2*pi*t*w_i), cos(2*pi*t*w_i) with w_i = 10000^(-2i/(d/2n)).
/// Differentiable in the coordinates.
pub fn sine_encode(coords: &Tensor, d: usize) -> Tensor {
    let rank = coords.rank();
    assert!(rank >= 1, "sine_encode needs at least one axis");
    let n = coords.shape()[rank - 1];
    assert!(n >= 1);
    assert!(
        d % (2 * n) == 0,
        "encoding dim {d} must be divisible by 2x coord count {n}"
    );
    let half = d / (2 * n);
    let omegas: Vec<Real> = (0..half)
        .map(|i| (10000.0 as Real).powf(-2.0 * i as Real / half as Real))
        .collect();
    let positions = coords.numel() / n;
    let src = coords.data();
    let mut data = vec![0.0; positions * d];
    for p in 0..positions {
        for c in 0..n {
            let t = src[p * n + c];
            let base = p * d + c * 2 * half;
            for (i, &w) in omegas.iter().enumerate() {
                let arg = TAU * t * w;
                data[base + 2 * i] = arg.sin();
                data[base + 2 * i + 1] = arg.cos();
            }
        }
    }
    drop(src);
    let mut shape = coords.shape().to_vec();
    shape[rank - 1] = d;
    Tensor::from_op(
        "sine_encode",
        shape,
        data,
        vec![coords.clone()],
        Box::new(move |ctx: &BackwardCtx| {
            let src = ctx.parents[0].data();
            let g = ctx.out_grad;
            let mut dt = vec![0.0; src.len()];
            for p in 0..positions {
                for c in 0..n {
                    let t = src[p * n + c];
                    let base = p * d + c * 2 * half;
                    let mut acc = 0.0;
                    for (i, &w) in omegas.iter().enumerate() {
                        let arg = TAU * t * w;
                        acc += g[base + 2 * i] * TAU * w * arg.cos();
                        acc -= g[base + 2 * i + 1] * TAU * w * arg.sin();
                    }
                    dt[p * n + c] = acc;
                }
            }
            vec![Some(dt)]
        }),
    )
}

/// Constant `[4, 2m]` matrix mapping a (cx, cy, w, h) box row-vector to its
/// m sampled reference points, flattened (x0, y0, x1, y1, ...). Matches
/// [`sample_reference_points`] exactly and keeps the map differentiable.
pub fn reference_point_matrix(m: usize) -> Tensor {
    assert!(m >= 4 && m % 2 == 0, "point count must be even and >= 4, got {m}");
    let half = m / 2;
    let mut data = vec![0.0; 4 * 2 * m];
    let mut set = |row: usize, col: usize, v: Real| data[row * 2 * m + col] = v;
    for p in 0..m {
        let (frac, y_sign) = if p < half {
            (p as Real / (half - 1) as Real, -0.5)
        } else {
            ((m - 1 - p) as Real / (half - 1) as Real, 0.5)
        };
        set(0, 2 * p, 1.0); // x depends on cx
        set(2, 2 * p, frac - 0.5); // ... and on w
        set(1, 2 * p + 1, 1.0); // y depends on cy
        set(3, 2 * p + 1, y_sign); // ... and on h
    }
    Tensor::from_vec(&[4, 2 * m], data)
}

/// Constant `[a, rows]` interpolation matrix placing `a` parameter-uniform
/// samples (at (i+0.5)/a) along a polyline of `rows` points.
pub fn polyline_interp_matrix(a: usize, rows: usize) -> Tensor {
    assert!(rows >= 2);
    let mut data = vec![0.0; a * rows];
    for i in 0..a {
        let t = (i as Real + 0.5) / a as Real;
        let u = t * (rows - 1) as Real;
        let seg = (u.floor() as usize).min(rows - 2);
        let w = u - seg as Real;
        data[i * rows + seg] = 1.0 - w;
        data[i * rows + seg + 1] = w;
    }
    Tensor::from_vec(&[a, rows], data)
}

/// K groups of M point sub-queries and A character sub-queries: positional
/// parts per group, shared content embeddings, and the reference points that
/// seed deformable attention.
pub struct CompositeQuerySet {
    /// `[K, M, d]`
    pub point_pos: Tensor,
    /// `[K, A, d]`
    pub char_pos: Tensor,
    /// Shared `[M, d]` handle (identical object across groups and modes).
    pub point_content: Tensor,
    /// Shared `[A, d]` handle.
    pub char_content: Tensor,
    /// `[K, M, 2]` initial location reference points.
    pub point_refs: Tensor,
    /// `[K, A, 2]` recognition reference points along the instance midline.
    pub char_refs: Tensor,
}

impl CompositeQuerySet {
    pub fn groups(&self) -> usize {
        self.point_pos.shape()[0]
    }
}

/// Builds composite queries from anchor boxes (box formulation) or resampled
/// reference points (point formulation). Owns the learnable pieces: the box
/// encoding's linear+norm, the per-point update perceptrons, and the shared
/// content embeddings.
pub struct QueryBuilder {
    pub d: usize,
    pub m: usize,
    pub a: usize,
    pub theta_linear: Linear,
    pub theta_norm: LayerNorm,
    pub phi_point: Mlp,
    pub phi_char: Mlp,
    pub point_content: Tensor,
    pub char_content: Tensor,
}

impl QueryBuilder {
    pub fn new(rng: &mut impl Rng, d: usize, m: usize, a: usize) -> QueryBuilder {
        assert!(d % 8 == 0, "model dim must split across 4 box coords x sin/cos");
        let scale = 1.0 / (d as Real).sqrt();
        QueryBuilder {
            d,
            m,
            a,
            theta_linear: Linear::new(rng, d, d),
            theta_norm: LayerNorm::new(d),
            phi_point: Mlp::new(rng, d, d, d),
            phi_char: Mlp::new(rng, d, d, d),
            point_content: crate::nn::uniform(rng, &[m, d], -scale, scale),
            char_content: crate::nn::uniform(rng, &[a, d], -scale, scale),
        }
    }

    /// Box positional pipeline: sine encoding of (cx, cy, w, h), then a
    /// linear layer, then layer norm. `[K, 4] -> [K, d]`.
    pub fn theta(&self, boxes: &Tensor) -> Tensor {
        assert_eq!(boxes.shape()[boxes.rank() - 1], 4);
        self.theta_norm
            .forward(&self.theta_linear.forward(&sine_encode(boxes, self.d)))
    }

    /// Dynamic point update: two-layer perceptron over the sine encoding of
    /// one (x, y) point. `[.., 2] -> [.., d]`.
    pub fn phi(&self, points: &Tensor) -> Tensor {
        assert_eq!(points.shape()[points.rank() - 1], 2);
        self.phi_point.forward(&sine_encode(points, self.d))
    }

    /// Character-query variant of the point update.
    pub fn phi_char(&self, points: &Tensor) -> Tensor {
        assert_eq!(points.shape()[points.rank() - 1], 2);
        self.phi_char.forward(&sine_encode(points, self.d))
    }

    /// Box formulation: every sub-query of group k shares theta(box_k);
    /// reference points collapse to the box center.
    pub fn compose_box_queries_t(&self, boxes: &Tensor) -> CompositeQuerySet {
        assert_eq!(boxes.rank(), 2);
        assert_eq!(boxes.shape()[1], 4);
        let k = boxes.shape()[0];
        let pos = self.theta(boxes).reshape(&[k, 1, self.d]);
        let broadcast = |rows: usize, t: &Tensor| {
            let ones = Tensor::from_vec(&[rows, 1], vec![1.0; rows]);
            ones.matmul(t)
        };
        let centers = boxes.narrow(1, 0, 2).reshape(&[k, 1, 2]);
        CompositeQuerySet {
            point_pos: broadcast(self.m, &pos),
            char_pos: broadcast(self.a, &pos),
            point_content: self.point_content.clone(),
            char_content: self.char_content.clone(),
            point_refs: broadcast(self.m, &centers),
            char_refs: broadcast(self.a, &centers),
        }
    }

    /// Point formulation: each point sub-query gets its own phi prior;
    /// character queries get phi priors at midline samples.
    pub fn compose_point_queries_t(&self, points: &Tensor) -> CompositeQuerySet {
        assert_eq!(points.rank(), 3);
        assert_eq!(points.shape()[1], self.m);
        assert_eq!(points.shape()[2], 2);
        let char_refs = self.char_refs_from_points(points);
        CompositeQuerySet {
            point_pos: self.phi(points),
            char_pos: self.phi_char(&char_refs),
            point_content: self.point_content.clone(),
            char_content: self.char_content.clone(),
            point_refs: points.clone(),
            char_refs,
        }
    }

    /// Midline of a `[K, M, 2]` control-point tensor (midpoints of opposing
    /// top/bottom points), sampled uniformly into `[K, A, 2]`.
    pub fn char_refs_from_points(&self, points: &Tensor) -> Tensor {
        let half = self.m / 2;
        let top = points.narrow(1, 0, half);
        let bottom = points.narrow(1, half, half).flip(1);
        let mid = top.add(&bottom).scale(0.5);
        polyline_interp_matrix(self.a, half).matmul(&mid)
    }

    pub fn compose_box_queries(&self, boxes: &[AnchorBox]) -> CompositeQuerySet {
        assert!(!boxes.is_empty());
        let data: Vec<Real> = boxes.iter().flat_map(|b| [b.cx, b.cy, b.w, b.h]).collect();
        self.compose_box_queries_t(&Tensor::from_vec(&[boxes.len(), 4], data))
    }

    pub fn compose_point_queries(&self, polys: &[ControlPolygon]) -> CompositeQuerySet {
        assert!(!polys.is_empty());
        let k = polys.len();
        let mut data = Vec::with_capacity(k * self.m * 2);
        for p in polys {
            assert_eq!(p.len(), self.m, "polygon point count must equal M");
            for &(x, y) in &p.points {
                data.push(x);
                data.push(y);
            }
        }
        self.compose_point_queries_t(&Tensor::from_vec(&[k, self.m, 2], data))
    }

    /// Point-formulation queries straight from anchor boxes via the
    /// differentiable box-to-polygon conversion.
    pub fn compose_resampled_queries_t(&self, boxes: &Tensor) -> CompositeQuerySet {
        let k = boxes.shape()[0];
        let points = boxes
            .matmul(&reference_point_matrix(self.m))
            .reshape(&[k, self.m, 2]);
        self.compose_point_queries_t(&points)
    }
}

impl Module for QueryBuilder {
    fn visit_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.theta_linear.visit_tensors(&join(prefix, "theta_linear"), out);
        self.theta_norm.visit_tensors(&join(prefix, "theta_norm"), out);
        self.phi_point.visit_tensors(&join(prefix, "phi_point"), out);
        self.phi_char.visit_tensors(&join(prefix, "phi_char"), out);
        out.push((join(prefix, "point_content"), self.point_content.clone()));
        out.push((join(prefix, "char_content"), self.char_content.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_reference_points;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sine_encode_at_zero_alternates() {
        let t = Tensor::from_vec(&[1], vec![0.0]);
        let e = sine_encode(&t, 8).to_vec();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sine_encode_half_fixture() {
        let t = Tensor::from_vec(&[1], vec![0.5]);
        let e = sine_encode(&t, 4).to_vec();
        let pi = std::f64::consts::PI as Real;
        let w1: Real = 1.0 / 10000.0;
        assert!((e[0] - pi.sin()).abs() < 1e-12);
        assert!((e[1] - pi.cos()).abs() < 1e-12);
        assert!((e[2] - (pi * w1).sin()).abs() < 1e-12);
        assert!((e[3] - (pi * w1).cos()).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "divisible")]
    fn sine_encode_bad_dim_panics() {
        let t = Tensor::from_vec(&[2], vec![0.1, 0.2]);
        let _ = sine_encode(&t, 6);
    }

    #[test]
    fn sine_encode_injective_and_bounded() {
        let d = 16;
        for i in 0..1000 {
            let t0 = i as Real / 1000.0;
            let a = sine_encode(&Tensor::from_vec(&[1], vec![t0]), d).to_vec();
            let b = sine_encode(&Tensor::from_vec(&[1], vec![t0 + 1e-3]), d).to_vec();
            assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
            let dot: Real = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na: Real = a.iter().map(|x| x * x).sum::<Real>().sqrt();
            let nb: Real = b.iter().map(|x| x * x).sum::<Real>().sqrt();
            assert!(dot / (na * nb) < 1.0, "points {t0} and {} collide", t0 + 1e-3);
        }
    }

    #[test]
    fn reference_point_matrix_matches_value_route() {
        let bx = AnchorBox::new(0.4, 0.6, 0.3, 0.18);
        for m in [4, 6, 8, 20] {
            let poly = sample_reference_points(&bx, m);
            let bt = Tensor::from_vec(&[1, 4], vec![bx.cx, bx.cy, bx.w, bx.h]);
            let pts = bt.matmul(&reference_point_matrix(m)).to_vec();
            for (i, &(x, y)) in poly.points.iter().enumerate() {
                assert!((pts[2 * i] - x).abs() < 1e-12);
                assert!((pts[2 * i + 1] - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn box_queries_share_positional_across_subqueries() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let qb = QueryBuilder::new(&mut rng, 16, 2, 3);
        let set = qb.compose_box_queries(&[AnchorBox::new(0.5, 0.5, 0.4, 0.2)]);
        assert_eq!(set.point_pos.shape(), &[1, 2, 16]);
        let v = set.point_pos.to_vec();
        assert_eq!(v[..16], v[16..32]);
    }

    #[test]
    fn zero_theta_weights_reduce_to_content_plus_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut qb = QueryBuilder::new(&mut rng, 16, 2, 2);
        qb.theta_linear = Linear::zeros(16, 16);
        let set = qb.compose_box_queries(&[
            AnchorBox::new(0.2, 0.3, 0.1, 0.1),
            AnchorBox::new(0.7, 0.8, 0.5, 0.3),
        ]);
        // layer_norm(0) = bias path only, so every group gets that constant.
        let v = set.point_pos.to_vec();
        let first = &v[..16];
        for g in 1..4 {
            assert_eq!(&v[g * 16..(g + 1) * 16], first);
        }
    }

    #[test]
    fn group_permutation_equivariance_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let qb = QueryBuilder::new(&mut rng, 16, 4, 3);
        for seed in 0..20u64 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let boxes: Vec<AnchorBox> = (0..3)
                .map(|_| {
                    AnchorBox::new(
                        r.gen_range(0.2..0.8),
                        r.gen_range(0.2..0.8),
                        r.gen_range(0.1..0.4),
                        r.gen_range(0.1..0.4),
                    )
                })
                .collect();
            let polys: Vec<ControlPolygon> =
                boxes.iter().map(|b| sample_reference_points(b, 4)).collect();
            let perm = [2usize, 0, 1];

            let fwd = qb.compose_box_queries(&boxes).point_pos.to_vec();
            let permuted: Vec<AnchorBox> = perm.iter().map(|&i| boxes[i]).collect();
            let back = qb.compose_box_queries(&permuted).point_pos.to_vec();
            let group = 4 * 16;
            for (dst, &src) in perm.iter().enumerate() {
                assert_eq!(back[dst * group..(dst + 1) * group], fwd[src * group..(src + 1) * group]);
            }

            let fwd = qb.compose_point_queries(&polys).point_pos.to_vec();
            let permuted: Vec<ControlPolygon> = perm.iter().map(|&i| polys[i].clone()).collect();
            let back = qb.compose_point_queries(&permuted).point_pos.to_vec();
            for (dst, &src) in perm.iter().enumerate() {
                assert_eq!(back[dst * group..(dst + 1) * group], fwd[src * group..(src + 1) * group]);
            }
        }
    }

    #[test]
    fn point_mode_gives_distinct_priors_and_constant_for_identical_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qb = QueryBuilder::new(&mut rng, 16, 4, 2);
        // All points identical -> all positional vectors identical.
        let same = ControlPolygon::new(vec![(0.5, 0.5); 4]);
        let set = qb.compose_point_queries(&[same]);
        let v = set.point_pos.to_vec();
        for m in 1..4 {
            assert_eq!(v[m * 16..(m + 1) * 16], v[..16]);
        }
        // Points from a real box: top-edge prior differs from bottom-edge.
        let poly = sample_reference_points(&AnchorBox::new(0.5, 0.5, 0.6, 0.3), 4);
        let set = qb.compose_point_queries(&[poly]);
        let v = set.point_pos.to_vec();
        assert_ne!(v[..16], v[3 * 16..4 * 16]);
    }

    #[test]
    fn content_embeddings_are_shared_objects_across_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let qb = QueryBuilder::new(&mut rng, 16, 4, 2);
        let bx = AnchorBox::new(0.5, 0.5, 0.4, 0.2);
        let via_box = qb.compose_box_queries(&[bx]);
        let via_points = qb.compose_point_queries(&[sample_reference_points(&bx, 4)]);
        assert!(via_box.point_content.same_node(&via_points.point_content));
        assert!(via_box.char_content.same_node(&via_points.char_content));
    }

    #[test]
    fn midline_of_straight_polygon_is_centerline() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qb = QueryBuilder::new(&mut rng, 16, 8, 4);
        let poly = sample_reference_points(&AnchorBox::new(0.5, 0.5, 0.8, 0.2), 8);
        let pts = Tensor::from_vec(
            &[1, 8, 2],
            poly.points.iter().flat_map(|&(x, y)| [x, y]).collect(),
        );
        let refs = qb.char_refs_from_points(&pts).to_vec();
        for a in 0..4 {
            assert!((refs[2 * a + 1] - 0.5).abs() < 1e-12, "midline y");
            let t = (a as Real + 0.5) / 4.0;
            assert!((refs[2 * a] - (0.1 + 0.8 * t)).abs() < 1e-12, "uniform x");
        }
    }
}
