//! Deterministic synthetic curved-text scenes: quadratic baselines, a 5x7
//! dot-matrix alphabet rendered along them, exact M-point ground-truth
//! polygons sampled at equal arc length, instance-aware augmentation, and a
//! JSONL manifest format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{AnchorBox, ControlPolygon, Transcript};
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Square canvas edge in pixels; must satisfy the backbone divisor.
    pub canvas: usize,
    /// Alphabet size |V|.
    pub alphabet: usize,
    pub max_instances: usize,
    /// Longest transcript generated (keep <= the model's char slots).
    pub max_chars: usize,
    /// Ground-truth polygon point count M (even).
    pub control_points: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            canvas: 64,
            alphabet: 10,
            max_instances: 5,
            max_chars: 4,
            control_points: 8,
        }
    }
}

/// One text instance: a quadratic baseline through three anchors, a band
/// height, a transcript, and a stroke intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub anchors: [(Real, Real); 3],
    pub height: Real,
    pub transcript: Vec<usize>,
    pub stroke: Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub base: Real,
    pub amplitude: Real,
    pub freq_x: Real,
    pub freq_y: Real,
    pub phase_x: Real,
    pub phase_y: Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub canvas: usize,
    pub instances: Vec<InstanceSpec>,
    pub background: BackgroundSpec,
}

#[derive(Debug, Clone)]
pub struct GtInstance {
    pub polygon: ControlPolygon,
    pub transcript: Transcript,
    pub bbox: AnchorBox,
}

/// Annotations for one rendered scene, polygon ordering clockwise from the
/// top-left control point.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub instances: Vec<GtInstance>,
}

// ── baseline geometry ────────────────────────────────────────────────

/// Interpolating parabola through the three anchors at t = 0, 1/2, 1.
fn curve_at(anchors: &[(Real, Real); 3], t: Real) -> (Real, Real) {
    let l0 = 2.0 * (t - 0.5) * (t - 1.0);
    let l1 = -4.0 * t * (t - 1.0);
    let l2 = 2.0 * t * (t - 0.5);
    (
        anchors[0].0 * l0 + anchors[1].0 * l1 + anchors[2].0 * l2,
        anchors[0].1 * l0 + anchors[1].1 * l1 + anchors[2].1 * l2,
    )
}

fn curve_tangent(anchors: &[(Real, Real); 3], t: Real) -> (Real, Real) {
    let d0 = 4.0 * t - 3.0;
    let d1 = -8.0 * t + 4.0;
    let d2 = 4.0 * t - 1.0;
    let tx = anchors[0].0 * d0 + anchors[1].0 * d1 + anchors[2].0 * d2;
    let ty = anchors[0].1 * d0 + anchors[1].1 * d1 + anchors[2].1 * d2;
    let n = (tx * tx + ty * ty).sqrt().max(1e-12);
    (tx / n, ty / n)
}

/// Unit normal pointing toward the top edge (smaller y for a left-to-right
/// horizontal tangent).
fn curve_normal(anchors: &[(Real, Real); 3], t: Real) -> (Real, Real) {
    let (tx, ty) = curve_tangent(anchors, t);
    (ty, -tx)
}

const ARC_STEPS: usize = 256;

fn offset_point(anchors: &[(Real, Real); 3], t: Real, offset: Real) -> (Real, Real) {
    let (x, y) = curve_at(anchors, t);
    let (nx, ny) = curve_normal(anchors, t);
    (x + nx * offset, y + ny * offset)
}

/// Cumulative arc-length table over t in [0, 1] for the offset curve.
fn arc_table(anchors: &[(Real, Real); 3], offset: Real) -> Vec<Real> {
    let mut acc = Vec::with_capacity(ARC_STEPS + 1);
    acc.push(0.0);
    let mut prev = offset_point(anchors, 0.0, offset);
    let mut total = 0.0;
    for s in 1..=ARC_STEPS {
        let t = s as Real / ARC_STEPS as Real;
        let p = offset_point(anchors, t, offset);
        total += ((p.0 - prev.0).powi(2) + (p.1 - prev.1).powi(2)).sqrt();
        acc.push(total);
        prev = p;
    }
    acc
}

/// Curve parameter at the given fraction of total arc length.
fn t_at_fraction(table: &[Real], frac: Real) -> Real {
    let total = *table.last().unwrap();
    let target = frac.clamp(0.0, 1.0) * total;
    let mut lo = 0;
    let mut hi = table.len() - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if table[mid] < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let span = (table[hi] - table[lo]).max(1e-12);
    (lo as Real + (target - table[lo]) / span) / ARC_STEPS as Real
}

/// Exact M-point ground-truth polygon: M/2 equal-arc-length samples along
/// the top offset curve left-to-right, then M/2 along the bottom
/// right-to-left.
pub fn instance_polygon(inst: &InstanceSpec, m: usize) -> ControlPolygon {
    assert!(m >= 4 && m % 2 == 0);
    let half = m / 2;
    let top_table = arc_table(&inst.anchors, inst.height / 2.0);
    let bot_table = arc_table(&inst.anchors, -inst.height / 2.0);
    let mut points = Vec::with_capacity(m);
    for i in 0..half {
        let frac = i as Real / (half - 1) as Real;
        let t = t_at_fraction(&top_table, frac);
        points.push(offset_point(&inst.anchors, t, inst.height / 2.0));
    }
    for i in 0..half {
        let frac = (half - 1 - i) as Real / (half - 1) as Real;
        let t = t_at_fraction(&bot_table, frac);
        points.push(offset_point(&inst.anchors, t, -inst.height / 2.0));
    }
    ControlPolygon::new(points)
}

// ── scene generation ─────────────────────────────────────────────────

/// Deterministic scene from a seed: up to `max_instances` curved instances,
/// rejection-sampled (100 attempts each) so all pairwise polygon IoUs stay
/// below 0.1; failed placements reduce the instance count.
pub fn generate_scene(seed: u64, cfg: &SynthConfig) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wanted = rng.gen_range(0..=cfg.max_instances);
    let mut instances: Vec<InstanceSpec> = Vec::new();
    let mut polygons: Vec<ControlPolygon> = Vec::new();
    for _ in 0..wanted {
        for _attempt in 0..100 {
            let inst = random_instance(&mut rng, cfg);
            let poly = instance_polygon(&inst, cfg.control_points);
            let inside = poly
                .points
                .iter()
                .all(|&(x, y)| (0.02..=0.98).contains(&x) && (0.02..=0.98).contains(&y));
            if !inside {
                continue;
            }
            let overlaps = polygons
                .iter()
                .any(|p| crate::geometry::polygon_iou(p, &poly) >= 0.1);
            if overlaps {
                continue;
            }
            polygons.push(poly);
            instances.push(inst);
            break;
        }
    }
    let background = BackgroundSpec {
        base: rng.gen_range(0.75..0.92),
        amplitude: rng.gen_range(0.02..0.08),
        freq_x: rng.gen_range(2.0..9.0),
        freq_y: rng.gen_range(2.0..9.0),
        phase_x: rng.gen_range(0.0..6.28),
        phase_y: rng.gen_range(0.0..6.28),
    };
    SceneSpec {
        seed,
        canvas: cfg.canvas,
        instances,
        background,
    }
}

fn random_instance(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> InstanceSpec {
    let len = rng.gen_range(1..=cfg.max_chars);
    let transcript: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.alphabet)).collect();
    // Chord sized by character count so glyphs keep a readable aspect.
    let chord = (0.15 * len as Real + 0.12).min(0.85);
    let height = rng.gen_range(0.16..0.26);
    let angle: Real = rng.gen_range(-0.5..0.5);
    let cx = rng.gen_range(0.2..0.8);
    let cy = rng.gen_range(0.2..0.8);
    let (dx, dy) = (angle.cos() * chord / 2.0, angle.sin() * chord / 2.0);
    let p0 = (cx - dx, cy - dy);
    let p2 = (cx + dx, cy + dy);
    // Perpendicular bow of the middle anchor produces the curvature.
    let bow = rng.gen_range(-0.12..0.12) * chord;
    let (nx, ny) = (-(p2.1 - p0.1) / chord, (p2.0 - p0.0) / chord);
    let p1 = (cx + nx * bow, cy + ny * bow);
    InstanceSpec {
        anchors: [p0, p1, p2],
        height,
        transcript,
        stroke: rng.gen_range(0.0..0.25),
    }
}

// ── glyphs ───────────────────────────────────────────────────────────

const GLYPH_ROWS: usize = 7;
const GLYPH_COLS: usize = 5;

const DIGIT_FONT: [[u8; GLYPH_ROWS]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111], // 2
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110], // 3
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
];

/// Dot pattern for a character class: digit shapes for the first ten
/// classes, deterministic pseudo-random patterns for ids beyond (at least
/// ten lit dots so every class stays visually distinct).
pub fn glyph_pattern(class: usize) -> [u8; GLYPH_ROWS] {
    if class < 10 {
        return DIGIT_FONT[class];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x617 ^ class as u64);
    let mut rows = [0u8; GLYPH_ROWS];
    let mut lit = 0;
    while lit < 10 {
        let r = rng.gen_range(0..GLYPH_ROWS);
        let c = rng.gen_range(0..GLYPH_COLS);
        let bit = 1u8 << (GLYPH_COLS - 1 - c);
        if rows[r] & bit == 0 {
            rows[r] |= bit;
            lit += 1;
        }
    }
    rows
}

// ── rendering ────────────────────────────────────────────────────────

/// Rasterizes the scene onto an RGB canvas and emits the exact ground
/// truth. Pure function of the spec.
pub fn render_scene(spec: &SceneSpec, cfg: &SynthConfig) -> (Tensor, GroundTruth) {
    let n = spec.canvas;
    let mut pixels = vec![0.0 as Real; n * n * 3];
    paint_background(&mut pixels, n, &spec.background);
    let mut gt = GroundTruth::default();
    for inst in &spec.instances {
        paint_instance(&mut pixels, n, inst);
        let polygon = instance_polygon(inst, cfg.control_points);
        let bbox = polygon.bbox();
        gt.instances.push(GtInstance {
            polygon,
            transcript: Transcript::new(inst.transcript.clone(), cfg.alphabet),
            bbox,
        });
    }
    (Tensor::from_vec(&[n, n, 3], pixels), gt)
}

fn paint_background(pixels: &mut [Real], n: usize, bg: &BackgroundSpec) {
    for i in 0..n {
        for j in 0..n {
            let x = (j as Real + 0.5) / n as Real;
            let y = (i as Real + 0.5) / n as Real;
            let tex = bg.base
                + bg.amplitude
                    * (bg.freq_x * x + bg.phase_x).sin()
                    * (bg.freq_y * y + bg.phase_y).sin();
            let base = (i * n + j) * 3;
            pixels[base] = (tex + 0.01).clamp(0.0, 1.0);
            pixels[base + 1] = tex.clamp(0.0, 1.0);
            pixels[base + 2] = (tex - 0.01).clamp(0.0, 1.0);
        }
    }
}

fn paint_instance(pixels: &mut [Real], n: usize, inst: &InstanceSpec) {
    let chars = inst.transcript.len();
    if chars == 0 {
        return;
    }
    let table = arc_table(&inst.anchors, 0.0);
    let total = *table.last().unwrap();
    let cell = total / chars as Real;
    let glyph_w = cell * 0.72;
    let glyph_h = inst.height * 0.72;
    let dot_r = (glyph_w / GLYPH_COLS as Real).min(glyph_h / GLYPH_ROWS as Real) * 0.55;
    for (ci, &class) in inst.transcript.iter().enumerate() {
        let frac = (ci as Real + 0.5) / chars as Real;
        let t = t_at_fraction(&table, frac);
        let origin = curve_at(&inst.anchors, t);
        let (tx, ty) = curve_tangent(&inst.anchors, t);
        let (nx, ny) = curve_normal(&inst.anchors, t);
        let pattern = glyph_pattern(class);
        for (r, rowbits) in pattern.iter().enumerate() {
            for c in 0..GLYPH_COLS {
                if rowbits & (1 << (GLYPH_COLS - 1 - c)) == 0 {
                    continue;
                }
                let lx = ((c as Real + 0.5) / GLYPH_COLS as Real - 0.5) * glyph_w;
                // Row 0 sits toward the top curve (the +normal side).
                let ly = (0.5 - (r as Real + 0.5) / GLYPH_ROWS as Real) * glyph_h;
                let px = origin.0 + tx * lx + nx * ly;
                let py = origin.1 + ty * lx + ny * ly;
                paint_dot(pixels, n, px, py, dot_r, inst.stroke);
            }
        }
    }
}

fn paint_dot(pixels: &mut [Real], n: usize, cx: Real, cy: Real, r: Real, stroke: Real) {
    let scale = n as Real;
    let x0 = ((cx - r) * scale).floor().max(0.0) as usize;
    let x1 = ((cx + r) * scale).ceil().min(scale - 1.0) as usize;
    let y0 = ((cy - r) * scale).floor().max(0.0) as usize;
    let y1 = ((cy + r) * scale).ceil().min(scale - 1.0) as usize;
    for i in y0..=y1 {
        for j in x0..=x1 {
            let px = (j as Real + 0.5) / scale;
            let py = (i as Real + 0.5) / scale;
            if (px - cx).powi(2) + (py - cy).powi(2) <= r * r {
                let base = (i * n + j) * 3;
                pixels[base] = stroke;
                pixels[base + 1] = stroke;
                pixels[base + 2] = stroke;
            }
        }
    }
}

// ── augmentation ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Shorter-edge resize range in pixels (snapped to `snap`).
    pub min_short: usize,
    pub max_short: usize,
    pub max_long: usize,
    /// Output dims stay multiples of this (the backbone divisor).
    pub snap: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            min_short: 48,
            max_short: 96,
            max_long: 160,
            snap: 32,
        }
    }
}

/// Random uniform resize (snapped so the backbone accepts the result) plus
/// an instance-aware random crop guaranteed to keep every polygon inside.
/// Ground truth is transformed consistently; coordinates stay normalized.
pub fn augment(
    image: &Tensor,
    gt: &GroundTruth,
    seed: u64,
    cfg: &AugmentConfig,
) -> (Tensor, GroundTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let short = h.min(w);

    // Candidate shorter-edge targets: multiples of snap inside the range
    // that keep the longer edge under the cap.
    let aspect = h.max(w) as Real / short as Real;
    let mut targets: Vec<usize> = (1..=cfg.max_short / cfg.snap)
        .map(|k| k * cfg.snap)
        .filter(|&t| t >= cfg.min_short && (t as Real * aspect).round() as usize <= cfg.max_long)
        .collect();
    if targets.is_empty() {
        targets.push(short);
    }
    let target = targets[rng.gen_range(0..targets.len())];
    let scale = target as Real / short as Real;
    let nh = ((h as Real * scale / cfg.snap as Real).round() as usize).max(1) * cfg.snap;
    let nw = ((w as Real * scale / cfg.snap as Real).round() as usize).max(1) * cfg.snap;
    let resized = if (nh, nw) == (h, w) {
        image.to_vec()
    } else {
        resize_bilinear(&image.data(), h, w, nh, nw)
    };

    // Integer pixel bounding box of all instances in the resized frame.
    let have_instances = !gt.instances.is_empty();
    let (mut ibx0, mut iby0, mut ibx1, mut iby1) = (nw as isize, nh as isize, 0isize, 0isize);
    for inst in &gt.instances {
        for &(x, y) in &inst.polygon.points {
            ibx0 = ibx0.min((x * nw as Real).floor() as isize);
            iby0 = iby0.min((y * nh as Real).floor() as isize);
            ibx1 = ibx1.max((x * nw as Real).ceil() as isize);
            iby1 = iby1.max((y * nh as Real).ceil() as isize);
        }
    }
    let (ibx0, iby0) = (ibx0.max(0) as usize, iby0.max(0) as usize);
    let (ibx1, iby1) = ((ibx1.max(0) as usize).min(nw), (iby1.max(0) as usize).min(nh));
    let snap_up = |v: usize| v.div_ceil(cfg.snap).max(1) * cfg.snap;
    let (cw, ch) = if have_instances {
        (snap_up(ibx1 - ibx0).min(nw), snap_up(iby1 - iby0).min(nh))
    } else {
        (cfg.snap.min(nw), cfg.snap.min(nh))
    };
    // The snapped crop must cover the instance box; fall back to the full
    // frame when it cannot.
    let (cw, ch) = if have_instances && (cw < ibx1 - ibx0 || ch < iby1 - iby0) {
        (nw, nh)
    } else {
        (cw, ch)
    };
    let (x0, y0) = if have_instances {
        let lo_x = ibx1.saturating_sub(cw);
        let hi_x = ibx0.min(nw - cw);
        let lo_y = iby1.saturating_sub(ch);
        let hi_y = iby0.min(nh - ch);
        (
            if hi_x > lo_x { rng.gen_range(lo_x..=hi_x) } else { lo_x },
            if hi_y > lo_y { rng.gen_range(lo_y..=hi_y) } else { lo_y },
        )
    } else {
        (
            if nw > cw { rng.gen_range(0..=(nw - cw)) } else { 0 },
            if nh > ch { rng.gen_range(0..=(nh - ch)) } else { 0 },
        )
    };

    let mut cropped = vec![0.0; ch * cw * 3];
    for i in 0..ch {
        let src = ((y0 + i) * nw + x0) * 3;
        cropped[i * cw * 3..(i + 1) * cw * 3].copy_from_slice(&resized[src..src + cw * 3]);
    }
    let mut out_gt = GroundTruth::default();
    for inst in &gt.instances {
        let points: Vec<(Real, Real)> = inst
            .polygon
            .points
            .iter()
            .map(|&(x, y)| {
                (
                    (x * nw as Real - x0 as Real) / cw as Real,
                    (y * nh as Real - y0 as Real) / ch as Real,
                )
            })
            .collect();
        let polygon = ControlPolygon::new(points);
        let bbox = polygon.bbox();
        out_gt.instances.push(GtInstance {
            polygon,
            transcript: inst.transcript.clone(),
            bbox,
        });
    }
    (Tensor::from_vec(&[ch, cw, 3], cropped), out_gt)
}

fn resize_bilinear(src: &[Real], h: usize, w: usize, nh: usize, nw: usize) -> Vec<Real> {
    let mut out = vec![0.0; nh * nw * 3];
    for i in 0..nh {
        for j in 0..nw {
            let sy = (i as Real + 0.5) * h as Real / nh as Real - 0.5;
            let sx = (j as Real + 0.5) * w as Real / nw as Real - 0.5;
            let i0 = sy.floor().max(0.0) as usize;
            let j0 = sx.floor().max(0.0) as usize;
            let i1 = (i0 + 1).min(h - 1);
            let j1 = (j0 + 1).min(w - 1);
            let fv = (sy - sy.floor()).clamp(0.0, 1.0);
            let fu = (sx - sx.floor()).clamp(0.0, 1.0);
            for c in 0..3 {
                let f00 = src[(i0 * w + j0) * 3 + c];
                let f01 = src[(i0 * w + j1) * 3 + c];
                let f10 = src[(i1 * w + j0) * 3 + c];
                let f11 = src[(i1 * w + j1) * 3 + c];
                out[(i * nw + j) * 3 + c] = (1.0 - fv) * ((1.0 - fu) * f00 + fu * f01)
                    + fv * ((1.0 - fu) * f10 + fu * f11);
            }
        }
    }
    out
}

// ── manifest & image export ──────────────────────────────────────────

/// One JSON scene spec per line.
pub fn write_manifest(path: &Path, scenes: &[SceneSpec]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for scene in scenes {
        let line = serde_json::to_string(scene).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<SceneSpec>> {
    let r = BufReader::new(File::open(path)?);
    let mut scenes = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: SceneSpec = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", ln + 1)))?;
        scenes.push(scene);
    }
    Ok(scenes)
}

/// Binary PPM (P6) export for eyeballing rendered scenes.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    assert_eq!(image.rank(), 3);
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let data = image.data();
    let bytes: Vec<u8> = data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Scene generation for a seed range, optionally fanned out over worker
/// threads (capped by the FTSP_THREADS environment variable); results come
/// back in seed order regardless of the worker count.
pub fn generate_scenes(seeds: std::ops::Range<u64>, cfg: &SynthConfig) -> Vec<SceneSpec> {
    let seeds: Vec<u64> = seeds.collect();
    let workers = worker_count().min(seeds.len().max(1));
    if workers <= 1 {
        return seeds.iter().map(|&s| generate_scene(s, cfg)).collect();
    }
    let chunk = seeds.len().div_ceil(workers);
    let mut out: Vec<Option<SceneSpec>> = vec![None; seeds.len()];
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (w, part) in seeds.chunks(chunk).enumerate() {
            let part = part.to_vec();
            handles.push((
                w,
                scope.spawn(move || {
                    part.into_iter().map(|s| generate_scene(s, cfg)).collect::<Vec<_>>()
                }),
            ));
        }
        for (w, handle) in handles {
            let scenes = handle.join().expect("worker panicked");
            for (i, scene) in scenes.into_iter().enumerate() {
                out[w * chunk + i] = Some(scene);
            }
        }
    });
    out.into_iter().map(|s| s.expect("all slots filled")).collect()
}

pub fn worker_count() -> usize {
    std::env::var("FTSP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{polygon_iou, sample_reference_points};

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        for seed in [0u64, 17, 992] {
            assert_eq!(generate_scene(seed, &cfg), generate_scene(seed, &cfg));
        }
    }

    #[test]
    fn instance_count_histogram_covers_full_range() {
        let cfg = SynthConfig::default();
        let mut histogram = [0usize; 6];
        for seed in 0..1000u64 {
            let scene = generate_scene(seed, &cfg);
            histogram[scene.instances.len()] += 1;
        }
        for (count, hits) in histogram.iter().enumerate() {
            assert!(*hits > 0, "no scene with {count} instances in 1000 seeds");
        }
    }

    #[test]
    fn pairwise_overlap_invariant_holds() {
        let cfg = SynthConfig::default();
        for seed in 0..1000u64 {
            let scene = generate_scene(seed, &cfg);
            let polys: Vec<_> = scene
                .instances
                .iter()
                .map(|i| instance_polygon(i, cfg.control_points))
                .collect();
            for a in 0..polys.len() {
                for b in a + 1..polys.len() {
                    assert!(polygon_iou(&polys[a], &polys[b]) < 0.1, "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn empty_scene_renders_pure_background() {
        let cfg = SynthConfig::default();
        let spec = SceneSpec {
            seed: 0,
            canvas: 32,
            instances: Vec::new(),
            background: BackgroundSpec {
                base: 0.8,
                amplitude: 0.05,
                freq_x: 3.0,
                freq_y: 4.0,
                phase_x: 0.4,
                phase_y: 1.1,
            },
        };
        let (img, gt) = render_scene(&spec, &cfg);
        assert!(gt.instances.is_empty());
        assert!(img.to_vec().iter().all(|&v| v > 0.5));
    }

    #[test]
    fn straight_horizontal_baseline_matches_box_sampling() {
        let inst = InstanceSpec {
            anchors: [(0.2, 0.5), (0.5, 0.5), (0.8, 0.5)],
            height: 0.2,
            transcript: vec![1, 2, 3],
            stroke: 0.1,
        };
        let poly = instance_polygon(&inst, 8);
        let reference = sample_reference_points(&poly.bbox(), 8);
        for (&(ax, ay), &(bx, by)) in poly.points.iter().zip(&reference.points) {
            assert!((ax - bx).abs() < 1e-6 && (ay - by).abs() < 1e-6);
        }
    }

    #[test]
    fn polygon_ordering_is_clockwise_with_m_points() {
        let cfg = SynthConfig::default();
        for seed in 0..200u64 {
            let scene = generate_scene(seed, &cfg);
            let (_, gt) = render_scene(&scene, &cfg);
            for inst in &gt.instances {
                assert_eq!(inst.polygon.len(), cfg.control_points);
                assert!(inst.polygon.is_clockwise(), "seed {seed}");
            }
        }
    }

    #[test]
    fn transcript_length_matches_rendered_glyph_count() {
        let cfg = SynthConfig::default();
        for seed in 0..50u64 {
            let scene = generate_scene(seed, &cfg);
            let (_, gt) = render_scene(&scene, &cfg);
            for (spec_inst, gt_inst) in scene.instances.iter().zip(&gt.instances) {
                assert_eq!(spec_inst.transcript.len(), gt_inst.transcript.chars.len());
            }
        }
    }

    /// Distance from a point to the polygon boundary (0 inside).
    fn outside_distance(poly: &ControlPolygon, x: Real, y: Real) -> Real {
        if poly.contains(x, y) {
            return 0.0;
        }
        let n = poly.points.len();
        let mut best = Real::INFINITY;
        for i in 0..n {
            let (x0, y0) = poly.points[i];
            let (x1, y1) = poly.points[(i + 1) % n];
            let (dx, dy) = (x1 - x0, y1 - y0);
            let len2 = (dx * dx + dy * dy).max(1e-12);
            let t = (((x - x0) * dx + (y - y0) * dy) / len2).clamp(0.0, 1.0);
            let (px, py) = (x0 + t * dx, y0 + t * dy);
            best = best.min(((x - px).powi(2) + (y - py).powi(2)).sqrt());
        }
        best
    }

    #[test]
    fn glyph_pixels_stay_inside_dilated_polygons() {
        let cfg = SynthConfig::default();
        for seed in 0..500u64 {
            let scene = generate_scene(seed, &cfg);
            let (img, gt) = render_scene(&scene, &cfg);
            let background_only = SceneSpec {
                instances: Vec::new(),
                ..scene.clone()
            };
            let (bg, _) = render_scene(&background_only, &cfg);
            let n = scene.canvas;
            let id = img.data();
            let bd = bg.data();
            let px = 1.0 / n as Real;
            for i in 0..n {
                for j in 0..n {
                    let base = (i * n + j) * 3;
                    if (id[base] - bd[base]).abs() < 1e-9 {
                        continue;
                    }
                    let x = (j as Real + 0.5) / n as Real;
                    let y = (i as Real + 0.5) / n as Real;
                    let ok = gt
                        .instances
                        .iter()
                        .any(|inst| outside_distance(&inst.polygon, x, y) <= px);
                    assert!(ok, "seed {seed}: glyph pixel ({x:.3},{y:.3}) escaped its polygon");
                }
            }
        }
    }

    #[test]
    fn render_is_bit_deterministic() {
        let cfg = SynthConfig::default();
        let scene = generate_scene(41, &cfg);
        let (a, _) = render_scene(&scene, &cfg);
        let (b, _) = render_scene(&scene, &cfg);
        assert_eq!(
            a.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn identity_augment_is_a_no_op() {
        let cfg = SynthConfig::default();
        // A scene whose instances force a full-frame crop.
        let scene = generate_scene(3, &cfg);
        let (img, gt) = render_scene(&scene, &cfg);
        let aug_cfg = AugmentConfig {
            min_short: 64,
            max_short: 64,
            max_long: 160,
            snap: 64,
        };
        let (out, out_gt) = augment(&img, &gt, 9, &aug_cfg);
        assert_eq!(out.shape(), img.shape());
        assert_eq!(out.to_vec(), img.to_vec());
        for (a, b) in out_gt.instances.iter().zip(&gt.instances) {
            for (&(ax, ay), &(bx, by)) in a.polygon.points.iter().zip(&b.polygon.points) {
                assert!((ax - bx).abs() < 1e-12 && (ay - by).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn augmented_points_stay_normalized() {
        let cfg = SynthConfig::default();
        let aug_cfg = AugmentConfig::default();
        for seed in 0..100u64 {
            let scene = generate_scene(seed, &cfg);
            let (img, gt) = render_scene(&scene, &cfg);
            let (out, out_gt) = augment(&img, &gt, seed.wrapping_mul(31), &aug_cfg);
            assert!(out.shape()[0] % aug_cfg.snap == 0 && out.shape()[1] % aug_cfg.snap == 0);
            for inst in &out_gt.instances {
                for &(x, y) in &inst.polygon.points {
                    assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y), "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn resize_scales_pixel_areas_quadratically() {
        let cfg = SynthConfig::default();
        let aug_cfg = AugmentConfig {
            min_short: 96,
            max_short: 96,
            max_long: 200,
            snap: 32,
        };
        for seed in 0..100u64 {
            let scene = generate_scene(seed, &cfg);
            if scene.instances.is_empty() {
                continue;
            }
            let (img, gt) = render_scene(&scene, &cfg);
            let (h, w) = (img.shape()[0], img.shape()[1]);
            let (out, out_gt) = augment(&img, &gt, seed, &aug_cfg);
            // Square 64px canvas, fixed 96px target: a uniform 1.5x resize.
            // Pixel-space polygon areas are invariant under the crop's
            // translation, so they scale with the square of the resize.
            let scale = 96.0 as Real / h as Real;
            let area_px = |poly: &ControlPolygon, ph: usize, pw: usize| {
                let pts: Vec<(Real, Real)> = poly
                    .points
                    .iter()
                    .map(|&(x, y)| (x * pw as Real, y * ph as Real))
                    .collect();
                ControlPolygon::new(pts).area()
            };
            for (a, b) in out_gt.instances.iter().zip(&gt.instances) {
                let before = area_px(&b.polygon, h, w);
                let after = area_px(&a.polygon, out.shape()[0], out.shape()[1]);
                assert!(
                    (after / before - scale * scale).abs() < 1e-6,
                    "seed {seed}: ratio {} vs {}",
                    after / before,
                    scale * scale
                );
            }
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let cfg = SynthConfig::default();
        let scenes: Vec<SceneSpec> = (0..5).map(|s| generate_scene(s, &cfg)).collect();
        let path = std::env::temp_dir().join("ftsp_manifest_test.jsonl");
        write_manifest(&path, &scenes).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(scenes, back);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn parallel_generation_matches_serial() {
        let cfg = SynthConfig::default();
        let serial: Vec<SceneSpec> = (0..20).map(|s| generate_scene(s, &cfg)).collect();
        std::env::set_var("FTSP_THREADS", "3");
        let parallel = generate_scenes(0..20, &cfg);
        std::env::remove_var("FTSP_THREADS");
        assert_eq!(serial, parallel);
    }
}
