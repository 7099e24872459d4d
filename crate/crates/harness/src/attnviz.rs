//! Encoder attention heatmaps: per layer and head, every token's sampling
//! weights are splatted bilinearly onto the finest feature grid, averaged,
//! scaled to [0, 255], and written as one binary PGM per (layer, head).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ftsp_core::model::{Model, Predictions};
use ftsp_core::tensor::Tensor;
use ftsp_core::{Error, Real, Result};

/// Splat map for one (layer, head): `[h0, w0]` of accumulated weight.
fn head_heatmap(
    weights: &[Real],
    offsets: &[Real],
    coords: &[Real],
    head: usize,
    heads: usize,
    level_dims: &[(usize, usize)],
    points: usize,
) -> Vec<Real> {
    let (h0, w0) = level_dims[0];
    let levels = level_dims.len();
    let tokens = coords.len() / 2;
    let mut map = vec![0.0; h0 * w0];
    for q in 0..tokens {
        for l in 0..levels {
            for p in 0..points {
                let w = weights[(q * heads + head) * levels * points + l * points + p];
                let o = ((q * heads + head) * levels * points + l * points + p) * 2;
                let x = coords[2 * q] + offsets[o];
                let y = coords[2 * q + 1] + offsets[o + 1];
                // Bilinear splat onto the finest grid.
                let u = x * w0 as Real - 0.5;
                let v = y * h0 as Real - 0.5;
                let j0 = u.floor() as isize;
                let i0 = v.floor() as isize;
                let fu = u - u.floor();
                let fv = v - v.floor();
                for (di, dj, wt) in [
                    (0, 0, (1.0 - fv) * (1.0 - fu)),
                    (0, 1, (1.0 - fv) * fu),
                    (1, 0, fv * (1.0 - fu)),
                    (1, 1, fv * fu),
                ] {
                    let i = i0 + di;
                    let j = j0 + dj;
                    if i >= 0 && j >= 0 && (i as usize) < h0 && (j as usize) < w0 {
                        map[i as usize * w0 + j as usize] += w * wt;
                    }
                }
            }
        }
    }
    for v in map.iter_mut() {
        *v /= tokens as Real;
    }
    map
}

pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    assert_eq!(bytes.len(), width * height);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(bytes)?;
    Ok(())
}

/// Writes one grayscale PGM per (encoder layer, head); values are scaled so
/// the hottest cell maps to 255 (a constant map renders uniformly).
pub fn dump_attention(model: &Model, image: &Tensor, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", out_dir.display()))))?;
    let preds = model.forward(image, false);
    dump_prediction_attention(model, &preds, out_dir)
}

pub fn dump_prediction_attention(
    model: &Model,
    preds: &Predictions,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let heads = model.cfg.heads;
    let points = model.cfg.sampling_points;
    let (h0, w0) = preds.level_dims[0];
    // Token-center coordinates per level, flattened in level order.
    let mut coords = Vec::new();
    for &(h, w) in &preds.level_dims {
        for i in 0..h {
            for j in 0..w {
                coords.push((j as Real + 0.5) / w as Real);
                coords.push((i as Real + 0.5) / h as Real);
            }
        }
    }
    let mut written = Vec::new();
    for (layer, (weights_t, offsets_t)) in preds.enc_attention.iter().enumerate() {
        let weights = weights_t.to_vec();
        let offsets = offsets_t.to_vec();
        for head in 0..heads {
            let map = head_heatmap(&weights, &offsets, &coords, head, heads, &preds.level_dims, points);
            let peak = map.iter().cloned().fold(0.0 as Real, Real::max);
            let bytes: Vec<u8> = map
                .iter()
                .map(|&v| if peak > 0.0 { (v / peak * 255.0).round() as u8 } else { 0 })
                .collect();
            let path = out_dir.join(format!("layer{layer}_head{head}.pgm"));
            write_pgm(&path, w0, h0, &bytes)?;
            written.push(path);
        }
    }
    Ok(written)
}
