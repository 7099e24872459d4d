//! Prints raw predictions next to ground truth for one scene; a scratch
//! inspection tool:
//! cargo run --example diag -- <ckpt> <config.json> <scene_seed>

use ftsp_core::geometry::polygon_iou;
use ftsp_core::model::{decode_transcript, Model};
use ftsp_core::synthdata::{generate_scene, render_scene};
use ftsp_harness::config::RunConfig;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let model = Model::load(std::path::Path::new(&args[1]))?;
    let cfg = RunConfig::load(std::path::Path::new(&args[2]))?;
    let seed: u64 = args[3].parse()?;
    let scene = generate_scene(seed, &cfg.synth);
    let (image, gt) = render_scene(&scene, &cfg.synth);
    let preds = model.forward(&image, false);

    println!("== scene {seed}: {} instances", gt.instances.len());
    for (i, inst) in gt.instances.iter().enumerate() {
        let b = inst.bbox;
        println!(
            "gt[{i}] box=({:.2},{:.2},{:.2},{:.2}) text={:?}",
            b.cx, b.cy, b.w, b.h, inst.transcript.chars
        );
    }

    let scores = preds.proposal_scores.to_vec();
    let boxes = preds.proposal_boxes.to_vec();
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    println!("-- top proposals (of {}):", scores.len());
    for &t in idx.iter().take(6) {
        println!(
            "  tok {t} score {:.3} box ({:.2},{:.2},{:.2},{:.2})",
            scores[t],
            boxes[t * 4],
            boxes[t * 4 + 1],
            boxes[t * 4 + 2],
            boxes[t * 4 + 3]
        );
    }

    let last = preds.final_layer();
    let conf = last.confidence.to_vec();
    let pts = last.points.to_vec();
    let chars = last.char_logits.to_vec();
    let (k, m) = (last.points.shape()[0], last.points.shape()[1]);
    let (a, classes) = (last.char_logits.shape()[1], last.char_logits.shape()[2]);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| conf[y].partial_cmp(&conf[x]).unwrap());
    println!("-- decoder outputs (conf-sorted, top 6 of {k}):");
    for &q in order.iter().take(6) {
        let poly = ftsp_core::geometry::ControlPolygon::new(
            pts[q * m * 2..(q + 1) * m * 2]
                .chunks_exact(2)
                .map(|c| (c[0], c[1]))
                .collect(),
        );
        let best_iou = gt
            .instances
            .iter()
            .map(|i| polygon_iou(&poly, &i.polygon))
            .fold(0.0, ftsp_core::Real::max);
        let decoded = decode_transcript(&chars[q * a * classes..(q + 1) * a * classes], a, classes);
        let bb = poly.bbox();
        println!(
            "  q{q} conf {:.3} best-IoU {:.3} bbox ({:.2},{:.2},{:.2},{:.2}) text {:?}",
            conf[q], best_iou, bb.cx, bb.cy, bb.w, bb.h, decoded
        );
    }
    Ok(())
}
