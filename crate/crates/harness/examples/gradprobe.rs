//! Prints the loss gradient on selected heads for a trained checkpoint; a
//! scratch tool for diagnosing slow confidence learning.
//! cargo run --example gradprobe -- <ckpt> <config.json>

use ftsp_core::criterion::{match_instances, total_losses};
use ftsp_core::model::Model;
use ftsp_core::nn::Module;
use ftsp_core::synthdata::{generate_scene, render_scene};
use ftsp_harness::config::RunConfig;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let model = Model::load(std::path::Path::new(&args[1]))?;
    let cfg = RunConfig::load(std::path::Path::new(&args[2]))?;

    let tensors = model.named_tensors("");
    let watch = ["tld.class_head.b", "tld.class_head.w", "encoder.score_head.b", "tld.delta_head.w"];
    for seed in [501u64, 502, 507] {
        let scene = generate_scene(seed, &cfg.synth);
        let (image, gt) = render_scene(&scene, &cfg.synth);
        for (_, t) in model.parameters() {
            t.zero_grad();
        }
        let preds = model.forward(&image, true);
        let (loss, parts) = total_losses(&preds, &gt, &cfg.loss);
        loss.backward();
        println!(
            "scene {seed}: {} instances, loss {:.3} ({:?})",
            gt.instances.len(),
            loss.item(),
            parts
        );
        let last = preds.final_layer();
        let conf = last.confidence.to_vec();
        let pts = last.points.to_vec();
        let m = last.points.shape()[1];
        let mat = match_instances(&conf, &pts, m, &gt, None, &cfg.loss);
        println!("  matched queries {:?}", mat.assigned);
        println!(
            "  matched conf {:?}",
            mat.assigned.iter().map(|&q| conf[q]).collect::<Vec<_>>()
        );
        let mean_conf: ftsp_core::Real = conf.iter().sum::<ftsp_core::Real>() / conf.len() as ftsp_core::Real;
        println!("  mean conf {mean_conf:.4}");
        for name in watch {
            if let Some((_, t)) = tensors.iter().find(|(n, _)| n == name) {
                let g = t.grad().unwrap_or_default();
                let norm: ftsp_core::Real = g.iter().map(|v| v * v).sum::<ftsp_core::Real>().sqrt();
                let head: Vec<_> = g.iter().take(3).collect();
                println!("  grad {name}: norm {norm:.5} head {head:?}");
            }
        }
    }
    Ok(())
}
