//! End-to-end smoke test of the `ftsp` binary: generate data, train a tiny
//! model, evaluate, benchmark, dump attention maps, and check the emitted
//! artifacts.

use std::path::Path;
use std::process::Command;

fn ftsp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ftsp"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawning ftsp");
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "command failed\nstdout: {stdout}\nstderr: {stderr}");
    stdout
}

#[test]
fn cli_pipeline_smoke() {
    let dir = std::env::temp_dir().join(format!("ftsp_cli_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();

    // Config: write defaults, then shrink everything for speed.
    let cfg_path = dir.join("run.json");
    run_ok(ftsp().args(["init-config", "--out"]).arg(&cfg_path));
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg["model"]["d"] = 16.into();
    cfg["model"]["enc_layers"] = 1.into();
    cfg["model"]["dec_layers"] = 1.into();
    cfg["model"]["queries"] = 4.into();
    cfg["model"]["control_points"] = 4.into();
    cfg["model"]["char_slots"] = 3.into();
    cfg["model"]["vocab"] = 5.into();
    cfg["model"]["ffn_dim"] = 32.into();
    cfg["model"]["heads"] = 2.into();
    cfg["model"]["sampling_points"] = 2.into();
    cfg["model"]["backbone"]["heads"] = 2.into();
    cfg["train"]["iterations"] = 8.into();
    cfg["train"]["decay_milestone"] = 6.into();
    cfg["train"]["train_scenes"] = 3.into();
    cfg["train"]["val_scenes"] = 2.into();
    cfg["train"]["checkpoint_interval"] = 4.into();
    cfg["synth"]["canvas"] = 32.into();
    cfg["synth"]["alphabet"] = 5.into();
    cfg["synth"]["max_instances"] = 2.into();
    cfg["synth"]["max_chars"] = 3.into();
    cfg["synth"]["control_points"] = 4.into();
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    // Unknown keys must be rejected.
    let bad_path = dir.join("bad.json");
    let mut bad = cfg.clone();
    bad["train"]["bogus_knob"] = 1.into();
    std::fs::write(&bad_path, serde_json::to_string(&bad).unwrap()).unwrap();
    let out = ftsp()
        .args(["train", "--config"])
        .arg(&bad_path)
        .args(["--data", "x", "--out", "y"])
        .output()
        .unwrap();
    assert!(!out.status.success(), "bogus config key must fail");

    // gen-data with PPM dumps.
    let manifest = dir.join("scenes.jsonl");
    let images = dir.join("images");
    run_ok(
        ftsp()
            .args(["gen-data", "--seeds", "5", "--out"])
            .arg(&manifest)
            .arg("--config")
            .arg(&cfg_path)
            .arg("--dump-images")
            .arg(&images),
    );
    assert_eq!(std::fs::read_dir(&images).unwrap().count(), 5);
    let ppm = std::fs::read(images.join("scene_00000.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n32 32\n255\n"));

    // train: streams CSVs and saves periodic + final checkpoints.
    let run_dir = dir.join("run");
    run_ok(
        ftsp()
            .args(["train", "--config"])
            .arg(&cfg_path)
            .arg("--data")
            .arg(&manifest)
            .arg("--out")
            .arg(&run_dir),
    );
    let loss_csv = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert!(loss_csv.starts_with("iter,total,enc_cls,enc_coord,enc_giou,dec_cls,dec_coord,dec_char"));
    assert_eq!(loss_csv.lines().count(), 9); // header + 8 iterations
    assert!(run_dir.join("model_000004.ckpt").exists());
    assert!(run_dir.join("model_000008.ckpt").exists());
    let ckpt = run_dir.join("model_final.ckpt");
    assert!(ckpt.exists());

    // eval with the full lexicon; report is valid JSON with the metrics.
    let report_path = dir.join("report.json");
    let stdout = run_ok(
        ftsp()
            .args(["eval", "--ckpt"])
            .arg(&ckpt)
            .arg("--data")
            .arg(&manifest)
            .args(["--lexicon", "full", "--skip", "3", "--take", "2", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&report_path),
    );
    let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!(report["detection"]["f"].is_number());
    assert!(report["e2e_full"]["f"].is_number());
    assert_eq!(report["scenes"].as_array().unwrap().len(), 2);
    assert_eq!(std::fs::read_to_string(&report_path).unwrap(), stdout.trim_end_matches('\n'));

    // bench prints latency plus the mode comparison and disclaimer.
    let stdout = run_ok(
        ftsp()
            .args(["bench", "--ckpt"])
            .arg(&ckpt)
            .args(["--mode", "vanilla", "--warmup", "1", "--timed", "2", "--size", "32"]),
    );
    assert!(stdout.contains("median"));
    assert!(stdout.contains("vanilla"));
    assert!(stdout.contains("note:"));

    // dump-attn: enc_layers x heads PGM files.
    let heat = dir.join("heat");
    run_ok(
        ftsp()
            .args(["dump-attn", "--ckpt"])
            .arg(&ckpt)
            .args(["--seed", "2", "--out"])
            .arg(&heat)
            .arg("--config")
            .arg(&cfg_path),
    );
    let files: Vec<_> = std::fs::read_dir(&heat).unwrap().collect();
    assert_eq!(files.len(), 1 * 2); // 1 encoder layer x 2 heads
    let pgm = std::fs::read(heat.join("layer0_head0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
    let pixels = &pgm[b"P5\n8 8\n255\n".len()..];
    assert_eq!(pixels.len(), 64);

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn uniform_attention_gives_uniform_heatmaps() {
    use ftsp_core::model::{BackboneConfig, Model, ModelConfig};
    use ftsp_harness::attnviz::dump_attention;
    use ftsp_harness::bench::random_image;

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
        backbone: BackboneConfig { heads: 2, ..Default::default() },
        sac2_location: true,
        sac2_recognition: true,
        resample_points: true,
    };
    let model = Model::seeded(0, &cfg);
    // Zero the offset heads of the encoder's deformable attention so every
    // sample lands on its own token with uniform weights.
    for (name, t) in ftsp_core::nn::Module::named_tensors(&model, "m") {
        if name.contains("encoder") && (name.contains("offset_head") || name.contains("weight_head")) {
            let mut d = t.data_mut();
            for v in d.iter_mut() {
                *v = 0.0;
            }
        }
    }
    let dir = std::env::temp_dir().join(format!("ftsp_heat_{}", std::process::id()));
    let files = dump_attention(&model, &random_image(1, 32, 32), &dir).unwrap();
    assert_eq!(files.len(), 2);
    for f in &files {
        let bytes = std::fs::read(f).unwrap();
        let header = b"P5\n8 8\n255\n";
        assert!(bytes.starts_with(header));
        let pixels = &bytes[header.len()..];
        // Uniform weights with zero offsets splat perfectly evenly.
        assert!(
            pixels.iter().all(|&p| p == pixels[0]),
            "non-uniform heatmap {f:?}: {pixels:?}"
        );
        assert!(pixels.iter().all(|&p| p == 255));
    }
    std::fs::remove_dir_all(&dir).ok();
}
