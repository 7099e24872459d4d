use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use ftsp_core::model::Model;
use ftsp_core::synthdata::{generate_scene, generate_scenes, read_manifest, render_scene, write_manifest, write_ppm};

use ftsp_harness::ablate::{ablate, format_table};
use ftsp_harness::attnviz::dump_attention;
use ftsp_harness::bench::{bench, compare_modes, random_image};
use ftsp_harness::config::RunConfig;
use ftsp_harness::eval::{evaluate, Lexicon};
use ftsp_harness::train::train;

#[derive(Parser)]
#[command(name = "ftsp", about = "Curved-text spotting on synthetic scenes: data, training, evaluation, benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttentionMode {
    Sac2,
    Vanilla,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a JSONL scene manifest from sequential seeds.
    GenData {
        /// Number of scene seeds (0..N).
        #[arg(long)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        /// Run config supplying the synth section (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also export rendered scenes as PPM images into this directory.
        #[arg(long)]
        dump_images: Option<PathBuf>,
    },
    /// Train a model and write checkpoints plus loss/curve CSVs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest; prints the report as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// "full" enables lexicon correction over the split's vocabulary.
        #[arg(long)]
        lexicon: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Skip this many manifest entries first.
        #[arg(long, default_value_t = 0)]
        skip: usize,
        /// Evaluate at most this many entries (0 = all).
        #[arg(long, default_value_t = 0)]
        take: usize,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time eval-mode forwards and report the SAC2-vs-vanilla overhead.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "sac2")]
        mode: AttentionMode,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 10)]
        timed: usize,
        /// Square input edge in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Run the five-row resampling / SAC2 ablation table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated training seeds; the median is reported.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the default run configuration as a starting point.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-layer, per-head encoder attention heatmaps as PGM files.
    DumpAttn {
        #[arg(long)]
        ckpt: PathBuf,
        /// Scene seed rendered as the probe input.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData { seeds, out, config, dump_images } => {
            let cfg = load_config(&config)?;
            let scenes = generate_scenes(0..seeds, &cfg.synth);
            write_manifest(&out, &scenes)?;
            if let Some(dir) = dump_images {
                std::fs::create_dir_all(&dir)?;
                for scene in &scenes {
                    let (image, _) = render_scene(scene, &cfg.synth);
                    write_ppm(&dir.join(format!("scene_{:05}.ppm", scene.seed)), &image)?;
                }
            }
            println!("wrote {} scenes to {}", scenes.len(), out.display());
        }
        Cmd::Train { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let scenes = read_manifest(&data)?;
            std::fs::create_dir_all(&out)?;
            let model = Model::seeded(cfg.train.seed, &cfg.model);
            let summary = train(&model, &scenes, &cfg, Some(&out))?;
            println!(
                "trained {} iterations; loss {:.4} -> {:.4}; artifacts in {}",
                cfg.train.iterations,
                summary.first_loss,
                summary.final_loss,
                out.display()
            );
        }
        Cmd::Eval { ckpt, data, lexicon, config, skip, take, out } => {
            let cfg = load_config(&config)?;
            let model = Model::load(&ckpt).context("loading checkpoint")?;
            let mut scenes = read_manifest(&data)?;
            if skip > 0 {
                scenes.drain(..skip.min(scenes.len()));
            }
            if take > 0 {
                scenes.truncate(take);
            }
            let mode = match lexicon.as_deref() {
                None => Lexicon::None,
                Some("full") => Lexicon::Full,
                Some(other) => anyhow::bail!("unknown lexicon mode `{other}` (expected `full`)"),
            };
            let report = evaluate(&model, &scenes, &cfg.synth, &cfg.eval, mode);
            let json = report.to_json();
            if let Some(path) = out {
                std::fs::write(&path, &json)?;
            }
            println!("{json}");
        }
        Cmd::Bench { ckpt, mode, warmup, timed, size } => {
            let model = Model::load(&ckpt).context("loading checkpoint")?;
            let image = random_image(0, size, size);
            let mut cfg = model.cfg.clone();
            let sac2_on = mode == AttentionMode::Sac2;
            cfg.sac2_location = sac2_on;
            cfg.sac2_recognition = sac2_on;
            let primary = if cfg == model.cfg {
                bench(&model, &image, warmup, timed)
            } else {
                bench(&Model::seeded(0, &cfg), &image, warmup, timed)
            };
            println!(
                "forward latency: median {:.2} ms (p10 {:.2}, p90 {:.2}) over {} runs",
                primary.median_ms, primary.p10_ms, primary.p90_ms, primary.samples_ms.len()
            );
            let cmp = compare_modes(&model.cfg, &image, warmup, timed);
            println!(
                "sac2 {:.2} ms vs vanilla {:.2} ms: overhead {:+.1}%",
                cmp.sac2.median_ms,
                cmp.vanilla.median_ms,
                cmp.overhead * 100.0
            );
            println!("note: {}", primary.disclaimer);
        }
        Cmd::Ablate { config, data, seeds, out } => {
            let cfg = RunConfig::load(&config)?;
            let scenes = read_manifest(&data)?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>().context("parsing seed list"))
                .collect::<anyhow::Result<_>>()?;
            let rows = ablate(&cfg, &scenes, &seeds)?;
            let table = format_table(&rows);
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&rows)?)?;
            }
            print!("{table}");
        }
        Cmd::InitConfig { out } => {
            RunConfig::default().save(&out)?;
            println!("wrote default config to {}", out.display());
        }
        Cmd::DumpAttn { ckpt, seed, out, config } => {
            let cfg = load_config(&config)?;
            let model = Model::load(&ckpt).context("loading checkpoint")?;
            let scene = generate_scene(seed, &cfg.synth);
            let (image, _) = render_scene(&scene, &cfg.synth);
            let files = dump_attention(&model, &image, &out)?;
            println!("wrote {} heatmaps to {}", files.len(), out.display());
        }
    }
    Ok(())
}
