use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use panoseg::data::{classes, generate_dataset, write_pfm, Dataset, DiskDataset, Sample};
use panoseg::geometry::{backproject, free_floor, obstacle_map, room_structure, DEFAULT_CLEARANCE};
use panoseg::network::checkpoint;
use panoseg::train::{evaluate, evaluate_oracle, predict_sample, run, RunConfig, TrainMode};
use panoseg::{ModelConfig, Network, Tensor};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "panoseg", version, about = "Joint depth and semantic segmentation on 360° panoramas")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Joint,
    Depth,
    Semantic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ExtraLoss {
    /// Depth-extrema margin term.
    Mar,
    /// Per-class object depth term.
    Obj,
    /// Neither extra term (segmentation and depth only).
    None,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and logs to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Extra loss terms on top of segmentation and depth (joint mode), e.g. `mar,obj` or `none`.
        #[arg(long, value_enum, value_delimiter = ',')]
        loss_ablation: Option<Vec<ExtraLoss>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a split and print a JSON metrics report.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Score ground truth against itself instead of model predictions.
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value_t = classes::NUM_CLASSES)]
        num_classes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict depth and labels for one panorama.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the point cloud, room structure, free-floor and obstacle grids.
        #[arg(long)]
        reconstruct: bool,
        #[arg(long, default_value_t = 0.25)]
        cell_size: f64,
        #[arg(long, default_value_t = classes::FLOOR)]
        floor_class: u8,
    },
    /// Time forward passes and report frames per second.
    Bench {
        /// Use this checkpoint's architecture and weights; random default weights otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long)]
        json: bool,
    },
    /// Render a synthetic dataset with split manifests.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        train: usize,
        #[arg(long, default_value_t = 8)]
        val: usize,
        #[arg(long, default_value_t = 8)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Serialize)]
struct BenchReport {
    extent: String,
    iterations: usize,
    mean_ms: f64,
    std_ms: f64,
    fps: f64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            seed,
            mode,
            loss_ablation,
            epochs,
            data,
            out,
        } => {
            let mut cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = mode {
                cfg.mode = match m {
                    ModeArg::Joint => TrainMode::Joint,
                    ModeArg::Depth => TrainMode::Depth,
                    ModeArg::Semantic => TrainMode::Semantic,
                };
            }
            if let Some(extra) = loss_ablation {
                if extra.contains(&ExtraLoss::None) && extra.len() > 1 {
                    bail!("--loss-ablation: `none` cannot be combined with other terms");
                }
                cfg.use_margin = extra.contains(&ExtraLoss::Mar);
                cfg.use_object = extra.contains(&ExtraLoss::Obj);
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(d) = data {
                cfg.data_dir = d;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg.validate()?;
            let outcome = run(&cfg)?;
            let best = outcome.best_epoch.and_then(|e| outcome.epochs[e].validation.clone());
            println!("{}", serde_json::to_string(&serde_json::json!({
                "mode": cfg.mode,
                "use_margin": cfg.use_margin,
                "use_object": cfg.use_object,
                "steps": outcome.steps.len(),
                "best_epoch": outcome.best_epoch,
                "validation": best,
            }))?);
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            split,
            oracle,
            num_classes,
            out,
        } => {
            let ds = DiskDataset::open(&data, &split).with_context(|| format!("opening split {split}"))?;
            let report = if oracle {
                evaluate_oracle(&ds, num_classes)?
            } else {
                let Some(path) = ckpt else { bail!("--checkpoint is required unless --oracle is given") };
                let (mc, state) = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
                check_extent(&mc, &ds)?;
                evaluate(&Network::new(mc)?, &state, &ds)?
            };
            let json = report.to_json()?;
            if let Some(o) = out {
                std::fs::write(&o, &json)?;
            }
            println!("{json}");
        }
        Command::Infer {
            checkpoint: ckpt,
            input,
            out,
            reconstruct,
            cell_size,
            floor_class,
        } => infer(&ckpt, &input, &out, reconstruct, cell_size, floor_class)?,
        Command::Bench {
            checkpoint: ckpt,
            height,
            iterations,
            warmup,
            json,
        } => {
            if iterations < 10 {
                bail!("--iterations must be at least 10, got {iterations}");
            }
            let r = bench(ckpt.as_deref(), height, iterations, warmup)?;
            if json {
                println!("{}", serde_json::to_string(&r)?);
            } else {
                println!(
                    "extent {}: {:.1} ms ± {:.1} ms per frame, {:.3} fps over {} iterations",
                    r.extent, r.mean_ms, r.std_ms, r.fps, r.iterations
                );
            }
        }
        Command::GenData {
            out,
            height,
            train,
            val,
            test,
            seed,
        } => {
            generate_dataset(&out, &[("train", train), ("val", val), ("test", test)], height, 2 * height, seed)?;
            println!("wrote {} samples to {}", train + val + test, out.display());
        }
    }
    Ok(())
}

fn check_extent(mc: &ModelConfig, ds: &DiskDataset) -> Result<()> {
    if let Some(first) = (0..ds.len()).next() {
        let s = ds.get(first)?;
        if (s.height, s.width) != (mc.height, mc.width) {
            bail!(
                "checkpoint expects {}x{} panoramas but {} is {}x{}",
                mc.width,
                mc.height,
                s.id,
                s.width,
                s.height
            );
        }
    }
    Ok(())
}

fn infer(ckpt: &Path, input: &Path, out: &Path, reconstruct: bool, cell_size: f64, floor_class: u8) -> Result<()> {
    let (mc, state) = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let img = image::open(input).with_context(|| format!("reading {}", input.display()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != 2 * h {
        bail!("{}: panorama must be twice as wide as high, got {w}x{h}", input.display());
    }
    let n = h * w;
    let sample = Sample {
        id: "input".into(),
        height: h,
        width: w,
        rgb: img.into_raw(),
        depth: vec![0.0; n],
        labels: vec![0; n],
    };
    let net = Network::new(mc)?;
    let pred = predict_sample(&net, &state, &sample)?;
    std::fs::create_dir_all(out)?;
    write_pfm(&out.join("depth.pfm"), &pred.depth, h, w)?;
    image::GrayImage::from_raw(w as u32, h as u32, pred.labels.clone())
        .context("label buffer")?
        .save(out.join("labels.png"))?;
    if reconstruct {
        let cloud = backproject(&pred.depth, &sample.rgb, &pred.labels, None, h, w)?;
        cloud.save_ply(&out.join("cloud.ply"))?;
        room_structure(&cloud, &classes::STRUCTURAL).save_ply(&out.join("structure.ply"))?;
        free_floor(&cloud, floor_class, cell_size)?.save_pgm(&out.join("free_floor.pgm"))?;
        obstacle_map(&cloud, floor_class, &[classes::CEILING], cell_size, DEFAULT_CLEARANCE)?
            .save_pgm(&out.join("obstacles.pgm"))?;
        log::info!("reconstruction: {} points", cloud.len());
    }
    println!("wrote predictions for {} to {}", input.display(), out.display());
    Ok(())
}

fn bench(ckpt: Option<&Path>, height: usize, iterations: usize, warmup: usize) -> Result<BenchReport> {
    let (mc, state) = match ckpt {
        Some(p) => {
            let (mc, state) = checkpoint::load(p)?;
            (mc.with_extent(height, 2 * height), state)
        }
        None => {
            let mc = ModelConfig::default().with_extent(height, 2 * height);
            let state = Network::new(mc.clone())?.init(0);
            (mc, state)
        }
    };
    let net = Network::new(mc.clone())?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let input = Tensor::uniform(&[1, 3, mc.height, mc.width], 0.0, 1.0, &mut rng);
    for _ in 0..warmup {
        net.predict(&state, &input)?;
    }
    let mut times = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        net.predict(&state, &input)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / iterations as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (iterations - 1) as f64;
    Ok(BenchReport {
        extent: format!("{}x{}", mc.width, mc.height),
        iterations,
        mean_ms: mean,
        std_ms: var.sqrt(),
        fps: 1e3 / mean,
    })
}
