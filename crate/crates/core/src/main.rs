use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crocnet::bench::{bench_scaling, BenchBlock};
use crocnet::data::{read_label_map, read_tensor, synth_generate, write_tensor, Case, DatasetIndex, SynthConfig, TensorData};
use crocnet::gradcheck::{run_all, run_check, GradCheckOptions, REGISTERED};
use crocnet::infer::{infer_pipeline, infer_stage1, Stage1Model, Stage2Model};
use crocnet::metrics::eval_report;
use crocnet::networks::{param_count, UNetConfig};
use crocnet::pipeline::{crop_and_binarize, detect_heart, BboxRecord, NUM_CLASSES};
use crocnet::train::{train_stage1, train_stage2, TrainConfig};
use crocnet::{Error, Result, Scalar, Tensor};

#[derive(Parser)]
#[command(name = "crocnet", version, about = "Two-stage cardiac segmentation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON training configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Accepted for interface compatibility; all work runs on one thread.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        cases: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
    },
    /// Train the stage-1 network.
    TrainStage1 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write stage-1 soft maps and label maps.
    InferStage1 {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Crop each case around the detected heart using stage-1 soft maps.
    Crop {
        /// Directory written by infer-stage1.
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the weight-shared specialists.
    TrainStage2 {
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint; overrides the configuration's entry.
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Full two-stage inference.
    Infer {
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted label maps against ground truth.
    Eval {
        /// Directory of `{id}_labels.ctf` files.
        #[arg(long)]
        pred: PathBuf,
        /// Dataset index file, or a directory holding `index.json`.
        #[arg(long)]
        gt: PathBuf,
        /// CSV destination; defaults to `eval.csv` inside the prediction directory.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference gradient checks (always 64-bit).
    Gradcheck {
        #[arg(long)]
        all: bool,
        names: Vec<String>,
    },
    /// Runtime scaling of an attention block.
    BenchAttention {
        #[arg(long, default_value = "e2a")]
        block: String,
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096,16384")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learnable parameter count of a network.
    ParamCount {
        #[arg(long, default_value_t = 1)]
        stage: u8,
        #[arg(long, value_delimiter = ',')]
        channels: Option<Vec<usize>>,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
}

fn train_config(global: &Global, stage: u8, overrides: &Overrides) -> Result<TrainConfig> {
    let mut cfg = match &global.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    cfg.stage = stage;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(e) = overrides.epochs {
        cfg.epochs = e;
        cfg.lr_drops.retain(|&d| d < e);
    }
    if let Some(lr) = overrides.lr {
        cfg.lr = lr;
    }
    if let Some(c) = &overrides.channels {
        cfg.stage_channels = Some(c.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn index_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("index.json")
    } else {
        p.to_path_buf()
    }
}

fn load_cases<T: Scalar>(data: &Path) -> Result<Vec<Case<T>>> {
    DatasetIndex::load(index_path(data))?.load_all()
}

fn crop_dataset<T: Scalar>(stage1_dir: &Path, data: &Path, out: &Path, global: &Global) -> Result<()> {
    let crop_cfg = match &global.config {
        Some(path) => TrainConfig::load(path)?.crop,
        None => Default::default(),
    };
    fs::create_dir_all(out)?;
    let mut log = fs::File::create(out.join("bbox.jsonl"))?;
    for case in load_cases::<T>(data)? {
        let soft = read_tensor(stage1_dir.join(format!("{}_soft.ctf", case.id)))?.into_tensor::<T>()?;
        let (h, w) = (case.label.height, case.label.width);
        let pred = soft.reshape(&[1, NUM_CLASSES, h, w])?;
        let bg = Tensor::new(&[1, 1, h, w], pred.data()[..h * w].to_vec())?;
        let detection = detect_heart(&bg, &crop_cfg)?;
        let crop = crop_and_binarize(&case.image, &pred, &detection.bbox)?;
        let (ch, cw) = (detection.bbox.height(), detection.bbox.width());
        write_tensor(&TensorData::F32(crop.image.cast::<f32>().reshape(&[1, ch, cw])?), out.join(format!("{}_crop.ctf", case.id)))?;
        let masks = crop.masks.iter().flat_map(|m| m.data().iter().map(|v| v.as_f64() as u8)).collect();
        write_tensor(
            &TensorData::U8 {
                shape: vec![3, ch, cw],
                data: masks,
            },
            out.join(format!("{}_init.ctf", case.id)),
        )?;
        writeln!(log, "{}", serde_json::to_string(&BboxRecord::new(&case.id, &detection))?)?;
    }
    Ok(())
}

fn evaluate(pred: &Path, gt: &Path, csv: Option<&Path>) -> Result<()> {
    let index = DatasetIndex::load(index_path(gt))?;
    let mut pairs = Vec::with_capacity(index.entries.len());
    for e in &index.entries {
        let truth = read_label_map(index.resolve(&e.label_path))?.with_spacing(e.spacing)?;
        let predicted = read_label_map(pred.join(format!("{}_labels.ctf", e.id)))?.with_spacing(e.spacing)?;
        pairs.push((predicted, truth));
    }
    let report = eval_report(&pairs)?;
    println!("{report}");
    let csv_path = csv.map_or_else(|| pred.join("eval.csv"), Path::to_path_buf);
    fs::write(&csv_path, report.to_csv())?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn gradcheck(all: bool, names: &[String], global: &Global) -> Result<bool> {
    if global.precision == Precision::F32 {
        log::info!("gradient checks run in 64-bit regardless of --precision");
    }
    let opts = GradCheckOptions {
        seed: global.seed.unwrap_or(0),
        ..Default::default()
    };
    let reports = if all || names.is_empty() {
        run_all(&opts)?
    } else {
        names.iter().map(|n| run_check(n, &opts)).collect::<Result<Vec<_>>>()?
    };
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed ({} registered)", reports.len() - failed, reports.len(), REGISTERED.len());
    Ok(failed == 0)
}

fn run<T: Scalar>(cli: &Cli) -> Result<bool> {
    let global = &cli.global;
    match &cli.command {
        Command::Synth { out, cases, side } => {
            let cfg = SynthConfig { side: *side, ..Default::default() };
            let index = synth_generate(&cfg, *cases, global.seed.unwrap_or(0), out)?;
            println!("wrote {} cases to {}", index.entries.len(), out.display());
        }
        Command::TrainStage1 { data, out, overrides } => {
            let cfg = train_config(global, 1, overrides)?;
            let report = train_stage1(&cfg, &load_cases::<T>(data)?, out)?;
            println!("best val dice {:.4} at epoch {}", report.best_val_dice, report.best_epoch);
        }
        Command::InferStage1 { checkpoint, data, out } => {
            let mut model = Stage1Model::<T>::load(checkpoint, Default::default())?;
            infer_stage1(&mut model, &load_cases::<T>(data)?, out)?;
        }
        Command::Crop { stage1, data, out } => crop_dataset::<T>(stage1, data, out, global)?,
        Command::TrainStage2 {
            data,
            stage1,
            out,
            overrides,
        } => {
            let mut cfg = train_config(global, 2, overrides)?;
            if let Some(p) = stage1 {
                cfg.stage1_checkpoint = Some(p.clone());
            }
            let report = train_stage2(&cfg, &load_cases::<T>(data)?, out)?;
            println!("best val dice {:.4} at epoch {}", report.best_val_dice, report.best_epoch);
        }
        Command::Infer { stage1, stage2, data, out } => {
            let crop_cfg = match &global.config {
                Some(path) => TrainConfig::load(path)?.crop,
                None => Default::default(),
            };
            let mut s1 = Stage1Model::<T>::load(stage1, Default::default())?;
            let mut s2 = Stage2Model::<T>::load(stage2, Default::default())?;
            let records = infer_pipeline(&mut s1, &mut s2, &load_cases::<T>(data)?, &crop_cfg, out)?;
            let fallbacks = records.iter().filter(|r| r.fallback).count();
            println!("wrote {} cases ({fallbacks} full-frame fallbacks)", records.len());
        }
        Command::Eval { pred, gt, csv } => evaluate(pred, gt, csv.as_deref())?,
        Command::Gradcheck { all, names } => return gradcheck(*all, names, global),
        Command::BenchAttention {
            block,
            sizes,
            dim,
            repeats,
            out,
        } => {
            let block: BenchBlock = block.parse()?;
            let report = bench_scaling(block, sizes, *dim, *repeats, global.seed.unwrap_or(0))?;
            match out {
                Some(p) => report.write_csv(fs::File::create(p)?)?,
                None => report.write_csv(std::io::stdout().lock())?,
            }
            if report.flagged {
                log::warn!("timing spread above threshold for at least one size");
            }
            eprintln!("fitted exponent {:.3}", report.exponent);
        }
        Command::ParamCount { stage, channels } => {
            let mut cfg = match stage {
                1 => UNetConfig::e2aunet(),
                2 => UNetConfig::specialist(),
                s => return Err(Error::Usage(format!("stage must be 1 or 2, got {s}"))),
            };
            if let Some(c) = channels {
                cfg.stage_channels = c.clone();
            }
            cfg.validate()?;
            println!("{}", param_count(&cfg));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.global.threads != 1 {
        log::info!("--threads {} requested; this build runs single-threaded", cli.global.threads);
    }
    let outcome = match cli.global.precision {
        Precision::F32 => run::<f32>(&cli),
        Precision::F64 => run::<f64>(&cli),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
