//! Command-line entry point: data generation, training, inference,
//! evaluation, the ablation harness, and complexity accounting.
//!
//! Every run is deterministic given its flags and inputs; commands that
//! produce artifacts also write a manifest (resolved config, seed, input
//! hashes, output paths) sufficient to reproduce them.

use clap::{Parser, Subcommand, ValueEnum};
use missu::checkpoint::Checkpoint;
use missu::complexity::count_complexity;
use missu::config::{ModelConfig, TrainConfig};
use missu::error::{Error, Result};
use missu::metrics::{evaluate, RegionScheme};
use missu::model::{GraphMode, Missu};
use missu::phantom::{generate_phantom_indexed, zscore_normalize, PhantomSpec};
use missu::train::{run_ablation, run_training, TrainState};
use missu::volume::{read_mask, read_volume, write_mask, write_volume, Sample};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "missu", version, about = "3D segmentation with training-only multi-scale refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom volumes and masks.
    GenData {
        /// Phantom spec JSON file.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Overrides the seed in the spec file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a generated dataset.
    Train {
        /// JSON file with {"model": ..., "train": ...}.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides train.max_iters.
        #[arg(long)]
        iters: Option<u64>,
        /// Overrides train.seed (and the init seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides train.batch_size.
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Segment a volume with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted mask against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum, default_value_t = RegionArg::Auto)]
        regions: RegionArg,
    },
    /// Run the seven-row ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds, e.g. 1,2,3.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Print training- vs inference-graph parameter/FLOP accounting.
    Complexity {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RegionArg {
    Auto,
    Nested,
    Binary,
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    command: String,
    seed: u64,
    resolved_config: serde_json::Value,
    input_hashes: BTreeMap<String, String>,
    outputs: Vec<String>,
}

#[derive(Clone, Serialize, Deserialize)]
struct FullConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Load MVOL/MSEG pairs from a dataset directory, in sorted name order.
fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mut stems: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            (path.extension()? == "mvol").then_some(path)
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::EmptyDataset);
    }
    stems
        .into_iter()
        .map(|vol_path| {
            let mask_path = vol_path.with_extension("mseg");
            let sample = Sample {
                volume: read_volume(&vol_path)?,
                mask: read_mask(&mask_path)?,
            };
            sample.validate()?;
            Ok(sample)
        })
        .collect()
}

fn cmd_gen_data(spec_path: &Path, out: &Path, count: usize, seed: Option<u64>) -> Result<()> {
    let mut spec: PhantomSpec = read_json(spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    fs::create_dir_all(out)?;
    let mut outputs = Vec::new();
    for i in 0..count {
        let sample = generate_phantom_indexed(&spec, i as u64)?;
        let vol_path = out.join(format!("sample_{i:04}.mvol"));
        let mask_path = out.join(format!("sample_{i:04}.mseg"));
        write_volume(&sample.volume, &vol_path)?;
        write_mask(&sample.mask, &mask_path)?;
        outputs.push(vol_path.display().to_string());
        outputs.push(mask_path.display().to_string());
    }
    let manifest = RunManifest {
        command: format!("gen-data --count {count}"),
        seed: spec.seed,
        resolved_config: serde_json::to_value(&spec)?,
        input_hashes: BTreeMap::from([(
            spec_path.display().to_string(),
            sha256_file(spec_path)?,
        )]),
        outputs,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config_path: &Path,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    iters: Option<u64>,
    seed: Option<u64>,
    batch_size: Option<usize>,
) -> Result<()> {
    let mut cfg: FullConfig = read_json(config_path)?;
    if let Some(t) = iters {
        cfg.train.max_iters = t;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(b) = batch_size {
        cfg.train.batch_size = b;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    let dataset = load_dataset(data)?;
    fs::create_dir_all(out)?;

    let state = match resume {
        Some(ckpt_path) => {
            let ckpt = Checkpoint::load_for(ckpt_path, &cfg.model)?;
            let mut state = TrainState::from_checkpoint(ckpt)?;
            state.train_config = cfg.train.clone();
            state
        }
        None => {
            let model = Missu::init(cfg.model.clone(), cfg.train.seed)?;
            TrainState::new(model, cfg.train.clone())?
        }
    };
    let run = run_training(state, &dataset, Some(out))?;

    let log_path = out.join("train_log.jsonl");
    let mut log_text = String::new();
    for record in &run.log {
        log_text.push_str(&serde_json::to_string(record)?);
        log_text.push('\n');
    }
    fs::write(&log_path, log_text)?;

    let manifest = RunManifest {
        command: "train".into(),
        seed: cfg.train.seed,
        resolved_config: serde_json::to_value(&cfg)?,
        input_hashes: BTreeMap::from([
            (
                config_path.display().to_string(),
                sha256_file(config_path)?,
            ),
            (
                data.join("manifest.json").display().to_string(),
                sha256_file(&data.join("manifest.json")).unwrap_or_default(),
            ),
        ]),
        outputs: vec![
            out.join("ckpt_final.mckp").display().to_string(),
            log_path.display().to_string(),
        ],
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    let last = run.log.last();
    println!(
        "trained {} steps; final loss {}",
        run.log.len(),
        last.map(|r| r.l_total.to_string()).unwrap_or_default()
    );
    Ok(())
}

fn cmd_infer(checkpoint: &Path, volume_path: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.validate_for(GraphMode::Inference)?;
    let model = Missu::from_params(ckpt.model_config.clone(), ckpt.params, GraphMode::Inference)?;
    let volume = read_volume(volume_path)?;
    let normalized = zscore_normalize(&volume)?;
    let pred = model.predict(&normalized)?;
    write_mask(&pred, out)?;
    let manifest = RunManifest {
        command: "infer".into(),
        seed: 0,
        resolved_config: serde_json::to_value(&ckpt.model_config)?,
        input_hashes: BTreeMap::from([
            (checkpoint.display().to_string(), sha256_file(checkpoint)?),
            (
                volume_path.display().to_string(),
                sha256_file(volume_path)?,
            ),
        ]),
        outputs: vec![out.display().to_string()],
    };
    write_json(&out.with_extension("manifest.json"), &manifest)?;
    println!("wrote prediction to {}", out.display());
    Ok(())
}

fn cmd_eval(pred: &Path, truth: &Path, regions: RegionArg) -> Result<()> {
    let p = read_mask(pred)?;
    let t = read_mask(truth)?;
    let scheme = match regions {
        RegionArg::Nested => RegionScheme::Nested,
        RegionArg::Binary => RegionScheme::Binary,
        RegionArg::Auto => {
            if t.data.iter().any(|&l| l >= 2) {
                RegionScheme::Nested
            } else {
                RegionScheme::Binary
            }
        }
    };
    let report = evaluate(&p, &t, scheme)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    println!("{}", report.render());
    Ok(())
}

fn cmd_ablate(config_path: &Path, data: &Path, out: &Path, seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one seed required".into()));
    }
    let cfg: FullConfig = read_json(config_path)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let dataset = load_dataset(data)?;
    fs::create_dir_all(out)?;
    let report = run_ablation(&cfg.model, &cfg.train, &dataset, seeds)?;
    write_json(&out.join("report.json"), &report)?;
    fs::write(out.join("report.txt"), report.render())?;
    let manifest = RunManifest {
        command: "ablate".into(),
        seed: seeds[0],
        resolved_config: serde_json::to_value(&cfg)?,
        input_hashes: BTreeMap::from([(
            config_path.display().to_string(),
            sha256_file(config_path)?,
        )]),
        outputs: vec![
            out.join("report.json").display().to_string(),
            out.join("report.txt").display().to_string(),
        ],
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    print!("{}", report.render());
    Ok(())
}

fn cmd_complexity(config_path: &Path) -> Result<()> {
    let cfg: FullConfig = read_json(config_path)?;
    cfg.model.validate()?;
    let train = count_complexity(&cfg.model, GraphMode::Training);
    let infer = count_complexity(&cfg.model, GraphMode::Inference);
    print!("{}", train.render());
    println!();
    print!("{}", infer.render());
    println!();
    let dp = train.total_params as i64 - infer.total_params as i64;
    let df = train.gflops() - infer.gflops();
    println!(
        "removed at inference: {:.2}M params, {:.2} GFLOPs",
        dp as f64 / 1e6,
        df
    );
    Ok(())
}

fn run() -> Result<()> {
    // Optional thread pinning; results are bit-identical at any thread count.
    if let Ok(threads) = std::env::var("MISSU_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
    let cli = Cli::parse();
    match cli.command {
        Command::GenData {
            spec,
            out,
            count,
            seed,
        } => cmd_gen_data(&spec, &out, count, seed),
        Command::Train {
            config,
            data,
            out,
            resume,
            iters,
            seed,
            batch_size,
        } => cmd_train(
            &config,
            &data,
            &out,
            resume.as_deref(),
            iters,
            seed,
            batch_size,
        ),
        Command::Infer {
            checkpoint,
            volume,
            out,
        } => cmd_infer(&checkpoint, &volume, &out),
        Command::Eval {
            pred,
            truth,
            regions,
        } => cmd_eval(&pred, &truth, regions),
        Command::Ablate {
            config,
            data,
            out,
            seeds,
        } => cmd_ablate(&config, &data, &out, &seeds),
        Command::Complexity { config } => cmd_complexity(&config),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
