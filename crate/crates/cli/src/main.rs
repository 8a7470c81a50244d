use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stainfuse_core::data::{generate_synthetic_dataset, PairedDataset, Split, SyntheticStainSpec};
use stainfuse_core::encoders::DualEncoder;
use stainfuse_core::metrics::{evaluate_dirs, format_table, RandomConvFeatures};
use stainfuse_core::trainkit::{
    infer_dir, run_ablation_suite, save_encoder_artifacts, split_training_data, train_encoders, Checkpoint,
    GanTrainer, SampleSource, Stainer, TrainConfig,
};
use stainfuse_core::{Error, Result};

#[derive(Parser)]
#[command(name = "stainfuse", version, about = "H&E to IHC virtual staining: training, inference and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset described by a TOML spec.
    SynthData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the H&E and IHC encoders contrastively.
    TrainEncoders {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the staining GAN with frozen encoders.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Encoder checkpoint; may be omitted when the config sets `gan.stub_encoders`.
        #[arg(long)]
        encoders: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a GAN checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate every image of a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR, SSIM and FID between same-named images of two directories.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and score the full model and its three ablations.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Encoder checkpoint; pretrained from the config when omitted.
        #[arg(long)]
        encoders: Option<PathBuf>,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// All training pairs, resized for encoder pretraining.
fn encoder_samples(cfg: &TrainConfig, data: &Path) -> Result<Vec<stainfuse_core::data::PairedSample<f32>>> {
    let mut ds = PairedDataset::open(data, Split::Train)?;
    let size = if cfg.data.encoder_resize == 0 {
        cfg.encoder.image_size
    } else {
        cfg.data.encoder_resize
    };
    ds.resize = Some(size);
    ds.load_all()
}

fn load_encoders(path: &Path, cfg: &mut TrainConfig) -> Result<DualEncoder<f32>> {
    let ckpt = Checkpoint::<f32>::load(path)?;
    if ckpt.meta.config.encoder != cfg.encoder {
        log::warn!("using the encoder architecture stored in {}", path.display());
        cfg.encoder = ckpt.meta.config.encoder.clone();
    }
    ckpt.encoders()
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData { spec, out } => {
            let spec = SyntheticStainSpec::load(&spec)?;
            let m = generate_synthetic_dataset(&spec, &out)?;
            println!("wrote {} training and {} test pairs to {}", m.train.len(), m.test.len(), out.display());
        }
        Command::TrainEncoders { config, data, out } => {
            let cfg = TrainConfig::load(&config)?;
            let samples = encoder_samples(&cfg, &data)?;
            let art = train_encoders(&cfg, &samples)?;
            let path = save_encoder_artifacts(&cfg, &art, &out)?;
            let a = &art.analysis;
            println!(
                "encoders: {} | paired {:.3} vs unpaired {:.3}, best threshold {:.3} at accuracy {:.3}",
                path.display(),
                a.mean_paired,
                a.mean_unpaired,
                a.best_threshold,
                a.accuracy
            );
        }
        Command::Train {
            config,
            data,
            encoders,
            out,
            resume,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            let mut trainer = if let Some(r) = resume {
                let ckpt = Checkpoint::<f32>::load(&r)?;
                let c = &ckpt.meta.config;
                if *c != cfg {
                    log::warn!("resuming with the configuration stored in {}", r.display());
                }
                let (train, val) = split_training_data(&data, c.data.val_fraction, c.seed)?;
                GanTrainer::resume(&ckpt, train, val)?
            } else {
                let enc = match encoders {
                    Some(p) => load_encoders(&p, &mut cfg)?,
                    None if cfg.gan.stub_encoders => {
                        log::warn!("no encoder checkpoint: using untrained frozen encoders");
                        DualEncoder::new(cfg.encoder.clone(), cfg.seed)
                    }
                    None => {
                        return Err(Error::Config(
                            "--encoders is required unless the config sets gan.stub_encoders = true".into(),
                        ))
                    }
                };
                let (train, val) = split_training_data(&data, cfg.data.val_fraction, cfg.seed)?;
                GanTrainer::new(cfg, enc, train, val)?
            }
            .with_output(&out)?;
            trainer.run(None)?;
            println!(
                "trained {} steps; checkpoints in {}",
                trainer.step_index(),
                out.display()
            );
        }
        Command::Infer { ckpt, input, out } => {
            let stainer = Stainer::<f32>::load(&ckpt)?;
            let s = infer_dir(&stainer, &input, &out)?;
            println!("wrote {} images to {} ({} skipped)", s.written.len(), out.display(), s.skipped.len());
        }
        Command::Evaluate { pred, gt, report } => {
            let extractor = RandomConvFeatures::default();
            let r = evaluate_dirs(&pred, &gt, &extractor)?;
            let table = format_table("Evaluation", &[(pred.display().to_string(), &r)]);
            let config = std::fs::read_to_string(pred.join("config.toml")).ok();
            let json = serde_json::json!({ "metrics": r, "table": table, "config": config });
            write(&report, &serde_json::to_string_pretty(&json).expect("report serializes"))?;
            print!("{table}");
        }
        Command::Ablate {
            config,
            data,
            out,
            encoders,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            let enc = match encoders {
                Some(p) => load_encoders(&p, &mut cfg)?,
                None => {
                    let art = train_encoders(&cfg, &encoder_samples(&cfg, &data)?)?;
                    save_encoder_artifacts(&cfg, &art, &out.join("encoders"))?;
                    art.encoders
                }
            };
            let all = PairedDataset::open(&data, Split::Train)?;
            let train = SampleSource::Disk {
                indices: (0..all.len()).collect(),
                dataset: all.clone(),
            };
            let (eval, split) = match PairedDataset::open(&data, Split::Test) {
                Ok(test) => (test.load_all()?, "test"),
                Err(_) => (all.load_all()?, "train"),
            };
            let report = run_ablation_suite(&cfg, &enc, &train, &eval, split, &RandomConvFeatures::default(), Some(&out))?;
            report.save(&out)?;
            print!("{}", report.table);
            for i in &report.inversions {
                println!("inversion: {i}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

