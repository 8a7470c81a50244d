//! Two-phase training: encoder pretraining, then the GAN with the encoders
//! frozen.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stainfuse_tensor::optim::{Adam, AdamConfig};
use stainfuse_tensor::{Archive, Ctx, Mode, ParamStore, Scalar, Tape, Tensor};

use super::checkpoint::{
    encoder_checkpoint, Checkpoint, CheckpointKind, CheckpointMeta, RngState, SECTION_DISCRIMINATOR,
    SECTION_GENERATOR, SECTION_OPT_D, SECTION_OPT_G,
};
use super::config::TrainConfig;
use crate::data::{flip_pair, random_crop_pair, save_tensor_png, to_unit_range, PairedDataset, PairedSample, Split};
use crate::discriminator::PatchDiscriminator;
use crate::encoders::{
    dual_named_tensors, pair_similarities, pretrain_dual_encoders, similarity_threshold_analysis, DualEncoder,
    EncoderModel, EncoderTrainLog, ThresholdAnalysis,
};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::losses::{adaptive_l1_loss, lsgan_d_loss, lsgan_g_loss, plain_l1, total_generator_loss};
use crate::metrics::psnr;

const GENERATOR_STREAM: u64 = 1;
const DISCRIMINATOR_STREAM: u64 = 2;
const EPOCH_STREAM_BASE: u64 = 1 << 62;
const STEP_STREAM_BASE: u64 = 1 << 63;
const SPLIT_STREAM: u64 = 3;

pub const LATEST_CHECKPOINT: &str = "latest.sfar";
pub const BEST_CHECKPOINT: &str = "best.sfar";
pub const ENCODER_CHECKPOINT: &str = "encoders.sfar";
pub const TRAIN_LOG: &str = "train_log.jsonl";

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Training pairs, held in memory or decoded from disk per batch.
#[derive(Debug, Clone)]
pub enum SampleSource<T> {
    Memory(Vec<PairedSample<T>>),
    Disk { dataset: PairedDataset, indices: Vec<usize> },
}

impl<T: Scalar> SampleSource<T> {
    pub fn len(&self) -> usize {
        match self {
            Self::Memory(v) => v.len(),
            Self::Disk { indices, .. } => indices.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Result<PairedSample<T>> {
        match self {
            Self::Memory(v) => Ok(v[i].clone()),
            Self::Disk { dataset, indices } => dataset.load(indices[i]),
        }
    }

    pub fn load_all(&self) -> Result<Vec<PairedSample<T>>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

/// Splits the training pairs of `root` into training and validation sets.
/// The validation share is `floor(n · val_fraction)` pairs chosen by a
/// seeded shuffle; it is empty for small datasets.
pub fn split_training_data<T: Scalar>(
    root: &Path,
    val_fraction: f64,
    seed: u64,
) -> Result<(SampleSource<T>, SampleSource<T>)> {
    let dataset = PairedDataset::open(root, Split::Train)?;
    let n = dataset.len();
    let n_val = (n as f64 * val_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, SPLIT_STREAM));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((
        SampleSource::Disk {
            dataset: dataset.clone(),
            indices: train,
        },
        SampleSource::Disk { dataset, indices: val },
    ))
}

#[derive(Debug, Clone)]
pub struct EncoderArtifacts<T: Scalar> {
    pub encoders: DualEncoder<T>,
    pub log: EncoderTrainLog,
    pub analysis: ThresholdAnalysis,
}

/// Pretrains the encoder pair on `samples` (resized to the encoder input
/// size) and measures how well cosine similarity separates matched from
/// mismatched pairs.
pub fn train_encoders<T: Scalar>(cfg: &TrainConfig, samples: &[PairedSample<T>]) -> Result<EncoderArtifacts<T>> {
    cfg.validate()?;
    let size = if cfg.data.encoder_resize == 0 {
        cfg.encoder.image_size
    } else {
        cfg.data.encoder_resize
    };
    let resized = samples
        .iter()
        .map(|s| {
            let (_, _, h, w) = s.he.dims4()?;
            if h == size && w == size {
                return Ok(s.clone());
            }
            Ok(PairedSample {
                key: s.key.clone(),
                he: s.he.resize_bilinear(size, size)?,
                ihc: s.ihc.resize_bilinear(size, size)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (encoders, log) = pretrain_dual_encoders(&resized, &cfg.encoder, &cfg.encoder_train, cfg.seed)?;
    let (pos, neg) = pair_similarities(&encoders, &resized, cfg.seed)?;
    let analysis = similarity_threshold_analysis(&pos, &neg)?;
    Ok(EncoderArtifacts { encoders, log, analysis })
}

/// Writes `encoders.sfar`, the per-epoch log and the similarity analysis.
pub fn save_encoder_artifacts<T: Scalar>(cfg: &TrainConfig, art: &EncoderArtifacts<T>, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(ENCODER_CHECKPOINT);
    encoder_checkpoint(&art.encoders, cfg, art.log.epochs.clone()).save(&path)?;
    let mut log = String::new();
    for r in &art.log.epochs {
        log.push_str(&serde_json::to_string(r).expect("record serializes"));
        log.push('\n');
    }
    write_file(&out.join("encoder_log.jsonl"), &log)?;
    let report = serde_json::json!({ "analysis": art.analysis, "config": cfg.to_toml() });
    write_file(
        &out.join("similarity.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    Ok(path)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generator, discriminator and their parameters, built from a config.
pub fn build_gan<T: Scalar>(
    cfg: &TrainConfig,
) -> Result<(Generator, ParamStore<T>, PatchDiscriminator, ParamStore<T>)> {
    let gcfg = cfg.generator_config();
    let enc_channels = cfg.encoder.widths[gcfg.encoder_stage - 1];
    let mut g_store = ParamStore::new();
    let generator = Generator::new(&mut g_store, gcfg, enc_channels, &mut rng_for(cfg.seed, GENERATOR_STREAM))?;
    let mut d_store = ParamStore::new();
    let mut dcfg = cfg.gan.discriminator.clone();
    dcfg.input_channels = cfg.gan.generator.input_channels + cfg.gan.generator.output_channels;
    let discriminator = PatchDiscriminator::new(&mut d_store, dcfg, &mut rng_for(cfg.seed, DISCRIMINATOR_STREAM))?;
    Ok((generator, g_store, discriminator, d_store))
}

/// Eval-mode translation of a batch of H&E images in [−1, 1].
pub fn generate<T: Scalar>(
    generator: &Generator,
    store: &ParamStore<T>,
    he_encoder: &EncoderModel<T>,
    he: &Tensor<T>,
) -> Result<Tensor<T>> {
    let guide = if generator.attention.is_some() {
        Some(generator.guide_features(he_encoder, he)?)
    } else {
        None
    };
    let tape = Tape::no_grad();
    let cx = Ctx::new(&tape, store, Mode::Eval);
    let y = generator.forward(&cx, tape.constant(he.clone()), guide.map(|g| tape.constant(g)))?;
    Ok((*y.value()).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub d_loss: f64,
    pub g_adv: f64,
    /// Adaptive L1, or the constant-weight L1 when that ablation is active.
    pub l1: f64,
    pub g_total: f64,
    pub mean_sim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub l1: f64,
    pub g_total: f64,
    pub mean_sim: Option<f64>,
    pub val_psnr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// The GAN phase. Every random decision of step `s` comes from a generator
/// seeded by `(seed, s)`, so a run resumed from a checkpoint at step `s`
/// continues exactly as an uninterrupted one.
#[derive(Debug)]
pub struct GanTrainer<T: Scalar> {
    pub config: TrainConfig,
    pub generator: Generator,
    pub g_store: ParamStore<T>,
    pub discriminator: PatchDiscriminator,
    pub d_store: ParamStore<T>,
    pub encoders: DualEncoder<T>,
    opt_g: Adam<T>,
    opt_d: Adam<T>,
    step: u64,
    train: SampleSource<T>,
    val: SampleSource<T>,
    pub log: TrainLog,
    best_val_psnr: Option<f64>,
    out_dir: Option<PathBuf>,
    epoch_steps: Vec<StepRecord>,
}

impl<T: Scalar> GanTrainer<T> {
    pub fn new(
        config: TrainConfig,
        mut encoders: DualEncoder<T>,
        train: SampleSource<T>,
        val: SampleSource<T>,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Data("GAN training needs at least one pair".into()));
        }
        if encoders.he.config() != &config.encoder {
            return Err(Error::Config(
                "encoder architecture in the config differs from the supplied encoders".into(),
            ));
        }
        encoders.freeze();
        let (generator, g_store, discriminator, d_store) = build_gan(&config)?;
        let adam = |lr| AdamConfig {
            lr,
            beta1: config.gan.beta1,
            beta2: config.gan.beta2,
            ..Default::default()
        };
        let opt_g = Adam::new(adam(config.gan.lr), &g_store);
        let opt_d = Adam::new(adam(config.gan.lr), &d_store);
        Ok(Self {
            config,
            generator,
            g_store,
            discriminator,
            d_store,
            encoders,
            opt_g,
            opt_d,
            step: 0,
            train,
            val,
            log: TrainLog::default(),
            best_val_psnr: None,
            out_dir: None,
            epoch_steps: Vec::new(),
        })
    }

    /// Restores weights, optimizer moments and the step counter.
    pub fn resume(ckpt: &Checkpoint<T>, train: SampleSource<T>, val: SampleSource<T>) -> Result<Self> {
        if ckpt.meta.kind != CheckpointKind::Gan {
            return Err(Error::Checkpoint("not a GAN checkpoint".into()));
        }
        let mut t = Self::new(ckpt.meta.config.clone(), ckpt.encoders()?, train, val)?;
        let a = &ckpt.archive;
        t.g_store.load_named(&a.section(SECTION_GENERATOR))?;
        t.d_store.load_named(&a.section(SECTION_DISCRIMINATOR))?;
        t.opt_g.load_state(&a.section(SECTION_OPT_G))?;
        t.opt_d.load_state(&a.section(SECTION_OPT_D))?;
        t.step = ckpt.meta.rng.step;
        t.best_val_psnr = ckpt.meta.best_val_psnr;
        Ok(t)
    }

    /// Directory for logs, sample grids and checkpoints.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("config.toml"), &self.config.to_toml())?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.config.gan.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.config.gan.epochs as u64 * self.steps_per_epoch();
        self.config.gan.max_steps.map_or(full, |m| m.min(full))
    }

    /// Constant, then linear decay to zero over the final part of training.
    pub fn lr_at(&self, step: u64) -> f64 {
        let total = self.config.gan.epochs as u64 * self.steps_per_epoch();
        let start = (total as f64 * self.config.gan.decay_start).floor() as u64;
        let lr = self.config.gan.lr;
        if step < start || total == start {
            lr
        } else {
            lr * (total - step) as f64 / (total - start + 1) as f64
        }
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng_for(self.config.seed, EPOCH_STREAM_BASE + epoch as u64));
        order
    }

    fn batch(&self, step: u64) -> Result<(Vec<String>, Tensor<T>, Tensor<T>)> {
        let spe = self.steps_per_epoch();
        let epoch = (step / spe) as usize;
        let pos = (step % spe) as usize;
        let order = self.epoch_order(epoch);
        let bs = self.config.gan.batch_size;
        let idx = &order[pos * bs..((pos + 1) * bs).min(order.len())];
        let mut rng = rng_for(self.config.seed, STEP_STREAM_BASE + step);
        let crop = self.config.data.crop_size;
        let (mut keys, mut he, mut ihc) = (Vec::new(), Vec::new(), Vec::new());
        for &i in idx {
            let mut s = self.train.get(i)?;
            let (_, _, h, w) = s.he.dims4()?;
            if crop != 0 && (h != crop || w != crop) {
                s = random_crop_pair(&s, crop, &mut rng)?;
            }
            if self.config.data.flip && rng.gen_bool(0.5) {
                s = flip_pair(&s)?;
            }
            keys.push(s.key);
            he.push(s.he);
            ihc.push(s.ihc);
        }
        Ok((keys, Tensor::stack_batch(&he)?, Tensor::stack_batch(&ihc)?))
    }

    fn nonfinite(&self, keys: &[String], what: &str, values: serde_json::Value) -> Error {
        if let Some(dir) = &self.out_dir {
            let dump = serde_json::json!({ "step": self.step, "keys": keys, "losses": values });
            let _ = fs::write(dir.join("nonfinite_batch.json"), dump.to_string());
        }
        Error::Numerical(format!(
            "non-finite {what} at step {} (batch keys: {})",
            self.step,
            keys.join(", ")
        ))
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let lr = self.lr_at(step);
        let (keys, he, ihc) = self.batch(step)?;
        let guide = if self.generator.attention.is_some() {
            Some(self.generator.guide_features(&self.encoders.he, &he)?)
        } else {
            None
        };
        let gan = &self.config.gan;
        let tape = Tape::new();
        let gcx = Ctx::new(&tape, &self.g_store, Mode::Train);
        let x = tape.constant(he);
        let fake = self.generator.forward(&gcx, x, guide.map(|g| tape.constant(g)))?;
        let real = tape.constant(ihc.clone());

        let d_loss = {
            let dcx = Ctx::new(&tape, &self.d_store, Mode::Train);
            let d_real = self.discriminator.forward(&dcx, x, real)?;
            let d_fake = self.discriminator.forward(&dcx, x, tape.constant((*fake.value()).clone()))?;
            lsgan_d_loss(d_real, d_fake)?
        };
        let d_val = d_loss.item().to_f64_lossy();
        if !d_val.is_finite() {
            return Err(self.nonfinite(&keys, "discriminator loss", serde_json::json!({ "d_loss": d_val })));
        }
        let d_grads = tape.backward(d_loss)?;
        self.opt_d.step(&mut self.d_store, &d_grads, lr)?;

        let dcx = Ctx::new(&tape, &self.d_store, Mode::Train);
        let g_adv = lsgan_g_loss(self.discriminator.forward(&dcx, x, fake)?);
        let (l1, mean_sim) = if gan.ablation.use_adaptive_l1 {
            let (l, sims) = adaptive_l1_loss(fake, &ihc, &self.encoders.ihc, &gan.adaptive_l1)?;
            (l, Some(sims.iter().sum::<f64>() / sims.len() as f64))
        } else {
            // Every patch weighted as if perfectly similar.
            let w = gan.adaptive_l1.alpha + gan.adaptive_l1.beta;
            (plain_l1(fake, &ihc)?.mul_scalar(T::lit(w)), None)
        };
        let g_total = total_generator_loss(g_adv.mul_scalar(T::lit(gan.lambda_adv)), l1, gan.lambda_l1)?;
        let rec = StepRecord {
            step,
            epoch: (step / self.steps_per_epoch()) as usize,
            lr,
            d_loss: d_val,
            g_adv: g_adv.item().to_f64_lossy(),
            l1: l1.item().to_f64_lossy(),
            g_total: g_total.item().to_f64_lossy(),
            mean_sim,
        };
        if ![rec.g_adv, rec.l1, rec.g_total].iter().all(|v| v.is_finite()) {
            let values = serde_json::json!({ "d_loss": rec.d_loss, "g_adv": rec.g_adv, "l1": rec.l1 });
            return Err(self.nonfinite(&keys, "generator loss", values));
        }
        let g_grads = tape.backward(g_total)?;
        drop(gcx);
        drop(dcx);
        self.opt_g.step(&mut self.g_store, &g_grads, lr)?;
        self.step += 1;
        self.log.steps.push(rec.clone());
        self.epoch_steps.push(rec.clone());
        Ok(rec)
    }

    /// Mean PSNR (dB, images in [0, 1]) of eval-mode outputs on `samples`.
    pub fn mean_psnr(&self, samples: &SampleSource<T>) -> Result<Option<f64>> {
        if samples.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for i in 0..samples.len() {
            let s = samples.get(i)?;
            let y = generate(&self.generator, &self.g_store, &self.encoders.he, &s.he)?;
            total += psnr(&to_unit_range(&y), &to_unit_range(&s.ihc), 1.0)?;
        }
        Ok(Some(total / samples.len() as f64))
    }

    fn finish_epoch(&mut self, epoch: usize) -> Result<()> {
        let recs = std::mem::take(&mut self.epoch_steps);
        if recs.is_empty() {
            return Ok(());
        }
        let n = recs.len() as f64;
        let mean = |f: fn(&StepRecord) -> f64| recs.iter().map(f).sum::<f64>() / n;
        let sims: Vec<f64> = recs.iter().filter_map(|r| r.mean_sim).collect();
        let val_psnr = self.mean_psnr(&self.val)?;
        let rec = EpochRecord {
            epoch,
            steps: recs.len(),
            lr: recs.last().map_or(0.0, |r| r.lr),
            d_loss: mean(|r| r.d_loss),
            g_adv: mean(|r| r.g_adv),
            l1: mean(|r| r.l1),
            g_total: mean(|r| r.g_total),
            mean_sim: (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64),
            val_psnr,
        };
        log::info!(
            "epoch {epoch}: d {:.4} g_adv {:.4} l1 {:.4} lr {:.2e}{}",
            rec.d_loss,
            rec.g_adv,
            rec.l1,
            rec.lr,
            val_psnr.map_or(String::new(), |p| format!(" val_psnr {p:.2}"))
        );
        let improved = match (val_psnr, self.best_val_psnr) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            self.best_val_psnr = val_psnr;
        }
        if let Some(dir) = self.out_dir.clone() {
            let path = dir.join(TRAIN_LOG);
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(|e| Error::io(&path, e))?;
            let last = self.step >= self.total_steps();
            let every = |k: usize| k != 0 && epoch % k == 0;
            if every(self.config.gan.sample_every) || last {
                self.write_sample_grid(&dir.join("samples").join(format!("epoch_{epoch:04}.png")))?;
            }
            if every(self.config.gan.checkpoint_every) {
                self.checkpoint(epoch).save(&dir.join(format!("epoch_{epoch:04}.sfar")))?;
            }
            if improved {
                self.checkpoint(epoch).save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        self.log.epochs.push(rec);
        Ok(())
    }

    /// H&E | generated | ground truth for the first training pair.
    pub fn write_sample_grid(&self, path: &Path) -> Result<()> {
        let s = self.train.get(0)?;
        let y = generate(&self.generator, &self.g_store, &self.encoders.he, &s.he)?;
        let (_, c, h, w) = y.dims4()?;
        let mut grid = Tensor::zeros(&[1, c, h, 3 * w]);
        for (k, img) in [&s.he, &y, &s.ihc].into_iter().enumerate() {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        grid.set(&[0, ch, i, k * w + j], img.get(&[0, ch, i, j]));
                    }
                }
            }
        }
        save_tensor_png(&grid, path)
    }

    /// Trains until `total_steps()` or `stop_at`, whichever comes first.
    pub fn run(&mut self, stop_at: Option<u64>) -> Result<()> {
        let end = stop_at.map_or(self.total_steps(), |s| s.min(self.total_steps()));
        let spe = self.steps_per_epoch();
        while self.step < end {
            self.train_step()?;
            if self.step % spe == 0 {
                self.finish_epoch((self.step / spe) as usize)?;
            }
        }
        if let Some(dir) = self.out_dir.clone() {
            let epoch = (self.step / spe) as usize;
            if self.step % spe != 0 && self.step >= self.total_steps() {
                self.finish_epoch(epoch + 1)?;
            }
            self.checkpoint(epoch).save(&dir.join(LATEST_CHECKPOINT))?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, epoch: usize) -> Checkpoint<T> {
        let mut meta = CheckpointMeta::new(CheckpointKind::Gan, &self.config);
        meta.epoch = epoch;
        meta.rng = RngState {
            seed: self.config.seed,
            step: self.step,
        };
        meta.best_val_psnr = self.best_val_psnr;
        let mut archive = Archive::new(String::new());
        archive.extend_prefixed(SECTION_GENERATOR, self.g_store.named_tensors());
        archive.extend_prefixed(SECTION_DISCRIMINATOR, self.d_store.named_tensors());
        for (section, items) in dual_named_tensors(&self.encoders) {
            archive.extend_prefixed(&section, items);
        }
        archive.extend_prefixed(SECTION_OPT_G, self.opt_g.state_tensors());
        archive.extend_prefixed(SECTION_OPT_D, self.opt_d.state_tensors());
        Checkpoint { meta, archive }
    }

    pub fn generator_param_count(&self) -> usize {
        self.g_store.num_elements()
    }
}
