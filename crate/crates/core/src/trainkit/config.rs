//! Training configuration, read from and echoed as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discriminator::DiscriminatorConfig;
use crate::encoders::{EncoderConfig, EncoderTrainConfig};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::AdaptiveL1Config;

/// Component switches; all on is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub use_vmfe: bool,
    pub use_attention: bool,
    pub use_adaptive_l1: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_vmfe: true,
            use_attention: true,
            use_adaptive_l1: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Square training crop side; 0 trains on whole images.
    pub crop_size: usize,
    pub flip: bool,
    /// Fraction of the training pairs held out for validation when the
    /// dataset has no test split.
    pub val_fraction: f64,
    /// Side length images are resized to before encoder pretraining;
    /// 0 means the encoder's `image_size`.
    pub encoder_resize: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            crop_size: 512,
            flip: true,
            val_fraction: 0.1,
            encoder_resize: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops after this many generator steps when set.
    pub max_steps: Option<u64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Fraction of training after which the learning rate decays linearly
    /// to zero.
    pub decay_start: f64,
    pub lambda_l1: f64,
    pub lambda_adv: f64,
    /// Epochs between numbered checkpoints and sample grids; 0 disables.
    pub checkpoint_every: usize,
    pub sample_every: usize,
    /// Use randomly initialised frozen encoders when none are supplied.
    pub stub_encoders: bool,
    pub adaptive_l1: AdaptiveL1Config,
    pub ablation: AblationFlags,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 1,
            max_steps: None,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            decay_start: 0.5,
            lambda_l1: 1.0,
            lambda_adv: 1.0,
            checkpoint_every: 10,
            sample_every: 10,
            stub_encoders: false,
            adaptive_l1: AdaptiveL1Config::default(),
            ablation: AblationFlags::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

/// Every hyperparameter of both training phases. The defaults are the
/// full-scale recipe: 300 encoder epochs at batch 64, then 100 GAN epochs at
/// batch 1 on 512×512 crops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Only `"cpu"` is available.
    pub device: String,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub encoder_train: EncoderTrainConfig,
    pub gan: GanConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            device: "cpu".into(),
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            encoder_train: EncoderTrainConfig::default(),
            gan: GanConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The generator configuration with the ablation flags applied.
    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            use_vmfe: self.gan.ablation.use_vmfe,
            use_attention: self.gan.ablation.use_attention,
            ..self.gan.generator.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(Error::Config(format!("unsupported device '{}', only 'cpu' is available", self.device)));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in a signed 64-bit integer".into()));
        }
        self.encoder_train.validate()?;
        self.gan.adaptive_l1.validate()?;
        self.generator_config().validate()?;
        let g = &self.gan;
        if g.epochs == 0 || g.batch_size == 0 {
            return Err(Error::Config("gan epochs and batch_size must be positive".into()));
        }
        if !(g.lr > 0.0) || !(0.0..1.0).contains(&g.beta1) || !(0.0..1.0).contains(&g.beta2) {
            return Err(Error::Config("gan lr must be > 0 and betas in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&g.decay_start) {
            return Err(Error::Config("gan decay_start must be in [0, 1]".into()));
        }
        if !(g.lambda_l1 >= 0.0) || !(g.lambda_adv >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::Config("data val_fraction must be in [0, 1)".into()));
        }
        if self.data.crop_size != 0 && self.data.crop_size % 4 != 0 {
            return Err(Error::Config(format!(
                "crop_size must be a multiple of 4, got {}",
                self.data.crop_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.gan.epochs, 100);
        assert_eq!(cfg.gan.batch_size, 1);
        assert_eq!(cfg.data.crop_size, 512);
        assert_eq!(cfg.encoder_train.epochs, 300);
    }

    #[test]
    fn partial_files_and_unknown_keys() {
        let cfg = TrainConfig::from_toml("seed = 3\n[gan.ablation]\nuse_vmfe = false\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert!(!cfg.generator_config().use_vmfe);
        assert!(cfg.generator_config().use_attention);
        assert!(TrainConfig::from_toml("[gan]\nlearning_rate = 1.0\n").is_err());
        assert!(TrainConfig::from_toml("device = \"cuda\"\n").is_err());
    }
}
