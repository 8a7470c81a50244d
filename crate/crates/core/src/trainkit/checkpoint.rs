//! Checkpoint files: one tensor archive whose metadata block is a TOML
//! document echoing the full training config.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stainfuse_tensor::{Archive, Scalar};

use super::config::TrainConfig;
use crate::encoders::{dual_named_tensors, load_dual_from_sections, DualEncoder, EncoderEpochRecord};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub const SECTION_GENERATOR: &str = "generator";
pub const SECTION_DISCRIMINATOR: &str = "discriminator";
pub const SECTION_OPT_G: &str = "opt_g";
pub const SECTION_OPT_D: &str = "opt_d";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Encoders,
    Gan,
}

/// Per-step randomness is derived from `(seed, step)` alone, so these two
/// numbers are the whole generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Index of the next training step.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub crate_version: String,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_psnr: Option<f64>,
    /// Encoder pretraining summary, kept with the encoder weights.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub encoder_log: Vec<EncoderEpochRecord>,
    pub config: TrainConfig,
}

impl CheckpointMeta {
    pub fn new(kind: CheckpointKind, config: &TrainConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            epoch: 0,
            rng: RngState {
                seed: config.seed,
                step: 0,
            },
            best_val_psnr: None,
            encoder_log: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let meta: Self = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {} (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        Ok(meta)
    }
}

/// Weights plus metadata, in memory.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub archive: Archive<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut a = Archive::new(self.meta.to_toml()?);
        a.entries = self.archive.entries.clone();
        // Write-then-rename keeps a readable file on disk if the process dies.
        let tmp = path.with_extension("partial");
        a.save(&tmp)?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::<T>::load(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta = CheckpointMeta::from_toml(&archive.meta)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Ok(Self { meta, archive })
    }

    pub fn encoders(&self) -> Result<DualEncoder<T>> {
        for s in ["he_encoder", "ihc_encoder"] {
            if !self.archive.has_section(s) {
                return Err(Error::Checkpoint(format!("checkpoint has no '{s}' weights")));
            }
        }
        load_dual_from_sections(
            self.meta.config.encoder.clone(),
            &self.archive.section("he_encoder"),
            &self.archive.section("ihc_encoder"),
        )
    }
}

pub fn encoder_checkpoint<T: Scalar>(
    dual: &DualEncoder<T>,
    config: &TrainConfig,
    log: Vec<EncoderEpochRecord>,
) -> Checkpoint<T> {
    let mut meta = CheckpointMeta::new(CheckpointKind::Encoders, config);
    meta.epoch = log.len();
    meta.encoder_log = log;
    let mut archive = Archive::new(String::new());
    for (section, items) in dual_named_tensors(dual) {
        archive.extend_prefixed(&section, items);
    }
    Checkpoint { meta, archive }
}
