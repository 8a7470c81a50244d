//! Checkpoint → translated images.

use std::fs;
use std::path::{Path, PathBuf};

use stainfuse_tensor::{ParamStore, Scalar, Tensor};

use super::checkpoint::{Checkpoint, CheckpointKind, SECTION_GENERATOR};
use super::config::TrainConfig;
use super::train::{build_gan, generate};
use crate::data::{list_images, load_image, tensor_to_rgb};
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::generator::Generator;

/// A trained generator with its guiding encoders, in eval mode.
#[derive(Debug)]
pub struct Stainer<T: Scalar> {
    pub config: TrainConfig,
    pub generator: Generator,
    pub store: ParamStore<T>,
    pub encoders: DualEncoder<T>,
}

impl<T: Scalar> Stainer<T> {
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        if ckpt.meta.kind != CheckpointKind::Gan {
            return Err(Error::Checkpoint("expected a GAN checkpoint, got an encoder checkpoint".into()));
        }
        let config = ckpt.meta.config.clone();
        let (generator, mut store, _, _) = build_gan::<T>(&config)?;
        store.load_named(&ckpt.archive.section(SECTION_GENERATOR))?;
        store.freeze();
        let encoders = ckpt.encoders()?;
        Ok(Self {
            config,
            generator,
            store,
            encoders,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Translates (B, 3, H, W) H&E images in [−1, 1]; H and W must be
    /// multiples of 4.
    pub fn stain(&self, he: &Tensor<T>) -> Result<Tensor<T>> {
        generate(&self.generator, &self.store, &self.encoders.he, he)
    }
}

#[derive(Debug, Clone, Default)]
pub struct InferSummary {
    pub written: Vec<PathBuf>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Writes one output per readable input image, under the same file name.
/// Unreadable or unusable inputs are skipped with a warning; it is an error
/// when nothing could be translated.
pub fn infer_dir<T: Scalar>(stainer: &Stainer<T>, input: &Path, output: &Path) -> Result<InferSummary> {
    let inputs = list_images(input)?;
    if inputs.is_empty() {
        return Err(Error::Data(format!("{}: no input images", input.display())));
    }
    fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let echo = output.join("config.toml");
    fs::write(&echo, stainer.config.to_toml()).map_err(|e| Error::io(&echo, e))?;
    let mut summary = InferSummary::default();
    for path in inputs.values() {
        let name = path.file_name().expect("listed files have names");
        let result = load_image::<T>(path)
            .and_then(|x| stainer.stain(&x))
            .and_then(|y| tensor_to_rgb(&y))
            .and_then(|img| {
                let dest = output.join(name);
                img.save(&dest).map_err(|e| Error::Image {
                    path: dest.clone(),
                    msg: e.to_string(),
                })?;
                Ok(dest)
            });
        match result {
            Ok(dest) => summary.written.push(dest),
            Err(e @ Error::Numerical(_)) => return Err(e),
            Err(e) => {
                log::warn!("{}: skipped ({e})", path.display());
                summary.skipped.push((path.clone(), e.to_string()));
            }
        }
    }
    if summary.written.is_empty() {
        return Err(Error::Data(format!("{}: none of the inputs could be translated", input.display())));
    }
    Ok(summary)
}
