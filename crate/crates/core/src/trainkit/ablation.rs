//! Trains and scores the full model and its three single-component
//! ablations under one seed.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stainfuse_tensor::Scalar;

use super::config::{AblationFlags, TrainConfig};
use super::train::{generate, GanTrainer, SampleSource};
use crate::data::{to_unit_range, PairedSample};
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::metrics::{format_table, FeatureExtractor, MetricReport};

pub const ABLATION_VARIANTS: [(&str, AblationFlags); 4] = [
    (
        "Full model",
        AblationFlags {
            use_vmfe: true,
            use_attention: true,
            use_adaptive_l1: true,
        },
    ),
    (
        "Without VMFE",
        AblationFlags {
            use_vmfe: false,
            use_attention: true,
            use_adaptive_l1: true,
        },
    ),
    (
        "Without Attention",
        AblationFlags {
            use_vmfe: true,
            use_attention: false,
            use_adaptive_l1: true,
        },
    ),
    (
        "Without Adaptive L1 Loss",
        AblationFlags {
            use_vmfe: true,
            use_attention: true,
            use_adaptive_l1: false,
        },
    ),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: AblationFlags,
    pub generator_params: usize,
    /// `"adaptive_l1"` or `"plain_l1"`.
    pub l1_kind: String,
    pub steps: u64,
    pub final_l1: f64,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Ablated rows whose PSNR beats the full model's.
    pub inversions: Vec<String>,
    pub eval_split: String,
    pub table: String,
    pub config: String,
}

fn slug(name: &str) -> String {
    name.to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Runs the four variants with identical data, encoders and seed. Outputs of
/// each run go to `out/<variant>/` when `out` is given.
pub fn run_ablation_suite<T: Scalar, E: FeatureExtractor + ?Sized>(
    cfg: &TrainConfig,
    encoders: &DualEncoder<T>,
    train: &SampleSource<T>,
    eval: &[PairedSample<T>],
    eval_split: &str,
    extractor: &E,
    out: Option<&Path>,
) -> Result<AblationReport> {
    if eval.is_empty() {
        return Err(Error::Data("ablation needs at least one evaluation pair".into()));
    }
    let mut rows = Vec::with_capacity(ABLATION_VARIANTS.len());
    for (name, flags) in ABLATION_VARIANTS {
        let mut vcfg = cfg.clone();
        vcfg.gan.ablation = flags;
        log::info!("ablation: training '{name}'");
        let mut trainer = GanTrainer::new(vcfg, encoders.clone(), train.clone(), SampleSource::Memory(Vec::new()))?;
        if let Some(dir) = out {
            trainer = trainer.with_output(&dir.join(slug(name)))?;
        }
        trainer.run(None)?;
        let mut keys = Vec::with_capacity(eval.len());
        let (mut pred, mut gt) = (Vec::new(), Vec::new());
        for s in eval {
            let y = generate(&trainer.generator, &trainer.g_store, &trainer.encoders.he, &s.he)?;
            keys.push(s.key.clone());
            pred.push(to_unit_range(&y).cast::<f64>());
            gt.push(to_unit_range(&s.ihc).cast::<f64>());
        }
        let metrics = MetricReport::compute(&keys, &pred, &gt, extractor)?;
        rows.push(AblationRow {
            name: name.to_string(),
            flags,
            generator_params: trainer.generator_param_count(),
            l1_kind: if flags.use_adaptive_l1 { "adaptive_l1" } else { "plain_l1" }.to_string(),
            steps: trainer.step_index(),
            final_l1: trainer.log.steps.last().map_or(f64::NAN, |r| r.l1),
            metrics,
        });
    }
    let full = rows[0].metrics.psnr_mean;
    let inversions = rows[1..]
        .iter()
        .filter(|r| r.metrics.psnr_mean > full)
        .map(|r| format!("{}: PSNR {:.3} dB exceeds the full model's {:.3} dB", r.name, r.metrics.psnr_mean, full))
        .collect::<Vec<_>>();
    for i in &inversions {
        log::warn!("ablation inversion: {i}");
    }
    let table = format_table(
        &format!("Ablation ({eval_split} split, {} pairs)", eval.len()),
        &rows.iter().map(|r| (r.name.clone(), &r.metrics)).collect::<Vec<_>>(),
    );
    Ok(AblationReport {
        rows,
        inversions,
        eval_split: eval_split.to_string(),
        table,
        config: cfg.to_toml(),
    })
}

impl AblationReport {
    /// Writes `ablation.json` and `ablation.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("ablation.json");
        std::fs::write(&json, serde_json::to_string_pretty(self).expect("report serializes"))
            .map_err(|e| Error::io(&json, e))?;
        let mut txt = self.table.clone();
        for i in &self.inversions {
            txt.push_str(&format!("inversion: {i}\n"));
        }
        let path = dir.join("ablation.txt");
        std::fs::write(&path, txt).map_err(|e| Error::io(&path, e))
    }
}
