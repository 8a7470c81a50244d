//! Training orchestration: configuration, checkpoints, the two training
//! phases, inference and the ablation suite.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod infer;
pub mod train;

pub use ablation::{run_ablation_suite, AblationReport, AblationRow, ABLATION_VARIANTS};
pub use checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, RngState};
pub use config::{AblationFlags, DataConfig, GanConfig, TrainConfig};
pub use infer::{infer_dir, InferSummary, Stainer};
pub use train::{
    build_gan, generate, save_encoder_artifacts, split_training_data, train_encoders, EncoderArtifacts, EpochRecord,
    GanTrainer, SampleSource, StepRecord, TrainLog,
};
