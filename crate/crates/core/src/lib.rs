//! Learning with noisy labels: a small reverse-mode autodiff engine, an MLP,
//! loss corrections driven by a noise transition matrix, anchor-point
//! estimation, T-Revision, and a multi-seed experiment harness.

pub mod autograd;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod transition;

pub use autograd::{finite_diff_check, Gradients, LeafId, Tape, Var};
pub use datagen::{empirical_flip_matrix, generate_blobs, inject_noise, split, BlobSpec, LabeledDataset};
pub use error::{Error, GradError, Result};
pub use harness::{aggregate, run_experiment, write_report, ExperimentConfig, ExperimentSummary, Method, TrialResult};
pub use losses::{LossKind, LossSpec};
pub use model::{init_mlp, MlpConfig, MlpParams};
pub use tensor::Tensor;
pub use trainer::{evaluate, revision_pipeline, train, AdamConfig, AdamState, TrainConfig, TrainHistory};
pub use transition::{estimate_anchor, mean_matrix, rre, RevisionMode, TransitionMatrix};
