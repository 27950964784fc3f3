//! Dose- and anatomy-aware image encoder (stage one).
//!
//! A CNN maps an image to two unit embeddings: `e_d`, whose alignment with a
//! learned "clean" vector versus a learned "noisy" vector gives the dose score,
//! and `e_a`, which clusters by anatomy. Both condition the denoiser.

mod losses;
mod model;
mod train;

pub use losses::{dose_score, dose_score_var, loss_anatomy, loss_dose, loss_rank};
pub use model::{Encoded, PerceptionDims, PerceptionModel, PerceptionOutput};
pub use train::{
    crop, embeddings_csv, eval_perception, loss_total, train_perception, OptimizerKind, PerceptionEval, PerceptionTrainConfig,
    TrainTrace,
};
