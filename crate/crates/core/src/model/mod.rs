//! The MLP interaction scorer, its ablation variants and the training loop.

pub mod adam;
pub mod checkpoint;
pub mod mlp;
pub mod scorer;
pub mod train;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use mlp::{bce_loss, mean_bce, mlp_forward, sigmoid, MlpForward, MlpParams};
pub use scorer::{score_variant, Features, ScorerModel, ScoringInputs, ScoringVariant, UserVectors};
pub use train::{fit, EpochLog, TrainConfig, TrainPair, TrainableModel, TrainingLog};
