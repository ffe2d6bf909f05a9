//! Losses, analytic gradients, optimization and the training loop.

pub mod augment;
pub mod loss;
pub mod optim;
pub mod run;
pub mod step;
pub mod targets;

pub use augment::{augment_scene, augment_transform, AugmentConfig, RenderSpec, View, ViewPair};
pub use loss::{
    attention_supervision_loss, feature_similarity_loss, info_nce_loss, total_loss, LossParts, LossWeights,
};
pub use optim::{clip_global_norm, lr_at, AdamW};
pub use run::{
    build_samples, evaluate_loss, train, DataConfig, StepMetrics, TrainConfig, TrainOutcome, TrainOutputs,
    HELD_OUT_OFFSET,
};
pub use step::{gradcheck, gradcheck_problem, pair_loss, pair_loss_and_grad, GradcheckReport, PairSample, ViewSample};
pub use targets::{attention_targets, patch_center_membership, target_tokens};
