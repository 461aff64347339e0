//! Losses and the two-stage training procedure.

mod losses;
mod trainer;

pub use losses::{
    channel_loss, cross_entropy, hard_pairs, hard_triplet, one_hot, total_loss, CrossEntropyForm,
    LossConfig, LossReport, LossTerms, PROB_CLAMP,
};
pub use trainer::{
    batch_labels, compute_importance, init_rng, train_stage1, train_stage2, train_stage2_with,
    train_step, EpochLog, TrainConfig, TrainOutcome,
};
