//! Minimal differentiable building blocks.

mod gradcheck;
mod layers;
mod matrix;
mod optim;
mod params;
mod rl;
mod tape;

pub use gradcheck::{grad_check, GradCheckOptions};
pub use layers::{clipped_heatmap, AttentionConfig, AttentionLayer, AttentionStack, Linear, Mlp};
pub use matrix::{matmul, matmul_bt, DenseMatrix};
pub use optim::{apply_gradients, Adam, AdamState};
pub use params::{ParamBlock, ParamGrads, ParamId, ParamSet};
pub use rl::{
    add_log_prob_grad, cross_entropy, cross_entropy_grad, masked_softmax, normalize_advantage, reinforce_loss,
    CrossEntropy, ReinforceLoss, RolloutBatch, Sense, TrainStats, ADVANTAGE_EPS, CE_FLOOR,
};
pub use tape::{Gradients, Tape, Var};
