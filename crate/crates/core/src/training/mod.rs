//! Optimization: diffusion objectives, Adam, pretraining, latent
//! normalization and the logistic head.

mod adam;
mod head;
mod latent;
mod loss;
mod pretrain;

pub use adam::{adam_step, AdamState, OptimizerConfig};
pub use head::{fit_head, sigmoid, HeadConfig, HeadFit, LogisticHead};
pub use latent::{compute_latent_stats, denormalize_latent, normalize_latent, LatentStats, NormalizedLatent, STD_FLOOR};
pub use loss::{
    diffusion_loss, diffusion_loss_weighted, draw_noising, vlb_weight, weighted_vlb_loss, LossOutput, LossWeighting,
    Noising,
};
pub use pretrain::{
    milestone_path, pretrain, rolling_endpoints, step_rng, PretrainConfig, PretrainSummary, StepReport, Trainer,
    FINAL_CHECKPOINT, LAST_GOOD_CHECKPOINT, LOSS_CSV, LOSS_CSV_HEADER,
};
