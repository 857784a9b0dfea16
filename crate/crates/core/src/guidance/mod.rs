//! Losses, the inner optimizer and the guidance strategies.

mod adam;
mod loss;
mod strategy;

pub use adam::{adam_minimize, Adam, AdamOutcome, BETA1, BETA2, EPSILON};
pub use loss::{
    reg_loss, reg_loss_grad, total_loss, Decoded, DirectionalStyle, FeatureMatchStyle, FnObjective, LossParts,
    Objective, StandInEmbedder, StyleLoss, TotalLoss,
};
pub use strategy::{
    agg_update, dds_refine, loss_grad_wrt_xt, perturb_eps, DdimResampler, GuidanceConfig, GuidedStep, ResampleHook,
    SRule, Strategy,
};
