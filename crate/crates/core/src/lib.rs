//! Desk-scale workbench for offline learning of closed-loop beta-band
//! stimulation controllers: a synthetic patient environment, durable
//! experience replay, offline deterministic actor-critic training, policy
//! distillation, a deep latent sequential model for model-based off-policy
//! evaluation, and importance-sampling/statistical baselines.

pub mod actor_critic;
pub mod bg_env;
pub mod diffnum;
pub mod distill;
pub mod dlsm;
pub mod error;
pub mod kvconf;
pub mod ope;
pub mod replay;

pub use error::{Error, Result};
