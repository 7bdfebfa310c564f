//! Behavioral mode discovery for diffusion policies on a 2D Gaussian-mixture
//! navigation task: pre-training, latent steering, discriminator-based mode
//! discovery, and PPO fine-tuning with a mode-preserving intrinsic reward.

pub mod approx;
pub mod seeding;
pub mod toyenv;
pub mod diffusion;
pub mod steering;
pub mod discovery;
pub mod rlft;
pub mod evalkit;
pub mod trainer;
