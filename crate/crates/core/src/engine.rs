//! Contrastive pretraining engine: memory banks, losses, augmentation,
//! configuration, and the two-stage training loop.

pub mod augment;
pub mod bank;
pub mod config;
pub mod gradcheck;
pub mod losses;
pub mod train;
