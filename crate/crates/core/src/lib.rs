//! Multi-modality self-supervised representation learning for 3-D skeleton
//! sequences.
//!
//! The crate derives six kinematic modalities from joint-coordinate sequences,
//! pretrains one momentum-contrast encoder pair per modality with
//! cross-modality knowledge exchange, distills the six-modality ensemble into
//! a lighter student, and evaluates the frozen features with a linear probe.

pub mod autodiff;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod modality;
pub mod skeleton;
pub mod tensor;

pub use error::{Error, Result};
