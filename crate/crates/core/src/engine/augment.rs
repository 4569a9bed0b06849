//! Training-view augmentation: random spatial shear followed by random
//! temporal crop-resize back to the canonical frame count.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::skeleton::{resize_sequence, SkeletonSequence, RESIZE_FRAMES};
use crate::tensor::Tensor3;

/// Augmentation strengths; both are draws from closed intervals, so zero
/// shear amplitude and a minimum crop ratio of 1 give the identity transform
/// (up to the resize to the canonical frame count).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    /// Off-diagonal shear coefficients are uniform in `[-amplitude, amplitude]`.
    pub shear_amplitude: f64,
    /// Crop length ratio is uniform in `[min_crop_ratio, 1]`.
    pub min_crop_ratio: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            shear_amplitude: 0.5,
            min_crop_ratio: 0.5,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.shear_amplitude >= 0.0) || !self.shear_amplitude.is_finite() {
            return Err(crate::error::Error::Config(format!(
                "shear amplitude must be non-negative, got {}",
                self.shear_amplitude
            )));
        }
        if !(self.min_crop_ratio > 0.0 && self.min_crop_ratio <= 1.0) {
            return Err(crate::error::Error::Config(format!(
                "crop ratio must be in (0, 1], got {}",
                self.min_crop_ratio
            )));
        }
        Ok(())
    }
}

/// One augmented view of a sequence, always [`RESIZE_FRAMES`] frames long:
/// a random shear of the coordinates, then a random temporal crop resampled
/// to the canonical length. Deterministic in `seed`; `original_frames` is
/// preserved so the time scale of derived rates is unchanged.
pub fn apply_augmentation(
    seq: &SkeletonSequence,
    params: &AugmentParams,
    seed: u64,
) -> Result<SkeletonSequence> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Shear: x' = S x with S = I + off-diagonal coefficients.
    let amp = params.shear_amplitude;
    let mut s = [[0.0f64; 3]; 3];
    for (i, row) in s.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = if i == j {
                1.0
            } else {
                rng.gen_range(-amp..=amp)
            };
        }
    }
    let src = seq.data();
    let mut sheared = Tensor3::zeros(3, src.frames(), src.joints());
    for t in 0..src.frames() {
        for v in 0..src.joints() {
            let p = src.vec3(t, v);
            for (i, row) in s.iter().enumerate() {
                let val = row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
                sheared.set(i, t, v, val);
            }
        }
    }

    // Temporal crop, then resample to the canonical length.
    let frames = src.frames();
    let ratio = rng.gen_range(params.min_crop_ratio..=1.0);
    let len = ((frames as f64 * ratio).round() as usize).clamp(2, frames);
    let start = rng.gen_range(0..=frames - len);
    let mut cropped = Tensor3::zeros(3, len, src.joints());
    for c in 0..3 {
        for t in 0..len {
            for v in 0..src.joints() {
                cropped.set(c, t, v, sheared.get(c, start + t, v));
            }
        }
    }
    resize_sequence(&seq.with_data(cropped)?, RESIZE_FRAMES)
}
