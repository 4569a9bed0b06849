//! Dense `[C][T][V]` tensor used for skeleton sequences and derived modalities.
//!
//! Storage is a flat row-major `Vec<f64>` with the joint axis fastest, so the
//! layout matches the binary export order exactly.

use crate::error::{Error, Result};

/// 3-axis tensor: `C` channels (coordinates), `T` frames, `V` joints.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    frames: usize,
    joints: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, frames: usize, joints: usize) -> Self {
        Tensor3 {
            channels,
            frames,
            joints,
            data: vec![0.0; channels * frames * joints],
        }
    }

    pub fn from_vec(channels: usize, frames: usize, joints: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * frames * joints {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match [{}][{}][{}]",
                data.len(),
                channels,
                frames,
                joints
            )));
        }
        Ok(Tensor3 {
            channels,
            frames,
            joints,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    #[inline]
    fn index(&self, c: usize, t: usize, v: usize) -> usize {
        debug_assert!(c < self.channels && t < self.frames && v < self.joints);
        (c * self.frames + t) * self.joints + v
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize, v: usize) -> f64 {
        self.data[self.index(c, t, v)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, t: usize, v: usize, value: f64) {
        let i = self.index(c, t, v);
        self.data[i] = value;
    }

    /// Flat view in `[C][T][V]` order.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// The 3-vector at `(t, v)` across channels. Requires `C == 3`.
    pub fn vec3(&self, t: usize, v: usize) -> [f64; 3] {
        debug_assert_eq!(self.channels, 3);
        [self.get(0, t, v), self.get(1, t, v), self.get(2, t, v)]
    }

    pub fn set_vec3(&mut self, t: usize, v: usize, value: [f64; 3]) {
        debug_assert_eq!(self.channels, 3);
        self.set(0, t, v, value[0]);
        self.set(1, t, v, value[1]);
        self.set(2, t, v, value[2]);
    }
}

pub fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_joint_fastest() {
        let mut t = Tensor3::zeros(3, 2, 4);
        t.set(1, 1, 2, 7.0);
        // index = (c*T + t)*V + v = (1*2 + 1)*4 + 2 = 14
        assert_eq!(t.as_slice()[14], 7.0);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor3::from_vec(3, 2, 4, vec![0.0; 23]).is_err());
    }

    #[test]
    fn cross_product_canonical() {
        assert_eq!(cross3([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]), [0.0, 0.0, 1.0]);
    }
}
