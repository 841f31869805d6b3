use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Facial motion coefficients (expression, pose, scale) for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionVector(Vec<f32>);

impl MotionVector {
    pub fn new(values: Vec<f32>, dim: usize) -> Result<Self> {
        if values.len() != dim {
            return Err(Error::validation(format!(
                "motion vector has {} values, expected {dim}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("motion value {i} is not finite")));
        }
        Ok(MotionVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        MotionVector(alloc::vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of keypoint coordinates outside `[0, 1]` in the given slice.
    /// Out-of-range values are a warning, never an error.
    pub fn keypoint_violations(&self, offset: usize, len: usize) -> usize {
        self.0
            .iter()
            .skip(offset)
            .take(len)
            .filter(|v| !(0.0..=1.0).contains(*v))
            .count()
    }
}

impl AsRef<[f32]> for MotionVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(MotionVector::new(alloc::vec![0.0; 3], 4).is_err());
        assert!(MotionVector::new(alloc::vec![0.0, f32::NAN], 2).is_err());
        let m = MotionVector::new(alloc::vec![0.5, 1.5, -0.1, 3.0], 4).unwrap();
        assert_eq!(m.keypoint_violations(0, 3), 2);
        assert_eq!(m.keypoint_violations(0, 1), 0);
    }
}
