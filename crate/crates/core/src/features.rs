//! Per-image keypoint features: pixel positions, descriptors, and optional
//! per-keypoint depths.

use crate::mat::Mat;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("a feature set needs at least one keypoint")]
    Empty,
    #[error("descriptor matrix has {rows} rows but there are {keypoints} keypoints")]
    DescriptorCount { rows: usize, keypoints: usize },
    #[error("non-finite descriptor value at keypoint {0}")]
    NonFiniteDescriptor(usize),
    #[error("depth vector length {got} does not match keypoint count {expected}")]
    DepthCount { got: usize, expected: usize },
}

/// Keypoints of one image. Positions are in pixels; depth entries use NaN
/// for "absent", mirroring the feature file format.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    positions: Vec<[f64; 2]>,
    descriptors: Mat,
    depths: Option<Vec<f64>>,
}

impl FeatureSet {
    pub fn new(positions: Vec<[f64; 2]>, descriptors: Mat, depths: Option<Vec<f64>>) -> Result<Self, FeatureError> {
        if positions.is_empty() {
            return Err(FeatureError::Empty);
        }
        if descriptors.rows() != positions.len() {
            return Err(FeatureError::DescriptorCount { rows: descriptors.rows(), keypoints: positions.len() });
        }
        for i in 0..descriptors.rows() {
            if descriptors.row(i).iter().any(|v| !v.is_finite()) {
                return Err(FeatureError::NonFiniteDescriptor(i));
            }
        }
        if let Some(d) = &depths {
            if d.len() != positions.len() {
                return Err(FeatureError::DepthCount { got: d.len(), expected: positions.len() });
            }
        }
        Ok(FeatureSet { positions, descriptors, depths })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires at least one keypoint
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> [f64; 2] {
        self.positions[i]
    }

    pub fn descriptors(&self) -> &Mat {
        &self.descriptors
    }

    pub fn raw_depths(&self) -> Option<&[f64]> {
        self.depths.as_deref()
    }

    /// Depth of keypoint `i`; `None` when unknown or not positive.
    pub fn depth(&self, i: usize) -> Option<f64> {
        match &self.depths {
            Some(d) => {
                let v = d[i];
                (v.is_finite() && v > 0.0).then_some(v)
            }
            None => None,
        }
    }

    /// Positions scaled to `[0,1]` by the image size.
    pub fn normalized_positions(&self, width: f64, height: f64) -> Mat {
        Mat::from_fn(self.positions.len(), 2, |i, j| {
            if j == 0 {
                self.positions[i][0] / width
            } else {
                self.positions[i][1] / height
            }
        })
    }
}
