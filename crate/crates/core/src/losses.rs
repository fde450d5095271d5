//! Ground-truth correspondence construction and the two training
//! objectives: hard-threshold matching loss and distance-weighted
//! projection loss.

use crate::features::FeatureSet;
use crate::geometry::{warp_homography, warp_keypoint, CameraIntrinsics, Homography, Pose};
use crate::mat::Mat;
use nalgebra::Vector2;
use thiserror::Error;

/// Probabilities are clamped to `[LOG_CLAMP_EPS, 1]` before taking logs.
pub const LOG_CLAMP_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("pose-based ground truth requires per-keypoint depths")]
    MissingDepth,
    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("margin {mg} must exceed the threshold {th}")]
    InvalidMargin { th: f64, mg: f64 },
    #[error("assignment is {rows}x{cols}, ground truth needs {want_rows}x{want_cols}")]
    ShapeMismatch { rows: usize, cols: usize, want_rows: usize, want_cols: usize },
}

/// Transform used to warp keypoints of image A into image B.
pub enum GtWarp<'a> {
    /// Coordinate transform from A-camera to B-camera coordinates.
    Pose(&'a Pose),
    Homography(&'a Homography),
}

/// Pixel-space correspondences between two keypoint sets.
///
/// Stores the full distance matrix (infinite where the warp is
/// unavailable) and the mutual row/column minima; the hard-threshold
/// match set and the margin-relaxed positive set are both views of it.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    dist: Mat,
    /// Mutual row/column argmin pairs with their distance, unthresholded.
    mutual: Vec<(usize, usize, f64)>,
    th: f64,
}

impl GroundTruth {
    /// Builds ground truth from an explicit distance matrix.
    pub fn from_distances(dist: Mat, th: f64) -> Result<Self, LossError> {
        if th <= 0.0 {
            return Err(LossError::InvalidThreshold(th));
        }
        let (n_a, n_b) = dist.shape();
        let mut row_argmin = vec![0usize; n_a];
        for i in 0..n_a {
            let mut best = 0;
            for j in 1..n_b {
                if dist.get(i, j) < dist.get(i, best) {
                    best = j;
                }
            }
            row_argmin[i] = best;
        }
        let mut col_argmin = vec![0usize; n_b];
        for j in 0..n_b {
            let mut best = 0;
            for i in 1..n_a {
                if dist.get(i, j) < dist.get(best, j) {
                    best = i;
                }
            }
            col_argmin[j] = best;
        }
        let mut mutual = Vec::new();
        for i in 0..n_a {
            let j = row_argmin[i];
            let d = dist.get(i, j);
            if col_argmin[j] == i && d.is_finite() {
                mutual.push((i, j, d));
            }
        }
        Ok(GroundTruth { dist, mutual, th })
    }

    pub fn distances(&self) -> &Mat {
        &self.dist
    }

    pub fn threshold(&self) -> f64 {
        self.th
    }

    pub fn counts(&self) -> (usize, usize) {
        self.dist.shape()
    }

    /// Matched pairs: mutual minima with distance below the threshold.
    pub fn matches(&self) -> Vec<(usize, usize)> {
        self.mutual.iter().filter(|(_, _, d)| *d < self.th).map(|&(i, j, _)| (i, j)).collect()
    }

    /// Mutual-minimum pairs with distance below `mg`, with distances.
    pub fn positive_pairs(&self, mg: f64) -> Vec<(usize, usize, f64)> {
        self.mutual.iter().filter(|(_, _, d)| *d < mg).copied().collect()
    }

    /// Indices of A and B absent from a set of positive pairs.
    pub fn unmatched_given(&self, pairs: &[(usize, usize)]) -> (Vec<usize>, Vec<usize>) {
        let (n_a, n_b) = self.dist.shape();
        let mut in_a = vec![false; n_a];
        let mut in_b = vec![false; n_b];
        for &(i, j) in pairs {
            in_a[i] = true;
            in_b[j] = true;
        }
        (
            (0..n_a).filter(|&i| !in_a[i]).collect(),
            (0..n_b).filter(|&j| !in_b[j]).collect(),
        )
    }

    /// Unmatched index sets under the hard threshold.
    pub fn unmatched(&self) -> (Vec<usize>, Vec<usize>) {
        self.unmatched_given(&self.matches())
    }
}

/// Warps every keypoint of A into B and builds the pixel distance matrix.
/// Rows of keypoints that cannot be warped (missing depth, behind the
/// camera, degenerate division) are infinite; finite out-of-frame
/// positions still produce distances.
pub fn build_ground_truth(
    k_a: &CameraIntrinsics,
    k_b: &CameraIntrinsics,
    warp: GtWarp<'_>,
    feats_a: &FeatureSet,
    feats_b: &FeatureSet,
    th: f64,
) -> Result<GroundTruth, LossError> {
    if th <= 0.0 {
        return Err(LossError::InvalidThreshold(th));
    }
    if matches!(warp, GtWarp::Pose(_)) && feats_a.raw_depths().is_none() {
        return Err(LossError::MissingDepth);
    }
    let n_a = feats_a.len();
    let n_b = feats_b.len();
    let mut dist = Mat::zeros(n_a, n_b);
    for i in 0..n_a {
        let p = feats_a.position(i);
        let pixel = Vector2::new(p[0], p[1]);
        let warped: Option<Vector2<f64>> = match &warp {
            GtWarp::Pose(t_ab) => feats_a
                .depth(i)
                .and_then(|d| warp_keypoint(k_a, k_b, t_ab, &pixel, d).ok())
                .and_then(|w| w.pixel()),
            GtWarp::Homography(h) => warp_homography(h, &pixel).ok(),
        };
        match warped {
            Some(q) => {
                for j in 0..n_b {
                    let t = feats_b.position(j);
                    dist.set(i, j, ((q[0] - t[0]).powi(2) + (q[1] - t[1]).powi(2)).sqrt());
                }
            }
            None => {
                for j in 0..n_b {
                    dist.set(i, j, f64::INFINITY);
                }
            }
        }
    }
    GroundTruth::from_distances(dist, th)
}

fn clamped_log(p: f64) -> f64 {
    p.clamp(LOG_CLAMP_EPS, 1.0).ln()
}

fn check_shape(p_bar: &Mat, gt: &GroundTruth) -> Result<(), LossError> {
    let (n_a, n_b) = gt.counts();
    if p_bar.shape() != (n_a + 1, n_b + 1) {
        return Err(LossError::ShapeMismatch {
            rows: p_bar.rows(),
            cols: p_bar.cols(),
            want_rows: n_a + 1,
            want_cols: n_b + 1,
        });
    }
    Ok(())
}

/// Hard-threshold matching loss: twice the mean negative log-likelihood
/// over matched pairs plus the mean over dustbin assignments of unmatched
/// keypoints.
pub fn matching_loss(p_bar: &Mat, gt: &GroundTruth) -> Result<f64, LossError> {
    check_shape(p_bar, gt)?;
    let (n_a, n_b) = gt.counts();
    let matches = gt.matches();
    let positive = if matches.is_empty() {
        0.0
    } else {
        -matches.iter().map(|&(i, j)| clamped_log(p_bar.get(i, j))).sum::<f64>() / matches.len() as f64
    };
    let (un_a, un_b) = gt.unmatched();
    let count = un_a.len() + un_b.len();
    let negative = if count == 0 {
        0.0
    } else {
        let sum: f64 = un_a.iter().map(|&i| clamped_log(p_bar.get(i, n_b))).sum::<f64>()
            + un_b.iter().map(|&j| clamped_log(p_bar.get(n_a, j))).sum::<f64>();
        -sum / count as f64
    };
    Ok(2.0 * positive + negative)
}

/// Margin-relaxed projection loss: positive pairs are mutual minima with
/// distance below `mg`, each weighted by `exp(th - d)`.
pub fn projection_loss(p_bar: &Mat, gt: &GroundTruth, mg: f64) -> Result<f64, LossError> {
    check_shape(p_bar, gt)?;
    if mg <= gt.th {
        return Err(LossError::InvalidMargin { th: gt.th, mg });
    }
    let (n_a, n_b) = gt.counts();
    let pairs = gt.positive_pairs(mg);
    let positive = if pairs.is_empty() {
        0.0
    } else {
        -pairs
            .iter()
            .map(|&(i, j, d)| (gt.th - d).exp() * clamped_log(p_bar.get(i, j)))
            .sum::<f64>()
            / pairs.len() as f64
    };
    let plain: Vec<(usize, usize)> = pairs.iter().map(|&(i, j, _)| (i, j)).collect();
    let (un_a, un_b) = gt.unmatched_given(&plain);
    let count = un_a.len() + un_b.len();
    let negative = if count == 0 {
        0.0
    } else {
        let sum: f64 = un_a.iter().map(|&i| clamped_log(p_bar.get(i, n_b))).sum::<f64>()
            + un_b.iter().map(|&j| clamped_log(p_bar.get(n_a, j))).sum::<f64>();
        -sum / count as f64
    };
    Ok(2.0 * positive + negative)
}
