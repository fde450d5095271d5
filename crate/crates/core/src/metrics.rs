//! Matching metrics, robust homography estimation, and pose-error AUC.

use crate::assignment::MatchSet;
use crate::geometry::{dlt_homography, warp_homography, GeometryError, Homography};
use crate::losses::GroundTruth;
use nalgebra::Vector2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("homography estimation needs at least 4 matches, got {0}")]
    InsufficientMatches(usize),
    #[error("no non-degenerate sample found")]
    NoValidModel,
    #[error("pose AUC needs at least one error value")]
    EmptyErrors,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Precision / recall / F1 of predicted matches against ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchReport {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MatchReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> MatchReport {
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        MatchReport { true_positives: tp, false_positives: fp, false_negatives: fn_, precision, recall, f1 }
    }
}

/// Counts predicted pairs inside/outside the ground-truth match set.
/// Keypoints a prediction sends to the dustbin count only as false
/// negatives (no predicted pair exists for them).
pub fn score_matches(pred: &MatchSet, gt: &GroundTruth) -> MatchReport {
    let truth: std::collections::HashSet<(usize, usize)> = gt.matches().into_iter().collect();
    let mut tp = 0;
    let mut fp = 0;
    for (i, j) in pred.pairs() {
        if truth.contains(&(i, j)) {
            tp += 1;
        } else {
            fp += 1;
        }
    }
    let fn_ = truth.len() - tp;
    MatchReport::from_counts(tp, fp, fn_)
}

/// RANSAC homography with 4-point DLT hypotheses and a final DLT refit on
/// the inliers. Deterministic for a given seed.
pub fn estimate_homography_ransac(
    matches: &[(Vector2<f64>, Vector2<f64>)],
    iterations: usize,
    inlier_px: f64,
    seed: u64,
) -> Result<(Homography, Vec<bool>), MetricsError> {
    if matches.len() < 4 {
        return Err(MetricsError::InsufficientMatches(matches.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, f64, Vec<bool>, Homography)> = None;

    for _ in 0..iterations {
        let sample = sample_indices(&mut rng, matches.len(), 4);
        let pairs: Vec<_> = sample.iter().map(|&i| matches[i]).collect();
        let Ok(h) = dlt_homography(&pairs) else { continue };

        let mut inliers = vec![false; matches.len()];
        let mut count = 0usize;
        let mut err_sum = 0.0;
        for (idx, (a, b)) in matches.iter().enumerate() {
            let Ok(w) = warp_homography(&h, a) else { continue };
            let err = ((w[0] - b[0]).powi(2) + (w[1] - b[1]).powi(2)).sqrt();
            if err < inlier_px {
                inliers[idx] = true;
                count += 1;
                err_sum += err;
            }
        }
        let better = match &best {
            None => true,
            Some((best_count, best_err, _, _)) => count > *best_count || (count == *best_count && err_sum < *best_err),
        };
        if better {
            best = Some((count, err_sum, inliers, h));
        }
    }

    let (count, _, inliers, hypothesis) = best.ok_or(MetricsError::NoValidModel)?;
    if count < 4 {
        return Err(MetricsError::NoValidModel);
    }
    let inlier_pairs: Vec<_> = matches
        .iter()
        .zip(&inliers)
        .filter(|(_, keep)| **keep)
        .map(|(p, _)| *p)
        .collect();
    let refit = dlt_homography(&inlier_pairs).unwrap_or(hypothesis);
    Ok((refit, inliers))
}

fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut chosen = Vec::with_capacity(k);
    while chosen.len() < k {
        let idx = rng.gen_range(0..n);
        if !chosen.contains(&idx) {
            chosen.push(idx);
        }
    }
    chosen
}

/// Mean reprojection distance of the four image corners between two
/// homographies, and whether it clears the threshold.
pub fn homography_accuracy(
    h_est: &Homography,
    h_gt: &Homography,
    width: f64,
    height: f64,
    threshold_px: f64,
) -> Result<(bool, f64), MetricsError> {
    let corners = [
        Vector2::new(0.0, 0.0),
        Vector2::new(width, 0.0),
        Vector2::new(width, height),
        Vector2::new(0.0, height),
    ];
    let mut total = 0.0;
    for c in &corners {
        let a = warp_homography(h_est, c)?;
        let b = warp_homography(h_gt, c)?;
        total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    }
    let mean = total / 4.0;
    Ok((mean < threshold_px, mean))
}

/// Area under the cumulative recall curve of pose errors, normalized to
/// each threshold.
///
/// The curve linearly interpolates `(0, 0)` and `(e_i, i/n)` over the
/// sorted errors; errors beyond a threshold add nothing, and the curve
/// extends flat from the last error below the threshold.
pub fn pose_auc(errors: &[f64], max_thresholds: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::EmptyErrors);
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;

    let mut out = Vec::with_capacity(max_thresholds.len());
    for &t in max_thresholds {
        let mut area = 0.0;
        let mut prev_e = 0.0;
        let mut prev_r = 0.0;
        for (i, &e) in sorted.iter().enumerate() {
            if e > t {
                break;
            }
            let r = (i + 1) as f64 / n;
            area += (e - prev_e) * (prev_r + r) * 0.5;
            prev_e = e;
            prev_r = r;
        }
        area += (t - prev_e) * prev_r; // flat tail up to the threshold
        out.push(if t > 0.0 { area / t } else { 0.0 });
    }
    Ok(out)
}
