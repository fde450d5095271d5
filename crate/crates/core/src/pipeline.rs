//! End-to-end matching pipeline: prior construction, feature refinement,
//! optimal transport assignment, and match recovery, plus the
//! differentiable loss used in training.

use crate::assignment::{
    dustbin_log_marginals, recover_matches, sinkhorn_log_engine, AssignmentError, AssignmentMatrix, MatchSet,
};
use crate::engine::{EagerEngine, Engine};
use crate::features::FeatureSet;
use crate::geometry::{CameraIntrinsics, GeometryError, Homography, Pose};
use crate::gnn::{bind_params, forward_engine, BoundParams, GnnError, GnnInputs, ModelParams, PriorPack};
use crate::losses::{GroundTruth, LossError, LOG_CLAMP_EPS};
use crate::mat::{kernels, Mat};
use crate::prior::{cross_prior, cross_prior_homography, self_prior, PriorDirection};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("feature descriptors are {got}-dimensional, model expects {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("attention variant {0} requires a motion prior")]
    MissingMotionPrior(String),
    #[error("forward pass produced a non-finite loss")]
    NonFiniteLoss,
}

/// Motion prior between the two images, in A-to-B form.
#[derive(Clone, Debug)]
pub enum MotionPrior {
    None,
    /// Coordinate transform from A-camera to B-camera coordinates.
    Pose(Pose),
    Homography(Homography),
}

/// Inference-time knobs.
#[derive(Clone, Copy, Debug)]
pub struct MatchSettings {
    pub sinkhorn_iterations: usize,
    pub sinkhorn_temperature: f64,
    pub confidence_threshold: f64,
}

impl Default for MatchSettings {
    fn default() -> Self {
        MatchSettings { sinkhorn_iterations: 100, sinkhorn_temperature: 1.0, confidence_threshold: 0.2 }
    }
}

/// Which training objective to optimize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Matching,
    Projection,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "matching" => Ok(LossKind::Matching),
            "projection" => Ok(LossKind::Projection),
            other => Err(format!("unknown loss kind '{other}'")),
        }
    }
}

/// One image pair ready for matching.
pub struct PairInput<'a> {
    pub feats_a: &'a FeatureSet,
    pub feats_b: &'a FeatureSet,
    pub k_a: &'a CameraIntrinsics,
    pub k_b: &'a CameraIntrinsics,
    pub motion: &'a MotionPrior,
}

/// Builds the four prior matrices for one pair. Returns `None` when no
/// motion prior is available (vanilla attention).
pub fn build_prior_pack(input: &PairInput<'_>, sigma: f64) -> Result<Option<PriorPack>, PipelineError> {
    let size_a = (input.k_a.width, input.k_a.height);
    let size_b = (input.k_b.width, input.k_b.height);
    let (cross_ab, cross_ba) = match input.motion {
        MotionPrior::None => return Ok(None),
        MotionPrior::Pose(t_ab) => (
            cross_prior(input.k_a, input.k_b, t_ab, input.feats_a, input.feats_b, sigma, PriorDirection::CrossAB),
            cross_prior(
                input.k_b,
                input.k_a,
                &t_ab.inverse(),
                input.feats_b,
                input.feats_a,
                sigma,
                PriorDirection::CrossBA,
            ),
        ),
        MotionPrior::Homography(h) => {
            let h_inv = h.inverse()?;
            (
                cross_prior_homography(h, input.feats_a, input.feats_b, size_b, sigma, PriorDirection::CrossAB),
                cross_prior_homography(&h_inv, input.feats_b, input.feats_a, size_a, sigma, PriorDirection::CrossBA),
            )
        }
    };
    Ok(Some(PriorPack {
        self_a: self_prior(input.feats_a, size_a, sigma, PriorDirection::SelfA),
        self_b: self_prior(input.feats_b, size_b, sigma, PriorDirection::SelfB),
        cross_ab,
        cross_ba,
    }))
}

/// Per-stage wall-clock times of one match call.
#[derive(Clone, Copy, Debug, Default)]
pub struct MatchTiming {
    pub prior_ms: f64,
    pub gnn_ms: f64,
    pub sinkhorn_ms: f64,
    pub recovery_ms: f64,
}

impl MatchTiming {
    pub fn total_ms(&self) -> f64 {
        self.prior_ms + self.gnn_ms + self.sinkhorn_ms + self.recovery_ms
    }
}

pub struct MatchOutcome {
    pub matches: MatchSet,
    pub assignment: AssignmentMatrix,
    pub timing: MatchTiming,
}

fn check_dims(params: &ModelParams, input: &PairInput<'_>) -> Result<(), PipelineError> {
    for feats in [input.feats_a, input.feats_b] {
        if feats.descriptor_dim() != params.config.dim {
            return Err(PipelineError::DimMismatch { got: feats.descriptor_dim(), want: params.config.dim });
        }
    }
    Ok(())
}

fn gnn_inputs(feats: &FeatureSet, k: &CameraIntrinsics) -> GnnInputs {
    GnnInputs::new(feats.normalized_positions(k.width, k.height), feats.descriptors().clone())
}

/// Assignment in log space on any engine: score matrix, dustbin
/// augmentation, Sinkhorn normalization.
pub fn assignment_log_engine<E: Engine>(
    e: &mut E,
    f_a: &E::T,
    f_b: &E::T,
    dustbin: &E::T,
    iterations: usize,
    temperature: f64,
) -> E::T {
    let scores = e.matmul_nt(f_a, f_b);
    let padded = e.pad_dustbin(&scores, dustbin);
    let n_a = e.value(f_a).rows();
    let n_b = e.value(f_b).rows();
    let (log_a, log_b) = dustbin_log_marginals(n_a, n_b);
    sinkhorn_log_engine(e, &padded, &log_a, &log_b, iterations, temperature)
}

/// Negative log-likelihood loss on the log assignment.
pub fn loss_engine<E: Engine>(
    e: &mut E,
    log_p: &E::T,
    gt: &GroundTruth,
    kind: LossKind,
    mg: f64,
) -> Result<E::T, PipelineError> {
    let (n_a, n_b) = gt.counts();
    let log_clamped = e.clamp_const(log_p, LOG_CLAMP_EPS.ln(), 0.0);

    let (pos_term, unmatched) = match kind {
        LossKind::Matching => {
            let matches = gt.matches();
            let pos = if matches.is_empty() {
                e.constant(Mat::scalar(0.0))
            } else {
                let picked = e.gather(&log_clamped, &matches);
                let total = e.sum(&picked);
                e.scale_const(&total, -1.0 / matches.len() as f64)
            };
            (pos, gt.unmatched_given(&matches))
        }
        LossKind::Projection => {
            if mg <= gt.threshold() {
                return Err(LossError::InvalidMargin { th: gt.threshold(), mg }.into());
            }
            let pairs = gt.positive_pairs(mg);
            let pos = if pairs.is_empty() {
                e.constant(Mat::scalar(0.0))
            } else {
                let idx: Vec<(usize, usize)> = pairs.iter().map(|&(i, j, _)| (i, j)).collect();
                let weights = Mat::from_fn(pairs.len(), 1, |r, _| (gt.threshold() - pairs[r].2).exp());
                let picked = e.gather(&log_clamped, &idx);
                let weighted = e.mul_constmat(&picked, &weights);
                let total = e.sum(&weighted);
                e.scale_const(&total, -1.0 / pairs.len() as f64)
            };
            let idx: Vec<(usize, usize)> = pairs.iter().map(|&(i, j, _)| (i, j)).collect();
            (pos, gt.unmatched_given(&idx))
        }
    };

    let (un_a, un_b) = unmatched;
    let neg_count = un_a.len() + un_b.len();
    let neg_term = if neg_count == 0 {
        e.constant(Mat::scalar(0.0))
    } else {
        let idx: Vec<(usize, usize)> = un_a
            .iter()
            .map(|&i| (i, n_b))
            .chain(un_b.iter().map(|&j| (n_a, j)))
            .collect();
        let picked = e.gather(&log_clamped, &idx);
        let total = e.sum(&picked);
        e.scale_const(&total, -1.0 / neg_count as f64)
    };

    let doubled = e.scale_const(&pos_term, 2.0);
    Ok(e.add(&doubled, &neg_term))
}

/// Full differentiable pipeline for one pair: features to scalar loss.
#[allow(clippy::too_many_arguments)]
pub fn pair_loss_engine<E: Engine>(
    e: &mut E,
    bound: &BoundParams<E::T>,
    a: &GnnInputs,
    b: &GnnInputs,
    priors: Option<&PriorPack>,
    gt: &GroundTruth,
    kind: LossKind,
    mg: f64,
    sinkhorn_iterations: usize,
    sinkhorn_temperature: f64,
) -> Result<E::T, PipelineError> {
    let (fa, fb) = forward_engine(e, bound, a, b, priors)?;
    let log_p = assignment_log_engine(e, &fa, &fb, &bound.dustbin, sinkhorn_iterations, sinkhorn_temperature);
    loss_engine(e, &log_p, gt, kind, mg)
}

/// Matches one pair with the eager engine, reporting per-stage times.
pub fn match_pair(
    params: &ModelParams,
    input: &PairInput<'_>,
    settings: &MatchSettings,
) -> Result<MatchOutcome, PipelineError> {
    use crate::gnn::AttentionVariant;
    check_dims(params, input)?;

    let t0 = Instant::now();
    let priors = build_prior_pack(input, params.config.sigma)?;
    if priors.is_none() && params.config.variant != AttentionVariant::Vanilla {
        return Err(PipelineError::MissingMotionPrior(params.config.variant.to_string()));
    }
    let priors = if params.config.variant == AttentionVariant::Vanilla { None } else { priors };
    let prior_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t1 = Instant::now();
    let mut e = EagerEngine;
    let bound = bind_params(params, |m| m.clone());
    let a = gnn_inputs(input.feats_a, input.k_a);
    let b = gnn_inputs(input.feats_b, input.k_b);
    let (fa, fb) = forward_engine(&mut e, &bound, &a, &b, priors.as_ref())?;
    let gnn_ms = t1.elapsed().as_secs_f64() * 1e3;

    let t2 = Instant::now();
    let log_p = assignment_log_engine(
        &mut e,
        &fa,
        &fb,
        &bound.dustbin,
        settings.sinkhorn_iterations,
        settings.sinkhorn_temperature,
    );
    let p = kernels::exp(&log_p);
    let assignment = AssignmentMatrix::from_matrix(p, input.feats_a.len(), input.feats_b.len());
    let sinkhorn_ms = t2.elapsed().as_secs_f64() * 1e3;

    let t3 = Instant::now();
    let matches = recover_matches(&assignment, settings.confidence_threshold);
    let recovery_ms = t3.elapsed().as_secs_f64() * 1e3;

    Ok(MatchOutcome {
        matches,
        assignment,
        timing: MatchTiming { prior_ms, gnn_ms, sinkhorn_ms, recovery_ms },
    })
}
