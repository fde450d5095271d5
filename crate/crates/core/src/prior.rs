//! Spatial distribution priors: Gaussian scores of keypoint distances in
//! normalized image coordinates, built from a motion prior within and
//! across images.

use crate::features::FeatureSet;
use crate::geometry::{dlt_homography, warp_homography, warp_keypoint, CameraIntrinsics, Homography, Pose};
use crate::mat::Mat;
use nalgebra::Vector2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Squared image diagonal in normalized units; the distance assigned to
/// keypoints whose warp is unavailable so their logits stay bounded.
pub const MAX_SQ_DIST: f64 = 2.0;

/// Which attention direction a prior matrix feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorDirection {
    SelfA,
    SelfB,
    CrossAB,
    CrossBA,
}

/// Gaussian spatial prior for one attention direction.
///
/// Stores squared distances in normalized coordinates so that the
/// probabilistic attention variant can re-scale them by its per-layer
/// sigma; `scores()` exposes the `[0,1]` Gaussian form.
#[derive(Clone, Debug)]
pub struct PriorMatrix {
    direction: PriorDirection,
    /// Squared normalized distances; rows of unwarpable keypoints hold
    /// `MAX_SQ_DIST`.
    sq_dist: Mat,
    /// Per-source-row validity (false when the source keypoint could not
    /// be warped).
    valid: Vec<bool>,
    /// Sigma used for the `[0,1]` score form.
    sigma: f64,
    /// `sq_dist` shifted so each valid row's minimum is zero and invalid
    /// rows are zero; dividing by any sigma yields bounded, row-centered
    /// attention logit offsets.
    centered_sq_dist: Mat,
}

impl PriorMatrix {
    fn build(direction: PriorDirection, sq_dist: Mat, valid: Vec<bool>, sigma: f64) -> Self {
        assert!(sigma > 0.0, "sigma must be positive");
        let mut centered = Mat::zeros(sq_dist.rows(), sq_dist.cols());
        for i in 0..sq_dist.rows() {
            if !valid[i] {
                continue; // row stays zero: a uniform (no-information) offset
            }
            let row = sq_dist.row(i);
            let min = row.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            for j in 0..sq_dist.cols() {
                centered.set(i, j, sq_dist.get(i, j) - min);
            }
        }
        PriorMatrix { direction, sq_dist, valid, sigma, centered_sq_dist: centered }
    }

    pub fn direction(&self) -> PriorDirection {
        self.direction
    }

    pub fn shape(&self) -> (usize, usize) {
        self.sq_dist.shape()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn row_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn sq_dist(&self) -> &Mat {
        &self.sq_dist
    }

    pub fn centered_sq_dist(&self) -> &Mat {
        &self.centered_sq_dist
    }

    /// Gaussian scores `s_ij = exp(-d_ij^2 / sigma)`; zero on rows whose
    /// source keypoint could not be warped.
    pub fn scores(&self) -> Mat {
        Mat::from_fn(self.sq_dist.rows(), self.sq_dist.cols(), |i, j| {
            if self.valid[i] {
                (-self.sq_dist.get(i, j) / self.sigma).exp()
            } else {
                0.0
            }
        })
    }

    /// Same distances under a different direction tag.
    pub fn retagged(&self, direction: PriorDirection) -> PriorMatrix {
        let mut out = self.clone();
        out.direction = direction;
        out
    }

    /// Swaps the roles of source and destination, used by tests exercising
    /// the A/B symmetry of the pipeline.
    pub fn transposed(&self, direction: PriorDirection) -> PriorMatrix {
        assert!(
            self.valid.iter().all(|v| *v),
            "transposing a prior with invalid rows would lose per-row validity"
        );
        PriorMatrix::build(direction, self.sq_dist.transpose(), vec![true; self.sq_dist.cols()], self.sigma)
    }
}

/// Prior over keypoints of the same image: `d_ij = ||p_i - p_j||` in
/// normalized coordinates. Symmetric with a unit diagonal.
pub fn self_prior(feats: &FeatureSet, size: (f64, f64), sigma: f64, direction: PriorDirection) -> PriorMatrix {
    let n = feats.len();
    let (w, h) = size;
    let mut sq = Mat::zeros(n, n);
    for i in 0..n {
        let pi = feats.position(i);
        for j in 0..n {
            let pj = feats.position(j);
            let dx = (pi[0] - pj[0]) / w;
            let dy = (pi[1] - pj[1]) / h;
            sq.set(i, j, dx * dx + dy * dy);
        }
    }
    PriorMatrix::build(direction, sq, vec![true; n], sigma)
}

/// Cross-image prior from a pose motion prior.
///
/// `src_to_dst` maps source-camera coordinates to destination-camera
/// coordinates. Source keypoints without depth, behind the destination
/// camera, or warped out of the destination frame get an invalid (zero)
/// row instead of aborting.
pub fn cross_prior(
    k_src: &CameraIntrinsics,
    k_dst: &CameraIntrinsics,
    src_to_dst: &Pose,
    feats_src: &FeatureSet,
    feats_dst: &FeatureSet,
    sigma: f64,
    direction: PriorDirection,
) -> PriorMatrix {
    let warped: Vec<Option<Vector2<f64>>> = (0..feats_src.len())
        .map(|i| {
            let depth = feats_src.depth(i)?;
            let p = Vector2::new(feats_src.position(i)[0], feats_src.position(i)[1]);
            match warp_keypoint(k_src, k_dst, src_to_dst, &p, depth) {
                Ok(w) => w.in_view(),
                Err(_) => None,
            }
        })
        .collect();
    prior_from_warps(&warped, feats_dst, (k_dst.width, k_dst.height), sigma, direction)
}

/// Cross-image prior from a homography motion prior (planar scenes).
pub fn cross_prior_homography(
    h_src_to_dst: &Homography,
    feats_src: &FeatureSet,
    feats_dst: &FeatureSet,
    dst_size: (f64, f64),
    sigma: f64,
    direction: PriorDirection,
) -> PriorMatrix {
    let (w, h) = dst_size;
    let warped: Vec<Option<Vector2<f64>>> = (0..feats_src.len())
        .map(|i| {
            let p = Vector2::new(feats_src.position(i)[0], feats_src.position(i)[1]);
            match warp_homography(h_src_to_dst, &p) {
                Ok(q) if q[0] >= 0.0 && q[0] < w && q[1] >= 0.0 && q[1] < h => Some(q),
                _ => None,
            }
        })
        .collect();
    prior_from_warps(&warped, feats_dst, dst_size, sigma, direction)
}

fn prior_from_warps(
    warped: &[Option<Vector2<f64>>],
    feats_dst: &FeatureSet,
    dst_size: (f64, f64),
    sigma: f64,
    direction: PriorDirection,
) -> PriorMatrix {
    let (w, h) = dst_size;
    let n_src = warped.len();
    let n_dst = feats_dst.len();
    let mut sq = Mat::zeros(n_src, n_dst);
    let mut valid = vec![false; n_src];
    for (i, wp) in warped.iter().enumerate() {
        match wp {
            Some(p) => {
                valid[i] = true;
                for j in 0..n_dst {
                    let q = feats_dst.position(j);
                    let dx = (p[0] - q[0]) / w;
                    let dy = (p[1] - q[1]) / h;
                    sq.set(i, j, dx * dx + dy * dy);
                }
            }
            None => {
                for j in 0..n_dst {
                    sq.set(i, j, MAX_SQ_DIST);
                }
            }
        }
    }
    PriorMatrix::build(direction, sq, valid, sigma)
}

/// Perturbs a ground-truth homography by Gaussian pixel offsets on the
/// images of the four unit-square corners and refits. Used to synthesize a
/// motion prior for homography datasets.
pub fn noisy_homography_prior(h_gt: &Homography, noise_scale: f64, seed: u64) -> Homography {
    assert!(noise_scale >= 0.0, "noise scale must be non-negative");
    if noise_scale == 0.0 {
        return h_gt.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corners = [
        Vector2::new(0.0, 0.0),
        Vector2::new(1.0, 0.0),
        Vector2::new(1.0, 1.0),
        Vector2::new(0.0, 1.0),
    ];
    loop {
        let mut pairs = Vec::with_capacity(4);
        let mut ok = true;
        for c in &corners {
            match warp_homography(h_gt, c) {
                Ok(q) => {
                    let noisy = Vector2::new(q[0] + gaussian(&mut rng) * noise_scale, q[1] + gaussian(&mut rng) * noise_scale);
                    pairs.push((*c, noisy));
                }
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            if let Ok(h) = dlt_homography(&pairs) {
                return h;
            }
        }
        // retry with fresh noise on the rare degenerate draw
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller transform
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
