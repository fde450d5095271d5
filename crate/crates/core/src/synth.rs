//! Synthetic two-view scenes for desk-scale training and evaluation:
//! random landmarks in a box seen by two cameras with a bounded relative
//! pose, correlated descriptors for co-visible points, and a perturbed
//! pose standing in for an integrated motion prior.

use crate::features::FeatureSet;
use crate::geometry::{project, so3_exp, CameraIntrinsics, Pose};
use crate::mat::Mat;
use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub n_points: usize,
    pub descriptor_dim: usize,
    /// Std of the per-view Gaussian added to each base descriptor before
    /// re-normalization.
    pub descriptor_noise: f64,
    /// Fraction of landmarks whose two views get independent descriptors.
    pub outlier_fraction: f64,
    /// Bounds the relative pose: rotation angle (radians) and translation
    /// norm (meters) are both drawn from `[0, pose_magnitude]`.
    pub pose_magnitude: f64,
    /// Max rotation error of the synthetic motion prior, degrees.
    pub prior_rot_err_deg: f64,
    /// Max translation error of the synthetic motion prior, meters.
    pub prior_trans_err: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            n_points: 64,
            descriptor_dim: 16,
            descriptor_noise: 0.3,
            outlier_fraction: 0.0,
            pose_magnitude: 0.15,
            // inside the 0.1 m / 8 degree acceptance gate for priors
            prior_rot_err_deg: 6.0,
            prior_trans_err: 0.08,
        }
    }
}

/// A generated image pair with ground truth and motion prior, both as
/// A-to-B coordinate transforms.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub feats_a: FeatureSet,
    pub feats_b: FeatureSet,
    pub k_a: CameraIntrinsics,
    pub k_b: CameraIntrinsics,
    pub t_ab: Pose,
    pub prior_ab: Pose,
    /// Landmark index behind each keypoint of A / B.
    pub landmarks_a: Vec<usize>,
    pub landmarks_b: Vec<usize>,
}

impl SynthPair {
    /// Number of landmarks visible in both images.
    pub fn covisible(&self) -> usize {
        let in_b: std::collections::HashSet<_> = self.landmarks_b.iter().collect();
        self.landmarks_a.iter().filter(|l| in_b.contains(l)).count()
    }
}

fn unit_gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| gaussian(rng)).collect()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v {
            *x /= norm;
        }
    }
}

fn random_unit_axis(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(gaussian(rng), gaussian(rng), gaussian(rng));
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn random_bounded_pose(rng: &mut ChaCha8Rng, magnitude: f64) -> Pose {
    if magnitude == 0.0 {
        return Pose::identity();
    }
    let angle = rng.gen::<f64>() * magnitude;
    let rotation = so3_exp(&(random_unit_axis(rng) * angle));
    let translation = random_unit_axis(rng) * (rng.gen::<f64>() * magnitude);
    Pose::new(rotation, translation).expect("rodrigues rotation is orthonormal")
}

/// Perturbs a pose by a bounded rotation and translation offset.
pub fn perturb_pose(pose: &Pose, rot_err_deg: f64, trans_err: f64, rng: &mut ChaCha8Rng) -> Pose {
    let angle = rng.gen::<f64>() * rot_err_deg.to_radians();
    let d_rot = so3_exp(&(random_unit_axis(rng) * angle));
    let d_trans = random_unit_axis(rng) * (rng.gen::<f64>() * trans_err);
    Pose::new(d_rot * pose.rotation(), pose.translation() + d_trans).expect("perturbed rotation stays orthonormal")
}

/// Standard desk-scale camera for generated scenes.
pub fn synth_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(400.0, 400.0, 320.0, 240.0, 640.0, 480.0)
}

/// Generates one synthetic pair.
pub fn synth_scene(seed: u64, opts: &SynthOptions) -> SynthPair {
    assert!(opts.n_points >= 2, "need at least two landmarks");
    assert!((0.0..=1.0).contains(&opts.outlier_fraction), "outlier fraction in [0,1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = synth_intrinsics();

    // camera A at the origin; B displaced by a bounded pose. t_ab maps
    // A-coordinates to B-coordinates.
    let t_ab = random_bounded_pose(&mut rng, opts.pose_magnitude);

    let mut positions_a = Vec::new();
    let mut positions_b = Vec::new();
    let mut depths_a = Vec::new();
    let mut depths_b = Vec::new();
    let mut desc_a_rows: Vec<Vec<f64>> = Vec::new();
    let mut desc_b_rows: Vec<Vec<f64>> = Vec::new();
    let mut landmarks_a = Vec::new();
    let mut landmarks_b = Vec::new();

    for li in 0..opts.n_points {
        let landmark = Vector3::new(
            (rng.gen::<f64>() - 0.5) * 2.4,
            (rng.gen::<f64>() - 0.5) * 1.8,
            2.5 + rng.gen::<f64>() * 2.5,
        );
        let in_b = t_ab.transform(&landmark);

        let mut base = unit_gaussian_vec(&mut rng, opts.descriptor_dim);
        normalize(&mut base);
        let outlier = rng.gen::<f64>() < opts.outlier_fraction;

        let view_descriptor = |rng: &mut ChaCha8Rng, independent: bool| {
            let mut d = if independent {
                unit_gaussian_vec(rng, opts.descriptor_dim)
            } else if opts.descriptor_noise > 0.0 {
                base.iter().map(|&x| x + opts.descriptor_noise * gaussian(rng)).collect()
            } else {
                base.clone()
            };
            normalize(&mut d);
            d
        };

        if let Ok(p) = project(&k, &landmark) {
            if k.contains(&p) {
                positions_a.push([p[0], p[1]]);
                depths_a.push(landmark[2]);
                desc_a_rows.push(view_descriptor(&mut rng, false));
                landmarks_a.push(li);
            }
        }
        if in_b[2] > 1e-9 {
            if let Ok(p) = project(&k, &in_b) {
                if k.contains(&p) {
                    positions_b.push([p[0], p[1]]);
                    depths_b.push(in_b[2]);
                    desc_b_rows.push(view_descriptor(&mut rng, outlier));
                    landmarks_b.push(li);
                }
            }
        }
    }

    // degenerate draws with everything out of view are not useful; keep a
    // minimal pair alive by re-seeding deterministically
    if positions_a.len() < 2 || positions_b.len() < 2 {
        return synth_scene(seed.wrapping_add(0x9e37_79b9), opts);
    }

    let to_mat = |rows: &[Vec<f64>]| {
        Mat::from_fn(rows.len(), opts.descriptor_dim, |i, j| rows[i][j])
    };
    let feats_a = FeatureSet::new(positions_a, to_mat(&desc_a_rows), Some(depths_a)).expect("valid synth features");
    let feats_b = FeatureSet::new(positions_b, to_mat(&desc_b_rows), Some(depths_b)).expect("valid synth features");

    let prior_ab = perturb_pose(&t_ab, opts.prior_rot_err_deg, opts.prior_trans_err, &mut rng);

    SynthPair { feats_a, feats_b, k_a: k, k_b: k, t_ab, prior_ab, landmarks_a, landmarks_b }
}

/// Nearest-neighbor descriptor matching, for baseline checks.
pub fn nn_matches(feats_a: &FeatureSet, feats_b: &FeatureSet) -> Vec<(usize, usize)> {
    let da = feats_a.descriptors();
    let db = feats_b.descriptors();
    let mut out = Vec::new();
    for i in 0..da.rows() {
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for j in 0..db.rows() {
            let dot: f64 = da.row(i).iter().zip(db.row(j)).map(|(x, y)| x * y).sum();
            if dot > best_dot {
                best_dot = dot;
                best = j;
            }
        }
        out.push((i, best));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_angular_errors;
    use crate::losses::{build_ground_truth, GtWarp};

    #[test]
    fn noiseless_nn_matching_recovers_ground_truth() {
        let opts = SynthOptions { descriptor_noise: 0.0, outlier_fraction: 0.0, ..Default::default() };
        let pair = synth_scene(7, &opts);
        let nn = nn_matches(&pair.feats_a, &pair.feats_b);
        for (i, j) in nn {
            // co-visible landmarks must match by landmark identity
            if pair.landmarks_b.contains(&pair.landmarks_a[i]) {
                assert_eq!(pair.landmarks_a[i], pair.landmarks_b[j]);
            }
        }
    }

    #[test]
    fn zero_pose_magnitude_gives_identity_and_coincident_keypoints() {
        let opts = SynthOptions { pose_magnitude: 0.0, descriptor_noise: 0.0, ..Default::default() };
        let pair = synth_scene(3, &opts);
        assert!(pair.t_ab.translation().norm() < 1e-12);
        assert_eq!(pair.feats_a.len(), pair.feats_b.len());
        for i in 0..pair.feats_a.len() {
            let a = pair.feats_a.position(i);
            let b = pair.feats_b.position(i);
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn ground_truth_matches_most_covisible_points() {
        let mut total_ratio = 0.0;
        let mut runs = 0;
        for seed in 0..100 {
            let pair = synth_scene(seed, &SynthOptions::default());
            let gt = build_ground_truth(&pair.k_a, &pair.k_b, GtWarp::Pose(&pair.t_ab), &pair.feats_a, &pair.feats_b, 3.0)
                .unwrap();
            let covis = pair.covisible();
            if covis == 0 {
                continue;
            }
            total_ratio += gt.matches().len() as f64 / covis as f64;
            runs += 1;
        }
        let mean_ratio = total_ratio / runs as f64;
        assert!(mean_ratio >= 0.8, "matched fraction {mean_ratio}");
    }

    #[test]
    fn prior_error_within_configured_bounds() {
        for seed in 0..50 {
            let opts = SynthOptions::default();
            let pair = synth_scene(seed, &opts);
            let (rot_deg, _) = pose_angular_errors(&pair.prior_ab, &pair.t_ab);
            assert!(rot_deg <= opts.prior_rot_err_deg + 1e-9);
            let trans_err = (pair.prior_ab.translation() - pair.t_ab.translation()).norm();
            assert!(trans_err <= opts.prior_trans_err + 1e-12);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_scene(11, &SynthOptions::default());
        let b = synth_scene(11, &SynthOptions::default());
        assert_eq!(a.feats_a, b.feats_a);
        assert_eq!(a.feats_b, b.feats_b);
        assert_eq!(a.t_ab, b.t_ab);
        assert_eq!(a.prior_ab, b.prior_ab);
    }
}
