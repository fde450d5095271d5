//! SE(3) poses, pinhole projection, keypoint warping, and planar
//! homographies. Everything here is double precision.

use nalgebra::{DMatrix, Matrix3, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

const ORTHO_TOL: f64 = 1e-9;
const MIN_DEPTH: f64 = 1e-9;
const MIN_HOMOGENEOUS_W: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("rotation matrix is not orthonormal with determinant +1")]
    InvalidRotation,
    #[error("point depth {0} is not positive")]
    NonPositiveDepth(f64),
    #[error("homogeneous w-coordinate {0} is too close to zero")]
    DegenerateDivision(f64),
    #[error("homography matrix is singular")]
    SingularHomography,
    #[error("degenerate point configuration for homography fit")]
    DegenerateConfiguration,
}

/// Rigid transform on SE(3). Maps points `x_out = R * x_in + t`.
///
/// Used both as a coordinate transform between camera frames and as the
/// pose of one frame expressed in another; which of the two a value is
/// depends on how it was produced, so function signatures name the
/// convention they expect.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    /// Builds a pose, validating that the rotation is orthonormal with
    /// determinant +1 (within 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let rtr = rotation.transpose() * rotation;
        let delta = (rtr - Matrix3::identity()).abs().max();
        if delta > ORTHO_TOL || (rotation.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Pose { rotation, translation })
    }

    pub fn identity() -> Self {
        Pose { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Quaternion is the interchange representation; it is converted to a
    /// matrix on entry.
    pub fn from_quaternion(qw: f64, qx: f64, qy: f64, qz: f64, translation: Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(qw, qx, qy, qz));
        Pose { rotation: q.to_rotation_matrix().into_inner(), translation }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Exponential map from a twist `[rho, phi]` (translation part first).
    pub fn exp(xi: &[f64; 6]) -> Pose {
        let rho = Vector3::new(xi[0], xi[1], xi[2]);
        let phi = Vector3::new(xi[3], xi[4], xi[5]);
        let rotation = so3_exp(&phi);
        let v = so3_left_jacobian(&phi);
        Pose { rotation, translation: v * rho }
    }

    /// Logarithm map to a twist `[rho, phi]`.
    pub fn log(&self) -> [f64; 6] {
        let phi = so3_log(&self.rotation);
        let v_inv = so3_left_jacobian_inv(&phi);
        let rho = v_inv * self.translation;
        [rho[0], rho[1], rho[2], phi[0], phi[1], phi[2]]
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Rodrigues rotation from an axis-angle vector.
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-10 {
        // second-order series keeps the result orthonormal to machine precision
        Matrix3::identity() + k + k * k * 0.5
    } else {
        Matrix3::identity() + k * (theta.sin() / theta)
            + k * k * ((1.0 - theta.cos()) / (theta * theta))
    }
}

/// Axis-angle vector of a rotation matrix, handling angles near 0 and pi.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    if theta < 1e-10 {
        return Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    }
    if (std::f64::consts::PI - theta) < 1e-6 {
        // near pi the antisymmetric part vanishes; recover the axis from
        // the symmetric part R + I = 2(aa^T + cos(theta) ...) structure
        let b = (r + Matrix3::identity()) * 0.5;
        let mut axis = Vector3::new(b[(0, 0)].max(0.0).sqrt(), b[(1, 1)].max(0.0).sqrt(), b[(2, 2)].max(0.0).sqrt());
        // fix signs using the largest component
        let k = axis.imax();
        if axis[k] > 0.0 {
            for i in 0..3 {
                if i != k {
                    let s = b[(k, i)] / axis[k];
                    axis[i] = s;
                }
            }
        }
        let n = axis.norm();
        if n > 0.0 {
            axis /= n;
        }
        return axis * theta;
    }
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    w * (theta / (2.0 * theta.sin()))
}

fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-10 {
        return Matrix3::identity() + k * 0.5 + k * k * (1.0 / 6.0);
    }
    let t2 = theta * theta;
    Matrix3::identity() + k * ((1.0 - theta.cos()) / t2) + k * k * ((theta - theta.sin()) / (t2 * theta))
}

fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-10 {
        return Matrix3::identity() - k * 0.5 + k * k * (1.0 / 12.0);
    }
    let half = theta * 0.5;
    let coef = (1.0 - half * (half.cos() / half.sin())) / (theta * theta);
    Matrix3::identity() - k * 0.5 + k * k * coef
}

/// Pinhole camera parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(width > 0.0 && height > 0.0, "image size must be positive");
        CameraIntrinsics { fx, fy, cx, cy, width, height }
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p[0] >= 0.0 && p[0] < self.width && p[1] >= 0.0 && p[1] < self.height
    }
}

/// Projects a camera-frame landmark to pixel coordinates.
pub fn project(k: &CameraIntrinsics, landmark: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    let z = landmark[2];
    if z <= MIN_DEPTH {
        return Err(GeometryError::NonPositiveDepth(z));
    }
    Ok(Vector2::new(k.fx * landmark[0] / z + k.cx, k.fy * landmark[1] / z + k.cy))
}

/// Back-projects a pixel at a given depth into the camera frame.
pub fn unproject(k: &CameraIntrinsics, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, GeometryError> {
    if depth <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok(Vector3::new((pixel[0] - k.cx) / k.fx * depth, (pixel[1] - k.cy) / k.fy * depth, depth))
}

/// Outcome of warping a keypoint into another view.
///
/// Leaving the frame is a value rather than an error: prior construction
/// zeroes the affected rows while ground-truth distances may still use the
/// finite out-of-frame position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Warped {
    InView(Vector2<f64>),
    /// Finite pixel position outside `[0,w) x [0,h)`.
    OutOfFrame(Vector2<f64>),
    /// Transformed point has non-positive depth; no pixel position exists.
    BehindCamera,
}

impl Warped {
    pub fn pixel(&self) -> Option<Vector2<f64>> {
        match self {
            Warped::InView(p) | Warped::OutOfFrame(p) => Some(*p),
            Warped::BehindCamera => None,
        }
    }

    pub fn in_view(&self) -> Option<Vector2<f64>> {
        match self {
            Warped::InView(p) => Some(*p),
            _ => None,
        }
    }
}

/// Warps a source-image pixel with known depth into the destination image.
///
/// `src_to_dst` maps source-camera coordinates to destination-camera
/// coordinates.
pub fn warp_keypoint(
    k_src: &CameraIntrinsics,
    k_dst: &CameraIntrinsics,
    src_to_dst: &Pose,
    pixel: &Vector2<f64>,
    depth: f64,
) -> Result<Warped, GeometryError> {
    let landmark = unproject(k_src, pixel, depth)?;
    let in_dst = src_to_dst.transform(&landmark);
    if in_dst[2] <= MIN_DEPTH {
        return Ok(Warped::BehindCamera);
    }
    let p = Vector2::new(k_dst.fx * in_dst[0] / in_dst[2] + k_dst.cx, k_dst.fy * in_dst[1] / in_dst[2] + k_dst.cy);
    Ok(if k_dst.contains(&p) { Warped::InView(p) } else { Warped::OutOfFrame(p) })
}

/// Planar projective transform, stored normalized so `h[2][2] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Homography {
    h: Matrix3<f64>,
}

impl Homography {
    pub fn new(h: Matrix3<f64>) -> Result<Self, GeometryError> {
        if h.determinant().abs() <= 1e-12 {
            return Err(GeometryError::SingularHomography);
        }
        let scale = h[(2, 2)];
        if scale.abs() < MIN_HOMOGENEOUS_W {
            return Err(GeometryError::SingularHomography);
        }
        Ok(Homography { h: h / scale })
    }

    pub fn identity() -> Self {
        Homography { h: Matrix3::identity() }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography { h: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0) }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.h
    }

    pub fn inverse(&self) -> Result<Homography, GeometryError> {
        let inv = self.h.try_inverse().ok_or(GeometryError::SingularHomography)?;
        Homography::new(inv)
    }
}

/// Applies a homography with perspective division.
pub fn warp_homography(h: &Homography, p: &Vector2<f64>) -> Result<Vector2<f64>, GeometryError> {
    let q = h.h * Vector3::new(p[0], p[1], 1.0);
    if q[2].abs() < MIN_HOMOGENEOUS_W {
        return Err(GeometryError::DegenerateDivision(q[2]));
    }
    Ok(Vector2::new(q[0] / q[2], q[1] / q[2]))
}

/// Angular errors between two poses in degrees: geodesic rotation angle of
/// `R_est * R_gt^T` and the angle between translation directions.
///
/// When both translations are near zero the translation angle is 0; when
/// only one is, it is 180.
pub fn pose_angular_errors(t_est: &Pose, t_gt: &Pose) -> (f64, f64) {
    let r_rel = t_est.rotation * t_gt.rotation.transpose();
    let cos_r = ((r_rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let rot_deg = cos_r.acos().to_degrees();

    let n_est = t_est.translation.norm();
    let n_gt = t_gt.translation.norm();
    let trans_deg = if n_est <= 1e-9 && n_gt <= 1e-9 {
        0.0
    } else if n_est <= 1e-9 || n_gt <= 1e-9 {
        180.0
    } else {
        let cos_t = (t_est.translation.dot(&t_gt.translation) / (n_est * n_gt)).clamp(-1.0, 1.0);
        cos_t.acos().to_degrees()
    };
    (rot_deg, trans_deg)
}

/// Fits a homography from point correspondences by the normalized direct
/// linear transform. Requires at least 4 pairs.
pub fn dlt_homography(pairs: &[(Vector2<f64>, Vector2<f64>)]) -> Result<Homography, GeometryError> {
    if pairs.len() < 4 {
        return Err(GeometryError::DegenerateConfiguration);
    }
    let norm_a = hartley_normalization(pairs.iter().map(|p| p.0));
    let norm_b = hartley_normalization(pairs.iter().map(|p| p.1));

    // accumulate the 9x9 Gram matrix A^T A; its smallest eigenvector is the
    // homogeneous solution and works for any pair count
    let mut gram = DMatrix::<f64>::zeros(9, 9);
    for (pa, pb) in pairs {
        let (x, y) = apply_norm(&norm_a, pa);
        let (u, v) = apply_norm(&norm_b, pb);
        let rows = [
            [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u],
            [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v],
        ];
        for row in &rows {
            for i in 0..9 {
                for j in i..9 {
                    gram[(i, j)] += row[i] * row[j];
                }
            }
        }
    }
    for i in 0..9 {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }

    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    // a second near-zero eigenvalue means the sample does not determine H
    let scale_ref = eig.eigenvalues[order[8]].abs().max(1.0);
    if eig.eigenvalues[order[1]].abs() < 1e-13 * scale_ref {
        return Err(GeometryError::DegenerateConfiguration);
    }
    let hvec = eig.eigenvectors.column(order[0]);
    let hn = Matrix3::new(
        hvec[0], hvec[1], hvec[2],
        hvec[3], hvec[4], hvec[5],
        hvec[6], hvec[7], hvec[8],
    );
    let h = norm_b.try_inverse().ok_or(GeometryError::DegenerateConfiguration)? * hn * norm_a;
    Homography::new(h).map_err(|_| GeometryError::DegenerateConfiguration)
}

fn hartley_normalization(points: impl Iterator<Item = Vector2<f64>>) -> Matrix3<f64> {
    let pts: Vec<_> = points.collect();
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = pts.iter().map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_dist > 1e-12 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn apply_norm(norm: &Matrix3<f64>, p: &Vector2<f64>) -> (f64, f64) {
    let q = norm * Vector3::new(p[0], p[1], 1.0);
    (q[0], q[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, rot_scale: f64, trans_scale: f64) -> Pose {
        let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5).normalize();
        let angle = rng.gen::<f64>() * rot_scale;
        let t = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * trans_scale;
        Pose { rotation: so3_exp(&(axis * angle)), translation: t }
    }

    #[test]
    fn project_on_axis() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 10.0, 10.0);
        let p = project(&k, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(p[0], 0.0);
        assert_relative_eq!(p[1], 0.0);
    }

    #[test]
    fn project_pinhole_example() {
        let k = CameraIntrinsics::new(100.0, 100.0, 320.0, 240.0, 640.0, 480.0);
        let p = project(&k, &Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(p[0], 370.0, epsilon = 1e-12);
        assert_relative_eq!(p[1], 240.0, epsilon = 1e-12);
    }

    #[test]
    fn project_behind_camera_fails() {
        let k = CameraIntrinsics::new(100.0, 100.0, 320.0, 240.0, 640.0, 480.0);
        assert!(matches!(
            project(&k, &Vector3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn unproject_principal_point() {
        let k = CameraIntrinsics::new(100.0, 100.0, 320.0, 240.0, 640.0, 480.0);
        let l = unproject(&k, &Vector2::new(320.0, 240.0), 1.0).unwrap();
        assert_relative_eq!(l[0], 0.0);
        assert_relative_eq!(l[1], 0.0);
        assert_relative_eq!(l[2], 1.0);
    }

    #[test]
    fn unproject_inverse_of_projection_example() {
        let k = CameraIntrinsics::new(100.0, 100.0, 320.0, 240.0, 640.0, 480.0);
        let l = unproject(&k, &Vector2::new(370.0, 240.0), 2.0).unwrap();
        assert_relative_eq!(l[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(l[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(l[2], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn project_unproject_round_trip() {
        let k = CameraIntrinsics::new(111.0, 123.0, 321.5, 239.5, 640.0, 480.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let p = Vector2::new(rng.gen::<f64>() * 640.0, rng.gen::<f64>() * 480.0);
            let d = 0.5 + rng.gen::<f64>() * 10.0;
            let q = project(&k, &unproject(&k, &p, d).unwrap()).unwrap();
            assert_relative_eq!(q[0], p[0], epsilon = 1e-9);
            assert_relative_eq!(q[1], p[1], epsilon = 1e-9);
        }
    }

    #[test]
    fn warp_identity_is_identity() {
        let k = CameraIntrinsics::new(100.0, 100.0, 320.0, 240.0, 640.0, 480.0);
        let p = Vector2::new(100.0, 200.0);
        let w = warp_keypoint(&k, &k, &Pose::identity(), &p, 3.0).unwrap();
        let q = w.in_view().unwrap();
        assert_relative_eq!(q[0], p[0], epsilon = 1e-9);
        assert_relative_eq!(q[1], p[1], epsilon = 1e-9);
    }

    #[test]
    fn warp_axial_translation_fixes_principal_point() {
        let k = CameraIntrinsics::new(100.0, 100.0, 320.0, 240.0, 640.0, 480.0);
        let toward = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -0.5)).unwrap();
        let w = warp_keypoint(&k, &k, &toward, &Vector2::new(320.0, 240.0), 2.0).unwrap();
        let q = w.in_view().unwrap();
        assert_relative_eq!(q[0], 320.0, epsilon = 1e-9);
        assert_relative_eq!(q[1], 240.0, epsilon = 1e-9);
    }

    #[test]
    fn warp_round_trip_recovers_pixel() {
        let k = CameraIntrinsics::new(120.0, 120.0, 320.0, 240.0, 640.0, 480.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 100 {
            let t_ab = random_pose(&mut rng, 0.2, 0.2);
            let p = Vector2::new(80.0 + rng.gen::<f64>() * 480.0, 60.0 + rng.gen::<f64>() * 360.0);
            let d = 2.0 + rng.gen::<f64>() * 4.0;
            let landmark = unproject(&k, &p, d).unwrap();
            let in_b = t_ab.transform(&landmark);
            if in_b[2] <= 0.1 {
                continue;
            }
            let w = warp_keypoint(&k, &k, &t_ab, &p, d).unwrap();
            let Some(pb) = w.pixel() else { continue };
            let back = warp_keypoint(&k, &k, &t_ab.inverse(), &pb, in_b[2]).unwrap();
            let q = back.pixel().unwrap();
            assert_relative_eq!(q[0], p[0], epsilon = 1e-9);
            assert_relative_eq!(q[1], p[1], epsilon = 1e-9);
            checked += 1;
        }
    }

    #[test]
    fn homography_identity_and_translation() {
        let p = Vector2::new(10.0, 10.0);
        let q = warp_homography(&Homography::identity(), &p).unwrap();
        assert_relative_eq!(q[0], 10.0);
        let h = Homography::translation(5.0, -3.0);
        let q = warp_homography(&h, &p).unwrap();
        assert_relative_eq!(q[0], 15.0);
        assert_relative_eq!(q[1], 7.0);
    }

    #[test]
    fn homography_inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut m = Matrix3::identity();
            for i in 0..2 {
                for j in 0..3 {
                    m[(i, j)] += (rng.gen::<f64>() - 0.5) * 0.4;
                }
            }
            m[(2, 0)] = (rng.gen::<f64>() - 0.5) * 1e-3;
            m[(2, 1)] = (rng.gen::<f64>() - 0.5) * 1e-3;
            let h = Homography::new(m).unwrap();
            let hinv = h.inverse().unwrap();
            let p = Vector2::new(rng.gen::<f64>() * 640.0, rng.gen::<f64>() * 480.0);
            let q = warp_homography(&hinv, &warp_homography(&h, &p).unwrap()).unwrap();
            assert_relative_eq!(q[0], p[0], epsilon = 1e-9);
            assert_relative_eq!(q[1], p[1], epsilon = 1e-9);
        }
    }

    #[test]
    fn pose_errors_basic() {
        let t = Pose::identity();
        let (r, tr) = pose_angular_errors(&t, &t);
        assert_relative_eq!(r, 0.0);
        assert_relative_eq!(tr, 0.0);

        let rot10 = so3_exp(&Vector3::new(0.0, 0.0, 10f64.to_radians()));
        let a = Pose::new(rot10, Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let b = Pose::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let (r, tr) = pose_angular_errors(&a, &b);
        assert_relative_eq!(r, 10.0, epsilon = 1e-9);
        assert_relative_eq!(tr, 0.0, epsilon = 1e-9);

        let c = Pose::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let d = Pose::new(Matrix3::identity(), Vector3::new(0.0, 1.0, 0.0)).unwrap();
        let (r, tr) = pose_angular_errors(&c, &d);
        assert_relative_eq!(r, 0.0, epsilon = 1e-9);
        assert_relative_eq!(tr, 90.0, epsilon = 1e-9);
    }

    #[test]
    fn pose_errors_rotation_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let a = random_pose(&mut rng, 1.0, 1.0);
            let b = random_pose(&mut rng, 1.0, 1.0);
            let (r1, _) = pose_angular_errors(&a, &b);
            let (r2, _) = pose_angular_errors(&b, &a);
            assert_relative_eq!(r1, r2, epsilon = 1e-9);
        }
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = random_pose(&mut rng, 2.0, 3.0);
            let id = p.compose(&p.inverse());
            assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-9);
            assert!(id.translation.norm() < 1e-9);
        }
    }

    #[test]
    fn se3_exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let xi = [
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                (rng.gen::<f64>() - 0.5) * 2.0,
                (rng.gen::<f64>() - 0.5) * 2.0,
                (rng.gen::<f64>() - 0.5) * 2.0,
            ];
            let p = Pose::exp(&xi);
            let xi2 = p.log();
            for (a, b) in xi.iter().zip(xi2.iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn dlt_recovers_homography_from_four_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..25 {
            let mut m = Matrix3::identity();
            for i in 0..2 {
                for j in 0..3 {
                    m[(i, j)] += (rng.gen::<f64>() - 0.5) * 0.3;
                }
            }
            m[(2, 0)] = (rng.gen::<f64>() - 0.5) * 1e-3;
            m[(2, 1)] = (rng.gen::<f64>() - 0.5) * 1e-3;
            let h = Homography::new(m).unwrap();
            let pts = [
                Vector2::new(10.0, 20.0),
                Vector2::new(600.0, 40.0),
                Vector2::new(520.0, 460.0),
                Vector2::new(30.0, 410.0),
            ];
            let pairs: Vec<_> = pts.iter().map(|p| (*p, warp_homography(&h, p).unwrap())).collect();
            let fit = dlt_homography(&pairs).unwrap();
            let diff = (fit.matrix() - h.matrix()).abs().max();
            assert!(diff < 1e-6, "H mismatch {diff}");
        }
    }

    #[test]
    fn dlt_rejects_collinear_points() {
        let pts: Vec<_> = (0..4)
            .map(|i| {
                let p = Vector2::new(i as f64 * 10.0, i as f64 * 5.0);
                (p, p)
            })
            .collect();
        assert!(dlt_homography(&pts).is_err());
    }
}
