//! Strapdown IMU integration into a relative motion prior.

use crate::geometry::{so3_exp, Pose};
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImuError {
    #[error("no IMU measurements cover the requested interval")]
    EmptyMeasurements,
    #[error("IMU timestamps are not strictly increasing at sample {0}")]
    NonMonotonicTimestamps(usize),
    #[error("integration interval is empty: t_end {t_end} <= t_start {t_start}")]
    EmptyInterval { t_start: f64, t_end: f64 },
}

/// One gyroscope + accelerometer measurement in the body frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    pub omega: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// Integration state: world-from-body orientation plus world-frame
/// velocity and position.
#[derive(Clone, Debug)]
pub struct ImuState {
    pub orientation: Matrix3<f64>,
    pub velocity: Vector3<f64>,
    pub position: Vector3<f64>,
}

impl ImuState {
    pub fn initial(velocity: Vector3<f64>) -> Self {
        ImuState { orientation: Matrix3::identity(), velocity, position: Vector3::zeros() }
    }
}

fn check_monotonic(samples: &[ImuSample]) -> Result<(), ImuError> {
    for (i, w) in samples.windows(2).enumerate() {
        if w[1].timestamp <= w[0].timestamp {
            return Err(ImuError::NonMonotonicTimestamps(i + 1));
        }
    }
    Ok(())
}

fn interpolate(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
    let w = (t - a.timestamp) / (b.timestamp - a.timestamp);
    ImuSample {
        timestamp: t,
        omega: a.omega + (b.omega - a.omega) * w,
        accel: a.accel + (b.accel - a.accel) * w,
    }
}

/// Midpoint strapdown step from sample `s0` to `s1`.
fn integrate_step(state: &mut ImuState, s0: &ImuSample, s1: &ImuSample, gravity: &Vector3<f64>) {
    let dt = s1.timestamp - s0.timestamp;
    if dt <= 0.0 {
        return;
    }
    let omega_mid = (s0.omega + s1.omega) * 0.5;
    let accel_mid = (s0.accel + s1.accel) * 0.5;
    let r_half = state.orientation * so3_exp(&(omega_mid * (dt * 0.5)));
    let acc_world = r_half * accel_mid - gravity;
    state.position += state.velocity * dt + acc_world * (0.5 * dt * dt);
    state.velocity += acc_world * dt;
    state.orientation *= so3_exp(&(omega_mid * dt));
}

/// Integrates measurements over `[t_start, t_end]` (clamped to the sample
/// range) and returns the full end state. World frame = body frame at
/// `t_start`; velocity update is `v += (R a - g) dt`.
pub fn integrate_imu_state(
    samples: &[ImuSample],
    initial_velocity: Vector3<f64>,
    gravity: Vector3<f64>,
    t_start: f64,
    t_end: f64,
) -> Result<ImuState, ImuError> {
    if samples.is_empty() {
        return Err(ImuError::EmptyMeasurements);
    }
    check_monotonic(samples)?;
    if t_end <= t_start {
        return Err(ImuError::EmptyInterval { t_start, t_end });
    }
    let t0 = t_start.max(samples[0].timestamp);
    let t1 = t_end.min(samples[samples.len() - 1].timestamp);
    if t1 <= t0 {
        return Err(ImuError::EmptyMeasurements);
    }

    // clip the sample timeline to [t0, t1], interpolating the endpoints
    let mut timeline: Vec<ImuSample> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.timestamp < t0 {
            continue;
        }
        if timeline.is_empty() && s.timestamp > t0 && i > 0 {
            timeline.push(interpolate(&samples[i - 1], s, t0));
        }
        if s.timestamp > t1 {
            if let Some(prev) = timeline.last().copied() {
                if prev.timestamp < t1 {
                    timeline.push(interpolate(&prev, s, t1));
                }
            }
            break;
        }
        timeline.push(*s);
    }
    if timeline.len() < 2 {
        return Err(ImuError::EmptyMeasurements);
    }

    let mut state = ImuState::initial(initial_velocity);
    for w in timeline.windows(2) {
        integrate_step(&mut state, &w[0], &w[1], &gravity);
    }
    Ok(state)
}

/// Integrates measurements into the relative pose of the end frame
/// expressed in the start frame.
///
/// To warp start-frame pixels into the end frame, use the inverse of the
/// returned pose.
pub fn integrate_imu(
    samples: &[ImuSample],
    initial_velocity: Vector3<f64>,
    gravity: Vector3<f64>,
    t_start: f64,
    t_end: f64,
) -> Result<Pose, ImuError> {
    let state = integrate_imu_state(samples, initial_velocity, gravity, t_start, t_end)?;
    Ok(Pose::new(state.orientation, state.position).expect("integrated rotation stays orthonormal"))
}

/// Constant-velocity motion prior: scales the previous relative twist by
/// `dt_cur / dt_prev` on SE(3).
pub fn constant_velocity_prior(t_prev: &Pose, dt_prev: f64, dt_cur: f64) -> Pose {
    assert!(dt_prev > 0.0, "previous interval must be positive");
    let xi = t_prev.log();
    let s = dt_cur / dt_prev;
    let scaled = [xi[0] * s, xi[1] * s, xi[2] * s, xi[3] * s, xi[4] * s, xi[5] * s];
    Pose::exp(&scaled)
}
