//! IMU propagation, scan undistortion and voxel downsampling.

use nalgebra::{Matrix3, Translation3};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{transform_point, Pose, StampedPoint, Vec3};
use crate::so3::{self, skew};
use crate::voxel_map::VoxelKey;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("IMU coverage gap of {gap:.4} s around t = {at:.4} exceeds {max:.4} s")]
    ImuGap { at: f64, gap: f64, max: f64 },
    #[error("no IMU samples to propagate over [{from}, {until}]")]
    NoImu { from: f64, until: f64 },
    #[error("propagation target {until} precedes state time {from}")]
    Backwards { from: f64, until: f64 },
    #[error("point time {time} outside trajectory span [{start}, {end}]")]
    OutsideTrajectory { time: f64, start: f64, end: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub time: f64,
    /// rad/s, body frame.
    pub angular_velocity: Vec3,
    /// Specific force, m/s^2, body frame.
    pub linear_acceleration: Vec3,
}

/// World-from-body pose, world velocity, and IMU biases at `time`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub pose: Pose,
    pub velocity: Vec3,
    pub gyro_bias: Vec3,
    pub accel_bias: Vec3,
    pub time: f64,
}

impl NavState {
    pub fn at_rest(pose: Pose, time: f64) -> Self {
        Self { pose, velocity: Vec3::zeros(), gyro_bias: Vec3::zeros(), accel_bias: Vec3::zeros(), time }
    }

    pub fn position(&self) -> Vec3 {
        self.pose.translation.vector
    }
}

/// One sweep in the sensor frame, points in acquisition order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScan {
    pub scan_start: f64,
    pub scan_end: f64,
    pub points: Vec<StampedPoint>,
}

pub const DEFAULT_GRAVITY: Vec3 = Vec3::new(0.0, 0.0, -9.81);

/// `(int_0^tau Exp(w s) ds, int_0^tau int_0^s Exp(w u) du ds)`.
fn rotation_integrals(w: &Vec3, tau: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let wn = w.norm();
    let k = skew(w);
    let k2 = k * k;
    let i = Matrix3::identity();
    let th = wn * tau;
    if th < 1e-4 {
        let t2 = tau * tau;
        let t3 = t2 * tau;
        let t4 = t3 * tau;
        let first = i * tau + k * (t2 / 2.0) + k2 * (t3 / 6.0);
        let second = i * (t2 / 2.0) + k * (t3 / 6.0) + k2 * (t4 / 24.0);
        return (first, second);
    }
    let w2 = wn * wn;
    let w3 = w2 * wn;
    let w4 = w3 * wn;
    let first = i * tau + k * ((1.0 - th.cos()) / w2) + k2 * ((th - th.sin()) / w3);
    let second = i * (tau * tau / 2.0) + k * ((th - th.sin()) / w3) + k2 * ((th * th / 2.0 + th.cos() - 1.0) / w4);
    (first, second)
}

/// Advances `state` by `dt` under constant body rate `w` and body specific
/// force `f` (both bias corrected), integrating the kinematics exactly.
fn step(state: &NavState, w: &Vec3, f: &Vec3, gravity: &Vec3, dt: f64) -> NavState {
    if dt <= 0.0 {
        return *state;
    }
    let r0 = state.pose.rotation;
    let (int1, int2) = rotation_integrals(w, dt);
    let r0m = r0.to_rotation_matrix();
    let dv = r0m * (int1 * f) + gravity * dt;
    let dp = state.velocity * dt + r0m * (int2 * f) + gravity * (0.5 * dt * dt);
    let rotation = r0 * so3::exp(&(w * dt));
    let translation = state.pose.translation.vector + dp;
    NavState {
        pose: Pose::from_parts(Translation3::from(translation), rotation),
        velocity: state.velocity + dv,
        time: state.time + dt,
        ..*state
    }
}

/// Propagates `state` to `until` with the IMU stream.
///
/// Between consecutive samples the bias-corrected rate and specific force are
/// held at the mean of the two endpoint samples; outside the sample range the
/// nearest sample is held. Each constant piece is integrated in closed form,
/// so splitting the propagation at any time gives the same result.
pub fn propagate(
    state: &NavState,
    imu: &[ImuSample],
    until: f64,
    gravity: &Vec3,
    max_imu_gap: f64,
) -> Result<(NavState, Vec<NavState>), PreprocessError> {
    let from = state.time;
    if until < from {
        return Err(PreprocessError::Backwards { from, until });
    }
    if imu.is_empty() {
        return Err(PreprocessError::NoImu { from, until });
    }
    // Samples strictly inside (from, until).
    let first_inside = imu.partition_point(|s| s.time <= from);
    let end_inside = imu.partition_point(|s| s.time < until).max(first_inside);
    let nearest_gap = |t: f64| {
        let k = imu.partition_point(|s| s.time < t);
        let after = imu.get(k).map(|s| s.time - t).unwrap_or(f64::INFINITY);
        let before = k.checked_sub(1).map(|i| t - imu[i].time).unwrap_or(f64::INFINITY);
        after.min(before)
    };
    for t in [from, until] {
        let gap = nearest_gap(t);
        if gap > max_imu_gap + 1e-12 {
            return Err(PreprocessError::ImuGap { at: t, gap, max: max_imu_gap });
        }
    }
    let mut prev = from;
    for t in imu[first_inside..end_inside].iter().map(|s| s.time).chain(std::iter::once(until)) {
        if t - prev > max_imu_gap + 1e-12 {
            return Err(PreprocessError::ImuGap { at: prev, gap: t - prev, max: max_imu_gap });
        }
        prev = t;
    }

    // Rate/force held over the piece that contains time t (t in [s_k, s_{k+1})).
    let held = |t: f64| -> (Vec3, Vec3) {
        let k = imu.partition_point(|s| s.time <= t);
        let (w, f) = if k == 0 {
            (imu[0].angular_velocity, imu[0].linear_acceleration)
        } else if k == imu.len() {
            (imu[k - 1].angular_velocity, imu[k - 1].linear_acceleration)
        } else {
            (
                0.5 * (imu[k - 1].angular_velocity + imu[k].angular_velocity),
                0.5 * (imu[k - 1].linear_acceleration + imu[k].linear_acceleration),
            )
        };
        (w - state.gyro_bias, f - state.accel_bias)
    };

    let mut traj = Vec::with_capacity(end_inside.saturating_sub(first_inside) + 2);
    traj.push(*state);
    let mut cur = *state;
    let mut t = from;
    for s in &imu[first_inside..end_inside] {
        let (w, f) = held(t);
        cur = step(&cur, &w, &f, gravity, s.time - t);
        cur.time = s.time;
        traj.push(cur);
        t = s.time;
    }
    if until > t {
        let (w, f) = held(t);
        cur = step(&cur, &w, &f, gravity, until - t);
        cur.time = until;
        traj.push(cur);
    }
    Ok((cur, traj))
}

/// Pose at `time` interpolated from a time-ordered trajectory.
pub fn interpolate_pose(trajectory: &[NavState], time: f64) -> Result<Pose, PreprocessError> {
    let (start, end) = match (trajectory.first(), trajectory.last()) {
        (Some(a), Some(b)) => (a.time, b.time),
        _ => return Err(PreprocessError::OutsideTrajectory { time, start: f64::NAN, end: f64::NAN }),
    };
    const TOL: f64 = 1e-9;
    if time < start - TOL || time > end + TOL {
        return Err(PreprocessError::OutsideTrajectory { time, start, end });
    }
    let k = trajectory.partition_point(|s| s.time <= time);
    if k == 0 {
        return Ok(trajectory[0].pose);
    }
    if k == trajectory.len() {
        return Ok(trajectory[k - 1].pose);
    }
    let (a, b) = (&trajectory[k - 1], &trajectory[k]);
    let span = b.time - a.time;
    let s = if span > 0.0 { (time - a.time) / span } else { 0.0 };
    Ok(so3::interpolate(&a.pose, &b.pose, s))
}

/// Maps every point to the world frame with the pose at its own timestamp.
/// `lidar_to_body` maps sensor-frame coordinates into the body frame.
pub fn undistort(
    scan: &RawScan,
    trajectory: &[NavState],
    lidar_to_body: &Pose,
) -> Result<Vec<StampedPoint>, PreprocessError> {
    let mut out = Vec::with_capacity(scan.points.len());
    // Points are time ordered; cache the last bracket.
    let mut cached: Option<(f64, Pose)> = None;
    for p in &scan.points {
        let pose = match cached {
            Some((t, pose)) if t == p.time => pose,
            _ => {
                let pose = interpolate_pose(trajectory, p.time)? * lidar_to_body;
                cached = Some((p.time, pose));
                pose
            }
        };
        out.push(StampedPoint::new(transform_point(&pose, &p.position), p.time));
    }
    Ok(out)
}

/// Re-expresses world points in the frame of `pose` (world-from-body).
pub fn to_body_frame(points: &[StampedPoint], pose: &Pose) -> Vec<StampedPoint> {
    let inv = pose.inverse();
    points.iter().map(|p| p.transformed(&inv)).collect()
}

/// Indices of the representatives chosen by [`voxel_downsample`], in order
/// of each voxel's first occurrence.
pub fn voxel_downsample_indices(points: &[StampedPoint], cell: f64) -> Vec<usize> {
    assert!(cell > 0.0, "voxel size must be positive");
    let mut slots: FxHashMap<VoxelKey, usize> = FxHashMap::default();
    let mut sums: Vec<(Vec3, usize)> = Vec::new();
    let mut slot_of = Vec::with_capacity(points.len());
    for p in points {
        let key = VoxelKey::of(&p.position, cell);
        let slot = *slots.entry(key).or_insert_with(|| {
            sums.push((Vec3::zeros(), 0));
            sums.len() - 1
        });
        sums[slot].0 += p.position;
        sums[slot].1 += 1;
        slot_of.push(slot);
    }
    let centroids: Vec<Vec3> = sums.iter().map(|(s, n)| s / *n as f64).collect();
    let mut best: Vec<(f64, usize)> = vec![(f64::INFINITY, usize::MAX); sums.len()];
    for (i, (p, &slot)) in points.iter().zip(&slot_of).enumerate() {
        let d = (p.position - centroids[slot]).norm_squared();
        if d < best[slot].0 {
            best[slot] = (d, i);
        }
    }
    best.into_iter().map(|(_, i)| i).collect()
}

/// One measured point per occupied voxel: the one closest to the voxel
/// centroid. Timestamps are kept as measured.
pub fn voxel_downsample(points: &[StampedPoint], cell: f64) -> Vec<StampedPoint> {
    voxel_downsample_indices(points, cell).into_iter().map(|i| points[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn imu_stream(t0: f64, t1: f64, rate: f64, w: Vec3, f: Vec3) -> Vec<ImuSample> {
        let n = ((t1 - t0) * rate).round() as usize;
        (0..=n)
            .map(|i| ImuSample { time: t0 + i as f64 / rate, angular_velocity: w, linear_acceleration: f })
            .collect()
    }

    #[test]
    fn stationary_level_imu_is_a_fixed_point() {
        let s = NavState::at_rest(Pose::identity(), 0.0);
        let imu = imu_stream(0.0, 3.0, 200.0, Vec3::zeros(), -DEFAULT_GRAVITY);
        let (prior, traj) = propagate(&s, &imu, 3.0, &DEFAULT_GRAVITY, 0.05).unwrap();
        assert!(prior.position().norm() < 1e-9);
        assert!(prior.velocity.norm() < 1e-9);
        assert!(prior.pose.rotation.angle() < 1e-12);
        assert_eq!(traj.len(), 601);
    }

    #[test]
    fn constant_yaw_rate() {
        let s = NavState::at_rest(Pose::identity(), 0.0);
        let imu = imu_stream(0.0, 1.0, 100.0, Vec3::z(), -DEFAULT_GRAVITY);
        let (prior, _) = propagate(&s, &imu, 1.0, &DEFAULT_GRAVITY, 0.05).unwrap();
        let (_, _, yaw) = prior.pose.rotation.euler_angles();
        assert!((yaw - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_acceleration_from_rest() {
        let s = NavState::at_rest(Pose::identity(), 0.0);
        let imu = imu_stream(0.0, 2.0, 200.0, Vec3::zeros(), Vec3::new(1.0, 0.0, 9.81));
        let (prior, _) = propagate(&s, &imu, 2.0, &DEFAULT_GRAVITY, 0.05).unwrap();
        assert!((prior.velocity - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-3);
        assert!((prior.position() - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-3);
    }

    #[test]
    fn gap_is_reported() {
        let s = NavState::at_rest(Pose::identity(), 0.0);
        let mut imu = imu_stream(0.0, 1.0, 100.0, Vec3::zeros(), -DEFAULT_GRAVITY);
        imu.retain(|x| !(0.3..0.45).contains(&x.time));
        assert!(matches!(
            propagate(&s, &imu, 1.0, &DEFAULT_GRAVITY, 0.05),
            Err(PreprocessError::ImuGap { .. })
        ));
        let late = imu_stream(0.2, 1.0, 100.0, Vec3::zeros(), -DEFAULT_GRAVITY);
        assert!(propagate(&s, &late, 1.0, &DEFAULT_GRAVITY, 0.05).is_err());
    }

    #[test]
    fn split_propagation_matches_single_leg() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let imu: Vec<ImuSample> = (0..=200)
            .map(|i| ImuSample {
                time: i as f64 * 0.005,
                angular_velocity: Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                linear_acceleration: Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 9.81 + rng.random_range(-2.0..2.0)),
            })
            .collect();
        let mut s = NavState::at_rest(Pose::identity(), 0.0);
        s.velocity = Vec3::new(0.3, -0.2, 0.1);
        s.gyro_bias = Vec3::new(0.01, 0.0, -0.02);
        s.accel_bias = Vec3::new(0.05, 0.1, 0.0);
        let (one, _) = propagate(&s, &imu, 0.9, &DEFAULT_GRAVITY, 0.05).unwrap();
        for split in [0.0123, 0.5, 0.4999, 0.7321] {
            let (mid, _) = propagate(&s, &imu, split, &DEFAULT_GRAVITY, 0.05).unwrap();
            let (two, _) = propagate(&mid, &imu, 0.9, &DEFAULT_GRAVITY, 0.05).unwrap();
            assert!((one.position() - two.position()).norm() < 1e-9);
            assert!((one.velocity - two.velocity).norm() < 1e-9);
            assert!(one.pose.rotation.angle_to(&two.pose.rotation) < 1e-9);
        }
    }

    fn constant_velocity_traj(v: Vec3, w: Vec3, t0: f64, t1: f64) -> Vec<NavState> {
        (0..=10)
            .map(|i| {
                let t = t0 + (t1 - t0) * i as f64 / 10.0;
                let pose = Pose::from_parts(Translation3::from(v * t), UnitQuaternion::from_scaled_axis(w * t));
                NavState { pose, velocity: v, ..NavState::at_rest(Pose::identity(), t) }
            })
            .collect()
    }

    #[test]
    fn undistort_zero_motion_is_rigid() {
        let pose = Pose::from_parts(Translation3::new(1.0, 2.0, 3.0), UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3));
        let traj: Vec<NavState> = (0..3).map(|i| NavState::at_rest(pose, i as f64 * 0.05)).collect();
        let scan = RawScan {
            scan_start: 0.0,
            scan_end: 0.1,
            points: (0..10).map(|i| StampedPoint::new(Vec3::new(i as f64, 1.0, -1.0), i as f64 * 0.01)).collect(),
        };
        let out = undistort(&scan, &traj, &Pose::identity()).unwrap();
        for (o, p) in out.iter().zip(&scan.points) {
            assert_eq!(o.position, transform_point(&pose, &p.position));
            assert_eq!(o.time, p.time);
        }
    }

    #[test]
    fn undistort_constant_translation() {
        let traj = constant_velocity_traj(Vec3::x(), Vec3::zeros(), 0.0, 0.1);
        let p = StampedPoint::new(Vec3::new(5.0, 0.0, 0.0), 0.05);
        let scan = RawScan { scan_start: 0.0, scan_end: 0.1, points: vec![p] };
        let out = undistort(&scan, &traj, &Pose::identity()).unwrap();
        let naive = transform_point(&traj.last().unwrap().pose, &p.position);
        assert!((naive - out[0].position - Vec3::new(0.05, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn undistort_constant_rotation() {
        let traj = constant_velocity_traj(Vec3::zeros(), Vec3::z(), 0.0, 0.1);
        let p = StampedPoint::new(Vec3::new(5.0, 0.0, 0.0), 0.0);
        let scan = RawScan { scan_start: 0.0, scan_end: 0.1, points: vec![p] };
        let world = undistort(&scan, &traj, &Pose::identity()).unwrap();
        let in_end = to_body_frame(&world, &traj.last().unwrap().pose);
        let expect = UnitQuaternion::from_scaled_axis(Vec3::z() * -0.1) * p.position;
        assert!((in_end[0].position - expect).norm() < 1e-6);
    }

    #[test]
    fn undistort_rejects_points_outside_span() {
        let traj = constant_velocity_traj(Vec3::x(), Vec3::zeros(), 0.0, 0.1);
        let scan = RawScan { scan_start: 0.0, scan_end: 0.2, points: vec![StampedPoint::new(Vec3::x(), 0.15)] };
        assert!(matches!(
            undistort(&scan, &traj, &Pose::identity()),
            Err(PreprocessError::OutsideTrajectory { .. })
        ));
    }

    #[test]
    fn downsample_single_voxel() {
        let pts: Vec<_> = (0..20).map(|i| StampedPoint::new(Vec3::repeat(0.01 * i as f64), i as f64)).collect();
        assert_eq!(voxel_downsample(&pts, 1.0).len(), 1);
    }

    #[test]
    fn downsample_coarse_grid_is_identity() {
        let pts: Vec<_> = (0..5)
            .flat_map(|x| (0..5).map(move |y| StampedPoint::new(Vec3::new(x as f64 + 0.5, y as f64 + 0.5, 0.5), 0.0)))
            .collect();
        assert_eq!(voxel_downsample(&pts, 0.5), pts);
    }

    #[test]
    fn downsample_matches_occupancy_and_keeps_times() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<_> = (0..5000)
            .map(|i| {
                StampedPoint::new(
                    Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)),
                    i as f64 * 1e-4,
                )
            })
            .collect();
        let out = voxel_downsample(&pts, 0.25);
        let occupied: HashSet<VoxelKey> = pts.iter().map(|p| VoxelKey::of(&p.position, 0.25)).collect();
        assert_eq!(out.len(), occupied.len());
        let times: HashSet<u64> = pts.iter().map(|p| p.time.to_bits()).collect();
        assert!(out.iter().all(|p| times.contains(&p.time.to_bits())));
    }
}
