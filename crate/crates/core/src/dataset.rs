//! In-memory form of a recorded or simulated sequence.

use nalgebra::{Quaternion, Translation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::geometry::{Pose, StampedPoint, Vec3};
use crate::preprocess::{ImuSample, NavState, RawScan};
use crate::scc::FinalLabel;

/// One lidar return in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramePoint {
    pub position: Vec3,
    /// Seconds after the frame time.
    pub t_offset: f64,
    pub ring: u16,
    /// `None` when the point carries no ground truth.
    pub truth: Option<FinalLabel>,
    pub mover_id: Option<u16>,
}

impl FramePoint {
    /// Rounds every field to the precision of the on-disk record so that a
    /// write/read cycle is lossless.
    pub fn quantized(self) -> Self {
        Self {
            position: self.position.map(|v| v as f32 as f64),
            t_offset: self.t_offset as f32 as f64,
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    /// Scan start, seconds.
    pub frame_time: f64,
    pub points: Vec<FramePoint>,
}

impl FrameRecord {
    pub fn to_raw_scan(&self, scan_period: f64) -> RawScan {
        RawScan {
            scan_start: self.frame_time,
            scan_end: self.frame_time + scan_period,
            points: self
                .points
                .iter()
                .map(|p| StampedPoint::new(p.position, self.frame_time + p.t_offset))
                .collect(),
        }
    }
}

/// Pose serialized as translation plus quaternion `[x, y, z, qx, qy, qz, qw]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 7]", into = "[f64; 7]")]
pub struct PoseRecord(pub Pose);

impl From<[f64; 7]> for PoseRecord {
    fn from(a: [f64; 7]) -> Self {
        let raw = Quaternion::new(a[6], a[3], a[4], a[5]);
        // Already-unit input is kept bit for bit so records round-trip.
        let q = if (raw.norm_squared() - 1.0).abs() < 1e-12 {
            UnitQuaternion::new_unchecked(raw)
        } else {
            UnitQuaternion::from_quaternion(raw)
        };
        PoseRecord(Pose::from_parts(Translation3::new(a[0], a[1], a[2]), q))
    }
}

impl From<PoseRecord> for [f64; 7] {
    fn from(p: PoseRecord) -> Self {
        let t = p.0.translation.vector;
        let q = p.0.rotation;
        [t.x, t.y, t.z, q.i, q.j, q.k, q.w]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub time: f64,
    pub pose: PoseRecord,
    pub velocity: [f64; 3],
}

impl InitialState {
    pub fn nav_state(&self) -> NavState {
        NavState { velocity: Vec3::from(self.velocity), ..NavState::at_rest(self.pose.0, self.time) }
    }
}

/// Sequence-level metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub scan_period: f64,
    pub gravity: [f64; 3],
    pub lidar_to_body: PoseRecord,
    pub initial_state: InitialState,
    /// Free-form provenance such as the preset name and seed.
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub frames: Vec<FrameRecord>,
    pub imu: Vec<ImuSample>,
    /// Ground-truth body poses, typically at every scan end.
    pub ground_truth: Vec<(f64, Pose)>,
}
