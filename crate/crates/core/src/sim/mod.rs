//! Deterministic synthetic lidar-inertial sequences with ground truth.
//!
//! A spinning multi-ring lidar is ray cast against static primitives and
//! constant-velocity boxes while the ego follows an analytic trajectory.
//! Every column of a sweep is fired from the ego pose at its own timestamp,
//! so scans carry real motion distortion.

pub mod ego;
pub mod scene;

use nalgebra::UnitQuaternion;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetInfo, FramePoint, FrameRecord, InitialState, PoseRecord};
use crate::geometry::{Pose, Vec3};
use crate::preprocess::{ImuSample, DEFAULT_GRAVITY};
use crate::scc::FinalLabel;

pub use ego::{EgoSpec, EgoState, EgoTrajectory, Segment};
pub use scene::{raycast, Hit, Mover, Primitive, SceneAt, SceneSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarModel {
    pub n_rings: u16,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    pub horizontal_res_deg: f64,
    pub scan_period: f64,
    pub max_range: f64,
    pub min_range: f64,
    /// Range noise standard deviation, m.
    pub range_noise: f64,
    /// Sensor pose in the body frame.
    pub lidar_to_body: PoseRecord,
}

impl Default for LidarModel {
    fn default() -> Self {
        Self {
            n_rings: 32,
            fov_up_deg: 15.0,
            fov_down_deg: -25.0,
            horizontal_res_deg: 0.576,
            scan_period: 0.1,
            max_range: 60.0,
            min_range: 0.5,
            range_noise: 0.01,
            lidar_to_body: PoseRecord(Pose::identity()),
        }
    }
}

impl LidarModel {
    pub fn columns(&self) -> usize {
        (360.0 / self.horizontal_res_deg).round() as usize
    }

    pub fn ring_elevations(&self) -> Vec<f64> {
        let n = self.n_rings as usize;
        (0..n)
            .map(|i| {
                let s = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
                (self.fov_down_deg + (self.fov_up_deg - self.fov_down_deg) * s).to_radians()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_rings == 0 || !(self.fov_up_deg > self.fov_down_deg) {
            return Err("lidar needs at least one ring and a positive vertical field of view".into());
        }
        if !(self.horizontal_res_deg > 0.0 && self.scan_period > 0.0) {
            return Err("lidar resolution and scan period must be positive".into());
        }
        if !(self.max_range > self.min_range && self.min_range >= 0.0) {
            return Err("lidar range limits are inconsistent".into());
        }
        if !(self.range_noise >= 0.0) {
            return Err("lidar range noise must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImuModel {
    pub rate: f64,
    /// Per-sample standard deviation, rad/s.
    pub gyro_noise: f64,
    /// Per-sample standard deviation, m/s^2.
    pub accel_noise: f64,
    pub gyro_bias: [f64; 3],
    pub accel_bias: [f64; 3],
}

impl Default for ImuModel {
    fn default() -> Self {
        Self {
            rate: 200.0,
            gyro_noise: 0.002,
            accel_noise: 0.02,
            gyro_bias: [0.001, -0.0015, 0.002],
            accel_bias: [0.02, -0.015, 0.01],
        }
    }
}

/// Everything needed to generate a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration: f64,
    #[serde(default)]
    pub lidar: LidarModel,
    #[serde(default)]
    pub imu: ImuModel,
    pub ego: EgoSpec,
    pub scene: SceneSpec,
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.duration > 0.0) {
            return Err("duration must be positive".into());
        }
        if !(self.imu.rate > 0.0 && self.imu.gyro_noise >= 0.0 && self.imu.accel_noise >= 0.0) {
            return Err("imu rate must be positive and noises non-negative".into());
        }
        self.lidar.validate()?;
        self.ego.validate()?;
        self.scene.validate()
    }

    pub fn frame_count(&self) -> usize {
        (self.duration / self.lidar.scan_period).round() as usize
    }

    pub fn without_movers(mut self) -> Self {
        self.scene.movers.clear();
        self
    }

    pub fn noiseless(mut self) -> Self {
        self.lidar.range_noise = 0.0;
        self.imu.gyro_noise = 0.0;
        self.imu.accel_noise = 0.0;
        self.imu.gyro_bias = [0.0; 3];
        self.imu.accel_bias = [0.0; 3];
        self
    }
}

const PRESETS: [(&str, &str); 3] = [
    ("rich", include_str!("../../presets/rich.toml")),
    ("degenerate-corridor", include_str!("../../presets/degenerate-corridor.toml")),
    ("mover-dominated", include_str!("../../presets/mover-dominated.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn preset_source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn preset(name: &str) -> Result<SimConfig, String> {
    let src = preset_source(name)
        .ok_or_else(|| format!("unknown preset `{name}` (available: {})", preset_names().join(", ")))?;
    SimConfig::from_toml(src).map_err(|e| format!("preset `{name}`: {e}"))
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("finite non-negative sigma")
}

/// Casts one sweep starting at `frame_time`.
pub fn simulate_frame(
    config: &SimConfig,
    ego: &EgoTrajectory,
    frame_time: f64,
    rng: &mut ChaCha8Rng,
) -> FrameRecord {
    let lidar = &config.lidar;
    let cols = lidar.columns();
    let elevations = lidar.ring_elevations();
    let noise = normal(lidar.range_noise);
    let mut points = Vec::with_capacity(cols * elevations.len());
    for c in 0..cols {
        let frac = c as f64 / cols as f64;
        let t_offset = frac * lidar.scan_period;
        let t = frame_time + t_offset;
        let sensor = ego.pose(t) * lidar.lidar_to_body.0;
        let scene = SceneAt::new(&config.scene, t);
        let az = 2.0 * std::f64::consts::PI * frac;
        for (ring, el) in elevations.iter().enumerate() {
            let dir = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let world_dir = sensor.rotation * dir;
            let Some(hit) = scene.raycast(&sensor.translation.vector, &world_dir, lidar.max_range) else {
                continue;
            };
            let range = hit.range + noise.sample(rng);
            if range < lidar.min_range || range > lidar.max_range {
                continue;
            }
            points.push(
                FramePoint {
                    position: dir * range,
                    t_offset,
                    ring: ring as u16,
                    truth: Some(if hit.mover.is_some() { FinalLabel::Dynamic } else { FinalLabel::Static }),
                    mover_id: hit.mover,
                }
                .quantized(),
            );
        }
    }
    FrameRecord { frame_time, points }
}

/// IMU samples from the analytic trajectory plus constant biases and white
/// noise, at `k / rate` for every `k` up to `until`.
pub fn synthesize_imu(imu: &ImuModel, ego: &EgoTrajectory, until: f64, rng: &mut ChaCha8Rng) -> Vec<ImuSample> {
    let n = (until * imu.rate).ceil() as usize;
    let (gn, an) = (normal(imu.gyro_noise), normal(imu.accel_noise));
    (0..=n)
        .map(|k| {
            let t = k as f64 / imu.rate;
            let s = ego.state(t);
            let specific = s.pose.rotation.inverse() * (s.acceleration - DEFAULT_GRAVITY);
            let mut w = s.angular_velocity + Vec3::from(imu.gyro_bias);
            let mut f = specific + Vec3::from(imu.accel_bias);
            for i in 0..3 {
                w[i] += gn.sample(rng);
            }
            for i in 0..3 {
                f[i] += an.sample(rng);
            }
            ImuSample { time: t, angular_velocity: w, linear_acceleration: f }
        })
        .collect()
}

/// Generates the full dataset. Frames are independent given the analytic
/// trajectory and use a noise stream derived from `(seed, frame index)`.
pub fn generate_sequence(config: &SimConfig) -> Result<Dataset, String> {
    config.validate()?;
    let period = config.lidar.scan_period;
    let n_frames = config.frame_count();
    let end = n_frames as f64 * period;
    let ego = EgoTrajectory::new(config.ego.clone(), end + period)?;
    let frames: Vec<FrameRecord> = (0..n_frames)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_for(config.seed, k as u64 + 1);
            simulate_frame(config, &ego, k as f64 * period, &mut rng)
        })
        .collect();
    let imu = synthesize_imu(&config.imu, &ego, end + 0.5 / config.imu.rate, &mut rng_for(config.seed, 0));
    let ground_truth = (0..n_frames).map(|k| ((k + 1) as f64 * period, ego.pose((k + 1) as f64 * period))).collect();
    let s0 = ego.state(0.0);
    let info = DatasetInfo {
        scan_period: period,
        gravity: DEFAULT_GRAVITY.into(),
        lidar_to_body: config.lidar.lidar_to_body,
        initial_state: InitialState { time: 0.0, pose: PoseRecord(s0.pose), velocity: s0.velocity.into() },
        source: format!("{} seed={}", if config.name.is_empty() { "custom" } else { &config.name }, config.seed),
    };
    Ok(Dataset { info, frames, imu, ground_truth })
}

/// Identity rotation helper for scene construction in tests and presets.
pub fn yaw(deg: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&nalgebra::Vector3::z_axis(), deg.to_radians())
}
