//! Planar ego motion built from constant speed / constant turn-rate
//! segments joined by smooth blends.

use nalgebra::{Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub duration: f64,
    /// m/s along the body x axis.
    pub speed: f64,
    #[serde(default)]
    pub yaw_rate_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoSpec {
    pub start: [f64; 3],
    #[serde(default)]
    pub start_yaw_deg: f64,
    /// Transition time at the start of every segment after the first, s.
    #[serde(default = "default_blend")]
    pub blend: f64,
    pub segments: Vec<Segment>,
}

fn default_blend() -> f64 {
    0.5
}

impl EgoSpec {
    pub fn stationary(start: [f64; 3]) -> Self {
        Self { start, start_yaw_deg: 0.0, blend: 0.5, segments: vec![Segment { duration: 1.0, speed: 0.0, yaw_rate_deg: 0.0 }] }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.segments.is_empty() {
            return Err("ego trajectory needs at least one segment".into());
        }
        if !(self.blend > 0.0) {
            return Err("ego blend must be positive".into());
        }
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.duration > 0.0 && s.speed.is_finite() && s.yaw_rate_deg.is_finite()) {
                return Err(format!("ego segment {i} is invalid"));
            }
            if i > 0 && s.duration < self.blend {
                return Err(format!("ego segment {i} is shorter than the blend time"));
            }
        }
        Ok(())
    }
}

/// `10x^3 - 15x^4 + 6x^5` and its derivative.
fn smoothstep(x: f64) -> (f64, f64) {
    let x = x.clamp(0.0, 1.0);
    let x2 = x * x;
    (x2 * x * (10.0 - 15.0 * x + 6.0 * x2), 30.0 * x2 * (1.0 - x) * (1.0 - x))
}

/// Kinematic state of the ego body at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoState {
    pub pose: Pose,
    /// World frame.
    pub velocity: Vec3,
    /// Body frame.
    pub angular_velocity: Vec3,
    /// World-frame acceleration.
    pub acceleration: Vec3,
}

/// Dense integration of an [`EgoSpec`]; poses between grid nodes are cubic
/// Hermite interpolants using the exact derivatives.
#[derive(Debug, Clone)]
pub struct EgoTrajectory {
    spec: EgoSpec,
    starts: Vec<f64>,
    step: f64,
    /// (yaw, x, y) at `k * step`.
    nodes: Vec<[f64; 3]>,
}

impl EgoTrajectory {
    pub fn new(spec: EgoSpec, duration: f64) -> Result<Self, String> {
        spec.validate()?;
        let mut starts = Vec::with_capacity(spec.segments.len());
        let mut t = 0.0;
        for s in &spec.segments {
            starts.push(t);
            t += s.duration;
        }
        let step = 1e-3;
        let n = (duration.max(0.0) / step).ceil() as usize + 2;
        let mut traj = Self { spec, starts, step, nodes: Vec::with_capacity(n) };
        let mut y = [traj.spec.start_yaw_deg.to_radians(), traj.spec.start[0], traj.spec.start[1]];
        traj.nodes.push(y);
        for k in 0..n {
            let t0 = k as f64 * step;
            let f = |t: f64, y: [f64; 3]| {
                let (v, _, w, _) = traj.rates(t);
                [w, v * y[0].cos(), v * y[0].sin()]
            };
            let k1 = f(t0, y);
            let k2 = f(t0 + step / 2.0, add(y, k1, step / 2.0));
            let k3 = f(t0 + step / 2.0, add(y, k2, step / 2.0));
            let k4 = f(t0 + step, add(y, k3, step));
            for i in 0..3 {
                y[i] += step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            traj.nodes.push(y);
        }
        Ok(traj)
    }

    /// Speed, its derivative, yaw rate (rad/s) and its derivative.
    fn rates(&self, t: f64) -> (f64, f64, f64, f64) {
        let segs = &self.spec.segments;
        let k = self.starts.partition_point(|s| *s <= t).saturating_sub(1);
        let cur = &segs[k];
        let prev = if k == 0 { cur } else { &segs[k - 1] };
        let (s, ds) = if k == 0 { (1.0, 0.0) } else { smoothstep((t - self.starts[k]) / self.spec.blend) };
        let ds = ds / self.spec.blend;
        let (w0, w1) = (prev.yaw_rate_deg.to_radians(), cur.yaw_rate_deg.to_radians());
        (
            prev.speed + (cur.speed - prev.speed) * s,
            (cur.speed - prev.speed) * ds,
            w0 + (w1 - w0) * s,
            (w1 - w0) * ds,
        )
    }

    pub fn state(&self, t: f64) -> EgoState {
        let t = t.max(0.0);
        let k = ((t / self.step).floor() as usize).min(self.nodes.len() - 2);
        let (ta, tb) = (k as f64 * self.step, (k + 1) as f64 * self.step);
        let (a, b) = (self.nodes[k], self.nodes[k + 1]);
        let deriv = |tt: f64, y: &[f64; 3]| {
            let (v, _, w, _) = self.rates(tt);
            [w, v * y[0].cos(), v * y[0].sin()]
        };
        let (da, db) = (deriv(ta, &a), deriv(tb, &b));
        let h = self.step;
        let s = (t - ta) / h;
        let (h00, h10, h01, h11) =
            (2.0 * s.powi(3) - 3.0 * s * s + 1.0, s.powi(3) - 2.0 * s * s + s, -2.0 * s.powi(3) + 3.0 * s * s, s.powi(3) - s * s);
        let mut y = [0.0; 3];
        for i in 0..3 {
            y[i] = h00 * a[i] + h10 * h * da[i] + h01 * b[i] + h11 * h * db[i];
        }
        let (v, dv, w, _) = self.rates(t);
        let yaw = y[0];
        let (c, sn) = (yaw.cos(), yaw.sin());
        let pose = Pose::from_parts(
            Translation3::new(y[1], y[2], self.spec.start[2]),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
        );
        EgoState {
            pose,
            velocity: Vec3::new(v * c, v * sn, 0.0),
            angular_velocity: Vec3::new(0.0, 0.0, w),
            acceleration: Vec3::new(dv * c - v * w * sn, dv * sn + v * w * c, 0.0),
        }
    }

    pub fn pose(&self, t: f64) -> Pose {
        self.state(t).pose
    }
}

fn add(y: [f64; 3], k: [f64; 3], h: f64) -> [f64; 3] {
    [y[0] + h * k[0], y[1] + h * k[1], y[2] + h * k[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_line_at_constant_speed() {
        let spec = EgoSpec {
            start: [1.0, 2.0, 0.5],
            start_yaw_deg: 90.0,
            blend: 0.5,
            segments: vec![Segment { duration: 10.0, speed: 2.0, yaw_rate_deg: 0.0 }],
        };
        let traj = EgoTrajectory::new(spec, 5.0).unwrap();
        let s = traj.state(3.2345);
        assert!((s.pose.translation.vector - Vec3::new(1.0, 2.0 + 2.0 * 3.2345, 0.5)).norm() < 1e-9);
        assert!((s.velocity - Vec3::new(0.0, 2.0, 0.0)).norm() < 1e-12);
        assert!(s.acceleration.norm() < 1e-12);
    }

    #[test]
    fn constant_turn_is_a_circle() {
        let spec = EgoSpec {
            start: [0.0, 0.0, 0.0],
            start_yaw_deg: 0.0,
            blend: 0.5,
            segments: vec![Segment { duration: 10.0, speed: 1.0, yaw_rate_deg: 180.0 / std::f64::consts::PI }],
        };
        let traj = EgoTrajectory::new(spec, 5.0).unwrap();
        for t in [0.3, 1.0, 2.7, 4.9] {
            let p = traj.pose(t).translation.vector;
            assert!((p - Vec3::new(t.sin(), 1.0 - t.cos(), 0.0)).norm() < 1e-9, "t={t}");
        }
    }

    #[test]
    fn blends_are_continuous_and_derivatives_consistent() {
        let spec = EgoSpec {
            start: [0.0, 0.0, 0.0],
            start_yaw_deg: 10.0,
            blend: 0.8,
            segments: vec![
                Segment { duration: 2.0, speed: 1.0, yaw_rate_deg: 0.0 },
                Segment { duration: 2.0, speed: 2.0, yaw_rate_deg: 20.0 },
                Segment { duration: 3.0, speed: 1.5, yaw_rate_deg: -10.0 },
            ],
        };
        let traj = EgoTrajectory::new(spec, 7.0).unwrap();
        let h = 1e-4;
        let mut t = 0.05;
        while t < 6.9 {
            let (a, b, c) = (traj.state(t - h), traj.state(t), traj.state(t + h));
            let v_fd = (c.pose.translation.vector - a.pose.translation.vector) / (2.0 * h);
            assert!((v_fd - b.velocity).norm() < 1e-6, "velocity at {t}");
            let acc_fd = (c.velocity - a.velocity) / (2.0 * h);
            assert!((acc_fd - b.acceleration).norm() < 1e-5, "acceleration at {t}");
            let w_fd = a.pose.rotation.angle_to(&c.pose.rotation) / (2.0 * h);
            assert!((w_fd - b.angular_velocity.z.abs()).abs() < 1e-6);
            t += 0.0937;
        }
    }
}
