//! Scene primitives and exact ray intersection.

use nalgebra::{Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{Pose, Vec3};

/// A static shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Primitive {
    /// Box rotated about z by `yaw_deg`. A ray starting inside sees its inner
    /// faces, so a box can model a room.
    Box {
        center: [f64; 3],
        size: [f64; 3],
        #[serde(default)]
        yaw_deg: f64,
    },
    /// Infinite plane.
    Plane { point: [f64; 3], normal: [f64; 3] },
    /// Rectangle `center + a*u + b*v` with `|a|, |b| <= 1`.
    Rect { center: [f64; 3], u: [f64; 3], v: [f64; 3] },
}

/// A box moving with constant linear and angular velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mover {
    /// Center at time zero.
    pub center: [f64; 3],
    pub size: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
    /// m/s, world frame.
    pub velocity: [f64; 3],
    /// rad/s, world frame.
    #[serde(default)]
    pub angular_velocity: [f64; 3],
}

impl Mover {
    pub fn pose_at(&self, t: f64) -> Pose {
        let r0 = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.yaw_deg.to_radians());
        let w = Vec3::from(self.angular_velocity);
        let r = UnitQuaternion::from_scaled_axis(w * t) * r0;
        let c = Vec3::from(self.center) + Vec3::from(self.velocity) * t;
        Pose::from_parts(Translation3::from(c), r)
    }

    pub fn half_extents(&self) -> Vec3 {
        Vec3::from(self.size) * 0.5
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default, rename = "static")]
    pub statics: Vec<Primitive>,
    #[serde(default)]
    pub movers: Vec<Mover>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), String> {
        for (i, p) in self.statics.iter().enumerate() {
            let ok = match p {
                Primitive::Box { size, .. } => size.iter().all(|s| s.is_finite() && *s > 0.0),
                Primitive::Plane { normal, .. } => Vec3::from(*normal).norm() > 1e-9,
                Primitive::Rect { u, v, .. } => Vec3::from(*u).cross(&Vec3::from(*v)).norm() > 1e-12,
            };
            if !ok {
                return Err(format!("static primitive {i} is degenerate"));
            }
        }
        for (i, m) in self.movers.iter().enumerate() {
            if !m.size.iter().all(|s| s.is_finite() && *s > 0.0) {
                return Err(format!("mover {i} has a non-positive size"));
            }
            if !m.velocity.iter().chain(&m.angular_velocity).all(|v| v.is_finite()) {
                return Err(format!("mover {i} has a non-finite velocity"));
            }
        }
        if self.movers.len() >= u16::MAX as usize {
            return Err("too many movers".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub range: f64,
    pub mover: Option<u16>,
}

/// Slab intersection with an origin-centred box of half extents `h`.
/// Returns the entry distance, or the exit distance when the origin is inside.
pub fn ray_box_local(origin: &Vec3, dir: &Vec3, h: &Vec3) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for i in 0..3 {
        if dir[i].abs() < 1e-15 {
            if origin[i].abs() > h[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[i];
        let (a, b) = ((-h[i] - origin[i]) * inv, (h[i] - origin[i]) * inv);
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        t_near = t_near.max(a);
        t_far = t_far.min(b);
        if t_near > t_far {
            return None;
        }
    }
    if t_near > 0.0 {
        Some(t_near)
    } else if t_far > 0.0 {
        Some(t_far)
    } else {
        None
    }
}

fn ray_box(pose: &Pose, half: &Vec3, origin: &Vec3, dir: &Vec3) -> Option<f64> {
    let o = pose.inverse_transform_point(&(*origin).into()).coords;
    let d = pose.rotation.inverse_transform_vector(dir);
    ray_box_local(&o, &d, half)
}

fn ray_plane(point: &Vec3, normal: &Vec3, origin: &Vec3, dir: &Vec3) -> Option<f64> {
    let denom = normal.dot(dir);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = normal.dot(&(point - origin)) / denom;
    (t > 0.0).then_some(t)
}

fn ray_rect(center: &Vec3, u: &Vec3, v: &Vec3, origin: &Vec3, dir: &Vec3) -> Option<f64> {
    let n = u.cross(v);
    let t = ray_plane(center, &n, origin, dir)?;
    let rel = origin + dir * t - center;
    let a = rel.dot(u) / u.norm_squared();
    let b = rel.dot(v) / v.norm_squared();
    (a.abs() <= 1.0 && b.abs() <= 1.0).then_some(t)
}

impl Primitive {
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        match self {
            Primitive::Box { center, size, yaw_deg } => {
                let pose = Pose::from_parts(
                    Translation3::from(Vec3::from(*center)),
                    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw_deg.to_radians()),
                );
                ray_box(&pose, &(Vec3::from(*size) * 0.5), origin, dir)
            }
            Primitive::Plane { point, normal } => ray_plane(&Vec3::from(*point), &Vec3::from(*normal), origin, dir),
            Primitive::Rect { center, u, v } => {
                ray_rect(&Vec3::from(*center), &Vec3::from(*u), &Vec3::from(*v), origin, dir)
            }
        }
    }
}

/// The scene frozen at one instant.
pub struct SceneAt<'a> {
    scene: &'a SceneSpec,
    mover_poses: Vec<Pose>,
}

impl<'a> SceneAt<'a> {
    pub fn new(scene: &'a SceneSpec, t: f64) -> Self {
        Self { scene, mover_poses: scene.movers.iter().map(|m| m.pose_at(t)).collect() }
    }

    /// Nearest hit along a unit direction within `max_range`.
    pub fn raycast(&self, origin: &Vec3, dir: &Vec3, max_range: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |range: Option<f64>, mover: Option<u16>| {
            if let Some(r) = range {
                if r <= max_range && best.is_none_or(|b| r < b.range) {
                    best = Some(Hit { range: r, mover });
                }
            }
        };
        for p in &self.scene.statics {
            consider(p.intersect(origin, dir), None);
        }
        for (i, (m, pose)) in self.scene.movers.iter().zip(&self.mover_poses).enumerate() {
            consider(ray_box(pose, &m.half_extents(), origin, dir), Some(i as u16));
        }
        best
    }
}

/// Raycast against the scene at time `t`.
pub fn raycast(scene: &SceneSpec, t: f64, origin: &Vec3, dir: &Vec3, max_range: f64) -> Option<Hit> {
    SceneAt::new(scene, t).raycast(origin, dir, max_range)
}
