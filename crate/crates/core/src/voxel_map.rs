//! Long-term plane voxel map and the short-term static voxel record.

use nalgebra::{Matrix3, SymmetricEigen};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::geometry::{Aabb, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelKey {
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
}

impl VoxelKey {
    pub fn new(ix: i64, iy: i64, iz: i64) -> Self {
        Self { ix, iy, iz }
    }

    #[inline]
    pub fn of(p: &Vec3, voxel_size: f64) -> Self {
        Self {
            ix: (p.x / voxel_size).floor() as i64,
            iy: (p.y / voxel_size).floor() as i64,
            iz: (p.z / voxel_size).floor() as i64,
        }
    }

    pub fn offset(&self, dx: i64, dy: i64, dz: i64) -> Self {
        Self { ix: self.ix + dx, iy: self.iy + dy, iz: self.iz + dz }
    }
}

/// A fitted plane: `normal . (x - centroid) = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneVoxel {
    pub centroid: Vec3,
    pub normal: Vec3,
    /// Mean squared point-to-plane residual, m^2.
    pub residual: f64,
    pub point_count: usize,
    pub is_plane: bool,
}

impl PlaneVoxel {
    #[inline]
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(&(p - self.centroid))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlaneFitParams {
    pub min_points: usize,
    /// Largest accepted `lambda_min`, m^2.
    pub plane_eps: f64,
    /// Largest accepted `lambda_min / lambda_mid`.
    pub plane_ratio: f64,
}

impl Default for PlaneFitParams {
    fn default() -> Self {
        Self { min_points: 6, plane_eps: 0.05 * 0.05, plane_ratio: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("not enough points for a plane fit ({got} < {needed})")]
pub struct TooFewPoints {
    pub needed: usize,
    pub got: usize,
}

/// Least-squares plane through `points` via the smallest eigenvector of the
/// 3x3 covariance. The returned voxel carries `is_plane` from the planarity
/// test; collinear or isotropic inputs are fitted but flagged non-planar.
pub fn fit_plane(points: &[Vec3], params: &PlaneFitParams) -> Result<PlaneVoxel, TooFewPoints> {
    let n = points.len();
    if n < params.min_points.max(3) {
        return Err(TooFewPoints { needed: params.min_points.max(3), got: n });
    }
    let centroid = points.iter().sum::<Vec3>() / n as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let r = p - centroid;
        cov += r * r.transpose();
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]).then(i.cmp(&j)));
    let l_min = eig.eigenvalues[order[0]].max(0.0);
    let l_mid = eig.eigenvalues[order[1]].max(0.0);
    let mut normal: Vec3 = eig.eigenvectors.column(order[0]).into_owned().normalize();
    if let Some(c) = normal.iter().find(|c| c.abs() > 1e-12) {
        if *c < 0.0 {
            normal = -normal;
        }
    }
    let degenerate = l_mid <= 1e-12 * (cov.trace().abs() + f64::MIN_POSITIVE);
    let is_plane = !degenerate && l_min <= params.plane_eps && l_min <= params.plane_ratio * l_mid;
    Ok(PlaneVoxel { centroid, normal, residual: l_min, point_count: n, is_plane })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelMapConfig {
    pub voxel_size: f64,
    pub max_points_per_voxel: usize,
    pub max_corr_dist: f64,
    pub fit: PlaneFitParams,
}

impl Default for VoxelMapConfig {
    fn default() -> Self {
        Self { voxel_size: 1.0, max_points_per_voxel: 50, max_corr_dist: 0.5, fit: PlaneFitParams::default() }
    }
}

#[derive(Debug, Clone)]
struct Voxel {
    points: Vec<Vec3>,
    seen: u64,
    plane: Option<PlaneVoxel>,
}

/// A point-to-plane association.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub key: VoxelKey,
    pub plane: PlaneVoxel,
    /// Foot of the perpendicular from the query onto the plane.
    pub foot: Vec3,
    pub signed_distance: f64,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn reservoir_slot(key: &VoxelKey, seen: u64) -> u64 {
    let h = mix64(key.ix as u64 ^ mix64(key.iy as u64 ^ mix64(key.iz as u64 ^ 0x9e37_79b9_7f4a_7c15)));
    mix64(h ^ seen) % (seen + 1)
}

/// Hash grid of plane voxels. Each voxel keeps up to
/// `max_points_per_voxel` points (reservoir sampled, deterministic) and refits
/// its plane whenever it receives new points.
#[derive(Debug, Clone, Default)]
pub struct PlaneVoxelMap {
    config: VoxelMapConfig,
    voxels: FxHashMap<VoxelKey, Voxel>,
}

impl PlaneVoxelMap {
    pub fn new(config: VoxelMapConfig) -> Self {
        Self { config, voxels: FxHashMap::default() }
    }

    pub fn config(&self) -> &VoxelMapConfig {
        &self.config
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    pub fn plane_count(&self) -> usize {
        self.voxels.values().filter(|v| v.plane.is_some_and(|p| p.is_plane)).count()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn plane(&self, key: &VoxelKey) -> Option<&PlaneVoxel> {
        self.voxels.get(key).and_then(|v| v.plane.as_ref())
    }

    pub fn voxel_points(&self, key: &VoxelKey) -> Option<&[Vec3]> {
        self.voxels.get(key).map(|v| v.points.as_slice())
    }

    /// Plane voxels sorted by key.
    pub fn planes(&self) -> Vec<(VoxelKey, PlaneVoxel)> {
        let mut out: Vec<_> = self
            .voxels
            .iter()
            .filter_map(|(k, v)| v.plane.filter(|p| p.is_plane).map(|p| (*k, p)))
            .collect();
        out.sort_by_key(|(k, _)| *k);
        out
    }

    pub fn insert_static_points<'a>(&mut self, points: impl IntoIterator<Item = &'a Vec3>) {
        let vs = self.config.voxel_size;
        let cap = self.config.max_points_per_voxel;
        let mut touched = Vec::new();
        for p in points {
            let key = VoxelKey::of(p, vs);
            let voxel = self.voxels.entry(key).or_insert_with(|| Voxel { points: Vec::new(), seen: 0, plane: None });
            if voxel.points.len() < cap {
                voxel.points.push(*p);
            } else {
                let slot = reservoir_slot(&key, voxel.seen) as usize;
                if slot < cap {
                    voxel.points[slot] = *p;
                }
            }
            voxel.seen += 1;
            touched.push(key);
        }
        touched.sort_unstable();
        touched.dedup();
        for key in touched {
            let voxel = self.voxels.get_mut(&key).expect("touched voxel exists");
            voxel.plane = fit_plane(&voxel.points, &self.config.fit).ok();
        }
    }

    /// Best plane among the query's voxel and its 26 neighbours.
    pub fn query_correspondence(&self, p: &Vec3) -> Option<Correspondence> {
        let center = VoxelKey::of(p, self.config.voxel_size);
        let mut best: Option<Correspondence> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let key = center.offset(dx, dy, dz);
                    let Some(plane) = self.voxels.get(&key).and_then(|v| v.plane) else { continue };
                    if !plane.is_plane {
                        continue;
                    }
                    let d = plane.signed_distance(p);
                    if best.is_none_or(|b| d.abs() < b.signed_distance.abs()) {
                        best = Some(Correspondence { key, plane, foot: p - d * plane.normal, signed_distance: d });
                    }
                }
            }
        }
        best.filter(|b| b.signed_distance.abs() <= self.config.max_corr_dist)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StaticRecordConfig {
    pub voxel_size: f64,
    /// Seconds a marked voxel stays valid without being re-marked.
    pub horizon: f64,
}

impl Default for StaticRecordConfig {
    fn default() -> Self {
        Self { voxel_size: 0.5, horizon: 10.0 }
    }
}

/// Short-term record of voxels recently confirmed static near the sensor.
#[derive(Debug, Clone, Default)]
pub struct StaticVoxelRecord {
    config: StaticRecordConfig,
    marked: FxHashMap<VoxelKey, f64>,
    now: f64,
}

impl StaticVoxelRecord {
    pub fn new(config: StaticRecordConfig) -> Self {
        Self { config, marked: FxHashMap::default(), now: f64::NEG_INFINITY }
    }

    pub fn config(&self) -> &StaticRecordConfig {
        &self.config
    }

    pub fn key_of(&self, p: &Vec3) -> VoxelKey {
        VoxelKey::of(p, self.config.voxel_size)
    }

    pub fn len(&self) -> usize {
        self.marked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marked.is_empty()
    }

    pub fn is_marked(&self, key: &VoxelKey) -> bool {
        self.marked.contains_key(key)
    }

    pub fn last_confirmed(&self, key: &VoxelKey) -> Option<f64> {
        self.marked.get(key).copied()
    }

    /// Moves the record's clock forward and forgets expired voxels.
    pub fn advance(&mut self, now: f64) {
        self.now = self.now.max(now);
        let horizon = self.now - self.config.horizon;
        self.marked.retain(|_, t| *t >= horizon);
    }

    pub fn scc_mark_static(&mut self, keys: impl IntoIterator<Item = VoxelKey>, now: f64) {
        for key in keys {
            let e = self.marked.entry(key).or_insert(now);
            *e = e.max(now);
        }
        self.advance(now);
    }

    /// Forgets `keys`, e.g. voxels now seen occupied by moving content.
    pub fn scc_clear(&mut self, keys: impl IntoIterator<Item = VoxelKey>) {
        for key in keys {
            self.marked.remove(&key);
        }
    }

    /// Inclusive voxel key range covered by `aabb`; axes with zero extent
    /// are widened to half a voxel.
    fn key_range(&self, aabb: &Aabb) -> (VoxelKey, VoxelKey) {
        let vs = self.config.voxel_size;
        let mut lo = aabb.min;
        let mut hi = aabb.max;
        for i in 0..3 {
            if hi[i] - lo[i] <= 0.0 {
                let c = 0.5 * (hi[i] + lo[i]);
                lo[i] = c - 0.25 * vs;
                hi[i] = c + 0.25 * vs;
            }
        }
        (VoxelKey::of(&lo, vs), VoxelKey::of(&hi, vs))
    }

    /// Fraction of the voxels intersecting `aabb` that are marked static.
    pub fn scc_overlap_fraction(&self, aabb: &Aabb) -> f64 {
        let (lo, hi) = self.key_range(aabb);
        let nx = (hi.ix - lo.ix + 1) as u64;
        let ny = (hi.iy - lo.iy + 1) as u64;
        let nz = (hi.iz - lo.iz + 1) as u64;
        let total = nx.saturating_mul(ny).saturating_mul(nz);
        if total == 0 {
            return 0.0;
        }
        let inside = |k: &VoxelKey| {
            (lo.ix..=hi.ix).contains(&k.ix) && (lo.iy..=hi.iy).contains(&k.iy) && (lo.iz..=hi.iz).contains(&k.iz)
        };
        let marked = if total as usize > self.marked.len() {
            self.marked.keys().filter(|k| inside(k)).count() as u64
        } else {
            let mut c = 0;
            for ix in lo.ix..=hi.ix {
                for iy in lo.iy..=hi.iy {
                    for iz in lo.iz..=hi.iz {
                        if self.marked.contains_key(&VoxelKey::new(ix, iy, iz)) {
                            c += 1;
                        }
                    }
                }
            }
            c
        };
        marked as f64 / total as f64
    }
}
