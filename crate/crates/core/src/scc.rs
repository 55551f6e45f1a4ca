//! Spatial consistency check: turns per-point instability into final
//! static/dynamic labels on the full-resolution scan.
//!
//! Unstable points are upsampled back to full resolution, clustered with
//! DBSCAN, oversized clusters are dropped, and each remaining cluster is
//! declared dynamic when its bounding box barely overlaps recently confirmed
//! static space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{Aabb, StampedPoint, Vec3};
use crate::kdtree::KdTree;
use crate::voxel_map::StaticVoxelRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FinalLabel {
    Static,
    Dynamic,
}

impl FinalLabel {
    pub fn is_dynamic(self) -> bool {
        self == FinalLabel::Dynamic
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SccConfig {
    pub upsample_radius: f64,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
    /// m^3, inclusive.
    pub max_box_volume: f64,
    /// m, inclusive.
    pub max_box_edge: f64,
    pub overlap_thr: f64,
    /// Only confirmed points closer than this to the sensor mark the static
    /// record, m.
    pub record_range: f64,
}

impl Default for SccConfig {
    fn default() -> Self {
        Self {
            upsample_radius: 0.3,
            dbscan_eps: 0.5,
            dbscan_min_pts: 5,
            max_box_volume: 60.0,
            max_box_edge: 8.0,
            overlap_thr: 0.3,
            record_range: 30.0,
        }
    }
}

impl SccConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("upsample_radius", self.upsample_radius),
            ("dbscan_eps", self.dbscan_eps),
            ("max_box_volume", self.max_box_volume),
            ("max_box_edge", self.max_box_edge),
            ("record_range", self.record_range),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("scc.{name} must be positive, got {v}"));
            }
        }
        if self.dbscan_min_pts == 0 {
            return Err("scc.dbscan_min_pts must be at least 1".into());
        }
        if !(self.overlap_thr > 0.0 && self.overlap_thr < 1.0) {
            return Err(format!("scc.overlap_thr must lie in (0, 1), got {}", self.overlap_thr));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Ascending indices into the clustered point set.
    pub members: Vec<usize>,
    pub aabb: Aabb,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Indices (ascending) of all `full` points within `radius` of some point in
/// `unstable`.
pub fn upsample_unstable(unstable: &[Vec3], full: &[StampedPoint], radius: f64) -> Vec<usize> {
    assert!(radius > 0.0, "upsample radius must be positive");
    if unstable.is_empty() {
        return Vec::new();
    }
    let tree = KdTree::from_slice(unstable);
    full.par_iter()
        .enumerate()
        .filter_map(|(i, p)| tree.any_within(&p.position, radius).then_some(i))
        .collect()
}

/// Density-based clustering. Points with at least `min_pts` neighbours within
/// `eps` (themselves included) are core points; clusters are grown from core
/// points in index order, and a border point joins the first cluster that
/// reaches it.
pub fn dbscan(points: &[Vec3], eps: f64, min_pts: usize) -> (Vec<Cluster>, Vec<usize>) {
    assert!(eps > 0.0 && min_pts >= 1);
    const UNSEEN: usize = usize::MAX;
    let tree = KdTree::from_slice(points);
    let is_core: Vec<bool> = points.par_iter().map(|p| tree.count_within(p, eps, min_pts) >= min_pts).collect();

    let mut assignment = vec![UNSEEN; points.len()];
    let mut clusters = Vec::new();
    let mut queue = Vec::new();
    for seed in 0..points.len() {
        if !is_core[seed] || assignment[seed] != UNSEEN {
            continue;
        }
        let id = clusters.len();
        let mut members = Vec::new();
        assignment[seed] = id;
        queue.clear();
        queue.push(seed);
        let mut head = 0;
        while head < queue.len() {
            let i = queue[head];
            head += 1;
            members.push(i);
            if !is_core[i] {
                continue;
            }
            tree.for_each_within(&points[i], eps, |j| {
                if assignment[j] == UNSEEN {
                    assignment[j] = id;
                    queue.push(j);
                }
            });
        }
        members.sort_unstable();
        let aabb = Aabb::from_points(members.iter().map(|&i| &points[i])).expect("cluster is non-empty");
        clusters.push(Cluster { members, aabb });
    }
    let noise = (0..points.len()).filter(|&i| assignment[i] == UNSEEN).collect();
    (clusters, noise)
}

/// Keeps clusters whose box has volume and every edge within the caps.
pub fn filter_clusters(clusters: Vec<Cluster>, config: &SccConfig) -> (Vec<Cluster>, Vec<Cluster>) {
    clusters.into_iter().partition(|c| {
        c.aabb.volume() <= config.max_box_volume && c.aabb.extent().iter().all(|e| *e <= config.max_box_edge)
    })
}

/// Dynamic iff the cluster box overlaps confirmed static space by less than
/// `overlap_thr`.
pub fn classify_clusters(clusters: &[Cluster], record: &StaticVoxelRecord, overlap_thr: f64) -> Vec<FinalLabel> {
    clusters
        .iter()
        .map(|c| {
            if record.scc_overlap_fraction(&c.aabb) < overlap_thr {
                FinalLabel::Dynamic
            } else {
                FinalLabel::Static
            }
        })
        .collect()
}

/// Members of dynamic clusters are dynamic, everything else static.
/// Cluster members must already be indices into the full cloud.
pub fn finalize_labels(len: usize, clusters: &[Cluster], labels: &[FinalLabel]) -> Vec<FinalLabel> {
    let mut out = vec![FinalLabel::Static; len];
    for (c, l) in clusters.iter().zip(labels) {
        if l.is_dynamic() {
            for &i in &c.members {
                out[i] = FinalLabel::Dynamic;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SccOutput {
    pub labels: Vec<FinalLabel>,
    pub candidates: usize,
    pub clusters: usize,
    pub oversized: usize,
    pub dynamic_clusters: usize,
}

/// Runs the whole check on one registered full-resolution scan.
pub fn spatial_consistency_check(
    unstable: &[Vec3],
    full: &[StampedPoint],
    record: &StaticVoxelRecord,
    config: &SccConfig,
) -> SccOutput {
    let candidates = upsample_unstable(unstable, full, config.upsample_radius);
    let positions: Vec<Vec3> = candidates.iter().map(|&i| full[i].position).collect();
    let (mut clusters, _noise) = dbscan(&positions, config.dbscan_eps, config.dbscan_min_pts);
    for c in &mut clusters {
        for m in &mut c.members {
            *m = candidates[*m];
        }
    }
    let total = clusters.len();
    let (kept, oversized) = filter_clusters(clusters, config);
    let labels = classify_clusters(&kept, record, config.overlap_thr);
    let dynamic_clusters = labels.iter().filter(|l| l.is_dynamic()).count();
    SccOutput {
        labels: finalize_labels(full.len(), &kept, &labels),
        candidates: candidates.len(),
        clusters: total,
        oversized: oversized.len(),
        dynamic_clusters,
    }
}
