//! Dynamic-aware iterated point-to-plane registration.
//!
//! Every iteration re-transforms the scan with the current estimate,
//! re-estimates spatio-temporal normals against the temporal window map,
//! and solves one robust damped Gauss-Newton step over the stable points
//! plus a quadratic prior from IMU propagation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{Matrix3, SMatrix, SVector, Translation3, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    classify_stability, estimate_st_normal_iter, transform_point, NormalParams, Pose, StabilityLabel, StampedPoint,
    Vec3,
};
use crate::preprocess::NavState;
use crate::so3;
use crate::temporal_map::{TemporalMapError, TemporalWindowMap};
use crate::voxel_map::{PlaneVoxel, PlaneVoxelMap, VoxelKey};

pub type Vector9 = SVector<f64, 9>;
pub type Matrix9 = SMatrix<f64, 9, 9>;

/// How stability labels enter the registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegistrationMode {
    /// Reclassify every iteration.
    #[default]
    Full,
    /// Classify once at the prior, then register the filtered cloud.
    Sequential,
    /// Treat every point as stable.
    NoDynamic,
}

impl RegistrationMode {
    pub const ALL: [RegistrationMode; 3] = [Self::Full, Self::Sequential, Self::NoDynamic];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Sequential => "sequential",
            Self::NoDynamic => "no-dynamic",
        }
    }
}

impl fmt::Display for RegistrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegistrationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected full, sequential or no-dynamic)"))
    }
}

/// Random-walk densities of the propagated prior, per second of propagation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorNoise {
    /// rad
    pub rotation: f64,
    /// m
    pub translation: f64,
    /// m/s
    pub velocity: f64,
    /// Biases are not estimated; kept for configuration completeness.
    pub bias: f64,
}

impl Default for PriorNoise {
    fn default() -> Self {
        Self { rotation: 0.01, translation: 0.1, velocity: 0.1, bias: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub mode: RegistrationMode,
    pub max_iter: usize,
    /// Threshold on the norm of the (rotation, translation) update.
    pub epsilon: f64,
    /// Temporal-angle threshold, degrees.
    pub theta_thr_deg: f64,
    pub k_neighbors: usize,
    pub huber_delta: f64,
    /// Per-point range noise, m.
    pub lidar_sigma: f64,
    pub min_stable_points: usize,
    /// Neighbour lists are reused while no point moved more than this, m.
    pub cache_tol: f64,
    /// Once unstable, a point stays unstable for the rest of the frame.
    pub sticky_unstable: bool,
    pub max_damping_steps: usize,
    pub prior_noise: PriorNoise,
    pub normal: NormalParams,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            mode: RegistrationMode::Full,
            max_iter: 10,
            epsilon: 1e-3,
            theta_thr_deg: 5.7,
            k_neighbors: 20,
            huber_delta: 0.1,
            lidar_sigma: 0.02,
            min_stable_points: 50,
            cache_tol: 0.05,
            sticky_unstable: false,
            max_damping_steps: 10,
            prior_noise: PriorNoise::default(),
            normal: NormalParams::default(),
        }
    }
}

impl RegistrationConfig {
    pub fn theta_thr(&self) -> f64 {
        self.theta_thr_deg.to_radians()
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("epsilon", self.epsilon),
            ("theta_thr_deg", self.theta_thr_deg),
            ("huber_delta", self.huber_delta),
            ("lidar_sigma", self.lidar_sigma),
            ("cache_tol", self.cache_tol),
            ("prior_noise.rotation", self.prior_noise.rotation),
            ("prior_noise.translation", self.prior_noise.translation),
            ("prior_noise.velocity", self.prior_noise.velocity),
            ("prior_noise.bias", self.prior_noise.bias),
            ("normal.time_scale", self.normal.time_scale),
            ("normal.max_eigen_ratio", self.normal.max_eigen_ratio),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("registration.{name} must be positive, got {v}"));
            }
        }
        if self.theta_thr_deg >= 90.0 {
            return Err("registration.theta_thr_deg must be below 90".into());
        }
        if self.max_iter == 0 || self.k_neighbors == 0 || self.min_stable_points == 0 {
            return Err("registration.max_iter, k_neighbors and min_stable_points must be positive".into());
        }
        if self.normal.min_time_span < 0.0 {
            return Err("registration.normal.min_time_span must be non-negative".into());
        }
        Ok(())
    }
}

/// Propagated state with its 9x9 covariance over
/// (rotation right-perturbation, position, velocity).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prior {
    pub state: NavState,
    pub covariance: Matrix9,
}

impl Prior {
    pub fn information(&self) -> Option<Matrix9> {
        if !self.covariance.iter().all(|v| v.is_finite()) {
            return None;
        }
        self.covariance.cholesky().map(|c| c.inverse())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrespondenceRecord {
    pub plane: VoxelKey,
    pub residual: f64,
}

/// Wall time per stage, milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RegistrationTiming {
    pub normals_ms: f64,
    pub correspondence_ms: f64,
    pub solve_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub state: NavState,
    /// Posterior covariance at the returned state.
    pub covariance: Matrix9,
    pub labels: Vec<StabilityLabel>,
    pub correspondences: Vec<Option<CorrespondenceRecord>>,
    pub iterations: usize,
    pub converged: bool,
    pub last_update_norm: f64,
    pub timing: RegistrationTiming,
}

impl RegistrationResult {
    pub fn stable_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|l| l.is_stable()).count() as f64 / self.labels.len() as f64
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("only {got} stable points have plane correspondences (need {needed})")]
    Degenerate { got: usize, needed: usize },
    #[error("normal equations stayed singular after damping")]
    SolveFailed,
    #[error("the plane map is empty")]
    EmptyMap,
    #[error("prior state or covariance is not finite and positive definite")]
    BadPrior,
}

/// Quadratic prior linearized at the current estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorTerm {
    pub residual: Vector9,
    pub jacobian: Matrix9,
    pub information: Matrix9,
}

impl PriorTerm {
    pub fn at(state: &NavState, prior: &NavState, information: &Matrix9) -> Self {
        let r_rot = so3::log(&(prior.pose.rotation.inverse() * state.pose.rotation));
        let mut residual = Vector9::zeros();
        residual.fixed_rows_mut::<3>(0).copy_from(&r_rot);
        residual.fixed_rows_mut::<3>(3).copy_from(&(state.position() - prior.position()));
        residual.fixed_rows_mut::<3>(6).copy_from(&(state.velocity - prior.velocity));
        let mut jacobian = Matrix9::identity();
        jacobian.fixed_view_mut::<3, 3>(0, 0).copy_from(&so3::right_jacobian_inv(&r_rot));
        Self { residual, jacobian, information: *information }
    }

    pub fn cost(&self) -> f64 {
        0.5 * self.residual.dot(&(self.information * self.residual))
    }
}

/// Signed distance of the transformed body point to `plane`, and its
/// derivative with respect to `(delta_theta, delta_t)` where the pose is
/// perturbed as `R Exp(delta_theta)`, `t + delta_t`.
pub fn point_to_plane_residual_and_jacobian(pose: &Pose, body_point: &Vec3, plane: &PlaneVoxel) -> (f64, Vector6<f64>) {
    let r = pose.rotation.to_rotation_matrix();
    let world = r * body_point + pose.translation.vector;
    let residual = plane.signed_distance(&world);
    let d_rot = -(plane.normal.transpose() * r.matrix() * so3::skew(body_point));
    let mut j = Vector6::zeros();
    j.fixed_rows_mut::<3>(0).copy_from(&d_rot.transpose());
    j.fixed_rows_mut::<3>(3).copy_from(&plane.normal);
    (residual, j)
}

#[inline]
fn huber_cost(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// IRLS weight of the Huber loss.
#[inline]
pub fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

fn normal_equations(
    residuals: &[f64],
    jacobians: &[Vector6<f64>],
    weights: &[f64],
    prior: Option<&PriorTerm>,
) -> (Matrix9, Vector9) {
    let mut h6 = SMatrix::<f64, 6, 6>::zeros();
    let mut g6 = Vector6::zeros();
    for ((r, j), w) in residuals.iter().zip(jacobians).zip(weights) {
        h6.ger(*w, j, j, 1.0);
        g6.axpy(w * r, j, 1.0);
    }
    let mut h = Matrix9::zeros();
    let mut g = Vector9::zeros();
    h.fixed_view_mut::<6, 6>(0, 0).copy_from(&h6);
    g.fixed_rows_mut::<6>(0).copy_from(&g6);
    if let Some(p) = prior {
        let jt_info = p.jacobian.transpose() * p.information;
        h += jt_info * p.jacobian;
        g += jt_info * p.residual;
    }
    (h, g)
}

fn solve_damped(h: &Matrix9, g: &Vector9, damping: f64, with_prior: bool, max_steps: usize) -> Option<Vector9> {
    let scale = (h.trace() / 9.0).abs().max(1e-12);
    let mut lambda = damping;
    for _ in 0..=max_steps {
        let delta = if with_prior {
            let a = h + Matrix9::identity() * lambda;
            a.cholesky().map(|c| -c.solve(g))
        } else {
            let a = h.fixed_view::<6, 6>(0, 0) + SMatrix::<f64, 6, 6>::identity() * lambda;
            a.cholesky().map(|c| {
                let d6 = -c.solve(&g.fixed_rows::<6>(0).into_owned());
                let mut d = Vector9::zeros();
                d.fixed_rows_mut::<6>(0).copy_from(&d6);
                d
            })
        };
        if let Some(d) = delta.filter(|d| d.iter().all(|v| v.is_finite())) {
            return Some(d);
        }
        lambda = (lambda * 10.0).max(1e-9 * scale);
    }
    None
}

/// Solves `(J^T W J + P + lambda I) delta = -(J^T W r + prior gradient)`.
///
/// `weights` carry both robust and measurement weights. Without a prior the
/// system is restricted to the (rotation, translation) block and the velocity
/// part of the update is zero. Non-finite solves escalate the damping.
pub fn solve_gauss_newton_step(
    residuals: &[f64],
    jacobians: &[Vector6<f64>],
    weights: &[f64],
    prior: Option<&PriorTerm>,
    damping: f64,
) -> Result<Vector9, RegistrationError> {
    assert_eq!(residuals.len(), jacobians.len());
    assert_eq!(residuals.len(), weights.len());
    let (h, g) = normal_equations(residuals, jacobians, weights, prior);
    solve_damped(&h, &g, damping, prior.is_some(), 10).ok_or(RegistrationError::SolveFailed)
}

/// Applies a 9-vector update: `R Exp(dtheta)`, `p + dp`, `v + dv`.
pub fn apply_update(state: &NavState, delta: &Vector9) -> NavState {
    let dtheta = Vector3::new(delta[0], delta[1], delta[2]);
    let dp = Vector3::new(delta[3], delta[4], delta[5]);
    let dv = Vector3::new(delta[6], delta[7], delta[8]);
    let rotation = state.pose.rotation * so3::exp(&dtheta);
    let translation = state.pose.translation.vector + dp;
    NavState {
        pose: Pose::from_parts(Translation3::from(translation), rotation),
        velocity: state.velocity + dv,
        ..*state
    }
}

/// Propagates a (rotation, position, velocity) covariance from `from` to
/// `to` using the mean world acceleration implied by the two states.
pub fn propagate_covariance(
    covariance: &Matrix9,
    from: &NavState,
    to: &NavState,
    gravity: &Vec3,
    noise: &PriorNoise,
) -> Matrix9 {
    let dt = to.time - from.time;
    if dt <= 0.0 {
        return *covariance;
    }
    let r_from = from.pose.rotation.to_rotation_matrix();
    let r_to = to.pose.rotation.to_rotation_matrix();
    let accel = (to.velocity - from.velocity) / dt - gravity;
    let a_skew_r = so3::skew(&accel) * r_from.matrix();
    let mut f = Matrix9::identity();
    f.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r_to.transpose() * r_from).into_inner());
    f.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-0.5 * dt * dt * a_skew_r));
    f.fixed_view_mut::<3, 3>(3, 6).copy_from(&(Matrix3::identity() * dt));
    f.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-dt * a_skew_r));
    let mut q = Matrix9::zeros();
    for (block, sigma) in [noise.rotation, noise.translation, noise.velocity].into_iter().enumerate() {
        for k in 0..3 {
            q[(3 * block + k, 3 * block + k)] = sigma * sigma * dt;
        }
    }
    let p = f * covariance * f.transpose() + q;
    (p + p.transpose()) * 0.5
}

/// Candidates kept per point beyond the `k` that are used.
const CACHE_EXTRA: usize = 12;

/// Over-sized neighbour candidate lists from the temporal map. A list stays
/// exact for a moved query as long as its `k` nearest candidates are closer
/// than anything the search could have skipped.
struct NeighborCache {
    pose: Pose,
    anchors: Vec<Vec3>,
    candidates: Vec<Vec<u32>>,
    /// Distance from the anchor to the farthest candidate; infinite when the
    /// candidates are the whole map.
    reach: Vec<f64>,
}

impl NeighborCache {
    fn build(pose: Pose, world: &[StampedPoint], mt: &TemporalWindowMap, k: usize) -> Self {
        let wanted = k + CACHE_EXTRA;
        let (candidates, reach) = world
            .par_iter()
            .map(|p| {
                let found = mt.knn_with_dist2(&p.position, wanted);
                let reach = if found.len() < wanted { f64::INFINITY } else { found[wanted - 1].1.sqrt() };
                (found.into_iter().map(|(i, _)| i as u32).collect::<Vec<_>>(), reach)
            })
            .unzip();
        Self { pose, anchors: world.iter().map(|p| p.position).collect(), candidates, reach }
    }

    /// Exact `k`-nearest lists for `world`, falling back to a fresh search
    /// where the cached candidates cannot prove the answer.
    fn lists(&self, world: &[StampedPoint], mt: &TemporalWindowMap, k: usize) -> Vec<Vec<u32>> {
        let pts = mt.points();
        world
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let q = &q.position;
                let shift = (q - self.anchors[i]).norm();
                let mut near: Vec<(f64, u32)> =
                    self.candidates[i].iter().map(|&j| ((pts[j as usize].position - q).norm_squared(), j)).collect();
                near.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                near.truncate(k);
                let kth = near.last().map_or(0.0, |n| n.0.sqrt());
                if kth + shift + 1e-9 < self.reach[i] {
                    near.into_iter().map(|(_, j)| j).collect()
                } else {
                    mt.knn_indices(q, k).into_iter().map(|j| j as u32).collect()
                }
            })
            .collect()
    }
}

fn max_displacement(a: &Pose, b: &Pose, max_range: f64) -> f64 {
    (a.translation.vector - b.translation.vector).norm() + a.rotation.angle_to(&b.rotation) * max_range
}

fn neighbor_lists(world: &[StampedPoint], mt: &TemporalWindowMap, k: usize) -> Vec<Vec<u32>> {
    world
        .par_iter()
        .map(|p| mt.knn_indices(&p.position, k).into_iter().map(|i| i as u32).collect())
        .collect()
}

fn classify_with(
    world: &[StampedPoint],
    lists: &[Vec<u32>],
    mt: &TemporalWindowMap,
    params: &NormalParams,
    theta_thr: f64,
    viewpoint: &Vec3,
) -> Vec<StabilityLabel> {
    let pts = mt.points();
    world
        .par_iter()
        .zip(lists.par_iter())
        .map(|(q, list)| {
            let neighbors = list.iter().map(|&i| &pts[i as usize]);
            classify_stability(&estimate_st_normal_iter(q, neighbors, params, viewpoint), theta_thr)
        })
        .collect()
}

/// Labels world-frame points against the temporal map using freshly
/// searched neighbourhoods.
pub fn classify_points(
    world: &[StampedPoint],
    mt: &TemporalWindowMap,
    config: &RegistrationConfig,
    viewpoint: &Vec3,
) -> Vec<StabilityLabel> {
    let lists = neighbor_lists(world, mt, config.k_neighbors);
    classify_with(world, &lists, mt, &config.normal, config.theta_thr(), viewpoint)
}

fn transform_cloud(body: &[StampedPoint], pose: &Pose) -> Vec<StampedPoint> {
    body.par_iter().map(|p| StampedPoint::new(transform_point(pose, &p.position), p.time)).collect()
}

struct Problem<'a> {
    body: &'a [StampedPoint],
    /// (point index, plane)
    pairs: Vec<(usize, PlaneVoxel)>,
    prior: &'a NavState,
    information: &'a Matrix9,
    inv_var: f64,
    huber_delta: f64,
}

impl Problem<'_> {
    fn cost(&self, state: &NavState) -> f64 {
        let lidar: f64 = self
            .pairs
            .iter()
            .map(|(i, plane)| {
                let p = transform_point(&state.pose, &self.body[*i].position);
                huber_cost(plane.signed_distance(&p), self.huber_delta)
            })
            .sum();
        lidar * self.inv_var + PriorTerm::at(state, self.prior, self.information).cost()
    }

    fn linearize(&self, state: &NavState) -> (Matrix9, Vector9) {
        let n = self.pairs.len();
        let mut residuals = Vec::with_capacity(n);
        let mut jacobians = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for (i, plane) in &self.pairs {
            let (r, j) = point_to_plane_residual_and_jacobian(&state.pose, &self.body[*i].position, plane);
            residuals.push(r);
            jacobians.push(j);
            weights.push(huber_weight(r, self.huber_delta) * self.inv_var);
        }
        let prior = PriorTerm::at(state, self.prior, self.information);
        normal_equations(&residuals, &jacobians, &weights, Some(&prior))
    }

    /// One damped step that does not increase the cost; zero when every
    /// damping level fails. Returns the step and the damping to start from
    /// next time.
    fn levenberg_step(&self, state: &NavState, mut lambda: f64, max_steps: usize) -> Result<(Vector9, f64), RegistrationError> {
        let cost0 = self.cost(state);
        let (h, g) = self.linearize(state);
        for _ in 0..=max_steps {
            let delta = solve_damped(&h, &g, lambda, true, max_steps).ok_or(RegistrationError::SolveFailed)?;
            if self.cost(&apply_update(state, &delta)) <= cost0 {
                let next = if lambda < 1e-12 * h.trace() { 0.0 } else { lambda * 0.1 };
                return Ok((delta, next));
            }
            lambda = (lambda * 10.0).max(1e-6 * h.trace() / 9.0);
        }
        Ok((Vector9::zeros(), lambda))
    }
}

/// Registers one scan.
///
/// `body` holds the undistorted scan expressed in the body frame at the
/// prior's time, with original acquisition times. Labels in the result are
/// those of the last iteration (for [`RegistrationMode::Full`]), of the
/// prior (sequential), or all stable.
pub fn register_scan(
    body: &[StampedPoint],
    mt: &TemporalWindowMap,
    mv: &PlaneVoxelMap,
    prior: &Prior,
    config: &RegistrationConfig,
) -> Result<RegistrationResult, RegistrationError> {
    let start = Instant::now();
    if mv.plane_count() == 0 {
        return Err(RegistrationError::EmptyMap);
    }
    let information = prior.information().ok_or(RegistrationError::BadPrior)?;
    let finite_state = prior.state.position().iter().chain(prior.state.velocity.iter()).all(|v| v.is_finite())
        && prior.state.pose.rotation.coords.iter().all(|v| v.is_finite());
    if !finite_state {
        return Err(RegistrationError::BadPrior);
    }

    let n = body.len();
    let theta_thr = config.theta_thr();
    let max_range = body.iter().map(|p| p.position.norm()).fold(0.0, f64::max);
    let mut timing = RegistrationTiming::default();
    let mut state = prior.state;
    let mut labels = vec![StabilityLabel::Stable; n];
    let mut cache: Option<NeighborCache> = None;
    let mut classified = false;
    let mut lambda = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_norm = f64::INFINITY;
    let mut pairs: Vec<(usize, PlaneVoxel, VoxelKey)> = Vec::new();

    for _ in 0..config.max_iter {
        iterations += 1;
        let world = transform_cloud(body, &state.pose);

        let t0 = Instant::now();
        let reclassify = match config.mode {
            RegistrationMode::Full => true,
            RegistrationMode::Sequential => !classified,
            RegistrationMode::NoDynamic => false,
        };
        if reclassify {
            let stale = cache
                .as_ref()
                .is_none_or(|c| max_displacement(&c.pose, &state.pose, max_range) > config.cache_tol);
            if stale {
                cache = Some(NeighborCache::build(state.pose, &world, mt, config.k_neighbors));
            }
            let lists = cache.as_ref().expect("cache filled").lists(&world, mt, config.k_neighbors);
            let viewpoint = state.position();
            let fresh = classify_with(&world, &lists, mt, &config.normal, theta_thr, &viewpoint);
            if config.sticky_unstable && classified {
                for (l, f) in labels.iter_mut().zip(fresh) {
                    if !f.is_stable() {
                        *l = f;
                    }
                }
            } else {
                labels = fresh;
            }
            classified = true;
        }
        timing.normals_ms += t0.elapsed().as_secs_f64() * 1e3;

        let t1 = Instant::now();
        pairs = world
            .par_iter()
            .zip(labels.par_iter())
            .enumerate()
            .filter_map(|(i, (p, l))| {
                if !l.is_stable() {
                    return None;
                }
                mv.query_correspondence(&p.position).map(|c| (i, c.plane, c.key))
            })
            .collect();
        timing.correspondence_ms += t1.elapsed().as_secs_f64() * 1e3;
        if pairs.len() < config.min_stable_points {
            return Err(RegistrationError::Degenerate { got: pairs.len(), needed: config.min_stable_points });
        }

        let t2 = Instant::now();
        let problem = Problem {
            body,
            pairs: pairs.iter().map(|(i, p, _)| (*i, *p)).collect(),
            prior: &prior.state,
            information: &information,
            inv_var: 1.0 / (config.lidar_sigma * config.lidar_sigma),
            huber_delta: config.huber_delta,
        };
        let step;
        (step, lambda) = problem.levenberg_step(&state, lambda, config.max_damping_steps)?;
        state = apply_update(&state, &step);
        timing.solve_ms += t2.elapsed().as_secs_f64() * 1e3;

        last_norm = step.fixed_rows::<6>(0).norm();
        if last_norm < config.epsilon {
            converged = true;
            break;
        }
    }

    let world = transform_cloud(body, &state.pose);
    let mut correspondences = vec![None; n];
    for (i, plane, key) in &pairs {
        correspondences[*i] =
            Some(CorrespondenceRecord { plane: *key, residual: plane.signed_distance(&world[*i].position) });
    }
    let problem = Problem {
        body,
        pairs: pairs.iter().map(|(i, p, _)| (*i, *p)).collect(),
        prior: &prior.state,
        information: &information,
        inv_var: 1.0 / (config.lidar_sigma * config.lidar_sigma),
        huber_delta: config.huber_delta,
    };
    let (h, _) = problem.linearize(&state);
    let covariance = h.cholesky().map(|c| c.inverse()).unwrap_or(prior.covariance);

    timing.total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(RegistrationResult {
        state,
        covariance,
        labels,
        correspondences,
        iterations,
        converged,
        last_update_norm: last_norm,
        timing,
    })
}

/// Seeds both maps with already-registered world-frame frames, treating all
/// points as stable.
pub fn initialize_maps(
    frames: &[(f64, Vec<StampedPoint>)],
    mt: &mut TemporalWindowMap,
    mv: &mut PlaneVoxelMap,
) -> Result<(), TemporalMapError> {
    for (time, points) in frames {
        mt.push_frame(*time, points.iter().copied())?;
        mv.insert_static_points(points.iter().map(|p| &p.position));
    }
    Ok(())
}
