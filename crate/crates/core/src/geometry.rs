//! Core types and spatio-temporal normal estimation.
//!
//! A surface sweeping through space-time traces a hypersurface `g(x, y, z, t) = 0`.
//! Its 4D normal `(a, b, c, d)` has a temporal component `d = -(n_s . v)`, where
//! `n_s = (a, b, c)` and `v` is the surface velocity. Points whose normal tilts
//! into the time axis are moving (or their neighbourhood is unreliable).

use nalgebra::{Isometry3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Vec4 = Vector4<f64>;
/// Rigid transform (unit quaternion + translation).
pub type Pose = Isometry3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate neighbourhood: need at least {needed} points, got {got}")]
    DegenerateNeighborhood { needed: usize, got: usize },
    #[error("temporal angle undefined for the zero vector")]
    ZeroNormal,
}

/// A 3D position with its acquisition time in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StampedPoint {
    pub position: Vec3,
    pub time: f64,
}

impl StampedPoint {
    pub fn new(position: Vec3, time: f64) -> Self {
        Self { position, time }
    }

    /// Space-time coordinates with time multiplied by `time_scale`.
    #[inline]
    pub fn scaled(&self, time_scale: f64) -> Vec4 {
        Vec4::new(self.position.x, self.position.y, self.position.z, self.time * time_scale)
    }

    pub fn transformed(&self, pose: &Pose) -> Self {
        Self { position: transform_point(pose, &self.position), time: self.time }
    }
}

/// Applies a pose to a position vector.
#[inline]
pub fn transform_point(pose: &Pose, p: &Vec3) -> Vec3 {
    pose.rotation * p + pose.translation.vector
}

/// Symmetric 4x4 matrix stored as its upper triangle, row-major:
/// `(0,0) (0,1) (0,2) (0,3) (1,1) (1,2) (1,3) (2,2) (2,3) (3,3)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SymMat4 {
    upper: [f64; 10],
}

const SYM_INDEX: [[usize; 4]; 4] = [[0, 1, 2, 3], [1, 4, 5, 6], [2, 5, 7, 8], [3, 6, 8, 9]];

impl SymMat4 {
    pub fn from_upper(upper: [f64; 10]) -> Self {
        Self { upper }
    }

    /// Takes the upper triangle of `m`; the lower triangle is ignored.
    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let mut upper = [0.0; 10];
        for i in 0..4 {
            for j in i..4 {
                upper[SYM_INDEX[i][j]] = m[(i, j)];
            }
        }
        Self { upper }
    }

    pub fn identity() -> Self {
        Self::diagonal([1.0; 4])
    }

    pub fn diagonal(d: [f64; 4]) -> Self {
        let mut upper = [0.0; 10];
        for (i, v) in d.into_iter().enumerate() {
            upper[SYM_INDEX[i][i]] = v;
        }
        Self { upper }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.upper[SYM_INDEX[i][j]]
    }

    pub fn upper(&self) -> &[f64; 10] {
        &self.upper
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.get(i, j))
    }

    pub fn trace(&self) -> f64 {
        (0..4).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.to_matrix().norm()
    }

    /// Eigenvalues and matching unit eigenvectors (as columns), unordered,
    /// by cyclic Jacobi rotations.
    pub fn eigen(&self) -> ([f64; 4], Matrix4<f64>) {
        let mut a = [[0.0f64; 4]; 4];
        for (i, row) in a.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.get(i, j);
            }
        }
        let mut v = [[0.0f64; 4]; 4];
        for (i, row) in v.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let scale: f64 = a.iter().flatten().map(|x| x * x).sum();
        for _ in 0..50 {
            let off: f64 = (0..4).flat_map(|p| (p + 1..4).map(move |q| (p, q))).map(|(p, q)| a[p][q] * a[p][q]).sum();
            if off <= scale * 1e-30 {
                break;
            }
            for p in 0..3 {
                for q in p + 1..4 {
                    let apq = a[p][q];
                    if apq * apq <= scale * 1e-34 {
                        a[p][q] = 0.0;
                        a[q][p] = 0.0;
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                    let t = if theta.abs() > 1e150 {
                        0.5 / theta
                    } else {
                        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                    };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    a[p][p] -= t * apq;
                    a[q][q] += t * apq;
                    a[p][q] = 0.0;
                    a[q][p] = 0.0;
                    for k in 0..4 {
                        if k != p && k != q {
                            let (kp, kq) = (a[k][p], a[k][q]);
                            a[k][p] = c * kp - s * kq;
                            a[k][q] = s * kp + c * kq;
                            a[p][k] = a[k][p];
                            a[q][k] = a[k][q];
                        }
                    }
                    for row in v.iter_mut() {
                        let (kp, kq) = (row[p], row[q]);
                        row[p] = c * kp - s * kq;
                        row[q] = s * kp + c * kq;
                    }
                }
            }
        }
        ([a[0][0], a[1][1], a[2][2], a[3][3]], Matrix4::from_fn(|i, j| v[i][j]))
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    /// Tight box around `points`; `None` when empty.
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        Some(it.fold(Self { min: first, max: first }, |b, p| Self { min: b.min.inf(p), max: b.max.sup(p) }))
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Unit 4-vector `(a, b, c, d)`: spatial normal plus temporal component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatioTemporalNormal {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl SpatioTemporalNormal {
    pub fn from_vector(v: &Vec4) -> Self {
        Self { a: v.x, b: v.y, c: v.z, d: v.w }
    }

    /// Normalizes `v`; returns `None` for the zero vector.
    pub fn normalized(v: &Vec4) -> Option<Self> {
        let n = v.norm();
        (n > 0.0 && n.is_finite()).then(|| Self::from_vector(&(v / n)))
    }

    pub fn as_vector(&self) -> Vec4 {
        Vec4::new(self.a, self.b, self.c, self.d)
    }

    pub fn spatial(&self) -> Vec3 {
        Vec3::new(self.a, self.b, self.c)
    }

    /// `d / |(a, b, c)|`: the velocity along the spatial normal, negated, in
    /// scaled-time units.
    pub fn temporal_slope(&self) -> f64 {
        self.d / self.spatial().norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StabilityLabel {
    Stable,
    Unstable,
}

impl StabilityLabel {
    pub fn is_stable(self) -> bool {
        matches!(self, StabilityLabel::Stable)
    }
}

/// Covariance (population divisor) and centroid of time-scaled space-time
/// coordinates.
pub fn spacetime_covariance(
    neighborhood: &[StampedPoint],
    time_scale: f64,
) -> Result<(SymMat4, Vec4), GeometryError> {
    spacetime_covariance_iter(neighborhood.iter(), time_scale)
}

/// Same as [`spacetime_covariance`] over any re-iterable source of points.
pub fn spacetime_covariance_iter<'a, I>(
    points: I,
    time_scale: f64,
) -> Result<(SymMat4, Vec4), GeometryError>
where
    I: Iterator<Item = &'a StampedPoint> + Clone,
{
    let mut n = 0usize;
    let mut sum = Vec4::zeros();
    for p in points.clone() {
        sum += p.scaled(time_scale);
        n += 1;
    }
    if n < 2 {
        return Err(GeometryError::DegenerateNeighborhood { needed: 2, got: n });
    }
    let inv_n = 1.0 / n as f64;
    let mean = sum * inv_n;
    let mut acc = [0.0; 10];
    for p in points {
        let r = p.scaled(time_scale) - mean;
        acc[0] += r.x * r.x;
        acc[1] += r.x * r.y;
        acc[2] += r.x * r.z;
        acc[3] += r.x * r.w;
        acc[4] += r.y * r.y;
        acc[5] += r.y * r.z;
        acc[6] += r.y * r.w;
        acc[7] += r.z * r.z;
        acc[8] += r.z * r.w;
        acc[9] += r.w * r.w;
    }
    for v in &mut acc {
        *v *= inv_n;
    }
    Ok((SymMat4::from_upper(acc), mean))
}

/// Flips `v` so its spatial part points along `reference`. When the spatial
/// part is (nearly) orthogonal to the reference, falls back to `d >= 0`, then
/// to the first non-zero component being positive.
pub fn canonicalize_sign(v: Vec4, reference: &Vec3) -> Vec4 {
    let spatial = v.xyz();
    let dot = spatial.dot(reference);
    let scale = v.norm() * reference.norm();
    const TOL: f64 = 1e-12;
    if dot.abs() > TOL * scale.max(f64::MIN_POSITIVE) {
        return if dot < 0.0 { -v } else { v };
    }
    if v.w.abs() > TOL * v.norm() {
        return if v.w < 0.0 { -v } else { v };
    }
    match v.iter().find(|c| c.abs() > TOL * v.norm()) {
        Some(c) if *c < 0.0 => -v,
        _ => v,
    }
}

/// Reference direction used by [`smallest_eigenvector`] for its sign rule.
pub const EIGEN_SIGN_REFERENCE: Vector3<f64> = Vector3::new(0.0, 0.0, 1.0);

fn lexicographic_gt(a: &Vec4, b: &Vec4) -> bool {
    for i in 0..4 {
        if a[i] != b[i] {
            return a[i] > b[i];
        }
    }
    false
}

/// Smallest eigenpair of a symmetric 4x4 matrix.
///
/// The eigenvector is unit-norm with its sign fixed by [`canonicalize_sign`]
/// against [`EIGEN_SIGN_REFERENCE`]. When the two smallest eigenvalues are
/// within `1e-12 * trace`, the lexicographically largest canonical candidate
/// is returned.
pub fn smallest_eigenvector(m: &SymMat4) -> (f64, Vec4) {
    let (values, vectors) = m.eigen();
    let (imin, lmin) = values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, l)| if l < best.1 { (i, l) } else { best });
    let tie_tol = 1e-12 * m.trace().abs();
    let mut best: Option<Vec4> = None;
    for (i, l) in values.iter().enumerate() {
        if i != imin && *l - lmin > tie_tol {
            continue;
        }
        let v: Vec4 = vectors.column(i).into_owned().normalize();
        let v = canonicalize_sign(v, &EIGEN_SIGN_REFERENCE);
        best = match best {
            Some(b) if !lexicographic_gt(&v, &b) => Some(b),
            _ => Some(v),
        };
    }
    (lmin, best.expect("at least one eigenpair"))
}

/// Why a neighbourhood could not support a hyperplane fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degeneracy {
    TooFewNeighbors,
    NoTemporalSpread,
    AmbiguousHyperplane,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormalEstimate {
    Normal(SpatioTemporalNormal),
    Degenerate(Degeneracy),
}

impl NormalEstimate {
    pub fn normal(&self) -> Option<&SpatioTemporalNormal> {
        match self {
            NormalEstimate::Normal(n) => Some(n),
            NormalEstimate::Degenerate(_) => None,
        }
    }
}

/// Parameters of the space-time hyperplane fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalParams {
    /// Multiplies times before accumulation (meters per second).
    pub time_scale: f64,
    /// Minimum number of neighbours (query excluded).
    pub k_min: usize,
    /// Minimum span of acquisition times in the neighbourhood, seconds.
    pub min_time_span: f64,
    /// Upper bound on `lambda_min / lambda_second`.
    pub max_eigen_ratio: f64,
}

impl Default for NormalParams {
    fn default() -> Self {
        Self { time_scale: 2.5, k_min: 8, min_time_span: 0.05, max_eigen_ratio: 0.3 }
    }
}

/// Fits a space-time hyperplane to `query` plus `neighbors` and returns its
/// normal, oriented so the spatial part faces `viewpoint`.
pub fn estimate_st_normal(
    query: &StampedPoint,
    neighbors: &[StampedPoint],
    params: &NormalParams,
    viewpoint: &Vec3,
) -> NormalEstimate {
    estimate_st_normal_iter(query, neighbors.iter(), params, viewpoint)
}

/// [`estimate_st_normal`] over any re-iterable neighbour sequence.
pub fn estimate_st_normal_iter<'a, I>(
    query: &'a StampedPoint,
    neighbors: I,
    params: &NormalParams,
    viewpoint: &Vec3,
) -> NormalEstimate
where
    I: Iterator<Item = &'a StampedPoint> + Clone,
{
    if neighbors.clone().count() < params.k_min {
        return NormalEstimate::Degenerate(Degeneracy::TooFewNeighbors);
    }
    let all = std::iter::once(query).chain(neighbors);
    let (tmin, tmax) = all
        .clone()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.time), hi.max(p.time)));
    if tmax - tmin < params.min_time_span {
        return NormalEstimate::Degenerate(Degeneracy::NoTemporalSpread);
    }
    let (cov, _) = match spacetime_covariance_iter(all, params.time_scale) {
        Ok(c) => c,
        Err(_) => return NormalEstimate::Degenerate(Degeneracy::TooFewNeighbors),
    };
    normal_from_covariance(&cov, query, params, viewpoint)
}

pub(crate) fn normal_from_covariance(
    cov: &SymMat4,
    query: &StampedPoint,
    params: &NormalParams,
    viewpoint: &Vec3,
) -> NormalEstimate {
    let (values, vectors) = cov.eigen();
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let l0 = values[order[0]].max(0.0);
    let l1 = values[order[1]].max(0.0);
    if l1 <= 0.0 || l0 > params.max_eigen_ratio * l1 {
        return NormalEstimate::Degenerate(Degeneracy::AmbiguousHyperplane);
    }
    let v: Vec4 = vectors.column(order[0]).into_owned().normalize();
    let v = canonicalize_sign(v, &(viewpoint - query.position));
    NormalEstimate::Normal(SpatioTemporalNormal::from_vector(&v))
}

/// Temporal component implied by a surface velocity: `d = -(n . v)`.
#[inline]
pub fn predicted_temporal_component(spatial_normal: &Vec3, velocity: &Vec3) -> f64 {
    -(spatial_normal.x * velocity.x + spatial_normal.y * velocity.y + spatial_normal.z * velocity.z)
}

/// Angle between a 4D normal and its spatial projection `(a, b, c, 0)`.
pub fn temporal_angle(n: &SpatioTemporalNormal) -> Result<f64, GeometryError> {
    let s = n.spatial().norm();
    if s == 0.0 && n.d == 0.0 {
        return Err(GeometryError::ZeroNormal);
    }
    Ok(n.d.abs().atan2(s))
}

pub fn classify_stability(estimate: &NormalEstimate, theta_thr: f64) -> StabilityLabel {
    match estimate {
        NormalEstimate::Degenerate(_) => StabilityLabel::Unstable,
        NormalEstimate::Normal(n) => match temporal_angle(n) {
            Ok(theta) if theta <= theta_thr => StabilityLabel::Stable,
            _ => StabilityLabel::Unstable,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sp(x: f64, y: f64, z: f64, t: f64) -> StampedPoint {
        StampedPoint::new(Vec3::new(x, y, z), t)
    }

    #[test]
    fn covariance_of_duplicates_is_zero() {
        let p = sp(1.0, 2.0, 3.0, 0.5);
        let (cov, mean) = spacetime_covariance(&[p, p], 2.0).unwrap();
        assert!(cov.upper().iter().all(|v| *v == 0.0));
        assert_eq!(mean, Vec4::new(1.0, 2.0, 3.0, 1.0));
    }

    #[test]
    fn covariance_three_points_hand_computed() {
        let pts = [sp(0.0, 0.0, 0.0, 0.0), sp(1.0, 0.0, 0.0, 0.0), sp(0.0, 1.0, 0.0, 0.0)];
        let (cov, mean) = spacetime_covariance(&pts, 1.0).unwrap();
        assert!((mean - Vec4::new(1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0)).norm() < 1e-15);
        assert!((cov.get(0, 0) - 2.0 / 9.0).abs() < 1e-15);
        assert!((cov.get(1, 1) - 2.0 / 9.0).abs() < 1e-15);
        assert!((cov.get(0, 1) + 1.0 / 9.0).abs() < 1e-15);
        for i in 0..4 {
            assert_eq!(cov.get(2, i), 0.0);
            assert_eq!(cov.get(3, i), 0.0);
        }
    }

    #[test]
    fn covariance_rejects_single_point() {
        assert_eq!(
            spacetime_covariance(&[sp(0.0, 0.0, 0.0, 0.0)], 1.0),
            Err(GeometryError::DegenerateNeighborhood { needed: 2, got: 1 })
        );
    }

    #[test]
    fn eigen_of_diagonal() {
        let (l, v) = smallest_eigenvector(&SymMat4::diagonal([3.0, 2.0, 1.0, 0.5]));
        assert!((l - 0.5).abs() < 1e-12);
        assert!((v - Vec4::new(0.0, 0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn eigen_of_identity_is_deterministic() {
        let (l, v) = smallest_eigenvector(&SymMat4::identity());
        assert!((l - 1.0).abs() < 1e-12);
        assert!((v.norm() - 1.0).abs() < 1e-12);
        let (_, v2) = smallest_eigenvector(&SymMat4::identity());
        assert_eq!(v, v2);
        // Every candidate is canonical and the largest one is returned.
        assert!((v - Vec4::new(1.0, 0.0, 0.0, 0.0)).norm() < 1e-12, "{v}");
    }

    fn random_sym(rng: &mut ChaCha8Rng, spread: f64) -> SymMat4 {
        // Q diag(l) Q^T with eigenvalues spanning `spread` decades.
        let q = nalgebra::Matrix4::<f64>::from_fn(|_, _| rng.random_range(-1.0..1.0)).qr().q();
        let l = Vector4::from_fn(|_, _| 10f64.powf(rng.random_range(-spread..0.0)));
        SymMat4::from_matrix(&(q * Matrix4::from_diagonal(&l) * q.transpose()))
    }

    #[test]
    fn jacobi_eigen_matches_reference_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..2000 {
            let m = random_sym(&mut rng, if i % 2 == 0 { 2.0 } else { 8.0 });
            let (values, vectors) = m.eigen();
            let a = m.to_matrix();
            let norm = a.norm();
            for k in 0..4 {
                let v = vectors.column(k);
                assert!((v.norm() - 1.0).abs() < 1e-12);
                assert!((a * v - v * values[k]).norm() <= 1e-13 * norm, "residual {i}");
            }
            assert!((vectors.transpose() * vectors - Matrix4::identity()).norm() < 1e-12);
            let mut got = values;
            got.sort_by(f64::total_cmp);
            let mut want: Vec<f64> = nalgebra::SymmetricEigen::new(a).eigenvalues.iter().copied().collect();
            want.sort_by(f64::total_cmp);
            for k in 0..4 {
                assert!((got[k] - want[k]).abs() <= 1e-13 * norm, "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn jacobi_eigen_handles_zero_and_repeated() {
        let (values, vectors) = SymMat4::from_upper([0.0; 10]).eigen();
        assert_eq!(values, [0.0; 4]);
        assert_eq!(vectors, Matrix4::identity());
        let (values, _) = SymMat4::from_upper([2.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 0.0, 2.0]).eigen();
        let mut v = values;
        v.sort_by(f64::total_cmp);
        assert!((v[0] - 1.0).abs() < 1e-15 && (v[3] - 3.0).abs() < 1e-15 && v[1] == 2.0 && v[2] == 2.0);
    }

    fn plane_samples(
        rng: &mut ChaCha8Rng,
        n: usize,
        times: &[f64],
        point_at: impl Fn(f64, f64, f64) -> Vec3,
    ) -> Vec<StampedPoint> {
        (0..n)
            .map(|i| {
                let t = times[i % times.len()];
                let u = rng.random_range(-0.5..0.5);
                let w = rng.random_range(-0.5..0.5);
                StampedPoint::new(point_at(u, w, t), t)
            })
            .collect()
    }

    #[test]
    fn static_plane_has_zero_temporal_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = plane_samples(&mut rng, 40, &[0.0, 0.1], |u, w, _| Vec3::new(u, w, 0.0));
        let params = NormalParams { time_scale: 2.5, ..Default::default() };
        let q = pts[0];
        let est = estimate_st_normal(&q, &pts[1..], &params, &Vec3::new(0.0, 0.0, 5.0));
        let n = est.normal().expect("non-degenerate");
        assert!(n.d.abs() < 1e-6);
        assert!((n.as_vector() - Vec4::new(0.0, 0.0, 1.0, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn plane_moving_along_normal_tilts_into_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let times: Vec<f64> = (0..5).map(|i| i as f64 * 0.1).collect();
        // x - v t = 0 with v = 1
        let pts = plane_samples(&mut rng, 60, &times, |u, w, t| Vec3::new(t, u, w));
        let params = NormalParams { time_scale: 1.0, ..Default::default() };
        let est = estimate_st_normal(&pts[0], &pts[1..], &params, &Vec3::new(5.0, 0.0, 0.0));
        let n = est.normal().unwrap();
        assert!((n.temporal_slope() + 1.0).abs() < 1e-3, "{n:?}");
        assert!((temporal_angle(n).unwrap().to_degrees() - 45.0).abs() < 0.1);
        assert_eq!(classify_stability(&est, 5.7f64.to_radians()), StabilityLabel::Unstable);
    }

    #[test]
    fn in_plane_sliding_is_static() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let times: Vec<f64> = (0..4).map(|i| i as f64 * 0.1).collect();
        let pts = plane_samples(&mut rng, 40, &times, |u, w, t| Vec3::new(u + 2.0 * t, w, 0.0));
        let params = NormalParams { time_scale: 1.0, ..Default::default() };
        let est = estimate_st_normal(&pts[0], &pts[1..], &params, &Vec3::new(0.0, 0.0, 1.0));
        assert!(est.normal().unwrap().d.abs() < 1e-6);
    }

    #[test]
    fn degenerate_neighbourhoods() {
        let params = NormalParams::default();
        let q = sp(0.0, 0.0, 0.0, 0.0);
        let few: Vec<_> = (0..3).map(|i| sp(i as f64, 0.0, 0.0, 0.1)).collect();
        assert_eq!(
            estimate_st_normal(&q, &few, &params, &Vec3::zeros()),
            NormalEstimate::Degenerate(Degeneracy::TooFewNeighbors)
        );
        let same_time: Vec<_> = (0..10).map(|i| sp(i as f64 * 0.1, (i % 3) as f64 * 0.1, 0.0, 0.0)).collect();
        let est = estimate_st_normal(&q, &same_time, &params, &Vec3::zeros());
        assert_eq!(est, NormalEstimate::Degenerate(Degeneracy::NoTemporalSpread));
        assert_eq!(classify_stability(&est, 0.1), StabilityLabel::Unstable);
    }

    #[test]
    fn predicted_temporal_component_examples() {
        assert_eq!(predicted_temporal_component(&Vec3::new(0.0, 1.0, 0.0), &Vec3::zeros()), 0.0);
        assert_eq!(predicted_temporal_component(&Vec3::x(), &Vec3::new(2.0, 0.0, 0.0)), -2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let n = Vec3::new(rng.random(), rng.random(), rng.random()).normalize();
            let v = Vec3::new(rng.random(), rng.random(), rng.random()) * 3.0;
            let oracle = -(n[0] * v[0] + n[1] * v[1] + n[2] * v[2]);
            assert_eq!(predicted_temporal_component(&n, &v), oracle);
        }
    }

    #[test]
    fn temporal_angle_examples() {
        let n = SpatioTemporalNormal { a: 0.0, b: 0.0, c: 1.0, d: 0.0 };
        assert_eq!(temporal_angle(&n).unwrap(), 0.0);
        let d: f64 = 0.0998;
        let s = (1.0 - d * d).sqrt();
        let n = SpatioTemporalNormal { a: s, b: 0.0, c: 0.0, d };
        assert!((temporal_angle(&n).unwrap().to_degrees() - 5.73).abs() < 0.05);
        let eps = 1e-9;
        let n = SpatioTemporalNormal::normalized(&Vec4::new(eps, 0.0, 0.0, 1.0)).unwrap();
        assert!((temporal_angle(&n).unwrap().to_degrees() - 90.0).abs() < 1e-6);
        let z = SpatioTemporalNormal { a: 0.0, b: 0.0, c: 0.0, d: 0.0 };
        assert_eq!(temporal_angle(&z), Err(GeometryError::ZeroNormal));
    }

    #[test]
    fn classify_examples() {
        let thr = 5.7f64.to_radians();
        let stat = NormalEstimate::Normal(SpatioTemporalNormal { a: 0.0, b: 0.0, c: 1.0, d: 0.0 });
        assert_eq!(classify_stability(&stat, thr), StabilityLabel::Stable);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let mov = NormalEstimate::Normal(SpatioTemporalNormal { a: h, b: 0.0, c: 0.0, d: -h });
        assert_eq!(classify_stability(&mov, thr), StabilityLabel::Unstable);
        let deg = NormalEstimate::Degenerate(Degeneracy::AmbiguousHyperplane);
        assert_eq!(classify_stability(&deg, 1.5), StabilityLabel::Unstable);
    }

    #[test]
    fn canonical_sign_faces_reference() {
        let v = Vec4::new(0.0, 0.0, -1.0, 0.2);
        assert!(canonicalize_sign(v, &Vec3::z()).z > 0.0);
        let v = Vec4::new(0.0, 0.0, 0.0, -1.0);
        assert_eq!(canonicalize_sign(v, &Vec3::z()), Vec4::new(0.0, 0.0, 0.0, 1.0));
    }

    fn two_pass_covariance(pts: &[StampedPoint], time_scale: f64) -> (Matrix4<f64>, Vec4) {
        let n = pts.len() as f64;
        let mut mean = Vec4::zeros();
        for p in pts {
            mean += Vec4::new(p.position.x, p.position.y, p.position.z, p.time * time_scale);
        }
        mean /= n;
        let mut cov = Matrix4::zeros();
        for p in pts {
            let d = Vec4::new(p.position.x, p.position.y, p.position.z, p.time * time_scale) - mean;
            cov += d * d.transpose();
        }
        (cov / n, mean)
    }

    fn random_neighbourhood(rng: &mut ChaCha8Rng, n: usize) -> Vec<StampedPoint> {
        let centre = Vec3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-5.0..5.0));
        let spread = rng.random_range(0.01..2.0);
        let t0 = rng.random_range(0.0..1000.0);
        (0..n)
            .map(|_| {
                let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                sp(centre.x + d.x * spread, centre.y + d.y * spread, centre.z + d.z * spread, t0 + rng.random_range(0.0..0.5))
            })
            .collect()
    }

    #[test]
    fn covariance_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..1500 {
            let n = rng.random_range(2..80);
            let pts = random_neighbourhood(&mut rng, n);
            let ts = rng.random_range(0.1..10.0);
            let (cov, mean) = spacetime_covariance(&pts, ts).unwrap();
            let (oc, om) = two_pass_covariance(&pts, ts);
            let scale = oc.norm().max(1e-300);
            for i in 0..4 {
                for j in 0..4 {
                    assert!((cov.get(i, j) - oc[(i, j)]).abs() <= 1e-10 * scale, "entry ({i},{j}) of n={n}");
                }
            }
            assert!((mean - om).norm() <= 1e-12 * om.norm());
        }
    }

    /// Noisy samples of a plane with random normal translating at `v`.
    fn moving_plane(rng: &mut ChaCha8Rng, normal: &Vec3, v: &Vec3, n: usize) -> Vec<StampedPoint> {
        let normal = normal.normalize();
        let u = normal.cross(&Vec3::new(0.3, -0.5, 0.8)).normalize();
        let w = normal.cross(&u);
        let origin = Vec3::new(4.0, 1.0, 0.5);
        (0..n)
            .map(|i| {
                let t = (i % 5) as f64 * 0.1;
                let p = origin + v * t + u * rng.random_range(-0.6..0.6) + w * rng.random_range(-0.6..0.6)
                    + normal * rng.random_range(-0.005..0.005);
                StampedPoint::new(p, t)
            })
            .collect()
    }

    proptest::proptest! {
        #[test]
        fn spatial_rotation_rotates_the_normal(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut r3 = || Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let (normal, v, axis) = (r3(), r3() * 2.0, r3() * 3.0);
            proptest::prop_assume!(normal.norm() > 0.1);
            let pts = moving_plane(&mut rng, &normal, &v, 40);
            let rot = nalgebra::Rotation3::new(axis);
            let rotated: Vec<StampedPoint> = pts.iter().map(|p| StampedPoint::new(rot * p.position, p.time)).collect();
            let params = NormalParams::default();
            let view = Vec3::zeros();
            let a = estimate_st_normal(&pts[0], &pts[1..], &params, &view);
            let b = estimate_st_normal(&rotated[0], &rotated[1..], &params, &view);
            match (a.normal(), b.normal()) {
                (Some(a), Some(b)) => {
                    proptest::prop_assert!((rot * a.spatial() - b.spatial()).norm() < 1e-9);
                    proptest::prop_assert!((a.d - b.d).abs() < 1e-9);
                    let (ta, tb) = (temporal_angle(a).unwrap(), temporal_angle(b).unwrap());
                    proptest::prop_assert!((ta - tb).abs() < 1e-9);
                }
                (None, None) => {}
                _ => proptest::prop_assert!(false, "degeneracy changed under rotation"),
            }
        }
    }
}
