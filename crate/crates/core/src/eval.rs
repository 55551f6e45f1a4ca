//! Trajectory accuracy and static-map classification scores.

use nalgebra::{Matrix3, Rotation3, Translation3, UnitQuaternion};
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{Pose, Vec3};
use crate::scc::FinalLabel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no timestamp pairs within {max_dt} s")]
    NoPairs { max_dt: f64 },
    #[error("trajectory times must be strictly increasing (sample {index})")]
    NonMonotonic { index: usize },
    #[error("alignment is degenerate: {0}")]
    Degenerate(String),
    #[error("label count mismatch: {pred} predicted vs {truth} ground truth")]
    LengthMismatch { pred: usize, truth: usize },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    samples: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, Pose)>) -> Result<Self, EvalError> {
        if let Some(i) = samples.windows(2).position(|w| w[1].0 <= w[0].0) {
            return Err(EvalError::NonMonotonic { index: i + 1 });
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, Pose)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn transformed(&self, t: &Pose) -> Self {
        Self { samples: self.samples.iter().map(|(time, p)| (*time, t * p)).collect() }
    }
}

/// Pairs each sample of `a` with the nearest-in-time sample of `b` if the
/// gap is at most `max_dt`. On equal gaps the earlier `b` sample wins.
pub fn associate(a: &Trajectory, b: &Trajectory, max_dt: f64) -> Result<Vec<(Pose, Pose)>, EvalError> {
    Ok(associate_indices(a, b, max_dt)?.into_iter().map(|(i, j)| (a.samples[i].1, b.samples[j].1)).collect())
}

/// Sample indices of the pairs chosen by [`associate`].
pub fn associate_indices(a: &Trajectory, b: &Trajectory, max_dt: f64) -> Result<Vec<(usize, usize)>, EvalError> {
    assert!(max_dt > 0.0);
    let bs = b.samples();
    let mut out = Vec::new();
    for (i, (t, _)) in a.samples().iter().enumerate() {
        let k = bs.partition_point(|(tb, _)| tb < t);
        let mut best: Option<(f64, usize)> = None;
        for j in [k.wrapping_sub(1), k] {
            if let Some((tb, _)) = bs.get(j) {
                let d = (tb - t).abs();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
        }
        if let Some((d, j)) = best {
            if d <= max_dt {
                out.push((i, j));
            }
        }
    }
    if out.is_empty() {
        return Err(EvalError::NoPairs { max_dt });
    }
    Ok(out)
}

/// Rigid transform `T` minimizing `sum |T * est_i - truth_i|^2` (no scale).
pub fn umeyama_align(pairs: &[(Vec3, Vec3)]) -> Result<Pose, EvalError> {
    let n = pairs.len();
    if n < 3 {
        return Err(EvalError::Degenerate(format!("{n} position pairs, need at least 3")));
    }
    let inv = 1.0 / n as f64;
    let mu_e = pairs.iter().map(|(e, _)| e).sum::<Vec3>() * inv;
    let mu_g = pairs.iter().map(|(_, g)| g).sum::<Vec3>() * inv;
    let mut sigma = Matrix3::zeros();
    for (e, g) in pairs {
        sigma += (g - mu_g) * (e - mu_e).transpose();
    }
    sigma *= inv;
    let svd = sigma.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 1e-15 || sv[1] <= 1e-10 * sv[0] {
        return Err(EvalError::Degenerate(format!(
            "positions are collinear or coincident (singular values {:.3e}, {:.3e}, {:.3e})",
            sv[0], sv[1], sv[2]
        )));
    }
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // Flip the axis of the smallest singular value.
        let (imin, _) = svd.singular_values.argmin();
        s[(imin, imin)] = -1.0;
    }
    let r = u * s * v_t;
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let t = mu_g - rotation * mu_e;
    Ok(Pose::from_parts(Translation3::from(t), rotation))
}

/// Root-mean-square position error of `align * est` against truth.
pub fn ate_rmse(pairs: &[(Vec3, Vec3)], align: &Pose) -> f64 {
    assert!(!pairs.is_empty());
    let sum: f64 = pairs.iter().map(|(e, g)| (align.transform_point(&(*e).into()).coords - g).norm_squared()).sum();
    (sum / pairs.len() as f64).sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct AteReport {
    pub rmse: f64,
    pub pairs: usize,
    /// Estimate timestamps of the associated pairs.
    pub times: Vec<f64>,
    /// Per-pair position error after alignment, m.
    pub errors: Vec<f64>,
    pub alignment: [f64; 7],
}

/// Associates, aligns and scores `estimate` against `truth`.
pub fn evaluate_trajectory(estimate: &Trajectory, truth: &Trajectory, max_dt: f64) -> Result<AteReport, EvalError> {
    let idx = associate_indices(estimate, truth, max_dt)?;
    let pairs: Vec<(Vec3, Vec3)> = idx
        .iter()
        .map(|&(i, j)| (estimate.samples[i].1.translation.vector, truth.samples[j].1.translation.vector))
        .collect();
    let align = umeyama_align(&pairs)?;
    let errors: Vec<f64> =
        pairs.iter().map(|(e, g)| (align.transform_point(&(*e).into()).coords - g).norm()).collect();
    let q = align.rotation;
    let t = align.translation.vector;
    Ok(AteReport {
        rmse: ate_rmse(&pairs, &align),
        pairs: pairs.len(),
        times: idx.iter().map(|&(i, _)| estimate.samples[i].0).collect(),
        errors,
        alignment: [t.x, t.y, t.z, q.i, q.j, q.k, q.w],
    })
}

/// Static and dynamic recall in percent plus their harmonic mean.
/// A recall is `None` when the ground truth has no point of that class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MapScore {
    pub sa: Option<f64>,
    pub da: Option<f64>,
    pub ha: Option<f64>,
    pub static_correct: usize,
    pub static_total: usize,
    pub dynamic_correct: usize,
    pub dynamic_total: usize,
}

pub fn harmonic_accuracy(sa: f64, da: f64) -> f64 {
    if sa + da > 0.0 {
        2.0 * sa * da / (sa + da)
    } else {
        0.0
    }
}

pub fn map_scores(pred: &[FinalLabel], truth: &[FinalLabel]) -> Result<MapScore, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch { pred: pred.len(), truth: truth.len() });
    }
    let mut c = [[0usize; 2]; 2];
    for (p, t) in pred.iter().zip(truth) {
        c[t.is_dynamic() as usize][p.is_dynamic() as usize] += 1;
    }
    Ok(MapScore::from_counts(c[0][0], c[0][0] + c[0][1], c[1][1], c[1][0] + c[1][1]))
}

impl MapScore {
    pub fn from_counts(static_correct: usize, static_total: usize, dynamic_correct: usize, dynamic_total: usize) -> Self {
        let recall = |k: usize, n: usize| (n > 0).then(|| 100.0 * k as f64 / n as f64);
        let sa = recall(static_correct, static_total);
        let da = recall(dynamic_correct, dynamic_total);
        let ha = sa.zip(da).map(|(s, d)| harmonic_accuracy(s, d));
        Self { sa, da, ha, static_correct, static_total, dynamic_correct, dynamic_total }
    }

    /// Adds the counts of two scores.
    pub fn pooled(&self, other: &MapScore) -> MapScore {
        MapScore::from_counts(
            self.static_correct + other.static_correct,
            self.static_total + other.static_total,
            self.dynamic_correct + other.dynamic_correct,
            self.dynamic_total + other.dynamic_total,
        )
    }
}

impl Default for MapScore {
    fn default() -> Self {
        MapScore::from_counts(0, 0, 0, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = Vec3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        Pose::from_parts(Translation3::from(t), UnitQuaternion::from_scaled_axis(axis * 3.0))
    }

    fn random_traj(rng: &mut ChaCha8Rng, n: usize) -> Trajectory {
        Trajectory::new((0..n).map(|i| (i as f64 * 0.1, random_pose(rng))).collect()).unwrap()
    }

    fn positions(pairs: &[(Pose, Pose)]) -> Vec<(Vec3, Vec3)> {
        pairs.iter().map(|(a, b)| (a.translation.vector, b.translation.vector)).collect()
    }

    #[test]
    fn association_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_traj(&mut rng, 20);
        assert_eq!(associate(&a, &a, 0.01).unwrap().len(), 20);
        let late = Trajectory::new(a.samples().iter().map(|(t, p)| (t + 100.0, *p)).collect()).unwrap();
        assert_eq!(associate(&a, &late, 0.01), Err(EvalError::NoPairs { max_dt: 0.01 }));
    }

    #[test]
    fn association_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let b = random_traj(&mut rng, 50);
            let a = Trajectory::new(
                (0..60).map(|i| (i as f64 * 0.083 + rng.random_range(-0.004..0.004), random_pose(&mut rng))).collect(),
            )
            .unwrap();
            let got = associate(&a, &b, 0.01);
            let mut want = Vec::new();
            for (t, pa) in a.samples() {
                let mut best: Option<(f64, Pose)> = None;
                for (tb, pb) in b.samples() {
                    let d = (tb - t).abs();
                    if d <= 0.01 && best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, *pb));
                    }
                }
                if let Some((_, pb)) = best {
                    want.push((*pa, pb));
                }
            }
            match got {
                Ok(g) => assert_eq!(g, want),
                Err(_) => assert!(want.is_empty()),
            }
        }
    }

    #[test]
    fn identical_trajectories_align_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_traj(&mut rng, 30);
        let pairs = positions(&associate(&a, &a, 0.01).unwrap());
        let t = umeyama_align(&pairs).unwrap();
        assert!(t.translation.vector.norm() < 1e-9);
        assert!(t.rotation.angle() < 1e-9);
        assert!(ate_rmse(&pairs, &t) < 1e-9);
    }

    #[test]
    fn translated_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_traj(&mut rng, 30);
        let est = gt.transformed(&Pose::translation(1.0, 0.0, 0.0));
        let pairs = positions(&associate(&est, &gt, 0.01).unwrap());
        let t = umeyama_align(&pairs).unwrap();
        assert!((t.translation.vector - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-9);
        assert!(ate_rmse(&pairs, &t) < 1e-9);
    }

    #[test]
    fn random_rigid_transforms_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let gt: Vec<Vec3> = (0..rng.random_range(10..40))
                .map(|_| Vec3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-5.0..5.0)))
                .collect();
            let x = random_pose(&mut rng);
            let pairs: Vec<(Vec3, Vec3)> = gt.iter().map(|g| (x.transform_point(&(*g).into()).coords, *g)).collect();
            let t = umeyama_align(&pairs).unwrap();
            let back = t * x;
            assert!(back.translation.vector.norm() < 1e-9, "{} {}", back.translation.vector.norm(), gt.len());
            assert!(back.rotation.angle() < 1e-9);
            assert!(ate_rmse(&pairs, &t) < 1e-9);
        }
    }

    #[test]
    fn collinear_positions_are_rejected() {
        let pairs: Vec<(Vec3, Vec3)> = (0..10).map(|i| (Vec3::x() * i as f64, Vec3::x() * i as f64)).collect();
        assert!(matches!(umeyama_align(&pairs), Err(EvalError::Degenerate(_))));
        assert!(matches!(umeyama_align(&pairs[..2]), Err(EvalError::Degenerate(_))));
    }

    #[test]
    fn alternating_error_gives_its_magnitude() {
        let n = 1000;
        let pairs: Vec<(Vec3, Vec3)> = (0..n)
            .map(|i| {
                let g = Vec3::new(i as f64 * 0.1, (i as f64 * 0.01).sin(), 0.0);
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                (g + Vec3::new(0.0, 0.0, 0.1 * sign), g)
            })
            .collect();
        let t = umeyama_align(&pairs).unwrap();
        let rmse = ate_rmse(&pairs, &t);
        assert!((rmse - 0.1).abs() < 1e-3, "{rmse}");
    }

    #[test]
    fn random_errors_match_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pairs: Vec<(Vec3, Vec3)> = (0..200)
            .map(|i| {
                let g = Vec3::new(i as f64, (i as f64 * 0.1).cos() * 5.0, 0.0);
                (g + Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)), g)
            })
            .collect();
        let id = Pose::identity();
        let direct = (pairs.iter().map(|(e, g)| (e - g).norm_squared()).sum::<f64>() / 200.0).sqrt();
        assert!((ate_rmse(&pairs, &id) - direct).abs() < 1e-15);
    }

    #[test]
    fn score_examples() {
        use FinalLabel::*;
        let truth = [Static, Static, Dynamic, Dynamic];
        let s = map_scores(&truth, &truth).unwrap();
        assert_eq!((s.sa, s.da, s.ha), (Some(100.0), Some(100.0), Some(100.0)));
        assert!((harmonic_accuracy(80.0, 80.0) - 80.0).abs() < 1e-12);
        assert!((harmonic_accuracy(100.0, 50.0) - 66.67).abs() < 0.01);
        let s = map_scores(&[Static, Static], &[Static, Static]).unwrap();
        assert_eq!(s.da, None);
        assert_eq!(s.ha, None);
        assert!(matches!(map_scores(&[Static], &truth), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn hand_built_fixture() {
        use FinalLabel::*;
        // 12 static (10 right), 8 dynamic (6 right).
        let mut truth = vec![Static; 12];
        truth.extend(vec![Dynamic; 8]);
        let mut pred = vec![Static; 10];
        pred.extend(vec![Dynamic; 2]);
        pred.extend(vec![Dynamic; 6]);
        pred.extend(vec![Static; 2]);
        let s = map_scores(&pred, &truth).unwrap();
        let sa = 100.0 * 10.0 / 12.0;
        assert_eq!(s.sa, Some(sa));
        assert_eq!(s.da, Some(75.0));
        assert_eq!(s.ha, Some(2.0 * sa * 75.0 / (sa + 75.0)));
    }

    fn flip(v: &[FinalLabel]) -> Vec<FinalLabel> {
        v.iter().map(|l| if l.is_dynamic() { FinalLabel::Static } else { FinalLabel::Dynamic }).collect()
    }

    proptest! {
        #[test]
        fn rmse_is_invariant_to_rigid_transforms(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_traj(&mut rng, 25);
            let est = Trajectory::new(gt.samples().iter().map(|(t, p)| {
                let noise = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
                (*t, Pose::translation(noise.x, noise.y, noise.z) * p)
            }).collect()).unwrap();
            let a = evaluate_trajectory(&est, &gt, 0.01).unwrap().rmse;
            let b = evaluate_trajectory(&est.transformed(&random_pose(&mut rng)), &gt, 0.01).unwrap().rmse;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn harmonic_mean_is_bounded(labels in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
            let to = |b: bool| if b { FinalLabel::Dynamic } else { FinalLabel::Static };
            let pred: Vec<_> = labels.iter().map(|(p, _)| to(*p)).collect();
            let truth: Vec<_> = labels.iter().map(|(_, t)| to(*t)).collect();
            let s = map_scores(&pred, &truth).unwrap();
            if let (Some(sa), Some(da), Some(ha)) = (s.sa, s.da, s.ha) {
                prop_assert!(sa.min(da) - 1e-9 <= ha && ha <= sa.max(da) + 1e-9);
                let direct = if sa + da > 0.0 { 2.0 * sa * da / (sa + da) } else { 0.0 };
                prop_assert_eq!(ha, direct);
            }
            let swapped = map_scores(&flip(&pred), &flip(&truth)).unwrap();
            prop_assert_eq!(swapped.sa, s.da);
            prop_assert_eq!(swapped.da, s.sa);
        }
    }
}
