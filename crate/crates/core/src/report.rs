//! Run evaluation: trajectory error, pooled and per-frame label scores,
//! stability and timing statistics, plus CSV tables for plotting.

use std::fmt::Write as _;

use serde::Serialize;

use crate::dataset::FrameRecord;
use crate::eval::{evaluate_trajectory, map_scores, AteReport, EvalError, MapScore, Trajectory};
use crate::geometry::Pose;
use crate::io::MapBlock;
use crate::pipeline::{FrameDiagnostics, FramePhase, FrameTiming, WarmupGate};
use crate::scc::FinalLabel;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("trajectory: {0}")]
    Trajectory(#[from] EvalError),
    #[error("map block {block} is for frame {got}, expected frame {want}")]
    FrameOrder { block: usize, got: usize, want: usize },
    #[error("map has {map} frames but the dataset has {truth}")]
    FrameCount { map: usize, truth: usize },
    #[error("frame {frame}: {map} map points but {truth} dataset points")]
    PointCount { frame: usize, map: usize, truth: usize },
    #[error("frame {frame} has points without ground-truth labels")]
    Unlabeled { frame: usize },
    #[error("diagnostics cover {diagnostics} frames but the map has {map}")]
    DiagnosticsCount { diagnostics: usize, map: usize },
}

/// Linear-interpolated percentile of already sorted values, `q` in [0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty set");
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: percentile(&v, 50.0),
            p90: percentile(&v, 90.0),
            p99: percentile(&v, 99.0),
            min: v[0],
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryReport {
    pub rmse: f64,
    pub pairs: usize,
    pub error: Summary,
    /// Aligning transform `[x, y, z, qx, qy, qz, qw]`.
    pub alignment: [f64; 7],
    #[serde(skip)]
    pub series: Vec<(f64, f64)>,
}

impl From<AteReport> for TrajectoryReport {
    fn from(a: AteReport) -> Self {
        Self {
            rmse: a.rmse,
            pairs: a.pairs,
            error: Summary::of(&a.errors).expect("at least one pair"),
            alignment: a.alignment,
            series: a.times.into_iter().zip(a.errors).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FrameScore {
    pub frame: usize,
    pub time: f64,
    pub scored: bool,
    pub score: MapScore,
}

#[derive(Debug, Clone, Serialize)]
pub struct MapReport {
    /// Pooled over the scored frames.
    pub pooled: MapScore,
    pub frames_scored: usize,
    #[serde(skip)]
    pub frames: Vec<FrameScore>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: &'static str,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub frames: usize,
    pub bootstrap_frames: usize,
    pub degenerate_frames: usize,
    /// Registration stable fraction over registered frames.
    pub stable_fraction: Option<Summary>,
    /// Per-frame wall time by stage, ms, over all frames.
    pub timing: Vec<StageTiming>,
    /// Per-frame wall time by stage, ms, over registered frames only.
    pub timing_registered: Vec<StageTiming>,
    #[serde(skip)]
    pub series: Vec<FrameDiagnostics>,
}

const STAGES: [(&str, fn(&FrameTiming) -> f64); 8] = [
    ("preprocess", |t| t.preprocess_ms),
    ("normals", |t| t.normals_ms),
    ("correspondence", |t| t.correspondence_ms),
    ("solve", |t| t.solve_ms),
    ("estimation", |t| t.estimation_ms),
    ("scc", |t| t.scc_ms),
    ("map_update", |t| t.map_update_ms),
    ("total", |t| t.total_ms),
];

fn stage_table<'a>(diags: impl Iterator<Item = &'a FrameDiagnostics> + Clone) -> Vec<StageTiming> {
    STAGES
        .iter()
        .filter_map(|(stage, get)| {
            let v: Vec<f64> = diags.clone().map(|d| get(&d.timing)).collect();
            Summary::of(&v).map(|summary| StageTiming { stage, summary })
        })
        .collect()
}

impl RunReport {
    pub fn new(diagnostics: Vec<FrameDiagnostics>) -> Self {
        let registered = || diagnostics.iter().filter(|d| d.phase == FramePhase::Registered);
        let stable: Vec<f64> = registered().map(|d| d.stable_fraction).collect();
        Self {
            frames: diagnostics.len(),
            bootstrap_frames: diagnostics.iter().filter(|d| d.phase == FramePhase::Bootstrap).count(),
            degenerate_frames: diagnostics.iter().filter(|d| d.phase == FramePhase::Degenerate).count(),
            stable_fraction: Summary::of(&stable),
            timing: stage_table(diagnostics.iter()),
            timing_registered: stage_table(registered()),
            series: diagnostics.clone(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&Summary> {
        self.timing.iter().find(|s| s.stage == name).map(|s| &s.summary)
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<TrajectoryReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<MapReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run: Option<RunReport>,
}

pub fn evaluate_poses(
    estimate: Vec<(f64, Pose)>,
    truth: Vec<(f64, Pose)>,
    max_dt: f64,
) -> Result<TrajectoryReport, ReportError> {
    let est = Trajectory::new(estimate)?;
    let gt = Trajectory::new(truth)?;
    Ok(evaluate_trajectory(&est, &gt, max_dt)?.into())
}

/// Scores predicted map blocks against the dataset's per-point labels.
///
/// `phases` (from the run diagnostics) selects the scored frames through a
/// [`WarmupGate`]; without it every frame after the first `warmup` is scored.
pub fn evaluate_map<I>(
    blocks: &[MapBlock],
    truth_frames: I,
    phases: Option<&[FramePhase]>,
    warmup: usize,
) -> Result<MapReport, ReportError>
where
    I: IntoIterator<Item = FrameRecord>,
{
    if let Some(p) = phases {
        if p.len() != blocks.len() {
            return Err(ReportError::DiagnosticsCount { diagnostics: p.len(), map: blocks.len() });
        }
    }
    let mut gate = WarmupGate::new(warmup);
    let mut pooled = MapScore::default();
    let mut frames = Vec::with_capacity(blocks.len());
    let mut truth_iter = truth_frames.into_iter();
    for (i, block) in blocks.iter().enumerate() {
        if block.frame != i {
            return Err(ReportError::FrameOrder { block: i, got: block.frame, want: i });
        }
        let Some(truth) = truth_iter.next() else {
            return Err(ReportError::FrameCount { map: blocks.len(), truth: i });
        };
        if truth.points.len() != block.points.len() {
            return Err(ReportError::PointCount { frame: i, map: block.points.len(), truth: truth.points.len() });
        }
        let labels: Option<Vec<FinalLabel>> = truth.points.iter().map(|p| p.truth).collect();
        let labels = labels.ok_or(ReportError::Unlabeled { frame: i })?;
        let pred: Vec<FinalLabel> = block.points.iter().map(|(_, l)| *l).collect();
        let score = map_scores(&pred, &labels)?;
        let scored = gate.admit(phases.map_or(FramePhase::Registered, |p| p[i]));
        if scored {
            pooled = pooled.pooled(&score);
        }
        frames.push(FrameScore { frame: i, time: block.time, scored, score });
    }
    let rest = truth_iter.count();
    if rest > 0 {
        return Err(ReportError::FrameCount { map: blocks.len(), truth: blocks.len() + rest });
    }
    let frames_scored = frames.iter().filter(|f| f.scored).count();
    Ok(MapReport { pooled, frames_scored, frames })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

impl EvalReport {
    pub fn ate_csv(&self) -> Option<String> {
        let t = self.trajectory.as_ref()?;
        let mut s = String::from("time,error_m\n");
        for (time, e) in &t.series {
            let _ = writeln!(s, "{time},{e}");
        }
        Some(s)
    }

    pub fn labels_csv(&self) -> Option<String> {
        let m = self.map.as_ref()?;
        let mut s = String::from(
            "frame,time,scored,static_correct,static_total,dynamic_correct,dynamic_total,sa,da,ha\n",
        );
        for f in &m.frames {
            let c = &f.score;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                f.frame,
                f.time,
                u8::from(f.scored),
                c.static_correct,
                c.static_total,
                c.dynamic_correct,
                c.dynamic_total,
                opt(c.sa),
                opt(c.da),
                opt(c.ha)
            );
        }
        Some(s)
    }

    pub fn frames_csv(&self) -> Option<String> {
        let r = self.run.as_ref()?;
        let mut s = String::from(
            "frame,time,phase,iterations,converged,stable_fraction,correspondences,dynamic_points,\
             preprocess_ms,normals_ms,correspondence_ms,solve_ms,estimation_ms,scc_ms,map_update_ms,total_ms\n",
        );
        for d in &r.series {
            let phase = match d.phase {
                FramePhase::Bootstrap => "bootstrap",
                FramePhase::Registered => "registered",
                FramePhase::Degenerate => "degenerate",
            };
            let t = &d.timing;
            let _ = writeln!(
                s,
                "{},{},{phase},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                d.frame,
                d.time,
                d.iterations,
                u8::from(d.converged),
                d.stable_fraction,
                d.correspondences,
                d.dynamic_points,
                t.preprocess_ms,
                t.normals_ms,
                t.correspondence_ms,
                t.solve_ms,
                t.estimation_ms,
                t.scc_ms,
                t.map_update_ms,
                t.total_ms
            );
        }
        Some(s)
    }

    pub fn timing_csv(&self) -> Option<String> {
        let r = self.run.as_ref()?;
        let mut s = String::from("frames,stage,mean_ms,p50_ms,p90_ms,p99_ms,min_ms,max_ms\n");
        for (set, table) in [("all", &r.timing), ("registered", &r.timing_registered)] {
            for st in table {
                let m = &st.summary;
                let _ = writeln!(s, "{set},{},{},{},{},{},{},{}", st.stage, m.mean, m.p50, m.p90, m.p99, m.min, m.max);
            }
        }
        Some(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FramePoint;
    use crate::geometry::Vec3;

    #[test]
    fn percentile_examples() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert_eq!(percentile(&v, 100.0), 5.0);
        assert_eq!(percentile(&v, 90.0), 4.6);
        assert_eq!(percentile(&[7.0], 99.0), 7.0);
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.p50, s.min, s.max), (2.5, 2.5, 1.0, 4.0));
        assert!(Summary::of(&[]).is_none());
    }

    fn frame(truth: &[u8]) -> FrameRecord {
        FrameRecord {
            frame_time: 0.0,
            points: truth
                .iter()
                .map(|&t| FramePoint {
                    position: Vec3::zeros(),
                    t_offset: 0.0,
                    ring: 0,
                    truth: Some(if t == 1 { FinalLabel::Dynamic } else { FinalLabel::Static }),
                    mover_id: None,
                })
                .collect(),
        }
    }

    fn block(i: usize, pred: &[u8]) -> MapBlock {
        MapBlock {
            frame: i,
            time: i as f64,
            points: pred
                .iter()
                .map(|&l| (Vec3::zeros(), if l == 1 { FinalLabel::Dynamic } else { FinalLabel::Static }))
                .collect(),
        }
    }

    #[test]
    fn twenty_point_fixture_matches_hand_counts() {
        // Two frames of ten points. Frame 0: 7 static (6 right), 3 dynamic
        // (2 right). Frame 1: 6 static (6 right), 4 dynamic (1 right).
        let truth = vec![frame(&[0, 0, 0, 0, 0, 0, 0, 1, 1, 1]), frame(&[0, 0, 0, 0, 0, 0, 1, 1, 1, 1])];
        let pred = vec![block(0, &[0, 0, 0, 0, 0, 0, 1, 1, 1, 0]), block(1, &[0, 0, 0, 0, 0, 0, 1, 0, 0, 0])];
        let m = evaluate_map(&pred, truth, None, 0).unwrap();
        assert_eq!(m.frames_scored, 2);
        let p = m.pooled;
        assert_eq!((p.static_correct, p.static_total, p.dynamic_correct, p.dynamic_total), (12, 13, 3, 7));
        let (sa, da) = (1200.0 / 13.0, 300.0 / 7.0);
        assert_eq!(p.sa, Some(sa));
        assert_eq!(p.da, Some(da));
        assert_eq!(p.ha, Some(2.0 * sa * da / (sa + da)));
        assert_eq!(m.frames[1].score.da, Some(25.0));
    }

    #[test]
    fn perfect_labels_score_100() {
        let labels = [0, 1, 0, 1, 1, 0, 0, 0, 1, 0];
        let m = evaluate_map(&[block(0, &labels)], vec![frame(&labels)], None, 0).unwrap();
        assert_eq!(m.pooled.ha, Some(100.0));
    }

    #[test]
    fn warmup_follows_phases() {
        let labels = [0, 1];
        let blocks: Vec<MapBlock> = (0..5).map(|i| block(i, &labels)).collect();
        let truth: Vec<FrameRecord> = (0..5).map(|_| frame(&labels)).collect();
        use FramePhase::*;
        let phases = [Bootstrap, Bootstrap, Registered, Degenerate, Registered];
        let m = evaluate_map(&blocks, truth.clone(), Some(&phases), 1).unwrap();
        let scored: Vec<bool> = m.frames.iter().map(|f| f.scored).collect();
        assert_eq!(scored, vec![false, false, false, true, true]);
        let m = evaluate_map(&blocks, truth, None, 2).unwrap();
        assert_eq!(m.frames_scored, 3);
    }

    #[test]
    fn mismatches_are_reported() {
        let labels = [0, 1];
        assert!(matches!(
            evaluate_map(&[block(0, &labels)], vec![frame(&[0, 1, 0])], None, 0),
            Err(ReportError::PointCount { .. })
        ));
        assert!(matches!(
            evaluate_map(&[block(0, &labels)], vec![frame(&labels), frame(&labels)], None, 0),
            Err(ReportError::FrameCount { .. })
        ));
        assert!(matches!(
            evaluate_map(&[block(3, &labels)], vec![frame(&labels)], None, 0),
            Err(ReportError::FrameOrder { .. })
        ));
    }

    #[test]
    fn self_trajectory_has_zero_error() {
        let poses: Vec<(f64, Pose)> = (0..10)
            .map(|i| {
                let t = i as f64 * 0.1;
                (t, Pose::translation(t, (3.0 * t).sin(), 0.1 * t * t))
            })
            .collect();
        let r = evaluate_poses(poses.clone(), poses, 0.01).unwrap();
        assert!(r.rmse < 1e-12);
        assert_eq!(r.pairs, 10);
        let report = EvalReport { trajectory: Some(r), ..EvalReport::default() };
        assert_eq!(report.ate_csv().unwrap().lines().count(), 11);
        assert!(report.labels_csv().is_none());
    }
}
