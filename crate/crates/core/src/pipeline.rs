//! Frame-by-frame odometry and static mapping.
//!
//! Each sweep is propagated with the IMU, undistorted, thinned, registered
//! against the maps, checked for spatial consistency, and finally used to
//! update the temporal map, the plane map and the static record.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::dataset::{DatasetInfo, FrameRecord};
use crate::estimator::{propagate_covariance, register_scan, Matrix9, Prior, RegistrationResult};
use crate::eval::{map_scores, MapScore};
use crate::geometry::{transform_point, Pose, StabilityLabel, StampedPoint, Vec3};
use crate::preprocess::{propagate, to_body_frame, undistort, voxel_downsample_indices, ImuSample, NavState};
use crate::scc::{spatial_consistency_check, FinalLabel, SccOutput};
use crate::temporal_map::TemporalWindowMap;
use crate::voxel_map::{PlaneVoxelMap, StaticVoxelRecord, VoxelKey};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("frame {frame}: {msg}")]
    Data { frame: usize, msg: String },
    #[error("frame {frame}: {run} consecutive degenerate frames (limit {limit})")]
    Degenerate { frame: usize, run: usize, limit: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FramePhase {
    Bootstrap,
    Registered,
    /// Registration failed; the pose is the IMU prior.
    Degenerate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub preprocess_ms: f64,
    pub normals_ms: f64,
    pub correspondence_ms: f64,
    pub solve_ms: f64,
    /// Whole registration call.
    pub estimation_ms: f64,
    pub scc_ms: f64,
    pub map_update_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub frame: usize,
    pub time: f64,
    pub phase: FramePhase,
    pub points: usize,
    pub downsampled: usize,
    pub iterations: usize,
    pub converged: bool,
    pub stable_fraction: f64,
    pub correspondences: usize,
    pub scc_candidates: usize,
    pub scc_clusters: usize,
    pub scc_oversized: usize,
    pub dynamic_clusters: usize,
    pub dynamic_points: usize,
    pub timing: FrameTiming,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Everything produced for one sweep.
#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub index: usize,
    /// Scan end, the time the pose refers to.
    pub time: f64,
    pub pose: Pose,
    /// Full-resolution points in the world frame, in input order.
    pub world: Vec<Vec3>,
    pub labels: Vec<FinalLabel>,
    /// Indices of the registered subset into `world`.
    pub downsampled: Vec<usize>,
    /// Registration labels of the downsampled points.
    pub stability: Vec<StabilityLabel>,
    pub diagnostics: FrameDiagnostics,
}

/// Streaming odometry state.
pub struct Pipeline {
    config: PipelineConfig,
    info: DatasetInfo,
    gravity: Vec3,
    lidar_to_body: Pose,
    state: NavState,
    covariance: Matrix9,
    mt: TemporalWindowMap,
    mv: PlaneVoxelMap,
    record: StaticVoxelRecord,
    frames_seen: usize,
    degenerate_run: usize,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

impl Pipeline {
    pub fn new(config: PipelineConfig, info: DatasetInfo) -> Self {
        Self {
            state: info.initial_state.nav_state(),
            covariance: Matrix9::identity() * 1e-6,
            gravity: Vec3::from(info.gravity),
            lidar_to_body: info.lidar_to_body.0,
            mt: TemporalWindowMap::new(config.frontend.window),
            mv: PlaneVoxelMap::new(config.voxel_map),
            record: StaticVoxelRecord::new(config.static_record),
            frames_seen: 0,
            degenerate_run: 0,
            config,
            info,
        }
    }

    pub fn state(&self) -> &NavState {
        &self.state
    }

    pub fn temporal_map(&self) -> &TemporalWindowMap {
        &self.mt
    }

    pub fn plane_map(&self) -> &PlaneVoxelMap {
        &self.mv
    }

    pub fn static_record(&self) -> &StaticVoxelRecord {
        &self.record
    }

    pub fn process_frame(&mut self, frame: &FrameRecord, imu: &[ImuSample]) -> Result<FrameOutput, PipelineError> {
        let start = Instant::now();
        let index = self.frames_seen;
        let fe = self.config.frontend;
        let data_err = |msg: String| PipelineError::Data { frame: index, msg };
        let scan = frame.to_raw_scan(self.info.scan_period);
        if scan.scan_start < self.state.time - 1e-9 {
            return Err(data_err(format!(
                "frame starts at {} before the current state time {}",
                scan.scan_start, self.state.time
            )));
        }

        let (prior_state, traj) = propagate(&self.state, imu, scan.scan_end, &self.gravity, fe.max_imu_gap)
            .map_err(|e| data_err(e.to_string()))?;
        let world_prior = undistort(&scan, &traj, &self.lidar_to_body).map_err(|e| data_err(e.to_string()))?;
        let body = to_body_frame(&world_prior, &prior_state.pose);
        let ds_idx = voxel_downsample_indices(&body, fe.downsample);
        let ds: Vec<StampedPoint> = ds_idx.iter().map(|&i| body[i]).collect();
        let prior_cov = propagate_covariance(
            &self.covariance,
            &self.state,
            &prior_state,
            &self.gravity,
            &self.config.registration.prior_noise,
        );
        let mut timing = FrameTiming { preprocess_ms: ms(start), ..FrameTiming::default() };

        let bootstrap = index < fe.n_bootstrap;
        let mut error = None;
        let registered: Option<RegistrationResult> = if bootstrap {
            None
        } else {
            let t = Instant::now();
            let prior = Prior { state: prior_state, covariance: prior_cov };
            let out = register_scan(&ds, &self.mt, &self.mv, &prior, &self.config.registration);
            timing.estimation_ms = ms(t);
            match out {
                Ok(r) => Some(r),
                Err(e) => {
                    error = Some(e.to_string());
                    None
                }
            }
        };
        let phase = match (&registered, bootstrap) {
            (_, true) => FramePhase::Bootstrap,
            (Some(_), _) => FramePhase::Registered,
            (None, _) => FramePhase::Degenerate,
        };
        if phase == FramePhase::Degenerate {
            self.degenerate_run += 1;
            if self.degenerate_run >= fe.max_degenerate_run {
                return Err(PipelineError::Degenerate { frame: index, run: self.degenerate_run, limit: fe.max_degenerate_run });
            }
        } else {
            self.degenerate_run = 0;
        }

        let (state, covariance, stability) = match &registered {
            Some(r) => (r.state, r.covariance, r.labels.clone()),
            None => (prior_state, prior_cov, vec![StabilityLabel::Stable; ds.len()]),
        };
        let pose = state.pose;
        let world: Vec<StampedPoint> = body.iter().map(|p| p.transformed(&pose)).collect();

        let t = Instant::now();
        let scc = if phase == FramePhase::Registered {
            let unstable: Vec<Vec3> = ds
                .iter()
                .zip(&stability)
                .filter(|(_, l)| !l.is_stable())
                .map(|(p, _)| transform_point(&pose, &p.position))
                .collect();
            spatial_consistency_check(&unstable, &world, &self.record, &self.config.scc)
        } else {
            SccOutput {
                labels: vec![FinalLabel::Static; world.len()],
                candidates: 0,
                clusters: 0,
                oversized: 0,
                dynamic_clusters: 0,
            }
        };
        timing.scc_ms = ms(t);

        let t = Instant::now();
        let sensor = pose.translation.vector;
        let ds_world: Vec<StampedPoint> = ds_idx.iter().map(|&i| world[i]).collect();
        if phase != FramePhase::Degenerate {
            let confirmed: Vec<Vec3> = ds_idx
                .iter()
                .zip(&stability)
                .filter(|(&i, l)| l.is_stable() && scc.labels[i] == FinalLabel::Static)
                .map(|(&i, _)| world[i].position)
                .collect();
            self.mv.insert_static_points(confirmed.iter());
            // Each static-record voxel near the sensor takes the majority
            // verdict of this scan's points inside it.
            let range = self.config.scc.record_range;
            let mut votes: BTreeMap<VoxelKey, i64> = BTreeMap::new();
            for (&i, l) in ds_idx.iter().zip(&stability) {
                let p = world[i].position;
                if (p - sensor).norm() <= range {
                    let ok = l.is_stable() && scc.labels[i] == FinalLabel::Static;
                    *votes.entry(self.record.key_of(&p)).or_default() += if ok { 1 } else { -1 };
                }
            }
            self.record.scc_clear(votes.iter().filter(|(_, v)| **v < 0).map(|(k, _)| *k));
            self.record.scc_mark_static(votes.iter().filter(|(_, v)| **v > 0).map(|(k, _)| *k), scan.scan_end);
        } else {
            self.record.advance(scan.scan_end);
        }
        self.mt.push_frame(scan.scan_end, ds_world).map_err(|e| data_err(e.to_string()))?;
        timing.map_update_ms = ms(t);

        self.state = state;
        self.covariance = covariance;
        self.frames_seen += 1;

        let (iterations, converged, stable_fraction, correspondences) = match &registered {
            Some(r) => {
                timing.normals_ms = r.timing.normals_ms;
                timing.correspondence_ms = r.timing.correspondence_ms;
                timing.solve_ms = r.timing.solve_ms;
                (r.iterations, r.converged, r.stable_fraction(), r.correspondences.iter().flatten().count())
            }
            None => (0, false, 1.0, 0),
        };
        timing.total_ms = ms(start);
        let dynamic_points = scc.labels.iter().filter(|l| l.is_dynamic()).count();
        let diagnostics = FrameDiagnostics {
            frame: index,
            time: scan.scan_end,
            phase,
            points: world.len(),
            downsampled: ds.len(),
            iterations,
            converged,
            stable_fraction,
            correspondences,
            scc_candidates: scc.candidates,
            scc_clusters: scc.clusters,
            scc_oversized: scc.oversized,
            dynamic_clusters: scc.dynamic_clusters,
            dynamic_points,
            timing,
            error,
        };
        Ok(FrameOutput {
            index,
            time: scan.scan_end,
            pose,
            world: world.into_iter().map(|p| p.position).collect(),
            labels: scc.labels,
            downsampled: ds_idx,
            stability,
            diagnostics,
        })
    }
}

/// Runs `f` on a pool with `threads` workers, or on the global pool when
/// `threads` is 0.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Aggregates of a whole run.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub trajectory: Vec<(f64, Pose)>,
    pub diagnostics: Vec<FrameDiagnostics>,
    /// Pooled label scores over registered frames after the warm-up, when
    /// the input carries ground truth.
    pub score: MapScore,
}

impl RunSummary {
    pub fn degenerate_frames(&self) -> usize {
        self.diagnostics.iter().filter(|d| d.phase == FramePhase::Degenerate).count()
    }
}

/// Decides which frames count toward map scores: bootstrap frames never do,
/// and the first `warmup` frames after them are skipped while the static
/// record fills.
#[derive(Debug, Clone, Copy)]
pub struct WarmupGate {
    warmup: usize,
    seen: usize,
}

impl WarmupGate {
    pub fn new(warmup: usize) -> Self {
        Self { warmup, seen: 0 }
    }

    pub fn admit(&mut self, phase: FramePhase) -> bool {
        if phase == FramePhase::Bootstrap {
            return false;
        }
        self.seen += 1;
        self.seen > self.warmup
    }
}

/// Streams `frames` through a fresh pipeline, handing every output to
/// `sink` before it is dropped.
pub fn run_frames<I, S>(
    config: &PipelineConfig,
    info: &DatasetInfo,
    imu: &[ImuSample],
    frames: I,
    mut sink: S,
) -> Result<RunSummary, PipelineError>
where
    I: IntoIterator<Item = Result<FrameRecord, PipelineError>>,
    S: FnMut(&FrameRecord, &FrameOutput) -> Result<(), PipelineError>,
{
    let mut pipeline = Pipeline::new(*config, info.clone());
    let mut summary = RunSummary::default();
    let mut gate = WarmupGate::new(config.eval.warmup_frames);
    for frame in frames {
        let frame = frame?;
        let out = pipeline.process_frame(&frame, imu)?;
        if gate.admit(out.diagnostics.phase) {
            let truth: Option<Vec<FinalLabel>> = frame.points.iter().map(|p| p.truth).collect();
            if let Some(truth) = truth {
                let s = map_scores(&out.labels, &truth).expect("labels align with the frame");
                summary.score = summary.score.pooled(&s);
            }
        }
        sink(&frame, &out)?;
        summary.trajectory.push((out.time, out.pose));
        summary.diagnostics.push(out.diagnostics);
    }
    Ok(summary)
}

/// In-memory convenience wrapper over [`run_frames`].
pub fn run_dataset(config: &PipelineConfig, dataset: &crate::dataset::Dataset) -> Result<RunSummary, PipelineError> {
    with_threads(config.frontend.threads, || {
        run_frames(config, &dataset.info, &dataset.imu, dataset.frames.iter().cloned().map(Ok), |_, _| Ok(()))
    })
}
