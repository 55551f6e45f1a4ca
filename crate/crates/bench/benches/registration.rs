use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use dalio_core::config::PipelineConfig;
use dalio_core::dataset::Dataset;
use dalio_core::geometry::{estimate_st_normal, transform_point};
use dalio_core::kdtree::KdTree;
use dalio_core::pipeline::run_dataset;
use dalio_core::scc::{dbscan, SccConfig};
use dalio_core::sim::{generate_sequence, preset};
use dalio_core::{StampedPoint, TemporalWindowMap, Vec3};

fn sequence(name: &str, duration: f64) -> Dataset {
    let mut cfg = preset(name).unwrap();
    cfg.duration = duration;
    generate_sequence(&cfg).unwrap()
}

/// Temporal window filled from ground-truth poses, plus the newest frame as
/// queries.
fn window(ds: &Dataset, frames: usize) -> (TemporalWindowMap, Vec<StampedPoint>) {
    let mut mt = TemporalWindowMap::new(PipelineConfig::default().frontend.window);
    let mut last = Vec::new();
    for (f, (_, pose)) in ds.frames.iter().zip(&ds.ground_truth).take(frames) {
        let pts: Vec<StampedPoint> = f
            .points
            .iter()
            .step_by(4)
            .map(|p| StampedPoint::new(transform_point(pose, &p.position), f.frame_time + p.t_offset))
            .collect();
        mt.push_frame(f.frame_time, pts.iter().copied()).unwrap();
        last = pts;
    }
    (mt, last)
}

fn search(c: &mut Criterion) {
    let ds = sequence("rich", 1.2);
    let (mt, queries) = window(&ds, 10);
    let queries: Vec<StampedPoint> = queries.into_iter().step_by(4).collect();
    let k = PipelineConfig::default().registration.k_neighbors;
    let positions: Vec<Vec3> = mt.points().iter().map(|p| p.position).collect();
    let tree = KdTree::from_slice(&positions);

    let mut g = c.benchmark_group("knn");
    g.bench_function("hash_grid", |b| {
        b.iter(|| queries.iter().map(|q| mt.knn_indices(&q.position, k).len()).sum::<usize>())
    });
    g.bench_function("kd_tree", |b| b.iter(|| queries.iter().map(|q| tree.knn(&q.position, k).len()).sum::<usize>()));
    g.bench_function("kd_tree_build", |b| b.iter(|| KdTree::from_slice(black_box(&positions)).len()));
    g.finish();

    let reg = PipelineConfig::default().registration;
    let neighbours: Vec<Vec<StampedPoint>> = queries.iter().map(|q| mt.knn(&q.position, k)).collect();
    let origin = Vec3::zeros();
    c.bench_function("st_normals", |b| {
        b.iter(|| {
            queries
                .iter()
                .zip(&neighbours)
                .filter(|(q, n)| estimate_st_normal(q, n, &reg.normal, &origin).normal().is_some())
                .count()
        })
    });
}

fn clustering(c: &mut Criterion) {
    let ds = sequence("mover-dominated", 0.5);
    let frame = ds.frames.last().unwrap();
    let movers: Vec<Vec3> = frame.points.iter().filter(|p| p.mover_id.is_some()).map(|p| p.position).collect();
    let cfg = SccConfig::default();
    c.bench_function("dbscan_movers", |b| b.iter(|| dbscan(black_box(&movers), cfg.dbscan_eps, cfg.dbscan_min_pts).0.len()));
}

fn pipeline(c: &mut Criterion) {
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    for name in ["rich", "mover-dominated"] {
        let ds = sequence(name, 1.5);
        g.bench_function(format!("{name}_15_frames"), |b| {
            b.iter_batched(
                PipelineConfig::default,
                |cfg| run_dataset(&cfg, &ds).unwrap().trajectory.len(),
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, search, clustering, pipeline);
criterion_main!(benches);
