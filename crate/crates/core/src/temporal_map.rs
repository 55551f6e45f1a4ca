//! Sliding time window of recently registered world-frame points.

use std::collections::VecDeque;

use thiserror::Error;

use crate::geometry::{StampedPoint, Vec3};
use crate::grid_index::HashGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemporalMapError {
    #[error("frame time {got} is not after the newest stored frame time {newest}")]
    NonMonotonic { newest: f64, got: f64 },
}

#[derive(Debug, Clone)]
struct Frame {
    time: f64,
    len: usize,
    oldest_point: f64,
}

/// Frames are pushed and evicted whole; the spatial index follows the
/// window incrementally.
#[derive(Debug, Clone)]
pub struct TemporalWindowMap {
    window_length: f64,
    frames: VecDeque<Frame>,
    points: Vec<StampedPoint>,
    index: HashGrid,
}

impl Default for TemporalWindowMap {
    fn default() -> Self {
        Self::new(2.0)
    }
}

impl TemporalWindowMap {
    pub fn new(window_length: f64) -> Self {
        Self::with_cell_size(window_length, Self::DEFAULT_CELL)
    }

    /// Index bucket edge, m; sized to the typical neighbourhood radius.
    pub const DEFAULT_CELL: f64 = 0.4;

    pub fn with_cell_size(window_length: f64, cell: f64) -> Self {
        Self { window_length, frames: VecDeque::new(), points: Vec::new(), index: HashGrid::new(cell) }
    }

    pub fn window_length(&self) -> f64 {
        self.window_length
    }

    pub fn newest_frame_time(&self) -> Option<f64> {
        self.frames.back().map(|f| f.time)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.frames.iter().map(|f| f.time)
    }

    /// Live points, oldest frame first.
    pub fn points(&self) -> &[StampedPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of points held by the spatial index.
    pub fn indexed_len(&self) -> usize {
        self.index.len()
    }

    pub fn push_frame(
        &mut self,
        frame_time: f64,
        points: impl IntoIterator<Item = StampedPoint>,
    ) -> Result<(), TemporalMapError> {
        if let Some(newest) = self.newest_frame_time() {
            if frame_time <= newest {
                return Err(TemporalMapError::NonMonotonic { newest, got: frame_time });
            }
        }
        let before = self.points.len();
        self.points.extend(points);
        let added = &self.points[before..];
        self.index.extend(added.iter().map(|p| &p.position));
        let oldest_point = added.iter().map(|p| p.time).fold(frame_time, f64::min);
        self.frames.push_back(Frame { time: frame_time, len: added.len(), oldest_point });

        let horizon = frame_time - self.window_length;
        let mut drop = 0;
        while let Some(front) = self.frames.front() {
            if front.oldest_point >= horizon {
                break;
            }
            drop += front.len;
            self.frames.pop_front();
        }
        if drop > 0 {
            self.index.retire(self.points[..drop].iter().map(|p| &p.position));
            self.points.drain(..drop);
        }
        Ok(())
    }

    /// Indices (into [`points`](Self::points)) of the `k` spatially nearest live
    /// points.
    pub fn knn_indices(&self, query: &Vec3, k: usize) -> Vec<usize> {
        self.index.knn(query, k).into_iter().map(|n| n.0).collect()
    }

    /// Like [`knn_indices`](Self::knn_indices), with squared distances.
    pub fn knn_with_dist2(&self, query: &Vec3, k: usize) -> Vec<(usize, f64)> {
        self.index.knn(query, k)
    }

    pub fn knn(&self, query: &Vec3, k: usize) -> Vec<StampedPoint> {
        self.index.knn(query, k).into_iter().map(|n| self.points[n.0]).collect()
    }

    pub fn radius_search(&self, query: &Vec3, r: f64) -> Vec<StampedPoint> {
        self.index.radius(query, r).into_iter().map(|n| self.points[n.0]).collect()
    }

    pub fn radius_indices(&self, query: &Vec3, r: f64) -> Vec<usize> {
        self.index.radius(query, r).into_iter().map(|n| n.0).collect()
    }
}
