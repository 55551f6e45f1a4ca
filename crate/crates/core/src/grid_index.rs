//! Exact nearest-neighbour index over a FIFO point stream, bucketed in a
//! uniform hash grid so that appending and retiring points needs no rebuild.
//!
//! Points are addressed by their position in the live stream (oldest is 0),
//! and results are ordered by squared distance, then index, exactly like
//! [`KdTree`](crate::kdtree::KdTree).

use rustc_hash::FxHashMap;

use crate::geometry::Vec3;

type Cell = [i32; 3];

/// Ring radius beyond which a search stops walking cells one by one and
/// scans the occupied cells instead.
const MAX_RING: i32 = 6;

#[derive(Debug, Clone)]
pub struct HashGrid {
    cell: f64,
    cells: FxHashMap<Cell, Vec<(Vec3, u64)>>,
    /// Sequence number of the oldest live point.
    base: u64,
    next: u64,
}

fn key_cmp(a: &(f64, u64), b: &(f64, u64)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Running pool of kNN candidates. Everything at or under `bound` is kept and
/// the pool is cut back to `k` in batches, so each offer is one comparison.
struct Candidates {
    k: usize,
    pool: Vec<(f64, u64)>,
    /// Squared distance of the `k`-th best so far (infinite until `k` seen).
    bound: f64,
}

impl Candidates {
    fn new(k: usize) -> Self {
        Self { k, pool: Vec::with_capacity(4 * k), bound: f64::INFINITY }
    }

    fn full(&self) -> bool {
        self.pool.len() >= self.k
    }

    #[inline]
    fn scan(&mut self, q: &Vec3, bucket: &[(Vec3, u64)]) {
        for (p, s) in bucket {
            let d = (p - q).norm_squared();
            if d <= self.bound {
                self.pool.push((d, *s));
                if self.pool.len() >= 4 * self.k {
                    self.compact();
                }
            }
        }
    }

    fn compact(&mut self) {
        if self.pool.len() > self.k {
            self.pool.select_nth_unstable_by(self.k - 1, key_cmp);
            self.pool.truncate(self.k);
        }
        if self.pool.len() == self.k {
            self.bound = self.pool.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
        }
    }

    fn finish(mut self) -> Vec<(f64, u64)> {
        self.compact();
        self.pool.sort_unstable_by(key_cmp);
        self.pool
    }
}

impl HashGrid {
    pub fn new(cell: f64) -> Self {
        assert!(cell > 0.0, "grid cell size must be positive");
        Self { cell, cells: FxHashMap::default(), base: 0, next: 0 }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    pub fn len(&self) -> usize {
        (self.next - self.base) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.next == self.base
    }

    fn cell_of(&self, p: &Vec3) -> Cell {
        let c = |v: f64| (v / self.cell).floor().clamp(i32::MIN as f64, i32::MAX as f64) as i32;
        [c(p.x), c(p.y), c(p.z)]
    }

    /// Appends points at the young end of the stream.
    pub fn extend<'a>(&mut self, points: impl IntoIterator<Item = &'a Vec3>) {
        for p in points {
            let key = self.cell_of(p);
            self.cells.entry(key).or_default().push((*p, self.next));
            self.next += 1;
        }
    }

    /// Retires the oldest points; `oldest` must be exactly those points, in
    /// stream order.
    pub fn retire<'a>(&mut self, oldest: impl IntoIterator<Item = &'a Vec3>) {
        let mut counts: FxHashMap<Cell, usize> = FxHashMap::default();
        let mut n = 0u64;
        for p in oldest {
            *counts.entry(self.cell_of(p)).or_default() += 1;
            n += 1;
        }
        assert!(n <= self.next - self.base, "retiring more points than are live");
        for (key, count) in counts {
            let bucket = self.cells.get_mut(&key).expect("retired point has a cell");
            debug_assert!(bucket[..count].iter().all(|e| e.1 < self.base + n));
            if count == bucket.len() {
                self.cells.remove(&key);
            } else {
                bucket.drain(..count);
            }
        }
        self.base += n;
    }

    /// Rounding allowance for points sitting on a cell face.
    fn slack(&self) -> f64 {
        self.cell * 1e-9
    }

    /// Squared distance from `q` to the closest point of `cell`, slightly
    /// underestimated.
    fn cell_dist2(&self, q: &Vec3, cell: &Cell) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let lo = cell[a] as f64 * self.cell - self.slack();
            let hi = lo + self.cell + 2.0 * self.slack();
            let d = if q[a] < lo {
                lo - q[a]
            } else if q[a] > hi {
                q[a] - hi
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2
    }

    /// Distance from `q` to the outside of the block of cells within
    /// Chebyshev distance `ring` of `center`.
    fn block_margin(&self, q: &Vec3, center: &Cell, ring: i32) -> f64 {
        (0..3)
            .map(|a| {
                let lo = (center[a] as f64 - ring as f64) * self.cell;
                let hi = (center[a] as f64 + ring as f64 + 1.0) * self.cell;
                (q[a] - lo).min(hi - q[a])
            })
            .fold(f64::INFINITY, f64::min)
            - self.slack()
    }

    /// The `k` nearest live points as (index, squared distance).
    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let mut found = Candidates::new(k);
        let center = self.cell_of(q);
        let mut done = false;
        let mut ring_cells: Vec<(f64, &[(Vec3, u64)])> = Vec::new();
        for ring in 0..=MAX_RING {
            ring_cells.clear();
            self.for_ring(&center, ring, |cell| {
                let d2 = self.cell_dist2(q, &cell);
                if d2 <= found.bound {
                    if let Some(bucket) = self.cells.get(&cell) {
                        ring_cells.push((d2, bucket));
                    }
                }
            });
            // Nearest cells first so the bound tightens before the far ones.
            ring_cells.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            for (d2, bucket) in &ring_cells {
                if *d2 > found.bound {
                    break;
                }
                found.scan(q, bucket);
                if found.pool.len() >= 2 * found.k {
                    found.compact();
                }
            }
            // Anything unvisited lies strictly beyond the margin; a tie at the
            // margin could still win on index, so keep going in that case.
            let margin = self.block_margin(q, &center, ring);
            found.compact();
            if found.full() && margin > 0.0 && found.bound < margin * margin {
                done = true;
                break;
            }
        }
        if !done {
            let inner = |c: &Cell| (0..3).all(|a| (c[a] - center[a]).abs() <= MAX_RING);
            for (cell, bucket) in &self.cells {
                if !inner(cell) && self.cell_dist2(q, cell) <= found.bound {
                    found.scan(q, bucket);
                }
            }
        }
        found.finish().into_iter().map(|(d, s)| ((s - self.base) as usize, d)).collect()
    }

    /// All live points within distance `r` (inclusive), ordered like
    /// [`knn`](Self::knn).
    pub fn radius(&self, q: &Vec3, r: f64) -> Vec<(usize, f64)> {
        let mut out: Vec<(f64, u64)> = Vec::new();
        if !(r >= 0.0) || self.is_empty() {
            return out.into_iter().map(|(d, s)| ((s - self.base) as usize, d)).collect();
        }
        let r2 = r * r;
        let mut visit = |bucket: &[(Vec3, u64)]| {
            for (p, s) in bucket {
                let d = (p - q).norm_squared();
                if d <= r2 {
                    out.push((d, *s));
                }
            }
        };
        let reach = (r / self.cell).ceil() + 2.0;
        if reach <= MAX_RING as f64 {
            let (lo, hi) = (self.cell_of(&q.add_scalar(-r)), self.cell_of(&q.add_scalar(r)));
            for x in lo[0] - 1..=hi[0] + 1 {
                for y in lo[1] - 1..=hi[1] + 1 {
                    for z in lo[2] - 1..=hi[2] + 1 {
                        let cell = [x, y, z];
                        if self.cell_dist2(q, &cell) <= r2 {
                            if let Some(bucket) = self.cells.get(&cell) {
                                visit(bucket);
                            }
                        }
                    }
                }
            }
        } else {
            for (cell, bucket) in &self.cells {
                if self.cell_dist2(q, cell) <= r2 {
                    visit(bucket);
                }
            }
        }
        out.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.into_iter().map(|(d, s)| ((s - self.base) as usize, d)).collect()
    }

    /// Calls `f` on every cell at Chebyshev distance exactly `ring`.
    fn for_ring(&self, c: &Cell, ring: i32, mut f: impl FnMut(Cell)) {
        if ring == 0 {
            f(*c);
            return;
        }
        for dx in -ring..=ring {
            for dy in -ring..=ring {
                let face = dx.abs() == ring || dy.abs() == ring;
                if face {
                    for dz in -ring..=ring {
                        f([c[0] + dx, c[1] + dy, c[2] + dz]);
                    }
                } else {
                    f([c[0] + dx, c[1] + dy, c[2] - ring]);
                    f([c[0] + dx, c[1] + dy, c[2] + ring]);
                }
            }
        }
    }
}
