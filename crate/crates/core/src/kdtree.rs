//! Exact static k-d tree over 3D points.
//!
//! Results are ordered by `(squared distance, insertion index)`, so equal
//! distances resolve to the earlier-inserted point.

use crate::geometry::Vec3;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: u32, end: u32 },
    Split { axis: u8, value: f64, left: u32, right: u32 },
}

#[derive(Debug, Clone, Default)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<u32>,
    /// `points` permuted by `order`, so leaves are contiguous.
    packed: Vec<Vec3>,
    nodes: Vec<Node>,
}

/// A neighbour hit: index into the build slice and squared distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

#[inline]
fn key_lt(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

impl KdTree {
    pub fn build(points: Vec<Vec3>) -> Self {
        let n = points.len();
        assert!(n < u32::MAX as usize, "too many points for the index");
        let mut items: Vec<(Vec3, u32)> = points.iter().enumerate().map(|(i, p)| (*p, i as u32)).collect();
        let mut tree = KdTree { points, order: Vec::new(), packed: Vec::new(), nodes: Vec::new() };
        if n > 0 {
            tree.build_node(&mut items, 0);
        }
        (tree.packed, tree.order) = items.into_iter().unzip();
        tree
    }

    pub fn from_slice(points: &[Vec3]) -> Self {
        Self::build(points.to_vec())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &Vec3 {
        &self.points[index]
    }

    fn build_node(&mut self, items: &mut [(Vec3, u32)], offset: usize) -> u32 {
        let id = self.nodes.len() as u32;
        let leaf = Node::Leaf { start: offset as u32, end: (offset + items.len()) as u32 };
        if items.len() <= LEAF_SIZE {
            self.nodes.push(leaf);
            return id;
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for (p, _) in items.iter() {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        let axis = extent.imax();
        if extent[axis] == 0.0 {
            self.nodes.push(leaf);
            return id;
        }
        let mid = items.len() / 2;
        items.select_nth_unstable_by(mid, |a, b| a.0[axis].total_cmp(&b.0[axis]).then(a.1.cmp(&b.1)));
        let value = items[mid].0[axis];
        self.nodes.push(Node::Split { axis: axis as u8, value, left: 0, right: 0 });
        let (l, r) = items.split_at_mut(mid);
        let left = self.build_node(l, offset);
        let right = self.build_node(r, offset + mid);
        self.nodes[id as usize] = Node::Split { axis: axis as u8, value, left, right };
        id
    }

    /// The `k` nearest points, ascending by distance then insertion index.
    pub fn knn(&self, query: &Vec3, k: usize) -> Vec<Neighbor> {
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        if k > 0 && !self.points.is_empty() {
            self.knn_node(0, query, k, &mut best);
        }
        best.into_iter().map(|(d, i)| Neighbor { index: i as usize, dist2: d }).collect()
    }

    fn knn_node(&self, node: u32, q: &Vec3, k: usize, best: &mut Vec<(f64, u32)>) {
        match self.nodes[node as usize] {
            Node::Leaf { start, end } => {
                let (start, end) = (start as usize, end as usize);
                for (p, &i) in self.packed[start..end].iter().zip(&self.order[start..end]) {
                    let d = (p - q).norm_squared();
                    let cand = (d, i);
                    if best.len() == k && !key_lt(cand, best[k - 1]) {
                        continue;
                    }
                    let pos = best.partition_point(|b| key_lt(*b, cand));
                    best.insert(pos, cand);
                    if best.len() > k {
                        best.pop();
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis as usize] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_node(near, q, k, best);
                if best.len() < k || diff * diff <= best[k - 1].0 {
                    self.knn_node(far, q, k, best);
                }
            }
        }
    }

    /// All points within distance `r` (inclusive), ascending like [`knn`](Self::knn).
    pub fn radius(&self, query: &Vec3, r: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if !self.points.is_empty() && r >= 0.0 {
            self.radius_node(0, query, r * r, &mut out);
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.into_iter().map(|(d, i)| Neighbor { index: i as usize, dist2: d }).collect()
    }

    fn radius_node(&self, node: u32, q: &Vec3, r2: f64, out: &mut Vec<(f64, u32)>) {
        match self.nodes[node as usize] {
            Node::Leaf { start, end } => {
                let (start, end) = (start as usize, end as usize);
                for (p, &i) in self.packed[start..end].iter().zip(&self.order[start..end]) {
                    let d = (p - q).norm_squared();
                    if d <= r2 {
                        out.push((d, i));
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis as usize] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.radius_node(near, q, r2, out);
                if diff * diff <= r2 {
                    self.radius_node(far, q, r2, out);
                }
            }
        }
    }

    /// Number of points within distance `r`, counting stops at `limit`.
    pub fn count_within(&self, query: &Vec3, r: f64, limit: usize) -> usize {
        let mut n = 0;
        if !self.points.is_empty() && limit > 0 {
            self.count_node(0, query, r * r, limit, &mut n);
        }
        n
    }

    fn count_node(&self, node: u32, q: &Vec3, r2: f64, limit: usize, n: &mut usize) {
        match self.nodes[node as usize] {
            Node::Leaf { start, end } => {
                for p in &self.packed[start as usize..end as usize] {
                    if (p - q).norm_squared() <= r2 {
                        *n += 1;
                        if *n >= limit {
                            return;
                        }
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis as usize] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.count_node(near, q, r2, limit, n);
                if *n < limit && diff * diff <= r2 {
                    self.count_node(far, q, r2, limit, n);
                }
            }
        }
    }

    /// Calls `f` with the index of every point within distance `r`, in tree
    /// order.
    pub fn for_each_within(&self, query: &Vec3, r: f64, mut f: impl FnMut(usize)) {
        if !self.points.is_empty() && r >= 0.0 {
            self.visit_node(0, query, r * r, &mut f);
        }
    }

    fn visit_node(&self, node: u32, q: &Vec3, r2: f64, f: &mut impl FnMut(usize)) {
        match self.nodes[node as usize] {
            Node::Leaf { start, end } => {
                let (start, end) = (start as usize, end as usize);
                for (p, &i) in self.packed[start..end].iter().zip(&self.order[start..end]) {
                    if (p - q).norm_squared() <= r2 {
                        f(i as usize);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis as usize] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.visit_node(near, q, r2, f);
                if diff * diff <= r2 {
                    self.visit_node(far, q, r2, f);
                }
            }
        }
    }

    /// Whether any point lies within distance `r` of `query`.
    pub fn any_within(&self, query: &Vec3, r: f64) -> bool {
        !self.points.is_empty() && self.any_node(0, query, r * r)
    }

    fn any_node(&self, node: u32, q: &Vec3, r2: f64) -> bool {
        match self.nodes[node as usize] {
            Node::Leaf { start, end } => {
                self.packed[start as usize..end as usize].iter().any(|p| (p - q).norm_squared() <= r2)
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis as usize] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.any_node(near, q, r2) || (diff * diff <= r2 && self.any_node(far, q, r2))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(points: &[Vec3], q: &Vec3, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> =
            points.iter().enumerate().map(|(i, p)| ((p - q).norm_squared(), i)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    #[test]
    fn knn_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec3> = (0..5000)
            .map(|_| Vec3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-2.0..2.0)))
            .collect();
        let tree = KdTree::from_slice(&pts);
        for _ in 0..100 {
            let q = Vec3::new(rng.random_range(-11.0..11.0), rng.random_range(-11.0..11.0), rng.random_range(-3.0..3.0));
            let got: Vec<usize> = tree.knn(&q, 20).iter().map(|n| n.index).collect();
            assert_eq!(got, brute_knn(&pts, &q, 20));
        }
    }

    #[test]
    fn ties_resolve_by_insertion_order() {
        // Integer grid: many equidistant neighbours.
        let mut pts = Vec::new();
        for x in -3..=3 {
            for y in -3..=3 {
                for z in -3..=3 {
                    pts.push(Vec3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        let tree = KdTree::from_slice(&pts);
        for k in [1, 7, 19, 27] {
            let got: Vec<usize> = tree.knn(&Vec3::zeros(), k).iter().map(|n| n.index).collect();
            assert_eq!(got, brute_knn(&pts, &Vec3::zeros(), k));
        }
        // duplicates
        let dup = vec![Vec3::new(1.0, 1.0, 1.0); 30];
        let tree = KdTree::from_slice(&dup);
        let got: Vec<usize> = tree.knn(&Vec3::zeros(), 5).iter().map(|n| n.index).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn radius_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<Vec3> = (0..3000)
            .map(|_| Vec3::new(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)))
            .collect();
        let tree = KdTree::from_slice(&pts);
        for _ in 0..100 {
            let q = Vec3::new(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
            let r = rng.random_range(0.05..1.0);
            let got: Vec<usize> = tree.radius(&q, r).iter().map(|n| n.index).collect();
            let mut want: Vec<(f64, usize)> = pts
                .iter()
                .enumerate()
                .filter(|(_, p)| (*p - q).norm() <= r)
                .map(|(i, p)| ((p - q).norm_squared(), i))
                .collect();
            want.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            assert_eq!(got, want.iter().map(|w| w.1).collect::<Vec<_>>());
            assert_eq!(tree.any_within(&q, r), !want.is_empty());
        }
    }

    #[test]
    fn empty_tree() {
        let tree = KdTree::build(Vec::new());
        assert!(tree.knn(&Vec3::zeros(), 3).is_empty());
        assert!(tree.radius(&Vec3::zeros(), 3.0).is_empty());
        assert!(!tree.any_within(&Vec3::zeros(), 3.0));
    }
}
