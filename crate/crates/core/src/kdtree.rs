//! Static 3-D KD-tree with deterministic k-nearest and radius queries.
//!
//! Neighbours are ordered by `(squared distance, index)`, so equal distances
//! resolve to the smallest input index and results are reproducible
//! regardless of build order.

use crate::geom::Vec3;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// `order[i]` is the caller's index of the i-th stored point.
    order: Vec<usize>,
    nodes: Vec<Node>,
    leaf_size: usize,
}

/// A query hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbour {
    pub index: usize,
    pub dist2: f64,
}

impl Neighbour {
    fn precedes(&self, other: &Neighbour) -> bool {
        self.dist2 < other.dist2 || (self.dist2 == other.dist2 && self.index < other.index)
    }
}

impl KdTree {
    pub fn new(points: &[Vec3], leaf_size: usize) -> Self {
        let leaf_size = leaf_size.max(1);
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
            leaf_size,
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Position of the caller's point `index`.
    pub fn point(&self, index: usize) -> Option<Vec3> {
        self.order.iter().position(|&i| i == index).map(|slot| self.points[slot])
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= self.leaf_size {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.points[start..end] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        let dim = extent.imax();
        if extent[dim] <= 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let mut perm: Vec<usize> = (start..end).collect();
        perm.select_nth_unstable_by(mid - start, |&a, &b| {
            self.points[a][dim].total_cmp(&self.points[b][dim])
        });
        let pts: Vec<Vec3> = perm.iter().map(|&i| self.points[i]).collect();
        let ord: Vec<usize> = perm.iter().map(|&i| self.order[i]).collect();
        self.points[start..end].copy_from_slice(&pts);
        self.order[start..end].copy_from_slice(&ord);
        let value = self.points[mid][dim];
        self.nodes.push(Node::Split { dim, value, left: 0, right: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { dim, value, left, right };
        id
    }

    /// The `k` nearest points, closest first.
    pub fn nearest(&self, query: &Vec3, k: usize) -> Vec<Neighbour> {
        let mut best: Vec<Neighbour> = Vec::with_capacity(k + 1);
        if k == 0 || self.points.is_empty() {
            return best;
        }
        self.nearest_rec(0, query, k, &mut best);
        best
    }

    fn nearest_rec(&self, node: usize, q: &Vec3, k: usize, best: &mut Vec<Neighbour>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let cand = Neighbour {
                        index: self.order[slot],
                        dist2: (self.points[slot] - q).norm_squared(),
                    };
                    if best.len() < k || cand.precedes(best.last().unwrap()) {
                        let pos = best.iter().position(|b| cand.precedes(b)).unwrap_or(best.len());
                        best.insert(pos, cand);
                        best.truncate(k);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, k, best);
                // Equal-distance candidates on the far side may carry smaller indices.
                if best.len() < k || diff * diff <= best.last().unwrap().dist2 {
                    self.nearest_rec(far, q, k, best);
                }
            }
        }
    }

    /// All points within `radius` (inclusive), sorted by `(distance, index)`.
    pub fn within(&self, query: &Vec3, radius: f64) -> Vec<Neighbour> {
        let mut out = Vec::new();
        if self.points.is_empty() || !(radius >= 0.0) {
            return out;
        }
        let r2 = radius * radius;
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            match self.nodes[node] {
                Node::Leaf { start, end } => {
                    for slot in start..end {
                        let dist2 = (self.points[slot] - query).norm_squared();
                        if dist2 <= r2 {
                            out.push(Neighbour { index: self.order[slot], dist2 });
                        }
                    }
                }
                Node::Split { dim, value, left, right } => {
                    let diff = query[dim] - value;
                    if diff <= radius {
                        stack.push(left);
                    }
                    if diff >= -radius {
                        stack.push(right);
                    }
                }
            }
        }
        out.sort_by(|a, b| a.dist2.total_cmp(&b.dist2).then(a.index.cmp(&b.index)));
        out
    }
}

/// Brute-force k-nearest with the same ordering as [`KdTree::nearest`].
pub fn brute_force_nearest(points: &[Vec3], query: &Vec3, k: usize) -> Vec<Neighbour> {
    let mut all: Vec<Neighbour> = points
        .iter()
        .enumerate()
        .map(|(index, p)| Neighbour { index, dist2: (p - query).norm_squared() })
        .collect();
    all.sort_by(|a, b| a.dist2.total_cmp(&b.dist2).then(a.index.cmp(&b.index)));
    all.truncate(k);
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_tree() {
        let t = KdTree::new(&[], 4);
        assert!(t.nearest(&Vec3::zeros(), 3).is_empty());
        assert!(t.within(&Vec3::zeros(), 1.0).is_empty());
    }

    #[test]
    fn ties_resolve_to_smallest_index() {
        let pts = vec![Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y(), Vec3::z()];
        let t = KdTree::new(&pts, 1);
        let n = t.nearest(&Vec3::zeros(), 2);
        assert_eq!(n.iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn duplicate_points() {
        let pts = vec![Vec3::zeros(); 40];
        let t = KdTree::new(&pts, 4);
        let n = t.nearest(&Vec3::zeros(), 3);
        assert_eq!(n.iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(t.within(&Vec3::zeros(), 0.0).len(), 40);
    }

    fn cloud() -> impl Strategy<Value = Vec<Vec3>> {
        proptest::collection::vec(
            (-2i32..3, -2i32..3, -5.0..5.0f64).prop_map(|(x, y, z)| Vec3::new(x as f64, y as f64, z)),
            1..300,
        )
    }

    proptest! {
        #[test]
        fn matches_brute_force(pts in cloud(), q in (-3.0..3.0f64, -3.0..3.0f64, -6.0..6.0f64), k in 1usize..6, leaf in 1usize..20) {
            let q = Vec3::new(q.0, q.1, q.2);
            let t = KdTree::new(&pts, leaf);
            prop_assert_eq!(t.nearest(&q, k), brute_force_nearest(&pts, &q, k));
            let r = 1.5;
            let mut brute: Vec<Neighbour> = brute_force_nearest(&pts, &q, pts.len());
            brute.retain(|n| n.dist2 <= r * r);
            prop_assert_eq!(t.within(&q, r), brute);
        }
    }
}
