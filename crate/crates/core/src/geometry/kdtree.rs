use super::{Point3, PointCloud};

const LEAF_SIZE: usize = 8;
const LEAF: u32 = u32::MAX;

/// A query result: index into the indexed set and Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    dim: u32,
    split: f64,
    start: u32,
    end: u32,
    left: u32,
    right: u32,
}

/// Exact k-d tree over `D`-dimensional points.
///
/// Ties in distance are broken by the original point index, so results are
/// fully deterministic and match an exhaustive scan sorted by
/// `(distance, id)`.
#[derive(Debug, Clone)]
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    ids: Vec<u32>,
    nodes: Vec<Node>,
}

#[inline]
fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for i in 0..D {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

/// Sorted bounded candidate list of `(squared distance, id)`.
struct Candidates {
    k: usize,
    max_d2: f64,
    items: Vec<(f64, u32)>,
}

impl Candidates {
    fn new(k: usize, max_d2: f64) -> Self {
        Self {
            k,
            max_d2,
            items: Vec::with_capacity(k.min(256) + 1),
        }
    }

    #[inline]
    fn bound(&self) -> f64 {
        if self.items.len() < self.k {
            self.max_d2
        } else {
            self.items[self.k - 1].0
        }
    }

    #[inline]
    fn offer(&mut self, d2: f64, id: u32) {
        if d2 > self.max_d2 {
            return;
        }
        if self.items.len() == self.k {
            let last = self.items[self.k - 1];
            if (d2, id) >= last {
                return;
            }
            self.items.pop();
        }
        let pos = self
            .items
            .partition_point(|&(d, i)| (d, i) < (d2, id));
        self.items.insert(pos, (d2, id));
    }
}

impl<const D: usize> KdTree<D> {
    pub fn build(points: &[[f64; D]]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        if !points.is_empty() {
            Self::build_node(points, &mut order, 0, &mut nodes);
        }
        KdTree {
            points: order.iter().map(|&i| points[i as usize]).collect(),
            ids: order,
            nodes,
        }
    }

    fn build_node(points: &[[f64; D]], order: &mut [u32], offset: usize, nodes: &mut Vec<Node>) -> u32 {
        let idx = nodes.len() as u32;
        let (start, end) = (offset as u32, (offset + order.len()) as u32);
        nodes.push(Node {
            dim: LEAF,
            split: 0.0,
            start,
            end,
            left: 0,
            right: 0,
        });
        if order.len() <= LEAF_SIZE {
            return idx;
        }
        let mut dim = 0;
        let mut best_spread = -1.0;
        for d in 0..D {
            let (lo, hi) = order.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let v = points[i as usize][d];
                (lo.min(v), hi.max(v))
            });
            if hi - lo > best_spread {
                best_spread = hi - lo;
                dim = d;
            }
        }
        if best_spread <= 0.0 {
            // all points identical
            return idx;
        }
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][dim]
                .total_cmp(&points[b as usize][dim])
                .then(a.cmp(&b))
        });
        let split = points[order[mid] as usize][dim];
        let (lo, hi) = order.split_at_mut(mid);
        let left = Self::build_node(points, lo, offset, nodes);
        let right = Self::build_node(points, hi, offset + mid, nodes);
        let node = &mut nodes[idx as usize];
        node.dim = dim as u32;
        node.split = split;
        node.left = left;
        node.right = right;
        idx
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn search(&self, node: u32, q: &[f64; D], cand: &mut Candidates) {
        let n = self.nodes[node as usize];
        if n.dim == LEAF {
            for i in n.start as usize..n.end as usize {
                cand.offer(dist2(q, &self.points[i]), self.ids[i]);
            }
            return;
        }
        let diff = q[n.dim as usize] - n.split;
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.search(near, q, cand);
        if diff * diff <= cand.bound() {
            self.search(far, q, cand);
        }
    }

    fn nearest_rec(&self, node: u32, q: &[f64; D], best: &mut (f64, u32)) {
        let n = self.nodes[node as usize];
        if n.dim == LEAF {
            for i in n.start as usize..n.end as usize {
                let d2 = dist2(q, &self.points[i]);
                if (d2, self.ids[i]) < *best {
                    *best = (d2, self.ids[i]);
                }
            }
            return;
        }
        let diff = q[n.dim as usize] - n.split;
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.nearest_rec(near, q, best);
        if diff * diff <= best.0 {
            self.nearest_rec(far, q, best);
        }
    }

    /// Nearest point and its squared distance, if the tree is non-empty.
    pub fn nearest_squared(&self, q: &[f64; D]) -> Option<(usize, f64)> {
        if self.is_empty() {
            return None;
        }
        let mut best = (f64::INFINITY, u32::MAX);
        self.nearest_rec(0, q, &mut best);
        Some((best.1 as usize, best.0))
    }

    /// Nearest point strictly closer than `max_d2` (squared), pruning the
    /// search with that bound from the start.
    pub fn nearest_within_squared(&self, q: &[f64; D], max_d2: f64) -> Option<(usize, f64)> {
        if self.is_empty() {
            return None;
        }
        let mut best = (max_d2, u32::MAX);
        self.nearest_rec(0, q, &mut best);
        (best.1 != u32::MAX && best.0 < max_d2).then_some((best.1 as usize, best.0))
    }

    /// Up to `k` nearest points with squared distance `<= max_d2`, sorted by
    /// ascending `(distance, id)`.
    pub fn knn_squared(&self, q: &[f64; D], k: usize, max_d2: f64) -> Vec<(usize, f64)> {
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let mut cand = Candidates::new(k, max_d2);
        self.search(0, q, &mut cand);
        cand.items.into_iter().map(|(d2, id)| (id as usize, d2)).collect()
    }

    fn radius_rec(&self, node: u32, q: &[f64; D], max_d2: f64, out: &mut Vec<(f64, u32)>) {
        let n = self.nodes[node as usize];
        if n.dim == LEAF {
            for i in n.start as usize..n.end as usize {
                let d2 = dist2(q, &self.points[i]);
                if d2 <= max_d2 {
                    out.push((d2, self.ids[i]));
                }
            }
            return;
        }
        let diff = q[n.dim as usize] - n.split;
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.radius_rec(near, q, max_d2, out);
        if diff * diff <= max_d2 {
            self.radius_rec(far, q, max_d2, out);
        }
    }

    /// Same result as [`Self::knn_squared`], but collects the whole ball
    /// first. Faster when `k` is large and the ball holds few more than `k`.
    pub fn radius_knn_squared(&self, q: &[f64; D], k: usize, max_d2: f64) -> Vec<(usize, f64)> {
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::new();
        self.radius_rec(0, q, max_d2, &mut out);
        let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if out.len() > k {
            out.select_nth_unstable_by(k - 1, cmp);
            out.truncate(k);
        }
        out.sort_unstable_by(cmp);
        out.into_iter().map(|(d2, id)| (id as usize, d2)).collect()
    }

    pub fn knn(&self, q: &[f64; D], k: usize) -> Vec<Neighbor> {
        self.knn_squared(q, k, f64::INFINITY)
            .into_iter()
            .map(|(id, d2)| Neighbor { id, distance: d2.sqrt() })
            .collect()
    }
}

/// Immutable k-d tree over a point cloud. Owns the cloud it indexes.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    tree: KdTree<3>,
    cloud: PointCloud,
}

#[inline]
fn arr(p: &Point3) -> [f64; 3] {
    [p.x, p.y, p.z]
}

impl SpatialIndex {
    pub fn new(cloud: PointCloud) -> Self {
        let pts: Vec<[f64; 3]> = cloud.points().iter().map(arr).collect();
        Self {
            tree: KdTree::build(&pts),
            cloud,
        }
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    /// The `k` nearest points, ascending. Returns every point when `k`
    /// exceeds the index size.
    pub fn knn(&self, q: &Point3, k: usize) -> Vec<Neighbor> {
        self.tree.knn(&arr(q), k)
    }

    /// At most `k` nearest points within `radius` (inclusive), ascending.
    pub fn knn_within(&self, q: &Point3, k: usize, radius: f64) -> Vec<Neighbor> {
        let q = arr(q);
        let r2 = radius * radius;
        // the bounded insertion list degrades for large k
        let found = if k >= 32 && radius.is_finite() {
            self.tree.radius_knn_squared(&q, k, r2)
        } else {
            self.tree.knn_squared(&q, k, r2)
        };
        found
            .into_iter()
            .map(|(id, d2)| Neighbor { id, distance: d2.sqrt() })
            .collect()
    }

    pub fn nearest(&self, q: &Point3) -> Option<Neighbor> {
        self.tree
            .nearest_squared(&arr(q))
            .map(|(id, d2)| Neighbor { id, distance: d2.sqrt() })
    }

    /// Nearest point and squared distance (avoids the square root in hot loops).
    pub fn nearest_squared(&self, q: &Point3) -> Option<(usize, f64)> {
        self.tree.nearest_squared(&arr(q))
    }

    /// Nearest point with squared distance below `max_d2`, if any.
    pub fn nearest_within_squared(&self, q: &Point3, max_d2: f64) -> Option<(usize, f64)> {
        self.tree.nearest_within_squared(&arr(q), max_d2)
    }
}
