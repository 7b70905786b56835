//! Exact k-nearest-neighbor search under a geodesic metric.
//!
//! Ordering is lexicographic on `(distance, index)`, so equal distances go
//! to the lower index. Both strategies return identical lists.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{GeoError, Result};
use crate::manifold::{distance_unchecked, ManifoldSpec, Point};

use super::RelationalGraph;

/// Above this many points the vantage-point tree is used.
pub const BRUTE_FORCE_LIMIT: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnnStrategy {
    Auto,
    BruteForce,
    VpTree,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    d: f64,
    idx: usize,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, o: &Self) -> Ordering {
        self.d.total_cmp(&o.d).then(self.idx.cmp(&o.idx))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

pub fn knn_graph(points: &[Point], spec: ManifoldSpec, k: usize) -> Result<RelationalGraph> {
    knn_graph_with(points, spec, k, KnnStrategy::Auto)
}

pub fn knn_graph_with(
    points: &[Point],
    spec: ManifoldSpec,
    k: usize,
    strategy: KnnStrategy,
) -> Result<RelationalGraph> {
    let n = points.len();
    if n < 2 {
        return Err(GeoError::Config(format!("k-NN needs at least 2 points, got {n}")));
    }
    if k == 0 || k >= n {
        return Err(GeoError::Config(format!("k must satisfy 1 <= k < n, got k={k}, n={n}")));
    }
    let dim = points[0].dim();
    for p in points {
        if p.spec() != spec {
            return Err(GeoError::InvalidSpec(format!(
                "point on {} but graph requested on {spec}",
                p.spec()
            )));
        }
        if p.dim() != dim {
            return Err(GeoError::Dimension {
                expected: dim,
                got: p.dim(),
            });
        }
    }
    let coords: Vec<&[f64]> = points.iter().map(|p| p.coords()).collect();
    let dist = |a: usize, b: usize| distance_unchecked(&spec, coords[a], coords[b]);
    let use_tree = match strategy {
        KnnStrategy::Auto => n > BRUTE_FORCE_LIMIT,
        KnnStrategy::BruteForce => false,
        KnnStrategy::VpTree => true,
    };
    let neighbors = if use_tree {
        let tree = VpTree::build(n, &dist);
        (0..n).map(|q| tree.query(q, k, &dist)).collect()
    } else {
        (0..n).map(|q| brute_force(q, n, k, &dist)).collect()
    };
    Ok(RelationalGraph::from_parts(spec, k, neighbors))
}

fn brute_force(q: usize, n: usize, k: usize, dist: &impl Fn(usize, usize) -> f64) -> Vec<(usize, f64)> {
    let mut all: Vec<Cand> = (0..n)
        .filter(|&j| j != q)
        .map(|j| Cand { d: dist(q, j), idx: j })
        .collect();
    all.select_nth_unstable(k - 1);
    all.truncate(k);
    all.sort_unstable();
    all.into_iter().map(|c| (c.idx, c.d)).collect()
}

struct VpNode {
    point: usize,
    /// Points with distance `<= radius` from `point` live in `inside`.
    radius: f64,
    inside: Option<usize>,
    outside: Option<usize>,
}

struct VpTree {
    nodes: Vec<VpNode>,
    root: Option<usize>,
}

impl VpTree {
    fn build(n: usize, dist: &impl Fn(usize, usize) -> f64) -> Self {
        let mut tree = VpTree {
            nodes: Vec::with_capacity(n),
            root: None,
        };
        let mut items: Vec<(usize, f64)> = (0..n).map(|i| (i, 0.0)).collect();
        tree.root = tree.build_rec(&mut items, dist);
        tree
    }

    fn build_rec(&mut self, items: &mut [(usize, f64)], dist: &impl Fn(usize, usize) -> f64) -> Option<usize> {
        let (&mut (vp, _), rest) = items.split_first_mut()?;
        let slot = self.nodes.len();
        self.nodes.push(VpNode {
            point: vp,
            radius: 0.0,
            inside: None,
            outside: None,
        });
        if rest.is_empty() {
            return Some(slot);
        }
        for it in rest.iter_mut() {
            it.1 = dist(vp, it.0);
        }
        let mid = (rest.len() - 1) / 2;
        rest.select_nth_unstable_by(mid, |a, b| a.1.total_cmp(&b.1));
        let radius = rest[mid].1;
        // everything up to `mid` is <= radius; move later ties inside too
        let mut split = mid + 1;
        for i in mid + 1..rest.len() {
            if rest[i].1 <= radius {
                rest.swap(i, split);
                split += 1;
            }
        }
        let (ins, outs) = rest.split_at_mut(split);
        self.nodes[slot].radius = radius;
        let inside = self.build_rec(ins, dist);
        let outside = self.build_rec(outs, dist);
        self.nodes[slot].inside = inside;
        self.nodes[slot].outside = outside;
        Some(slot)
    }

    fn query(&self, q: usize, k: usize, dist: &impl Fn(usize, usize) -> f64) -> Vec<(usize, f64)> {
        let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
        let mut stack: Vec<usize> = self.root.into_iter().collect();
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            let d = dist(q, node.point);
            if node.point != q {
                let c = Cand { d, idx: node.point };
                if heap.len() < k {
                    heap.push(c);
                } else if c < *heap.peek().expect("heap is full") {
                    heap.pop();
                    heap.push(c);
                }
            }
            let tau = if heap.len() < k {
                f64::INFINITY
            } else {
                heap.peek().expect("heap is full").d
            };
            // computed distances obey the triangle inequality only up to rounding
            let slack = 1e-9 * (1.0 + d.abs() + node.radius.abs());
            let visit_in = node.inside.filter(|_| d - node.radius <= tau + slack);
            let visit_out = node.outside.filter(|_| node.radius - d <= tau + slack);
            // push the farther side first so the nearer side is explored first
            if d <= node.radius {
                stack.extend(visit_out);
                stack.extend(visit_in);
            } else {
                stack.extend(visit_in);
                stack.extend(visit_out);
            }
        }
        let mut out = heap.into_vec();
        out.sort_unstable();
        out.into_iter().map(|c| (c.idx, c.d)).collect()
    }
}
