//! Static k-d tree for exact k-nearest-neighbour queries in low dimension.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone)]
pub(crate) struct KdTree {
    dim: usize,
    points: Vec<f64>,
    // Node layout: implicit binary tree over a permutation of point indices.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    lo: usize,
    hi: usize,
    split_dim: usize,
    split: f64,
    left: Option<usize>,
    right: Option<usize>,
}

const LEAF_SIZE: usize = 16;

#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl KdTree {
    /// Build from row-major points (`n × dim`).
    pub(crate) fn new(points: Vec<f64>, dim: usize) -> Self {
        let n = points.len() / dim;
        let mut tree = KdTree { dim, points, order: (0..n).collect(), nodes: Vec::new() };
        if n > 0 {
            tree.build(0, n);
        }
        tree
    }

    pub(crate) fn len(&self) -> usize {
        self.order.len()
    }

    fn coord(&self, i: usize, k: usize) -> f64 {
        self.points[i * self.dim + k]
    }

    fn build(&mut self, lo: usize, hi: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node { lo, hi, split_dim: 0, split: 0.0, left: None, right: None });
        if hi - lo <= LEAF_SIZE {
            return id;
        }
        let mut best = (0, -1.0);
        for k in 0..self.dim {
            let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.order[lo..hi] {
                let v = self.coord(i, k);
                mn = mn.min(v);
                mx = mx.max(v);
            }
            if mx - mn > best.1 {
                best = (k, mx - mn);
            }
        }
        let k = best.0;
        let mid = (lo + hi) / 2;
        let (pts, dim) = (&self.points, self.dim);
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            pts[a * dim + k].total_cmp(&pts[b * dim + k]).then(a.cmp(&b))
        });
        let split = self.coord(self.order[mid], k);
        let left = self.build(lo, mid);
        let right = self.build(mid, hi);
        let node = &mut self.nodes[id];
        node.split_dim = k;
        node.split = split;
        node.left = Some(left);
        node.right = Some(right);
        id
    }

    /// Indices of the `k` nearest points to `query`, nearest first; ties broken by index.
    pub(crate) fn nearest(&self, query: &[f64], k: usize) -> Vec<usize> {
        let k = k.min(self.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut heap);
        let mut out = heap.into_sorted_vec();
        out.truncate(k);
        out.into_iter().map(|c| c.1).collect()
    }

    fn search(&self, id: usize, q: &[f64], k: usize, heap: &mut BinaryHeap<Candidate>) {
        let node = self.nodes[id];
        match (node.left, node.right) {
            (Some(l), Some(r)) => {
                let diff = q[node.split_dim] - node.split;
                let (near, far) = if diff < 0.0 { (l, r) } else { (r, l) };
                self.search(near, q, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().map_or(f64::INFINITY, |c| c.0) {
                    self.search(far, q, k, heap);
                }
            }
            _ => {
                for &i in &self.order[node.lo..node.hi] {
                    let d2: f64 = (0..self.dim).map(|j| (self.coord(i, j) - q[j]).powi(2)).sum();
                    let cand = Candidate(d2, i);
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
        }
    }
}
