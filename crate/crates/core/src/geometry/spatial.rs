//! Exact nearest-neighbor search. Every query breaks distance ties toward the
//! lowest point index, so brute force and the kd-tree return identical answers.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::cloud::Vec3;
use crate::error::{Error, Result};

/// Clouds larger than this are searched through a kd-tree.
pub const KD_TREE_THRESHOLD: usize = 256;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Candidate {
    fn better_than(&self, other: &Candidate) -> bool {
        (self.dist2, self.index) < (other.dist2, other.index)
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// Max-heap order on (dist2, index): the worst kept candidate sits on top.
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut tree = KdTree { points: points.to_vec(), order: (0..points.len()).collect(), nodes: Vec::new() };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let (lo, hi) = self.order[start..end]
            .iter()
            .fold((Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)), |(lo, hi), &i| {
                (lo.inf(&self.points[i]), hi.sup(&self.points[i]))
            });
        let axis = (hi - lo).imax();
        let mid = (start + end) / 2;
        let points = &self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    fn nearest(&self, q: &Vec3, hint: Option<usize>) -> Candidate {
        let mut best = match hint {
            Some(i) => Candidate { dist2: (self.points[i] - q).norm_squared(), index: i },
            None => Candidate { dist2: f64::INFINITY, index: usize::MAX },
        };
        self.search_nearest(0, q, &mut best, 0.0, &mut [0.0; 3]);
        best
    }

    // `rd` is the squared distance from `q` to the node's cell and `off` its
    // per-axis components, so far children are pruned by the full box bound.
    fn search_nearest(&self, node: usize, q: &Vec3, best: &mut Candidate, rd: f64, off: &mut [f64; 3]) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate { dist2: (self.points[i] - q).norm_squared(), index: i };
                    if c.better_than(best) {
                        *best = c;
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let delta = q[axis] - value;
                let (near, far) = if delta < 0.0 { (left, right) } else { (right, left) };
                self.search_nearest(near, q, best, rd, off);
                let old = off[axis];
                let far_rd = rd - old * old + delta * delta;
                // `<=` keeps equal-distance points on the far side eligible for the tie rule.
                if far_rd <= best.dist2 {
                    off[axis] = delta;
                    self.search_nearest(far, q, best, far_rd, off);
                    off[axis] = old;
                }
            }
        }
    }

    fn k_nearest(&self, q: &Vec3, k: usize, exclude: Option<usize>) -> Vec<Candidate> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search_k(0, q, k, exclude, &mut heap);
        heap.into_sorted_vec()
    }

    fn search_k(&self, node: usize, q: &Vec3, k: usize, exclude: Option<usize>, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    push_bounded(heap, k, Candidate { dist2: (self.points[i] - q).norm_squared(), index: i });
                }
            }
            Node::Split { axis, value, left, right } => {
                let delta = q[axis] - value;
                let (near, far) = if delta < 0.0 { (left, right) } else { (right, left) };
                self.search_k(near, q, k, exclude, heap);
                let bound = if heap.len() < k { f64::INFINITY } else { heap.peek().map_or(f64::INFINITY, |c| c.dist2) };
                if delta * delta <= bound {
                    self.search_k(far, q, k, exclude, heap);
                }
            }
        }
    }
}

fn push_bounded(heap: &mut BinaryHeap<Candidate>, k: usize, c: Candidate) {
    if heap.len() < k {
        heap.push(c);
    } else if let Some(worst) = heap.peek() {
        if c.better_than(worst) {
            heap.pop();
            heap.push(c);
        }
    }
}

/// Nearest-neighbor index over a fixed point set. Picks brute force or a
/// kd-tree by size; both give identical results.
#[derive(Debug, Clone)]
pub enum NearestIndex {
    Brute(Vec<Vec3>),
    Tree(KdTree),
}

impl NearestIndex {
    pub fn build(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("cannot search an empty point set"));
        }
        Ok(if points.len() > KD_TREE_THRESHOLD {
            NearestIndex::Tree(KdTree::build(points))
        } else {
            NearestIndex::Brute(points.to_vec())
        })
    }

    pub fn len(&self) -> usize {
        match self {
            NearestIndex::Brute(p) => p.len(),
            NearestIndex::Tree(t) => t.points.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the closest point and its Euclidean distance.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let c = match self {
            NearestIndex::Brute(points) => brute_nearest(points, q),
            NearestIndex::Tree(tree) => tree.nearest(q, None),
        };
        (c.index, c.dist2.sqrt())
    }

    /// [`NearestIndex::nearest`] seeded with a candidate believed to be
    /// close, which tightens pruning; the answer does not depend on the hint.
    pub fn nearest_hinted(&self, q: &Vec3, hint: usize) -> (usize, f64) {
        match self {
            NearestIndex::Brute(_) => self.nearest(q),
            NearestIndex::Tree(tree) => {
                let c = tree.nearest(q, Some(hint));
                (c.index, c.dist2.sqrt())
            }
        }
    }

    /// The `k` closest points (optionally skipping one index), ascending by
    /// distance then index. Returns `(index, distance)` pairs.
    pub fn k_nearest(&self, q: &Vec3, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        let found = match self {
            NearestIndex::Brute(points) => {
                let mut heap = BinaryHeap::with_capacity(k + 1);
                for (i, p) in points.iter().enumerate() {
                    if Some(i) != exclude {
                        push_bounded(&mut heap, k, Candidate { dist2: (p - q).norm_squared(), index: i });
                    }
                }
                heap.into_sorted_vec()
            }
            NearestIndex::Tree(tree) => tree.k_nearest(q, k, exclude),
        };
        found.into_iter().map(|c| (c.index, c.dist2.sqrt())).collect()
    }

    pub fn nearest_indices(&self, queries: &[Vec3]) -> Vec<usize> {
        let mut hint = 0;
        queries
            .iter()
            .map(|q| {
                hint = self.nearest_hinted(q, hint).0;
                hint
            })
            .collect()
    }
}

fn brute_nearest(points: &[Vec3], q: &Vec3) -> Candidate {
    let mut best = Candidate { dist2: f64::INFINITY, index: usize::MAX };
    for (i, p) in points.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best.dist2 {
            best = Candidate { dist2: d, index: i };
        }
    }
    best
}

/// Closest point of `cloud` to `query`, ties broken by lowest index.
pub fn nearest_neighbor(query: &Vec3, cloud: &[Vec3]) -> Result<(usize, f64)> {
    if cloud.is_empty() {
        return Err(Error::invalid("nearest_neighbor on an empty cloud"));
    }
    if cloud.len() > KD_TREE_THRESHOLD {
        return Ok(NearestIndex::Tree(KdTree::build(cloud)).nearest(query));
    }
    let c = brute_nearest(cloud, query);
    Ok((c.index, c.dist2.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChamferMode {
    #[default]
    Bidirectional,
    /// Only the `A → B` term.
    AToB,
}

/// Mean squared distance from each point of `a` to its nearest point in `b`.
pub fn directed_chamfer(a: &[Vec3], b: &NearestIndex) -> f64 {
    let sum: f64 = a.iter().map(|p| b.nearest(p).1.powi(2)).sum();
    sum / a.len() as f64
}

pub fn chamfer_distance(a: &[Vec3], b: &[Vec3], mode: ChamferMode) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance needs two non-empty clouds"));
    }
    let b_index = NearestIndex::build(b)?;
    let forward = directed_chamfer(a, &b_index);
    Ok(match mode {
        ChamferMode::AToB => forward,
        ChamferMode::Bidirectional => forward + directed_chamfer(b, &NearestIndex::build(a)?),
    })
}
