use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::DMatrix;

use super::cloud::Vec3;
use super::spatial::NearestIndex;
use crate::error::{Error, Result};

/// Edge weighting used when building a kNN graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    Uniform,
    /// `exp(-d² / 2σ²)` with the given σ.
    Gaussian(f64),
    /// Gaussian with σ set to the mean kNN distance of the cloud.
    GaussianMeanKnn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub to: usize,
    pub weight: f64,
    /// Euclidean distance between the endpoints.
    pub length: f64,
}

/// Symmetric weighted graph over the points of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    adjacency: Vec<Vec<Edge>>,
    degree: Vec<f64>,
}

impl KnnGraph {
    /// Builds a graph from undirected edges `(i, j, weight, length)`.
    /// Duplicate edges keep the first occurrence.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64, f64)]) -> Result<Self> {
        let mut adjacency: Vec<Vec<Edge>> = vec![Vec::new(); n];
        for &(i, j, weight, length) in edges {
            if i >= n || j >= n {
                return Err(Error::invalid(format!("edge ({i},{j}) out of range for {n} nodes")));
            }
            if i == j {
                return Err(Error::invalid("self-loops are not allowed"));
            }
            if !(weight > 0.0) || !(length >= 0.0) {
                return Err(Error::invalid("edge weights must be positive"));
            }
            if adjacency[i].iter().any(|e| e.to == j) {
                continue;
            }
            adjacency[i].push(Edge { to: j, weight, length });
            adjacency[j].push(Edge { to: i, weight, length });
        }
        for list in &mut adjacency {
            list.sort_by_key(|e| e.to);
        }
        let degree = adjacency.iter().map(|l| l.iter().map(|e| e.weight).sum()).collect();
        Ok(Self { adjacency, degree })
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, i: usize) -> &[Edge] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.degree[i]
    }

    /// Undirected edges with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (i, list) in self.adjacency.iter().enumerate() {
            for e in list.iter().filter(|e| e.to > i) {
                out.push((i, e.to, e.weight));
            }
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.component_count() <= 1
    }

    pub fn component_count(&self) -> usize {
        let n = self.node_count();
        let mut seen = vec![false; n];
        let mut count = 0;
        for start in 0..n {
            if seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(u) = stack.pop() {
                for e in &self.adjacency[u] {
                    if !seen[e.to] {
                        seen[e.to] = true;
                        stack.push(e.to);
                    }
                }
            }
        }
        count
    }
}

/// Symmetrized kNN graph: `(i, j)` is an edge when either point is among the
/// other's `k` nearest neighbors.
pub fn build_knn_graph(points: &[Vec3], k: usize, weighting: Weighting) -> Result<KnnGraph> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("kNN graph needs 0 < k < n (k={k}, n={n})")));
    }
    let index = NearestIndex::build(points)?;
    let neighbors: Vec<Vec<(usize, f64)>> =
        points.iter().enumerate().map(|(i, p)| index.k_nearest(p, k, Some(i))).collect();
    let sigma = match weighting {
        Weighting::Uniform => None,
        Weighting::Gaussian(s) => {
            if !(s > 0.0) {
                return Err(Error::invalid("gaussian sigma must be positive"));
            }
            Some(s)
        }
        Weighting::GaussianMeanKnn => {
            let total: f64 = neighbors.iter().flatten().map(|(_, d)| d).sum();
            let mean = total / (n * k) as f64;
            Some(if mean > 0.0 { mean } else { 1.0 })
        }
    };
    let mut edges = Vec::with_capacity(n * k);
    for (i, list) in neighbors.iter().enumerate() {
        for &(j, d) in list {
            let w = match sigma {
                None => 1.0,
                Some(s) => (-d * d / (2.0 * s * s)).exp().max(f64::MIN_POSITIVE),
            };
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            edges.push((a, b, w, d));
        }
    }
    edges.sort_by_key(|e| (e.0, e.1));
    KnnGraph::from_edges(n, &edges)
}

/// Combinatorial Laplacian `L = D − W`.
pub fn graph_laplacian(graph: &KnnGraph) -> DMatrix<f64> {
    let n = graph.node_count();
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        l[(i, i)] = graph.degree(i);
        for e in graph.neighbors(i) {
            l[(i, e.to)] = -e.weight;
        }
    }
    l
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct State {
    dist: f64,
    node: usize,
}

impl Eq for State {}

impl Ord for State {
    fn cmp(&self, other: &Self) -> Ordering {
        other.dist.total_cmp(&self.dist).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for State {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest paths using edge lengths. Unreachable nodes get +∞.
pub fn graph_geodesics(graph: &KnnGraph, source: usize) -> Result<Vec<f64>> {
    let n = graph.node_count();
    if source >= n {
        return Err(Error::invalid(format!("source {source} out of range for {n} nodes")));
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(State { dist: 0.0, node: source });
    while let Some(State { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for e in graph.neighbors(node) {
            let nd = d + e.length;
            if nd < dist[e.to] {
                dist[e.to] = nd;
                heap.push(State { dist: nd, node: e.to });
            }
        }
    }
    Ok(dist)
}

/// All-pairs geodesic distances, row per source.
pub fn all_pairs_geodesics(graph: &KnnGraph) -> Vec<Vec<f64>> {
    (0..graph.node_count()).map(|s| graph_geodesics(graph, s).expect("source in range")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize) -> Vec<Vec3> {
        (0..n).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect()
    }

    fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect()
    }

    #[test]
    fn collinear_k1_graph() {
        let g = build_knn_graph(&line(3), 1, Weighting::Uniform).unwrap();
        assert_eq!(g.edges(), vec![(0, 1, 1.0), (1, 2, 1.0)]);
        assert!(build_knn_graph(&line(3), 3, Weighting::Uniform).is_err());
    }

    #[test]
    fn gaussian_weights_tend_to_one_for_large_sigma() {
        let pts = random_points(40, 1);
        let g = build_knn_graph(&pts, 5, Weighting::Gaussian(1e9)).unwrap();
        assert!(g.edges().iter().all(|e| (e.2 - 1.0).abs() < 1e-9));
        let u = build_knn_graph(&pts, 5, Weighting::Uniform).unwrap();
        assert!(u.edges().iter().all(|e| e.2 == 1.0));
    }

    #[test]
    fn graph_is_symmetric() {
        let g = build_knn_graph(&random_points(100, 2), 6, Weighting::GaussianMeanKnn).unwrap();
        for i in 0..g.node_count() {
            for e in g.neighbors(i) {
                let back = g.neighbors(e.to).iter().find(|b| b.to == i).unwrap();
                assert_eq!(back.weight, e.weight);
                assert_ne!(e.to, i);
            }
        }
    }

    #[test]
    fn path_laplacian() {
        let g = build_knn_graph(&line(3), 1, Weighting::Uniform).unwrap();
        let l = graph_laplacian(&g);
        let expect = DMatrix::from_row_slice(3, 3, &[1., -1., 0., -1., 2., -1., 0., -1., 1.]);
        assert_eq!(l, expect);
    }

    #[test]
    fn laplacian_rows_sum_to_zero_and_psd() {
        let g = build_knn_graph(&random_points(60, 3), 5, Weighting::GaussianMeanKnn).unwrap();
        let l = graph_laplacian(&g);
        assert_eq!(l, l.transpose());
        let ones = nalgebra::DVector::from_element(60, 1.0);
        assert!((&l * ones).amax() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let x = nalgebra::DVector::from_fn(60, |_, _| rng.random::<f64>() - 0.5);
            assert!(x.dot(&(&l * &x)) >= -1e-12);
        }
    }

    #[test]
    fn path_geodesics() {
        let g = build_knn_graph(&line(3), 1, Weighting::Uniform).unwrap();
        let d = graph_geodesics(&g, 0).unwrap();
        assert_eq!(d, vec![0.0, 1.0, 2.0]);
        assert!(graph_geodesics(&g, 3).is_err());
    }

    #[test]
    fn geodesics_satisfy_triangle_inequality() {
        let g = build_knn_graph(&random_points(80, 5), 4, Weighting::Uniform).unwrap();
        let d = graph_geodesics(&g, 7).unwrap();
        assert_eq!(d[7], 0.0);
        for u in 0..g.node_count() {
            for e in g.neighbors(u) {
                assert!(d[e.to] <= d[u] + e.length + 1e-12);
            }
        }
    }

    #[test]
    fn disconnected_nodes_are_unreachable() {
        let mut pts = line(3);
        pts.extend(line(3).iter().map(|p| p + Vec3::new(100.0, 0.0, 0.0)));
        let g = build_knn_graph(&pts, 1, Weighting::Uniform).unwrap();
        assert!(!g.is_connected());
        assert_eq!(g.component_count(), 2);
        assert!(graph_geodesics(&g, 0).unwrap()[4].is_infinite());
    }
}
