//! Spectral partition of the template into the parts owned by each field head.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{graph_laplacian, KnnGraph};
use crate::template::TemplateModel;

/// Eigenvalues below this are treated as the Laplacian's kernel.
pub const KERNEL_THRESHOLD: f64 = 1e-8;
pub const DEFAULT_SEGMENTS: usize = 16;
const MAX_LLOYD_ITERATIONS: usize = 100;

/// A label in `[0, l)` for every template vertex; every label is used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub labels: Vec<usize>,
    pub l: usize,
}

impl Segmentation {
    pub fn new(labels: Vec<usize>, l: usize) -> Result<Self> {
        if l == 0 {
            return Err(Error::invalid("a segmentation needs at least one segment"));
        }
        let mut used = vec![false; l];
        for &x in &labels {
            if x >= l {
                return Err(Error::invalid(format!("label {x} out of range for {l} segments")));
            }
            used[x] = true;
        }
        if let Some(empty) = used.iter().position(|u| !u) {
            return Err(Error::invalid(format!("segment {empty} is empty")));
        }
        Ok(Self { labels, l })
    }

    /// Every vertex in one segment.
    pub fn single(m: usize) -> Self {
        Self { labels: vec![0; m], l: 1 }
    }

    /// Vertex indices of each segment, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.l];
        for (v, &x) in self.labels.iter().enumerate() {
            out[x].push(v);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("vertex,label\n");
        for (v, x) in self.labels.iter().enumerate() {
            s.push_str(&format!("{v},{x}\n"));
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut labels = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parsed = line
                .split_once(',')
                .and_then(|(v, x)| Some((v.trim().parse::<usize>().ok()?, x.trim().parse::<usize>().ok()?)));
            match parsed {
                Some((v, x)) if v == labels.len() => labels.push(x),
                _ => return Err(Error::parse("labels.csv", format!("line {}: {line:?}", n + 1))),
            }
        }
        let l = labels.iter().max().map_or(0, |m| m + 1);
        Self::new(labels, l)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_csv()).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::parse_csv(&text)
    }
}

/// The `count` smallest eigenpairs of a symmetric matrix, ascending. With
/// `skip_zero`, eigenvalues below [`KERNEL_THRESHOLD`] are dropped first.
/// Eigenvectors are the columns of the returned matrix.
pub fn smallest_eigenpairs(l: &DMatrix<f64>, count: usize, skip_zero: bool) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = l.nrows();
    if n != l.ncols() {
        return Err(Error::invalid(format!("matrix is {}×{}, expected square", n, l.ncols())));
    }
    if (l - l.transpose()).amax() > 1e-9 {
        return Err(Error::invalid("matrix is not symmetric"));
    }
    if count >= n {
        return Err(Error::invalid(format!("requested {count} eigenpairs of a {n}×{n} matrix")));
    }
    let eig = SymmetricEigen::new(l.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let chosen: Vec<usize> =
        order.into_iter().filter(|&i| !skip_zero || eig.eigenvalues[i] >= KERNEL_THRESHOLD).take(count).collect();
    if chosen.len() < count {
        return Err(Error::invalid(format!(
            "only {} eigenvalues above the kernel threshold, {count} requested",
            chosen.len()
        )));
    }
    let values = chosen.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, count, |r, c| eig.eigenvectors[(r, chosen[c])]);
    Ok((values, vectors))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(row: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(row, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's k-means on the rows of `rows`, seeded with k-means++.
pub fn kmeans(rows: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = rows.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot form {k} clusters from {n} rows")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![rows[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 && u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            // Rounding can walk past the end; fall back to the farthest row.
            if d2[pick] == 0.0 {
                pick = (0..n).max_by(|&a, &b| d2[a].total_cmp(&d2[b]).then(b.cmp(&a))).expect("rows");
            }
            pick
        } else {
            centroids.len()
        };
        centroids.push(rows[pick].clone());
        for (d, r) in d2.iter_mut().zip(rows) {
            *d = d.min(sq_dist(r, &rows[pick]));
        }
    }

    let dim = rows[0].len();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let next: Vec<usize> = rows.iter().map(|r| nearest_centroid(r, &centroids).0).collect();
        let mut next = next;
        repair_empty(rows, &centroids, &mut next, k);
        if next == labels {
            break;
        }
        labels = next;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (r, &c) in rows.iter().zip(&labels) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(r) {
                *s += x;
            }
        }
        for c in 0..k {
            centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
    }
    Ok(labels)
}

/// Gives each empty cluster the row farthest from its own centroid, taken
/// from a cluster that has more than one member.
fn repair_empty(rows: &[Vec<f64>], centroids: &[Vec<f64>], labels: &mut [usize], k: usize) {
    let mut counts = vec![0usize; k];
    for &c in labels.iter() {
        counts[c] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let donor = (0..rows.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                sq_dist(&rows[a], &centroids[labels[a]])
                    .total_cmp(&sq_dist(&rows[b], &centroids[labels[b]]))
                    .then(b.cmp(&a))
            })
            .expect("k <= n leaves a cluster with spare rows");
        counts[labels[donor]] -= 1;
        labels[donor] = empty;
        counts[empty] = 1;
    }
}

/// Spectral clustering of a connected graph into `l` parts.
///
/// The embedding is the `l` lowest Laplacian eigenvectors. On a connected
/// graph the lowest one is constant and cannot separate anything, so only the
/// `l - 1` eigenvectors above the kernel are used as k-means features.
pub fn spectral_clusters(graph: &KnnGraph, l: usize, seed: u64) -> Result<Segmentation> {
    let n = graph.node_count();
    if l == 0 || l > n {
        return Err(Error::invalid(format!("cannot split {n} vertices into {l} segments")));
    }
    if !graph.is_connected() {
        return Err(Error::invalid(format!(
            "template graph has {} components; raise the neighbor count",
            graph.component_count()
        )));
    }
    if l == 1 {
        return Ok(Segmentation::single(n));
    }
    let (_, vectors) = smallest_eigenpairs(&graph_laplacian(graph), l - 1, true)?;
    let rows: Vec<Vec<f64>> = (0..n).map(|r| vectors.row(r).iter().copied().collect()).collect();
    Segmentation::new(kmeans(&rows, l, seed)?, l)
}

/// Segments the template's rest graph into `l` parts and stores the labels
/// on the template.
pub fn segment_template(template: &mut TemplateModel, l: usize, seed: u64) -> Result<Segmentation> {
    let seg = spectral_clusters(&template.graph, l, seed)?;
    template.labels = Some(seg.labels.clone());
    Ok(seg)
}
