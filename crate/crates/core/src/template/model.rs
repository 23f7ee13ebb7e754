use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::skeleton::SkeletonSpec;
use crate::error::{Error, Result};
use crate::geometry::{build_knn_graph, KnnGraph, Vec3, Weighting};

/// Neighbors per vertex in the template's rest graph.
pub const TEMPLATE_KNN: usize = 8;

/// Line segment `a → b` swept by a sphere of `radius`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

impl Capsule {
    pub fn length(&self) -> f64 {
        (self.b - self.a).norm()
    }

    pub fn area(&self) -> f64 {
        2.0 * PI * self.radius * self.length() + 4.0 * PI * self.radius * self.radius
    }

    /// Distance from `p` to the axis segment.
    pub fn axis_distance(&self, p: &Vec3) -> f64 {
        segment_distance(p, &self.a, &self.b)
    }

    /// Uniform sample on the capsule surface.
    pub fn sample_surface(&self, rng: &mut impl Rng) -> Vec3 {
        let axis = self.b - self.a;
        let len = axis.norm();
        let side = 2.0 * PI * self.radius * len;
        if rng.random::<f64>() * self.area() < side {
            let dir = axis / len;
            let (u, v) = orthonormal_pair(&dir);
            let t: f64 = rng.random();
            let phi = rng.random::<f64>() * 2.0 * PI;
            self.a + axis * t + (u * phi.cos() + v * phi.sin()) * self.radius
        } else {
            let d = random_unit(rng);
            let end = if d.dot(&axis) >= 0.0 { self.b } else { self.a };
            end + d * self.radius
        }
    }
}

pub(crate) fn segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm()
}

fn orthonormal_pair(dir: &Vec3) -> (Vec3, Vec3) {
    let helper = if dir.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = dir.cross(&helper).normalize();
    (u, dir.cross(&u))
}

pub(crate) fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Splits `total` across weights by largest remainder; ties go to the lower index.
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| {
        let (ri, rj) = (exact[i] - exact[i].floor(), exact[j] - exact[j].floor());
        rj.total_cmp(&ri).then(i.cmp(&j))
    });
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Samples `n` points on the boundary of a union of capsules, stratified per
/// capsule by area. Points buried inside another capsule are rejected; the
/// quota of a capsule that is (almost) entirely buried is redrawn from all
/// capsules by area. Returns each point with the index of the capsule it was
/// drawn from.
pub fn sample_capsule_union(capsules: &[Capsule], n: usize, rng: &mut impl Rng) -> Result<Vec<(Vec3, usize)>> {
    if capsules.is_empty() {
        return Err(Error::invalid("no capsules to sample"));
    }
    let buried = |c: usize, p: &Vec3| {
        capsules.iter().enumerate().any(|(o, other)| o != c && other.axis_distance(p) < other.radius)
    };
    let areas: Vec<f64> = capsules.iter().map(Capsule::area).collect();
    let counts = apportion(&areas, n);
    let mut out = Vec::with_capacity(n);
    let mut deficit = 0;
    for (c, (cap, &count)) in capsules.iter().zip(&counts).enumerate() {
        let mut accepted = 0;
        let mut attempts = 0usize;
        while accepted < count {
            attempts += 1;
            if attempts > 1000 * count.max(1) {
                deficit += count - accepted;
                break;
            }
            let p = cap.sample_surface(rng);
            if !buried(c, &p) {
                out.push((p, c));
                accepted += 1;
            }
        }
    }
    let total: f64 = areas.iter().sum();
    let mut attempts = 0usize;
    while deficit > 0 {
        attempts += 1;
        if attempts > 1000 * n.max(1) {
            return Err(Error::invalid("the capsule union has no exposed surface"));
        }
        let mut u = rng.random::<f64>() * total;
        let c = areas.iter().position(|&a| {
            u -= a;
            u < 0.0
        });
        let c = c.unwrap_or(capsules.len() - 1);
        let p = capsules[c].sample_surface(rng);
        if !buried(c, &p) {
            out.push((p, c));
            deficit -= 1;
        }
    }
    Ok(out)
}

/// Inputs that determine a template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateConfig {
    pub vertices: usize,
    pub seed: u64,
    pub skeleton: SkeletonSpec,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self { vertices: 200, seed: 0, skeleton: SkeletonSpec::humanoid() }
    }
}

impl TemplateConfig {
    pub fn build(&self) -> Result<TemplateModel> {
        build_template(&self.skeleton, self.vertices, self.seed)
    }
}

/// Ordered template vertices with skinning weights and a rest-pose graph.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateModel {
    pub skeleton: SkeletonSpec,
    pub rest_vertices: Vec<Vec3>,
    /// Row-major `m × J` skinning weights.
    pub weights: Vec<f64>,
    pub labels: Option<Vec<usize>>,
    pub graph: KnnGraph,
    pub seed: u64,
}

impl TemplateModel {
    pub fn vertex_count(&self) -> usize {
        self.rest_vertices.len()
    }

    pub fn bone_count(&self) -> usize {
        self.skeleton.len()
    }

    pub fn weight(&self, vertex: usize, bone: usize) -> f64 {
        self.weights[vertex * self.bone_count() + bone]
    }

    pub fn config(&self) -> TemplateConfig {
        TemplateConfig { vertices: self.vertex_count(), seed: self.seed, skeleton: self.skeleton.clone() }
    }

    /// Hex SHA-256 over the rest vertices and skinning weights.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.rest_vertices {
            for c in v.iter() {
                h.update(c.to_le_bytes());
            }
        }
        for w in &self.weights {
            h.update(w.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Skinning softness: half the mean capsule radius.
pub fn skinning_sigma(skeleton: &SkeletonSpec) -> f64 {
    0.5 * skeleton.bones.iter().map(|b| b.radius).sum::<f64>() / skeleton.len() as f64
}

/// Skinning weights of a point: gaussian in the distance to each bone axis,
/// normalized over the two nearest bones.
pub fn skinning_weights(skeleton: &SkeletonSpec, p: &Vec3) -> Vec<f64> {
    let heads = skeleton.rest_heads();
    let sigma = skinning_sigma(skeleton);
    let dists: Vec<f64> = skeleton
        .bones
        .iter()
        .zip(&heads)
        .map(|(bone, h)| segment_distance(p, h, &(h + Vec3::from(bone.tail))))
        .collect();
    let mut w = vec![0.0; skeleton.len()];
    if skeleton.len() == 1 {
        w[0] = 1.0;
        return w;
    }
    let mut order: Vec<usize> = (0..dists.len()).collect();
    order.sort_by(|&i, &j| dists[i].total_cmp(&dists[j]).then(i.cmp(&j)));
    let (b1, b2) = (order[0], order[1]);
    // exp(-d1²/2σ²) / (exp(-d1²/2σ²) + exp(-d2²/2σ²)), evaluated without underflow.
    let gap = (dists[b2].powi(2) - dists[b1].powi(2)) / (2.0 * sigma * sigma);
    w[b1] = 1.0 / (1.0 + (-gap).exp());
    w[b2] = 1.0 - w[b1];
    w
}

/// Samples `m` template vertices on the rest-pose capsule surfaces and skins them.
pub fn build_template(skeleton: &SkeletonSpec, m: usize, seed: u64) -> Result<TemplateModel> {
    skeleton.validate()?;
    let j = skeleton.len();
    if m < 4 * j {
        return Err(Error::invalid(format!("a {j}-bone template needs at least {} vertices, got {m}", 4 * j)));
    }
    let heads = skeleton.rest_heads();
    let capsules: Vec<Capsule> = skeleton
        .bones
        .iter()
        .zip(&heads)
        .map(|(bone, h)| Capsule { a: *h, b: h + Vec3::from(bone.tail), radius: bone.radius })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rest_vertices: Vec<Vec3> = sample_capsule_union(&capsules, m, &mut rng)?.into_iter().map(|(p, _)| p).collect();
    let weights = rest_vertices.iter().flat_map(|p| skinning_weights(skeleton, p)).collect();
    let graph = build_knn_graph(&rest_vertices, TEMPLATE_KNN.min(m - 1), Weighting::GaussianMeanKnn)?;
    Ok(TemplateModel { skeleton: skeleton.clone(), rest_vertices, weights, labels: None, graph, seed })
}
