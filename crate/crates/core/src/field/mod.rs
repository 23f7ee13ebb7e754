//! The neural deformation field: a featurized query point maps to ordered
//! offsets toward every template vertex, split across per-segment heads.

mod fast;
mod infer;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{voxel_distance_pyramid, DistanceGridPyramid, PointCloud, Vec3, CHANNELS};
use crate::nn::{cap_blocks_in_place, mlp_forward_batch, MlpSpec, ParamStore, Tensor};
use crate::segmentation::{spectral_clusters, Segmentation, DEFAULT_SEGMENTS};
use crate::template::{TemplateConfig, TemplateModel};

pub use infer::{infer_vertices, InferenceMode, LVD_ITERATIONS};
pub use train::{
    sample_query_points, sample_training_queries, train_field, train_field_with, TrainConfig, TrainProgress,
    TrainingQueries,
};

/// Offsets are rescaled to at most this norm unless configured otherwise.
pub const DEFAULT_OFFSET_CAP: f64 = 0.05;

/// Multi-resolution distance featurizer settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub base_resolution: usize,
    pub levels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { base_resolution: 32, levels: 4 }
    }
}

impl EncoderConfig {
    /// Pyramid channels plus the raw query coordinates.
    pub fn feature_width(&self) -> usize {
        CHANNELS * self.levels + 3
    }
}

/// Head layout. `hidden` widths apply when the template is split into
/// `reference_segments` parts; other segment counts rescale every head so
/// the total parameter count stays comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub segments: usize,
    pub hidden: Vec<usize>,
    pub reference_segments: usize,
    /// Seeds both the segmentation and the weight initialization.
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { segments: DEFAULT_SEGMENTS, hidden: vec![64, 128, 128], reference_segments: DEFAULT_SEGMENTS, seed: 0 }
    }
}

fn mlp_params(widths: &[f64]) -> f64 {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 || self.reference_segments == 0 {
            return Err(Error::invalid("heads.segments and heads.reference_segments must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("heads.hidden widths must be positive"));
        }
        Ok(())
    }

    /// Hidden widths for every head when the template has `m` vertices split
    /// into `self.segments` parts.
    pub fn resolved_hidden(&self, input: usize, m: usize) -> Vec<usize> {
        if self.segments == self.reference_segments || self.hidden.is_empty() {
            return self.hidden.clone();
        }
        let h: Vec<f64> = self.hidden.iter().map(|&w| w as f64).collect();
        let total = |segments: f64, s: f64| {
            // Output layers together emit 3m values regardless of the split.
            let mut widths = vec![input as f64];
            widths.extend(h.iter().map(|w| w * s));
            let body = mlp_params(&widths);
            let last = *widths.last().expect("non-empty");
            segments * body + last * 3.0 * m as f64 + 3.0 * m as f64
        };
        let budget = total(self.reference_segments as f64, 1.0);
        let (mut lo, mut hi) = (1e-3, 1e3);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if total(self.segments as f64, mid) < budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        h.iter().map(|w| ((w * lo).round() as usize).max(1)).collect()
    }
}

/// Per-query output: one offset per template vertex and its norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldQueryResult {
    pub offsets: Vec<Vec3>,
    pub norms: Vec<f64>,
}

/// Anything that predicts ordered offsets for a bound target.
pub trait DeformationField {
    fn vertex_count(&self) -> usize;

    fn offset_cap(&self) -> f64;

    /// The bound target cloud.
    fn target(&self) -> Result<&PointCloud>;

    /// Uncapped offsets for every vertex, `queries.len() × 3m`.
    fn raw_offsets(&self, queries: &[Vec3]) -> Result<Tensor>;

    /// Uncapped offset of vertex `vertices[k]` evaluated at `queries[k]`.
    fn own_offsets(&self, queries: &[Vec3], vertices: &[usize]) -> Result<Vec<Vec3>> {
        if queries.len() != vertices.len() {
            return Err(Error::invalid("queries and vertices differ in length"));
        }
        let raw = self.raw_offsets(queries)?;
        Ok(vertices
            .iter()
            .enumerate()
            .map(|(k, &v)| Vec3::new(raw.get(k, 3 * v), raw.get(k, 3 * v + 1), raw.get(k, 3 * v + 2)))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Bound {
    target: PointCloud,
    pyramid: DistanceGridPyramid,
}

/// Encoder settings, segmentation, and per-head MLP parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralDeformationField {
    pub encoder: EncoderConfig,
    pub segmentation: Segmentation,
    pub specs: Vec<MlpSpec>,
    pub params: ParamStore,
    pub cap: f64,
    pub template: TemplateConfig,
    pub template_hash: String,
    members: Vec<Vec<usize>>,
    slot: Vec<usize>,
    bound: Option<Bound>,
}

pub fn head_prefix(head: usize) -> String {
    format!("h{head}.")
}

impl NeuralDeformationField {
    /// Segments the template and initializes fresh heads.
    pub fn new(template: &TemplateModel, encoder: &EncoderConfig, heads: &HeadConfig, cap: f64) -> Result<Self> {
        heads.validate()?;
        let segmentation = spectral_clusters(&template.graph, heads.segments, heads.seed)?;
        let input = encoder.feature_width();
        let hidden = heads.resolved_hidden(input, template.vertex_count());
        let specs = segmentation
            .members()
            .iter()
            .map(|members| {
                let mut widths = vec![input];
                widths.extend(&hidden);
                widths.push(3 * members.len());
                MlpSpec::new(widths)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(heads.seed);
        let mut params = ParamStore::new();
        for (k, spec) in specs.iter().enumerate() {
            spec.init_params(&head_prefix(k), &mut rng, &mut params)?;
        }
        let mut field = Self::from_parts(template, encoder.clone(), segmentation, specs, params, cap)?;
        field.snap_to_f32();
        Ok(field)
    }

    /// Assembles a field from explicit parts after checking their shapes.
    pub fn from_parts(
        template: &TemplateModel,
        encoder: EncoderConfig,
        segmentation: Segmentation,
        specs: Vec<MlpSpec>,
        params: ParamStore,
        cap: f64,
    ) -> Result<Self> {
        Self::assemble(
            template.config(),
            template.content_hash(),
            template.vertex_count(),
            encoder,
            segmentation,
            specs,
            params,
            cap,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        template: TemplateConfig,
        template_hash: String,
        m: usize,
        encoder: EncoderConfig,
        segmentation: Segmentation,
        specs: Vec<MlpSpec>,
        params: ParamStore,
        cap: f64,
    ) -> Result<Self> {
        if !(cap > 0.0 && cap.is_finite()) {
            return Err(Error::invalid(format!("offset cap must be positive, got {cap}")));
        }
        if segmentation.labels.len() != m {
            return Err(Error::invalid(format!(
                "segmentation covers {} vertices, template has {m}",
                segmentation.labels.len()
            )));
        }
        let members = segmentation.members();
        if specs.len() != members.len() {
            return Err(Error::invalid(format!("{} head specs for {} segments", specs.len(), members.len())));
        }
        for (k, (spec, mem)) in specs.iter().zip(&members).enumerate() {
            if spec.input_width() != encoder.feature_width() || spec.output_width() != 3 * mem.len() {
                return Err(Error::invalid(format!(
                    "head {k} maps {} → {}, expected {} → {}",
                    spec.input_width(),
                    spec.output_width(),
                    encoder.feature_width(),
                    3 * mem.len()
                )));
            }
            spec.layers(&params, &head_prefix(k))?;
        }
        let expected: usize = specs.iter().map(|s| 2 * s.layer_count()).sum();
        if params.len() != expected {
            return Err(Error::invalid(format!("{} parameter tensors, heads need {expected}", params.len())));
        }
        let mut slot = vec![0; m];
        for mem in &members {
            for (s, &v) in mem.iter().enumerate() {
                slot[v] = s;
            }
        }
        Ok(Self { encoder, segmentation, specs, params, cap, template, template_hash, members, slot, bound: None })
    }

    pub fn head_count(&self) -> usize {
        self.specs.len()
    }

    /// Template vertices owned by each head, ascending.
    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }

    /// Head owning vertex `v` and the vertex's position inside that head.
    pub fn owner(&self, v: usize) -> (usize, usize) {
        (self.segmentation.labels[v], self.slot[v])
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn snap_to_f32(&mut self) {
        for (_, t) in self.params.iter_mut() {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Builds and caches the feature pyramid of a normalized target.
    pub fn bind_target(&mut self, target: &PointCloud) -> Result<()> {
        let diag = target.bbox_diagonal();
        if !(0.9..=1.1).contains(&diag) {
            return Err(Error::invalid(format!(
                "target is not normalized (bounding diagonal {diag:.4}, expected about 1)"
            )));
        }
        let pyramid = voxel_distance_pyramid(target.points(), self.encoder.base_resolution, self.encoder.levels)?;
        self.bound = Some(Bound { target: target.clone(), pyramid });
        Ok(())
    }

    pub fn is_bound(&self) -> bool {
        self.bound.is_some()
    }

    pub fn pyramid(&self) -> Result<&DistanceGridPyramid> {
        Ok(&self.bound()?.pyramid)
    }

    fn bound(&self) -> Result<&Bound> {
        self.bound.as_ref().ok_or_else(|| Error::State("no target bound to the field".into()))
    }

    /// Feature rows `[pyramid samples, x, y, z]` for each query.
    pub fn features(&self, queries: &[Vec3]) -> Result<Tensor> {
        let pyramid = &self.bound()?.pyramid;
        Ok(features_with(pyramid, queries))
    }

    /// Offsets toward every vertex at each query, rescaled to norm at most
    /// the cap when `capped` is set.
    pub fn field_query(&self, queries: &[Vec3], capped: bool) -> Result<Vec<FieldQueryResult>> {
        let mut raw = self.raw_offsets(queries)?;
        if capped {
            cap_blocks_in_place(&mut raw.data, 3, self.cap);
        }
        Ok((0..queries.len())
            .map(|q| {
                let row = raw.row_slice(q);
                let offsets: Vec<Vec3> = row.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
                let norms = offsets.iter().map(|o| o.norm()).collect();
                FieldQueryResult { offsets, norms }
            })
            .collect())
    }

    /// Raw output of one head on precomputed features.
    pub(crate) fn head_forward(&self, head: usize, features: &Tensor) -> Result<Tensor> {
        mlp_forward_batch(&self.specs[head], &self.params, &head_prefix(head), features)
    }

    /// Scatters per-head outputs into vertex order.
    fn scatter(&self, rows: usize, outputs: &[Tensor]) -> Tensor {
        let m = self.segmentation.labels.len();
        let mut out = Tensor::zeros(rows, 3 * m);
        for (k, head_out) in outputs.iter().enumerate() {
            for r in 0..rows {
                let src = head_out.row_slice(r);
                let dst = out.row_slice_mut(r);
                for (s, &v) in self.members[k].iter().enumerate() {
                    dst[3 * v..3 * v + 3].copy_from_slice(&src[3 * s..3 * s + 3]);
                }
            }
        }
        out
    }

    /// Drops the bound target and its cached features.
    pub fn unbind(&mut self) {
        self.bound = None;
    }
}

pub(crate) fn features_with(pyramid: &DistanceGridPyramid, queries: &[Vec3]) -> Tensor {
    let width = pyramid.feature_len() + 3;
    let mut out = Tensor::zeros(queries.len(), width);
    for (r, q) in queries.iter().enumerate() {
        let row = out.row_slice_mut(r);
        pyramid.sample_into(q, &mut row[..width - 3]);
        row[width - 3..].copy_from_slice(q.as_slice());
    }
    out
}

impl DeformationField for NeuralDeformationField {
    fn vertex_count(&self) -> usize {
        self.segmentation.labels.len()
    }

    fn offset_cap(&self) -> f64 {
        self.cap
    }

    fn target(&self) -> Result<&PointCloud> {
        Ok(&self.bound()?.target)
    }

    fn raw_offsets(&self, queries: &[Vec3]) -> Result<Tensor> {
        let features = self.features(queries)?;
        let outputs = (0..self.head_count()).map(|k| self.head_forward(k, &features)).collect::<Result<Vec<_>>>()?;
        Ok(self.scatter(queries.len(), &outputs))
    }

    /// Evaluates only the head owning each requested vertex.
    fn own_offsets(&self, queries: &[Vec3], vertices: &[usize]) -> Result<Vec<Vec3>> {
        if queries.len() != vertices.len() {
            return Err(Error::invalid("queries and vertices differ in length"));
        }
        let m = self.vertex_count();
        if let Some(bad) = vertices.iter().find(|&&v| v >= m) {
            return Err(Error::invalid(format!("vertex {bad} out of range for {m} vertices")));
        }
        let features = self.features(queries)?;
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); self.head_count()];
        for (k, &v) in vertices.iter().enumerate() {
            groups[self.segmentation.labels[v]].push(k);
        }
        let mut out = vec![Vec3::zeros(); queries.len()];
        let width = features.cols;
        for (head, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let mut sub = Tensor::zeros(rows.len(), width);
            for (i, &r) in rows.iter().enumerate() {
                sub.row_slice_mut(i).copy_from_slice(features.row_slice(r));
            }
            let y = self.head_forward(head, &sub)?;
            for (i, &r) in rows.iter().enumerate() {
                let s = self.slot[vertices[r]];
                let row = y.row_slice(i);
                out[r] = Vec3::new(row[3 * s], row[3 * s + 1], row[3 * s + 2]);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::template::{build_template, SkeletonSpec};

    pub(crate) fn unit_cloud(seed: u64) -> PointCloud {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec3> = (0..300)
            .map(|_| Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)))
            .collect();
        crate::geometry::normalize_cloud(&PointCloud::new(pts).unwrap()).unwrap().0
    }

    fn small_field(segments: usize) -> NeuralDeformationField {
        let t = build_template(&SkeletonSpec::humanoid(), 60, 0).unwrap();
        let heads = HeadConfig { segments, hidden: vec![16, 16], reference_segments: 4, seed: 1 };
        NeuralDeformationField::new(&t, &EncoderConfig { base_resolution: 8, levels: 2 }, &heads, 0.05).unwrap()
    }

    #[test]
    fn resized_heads_keep_the_budget() {
        let cfg = HeadConfig::default();
        assert_eq!(cfg.resolved_hidden(19, 200), vec![64, 128, 128]);
        let count = |segments: usize| {
            let c = HeadConfig { segments, ..HeadConfig::default() };
            let h = c.resolved_hidden(19, 200);
            let mut w = vec![19];
            w.extend(&h);
            let body: usize = w.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
            segments * body + h[2] * 600 + 600
        };
        let reference = count(16) as f64;
        for l in [1, 10, 24] {
            assert!((count(l) as f64 / reference - 1.0).abs() < 0.03, "l={l}");
        }
    }

    #[test]
    fn querying_requires_a_bound_target() {
        let f = small_field(3);
        assert!(matches!(f.field_query(&[Vec3::zeros()], true), Err(Error::State(_))));
        let mut f = f;
        let raw = PointCloud::new(vec![Vec3::zeros(), Vec3::new(5.0, 0.0, 0.0)]).unwrap();
        assert!(f.bind_target(&raw).is_err());
    }

    #[test]
    fn binding_is_deterministic_and_target_specific() {
        let mut a = small_field(3);
        let mut b = small_field(3);
        a.bind_target(&unit_cloud(1)).unwrap();
        b.bind_target(&unit_cloud(1)).unwrap();
        assert_eq!(a.pyramid().unwrap(), b.pyramid().unwrap());
        b.bind_target(&unit_cloud(2)).unwrap();
        let da: Vec<f64> = a.pyramid().unwrap().levels[0].cells.iter().map(|c| c[0]).collect();
        let db: Vec<f64> = b.pyramid().unwrap().levels[0].cells.iter().map(|c| c[0]).collect();
        assert_ne!(da, db);
    }

    #[test]
    fn capped_queries_respect_the_cap() {
        let mut f = small_field(3);
        // Inflate the output layers so raw offsets exceed the cap.
        for k in 0..3 {
            for v in &mut f.params.get_mut(&format!("h{k}.w2")).unwrap().data {
                *v *= 50.0;
            }
        }
        f.bind_target(&unit_cloud(3)).unwrap();
        let queries: Vec<Vec3> = (0..20).map(|i| Vec3::new(0.03 * i as f64 - 0.3, 0.1, -0.05)).collect();
        let raw = f.field_query(&queries, false).unwrap();
        assert!(raw.iter().flat_map(|r| &r.norms).any(|n| *n > 0.05));
        for r in f.field_query(&queries, true).unwrap() {
            for (o, n) in r.offsets.iter().zip(&r.norms) {
                assert!(*n <= 0.05 + 1e-12);
                assert_eq!(o.norm(), *n);
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_offsets() {
        let mut f = small_field(2);
        for (_, t) in f.params.iter_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        f.bind_target(&unit_cloud(4)).unwrap();
        let r = f.field_query(&[Vec3::new(0.1, 0.2, 0.0)], true).unwrap();
        assert!(r[0].norms.iter().all(|n| *n == 0.0));
    }

    #[test]
    fn own_offsets_match_full_queries() {
        let mut f = small_field(4);
        f.bind_target(&unit_cloud(5)).unwrap();
        let queries: Vec<Vec3> = (0..30).map(|i| Vec3::new(0.02 * i as f64 - 0.3, -0.1, 0.05)).collect();
        let vertices: Vec<usize> = (0..30).map(|i| (i * 7) % 60).collect();
        let full = f.raw_offsets(&queries).unwrap();
        let own = f.own_offsets(&queries, &vertices).unwrap();
        for (k, &v) in vertices.iter().enumerate() {
            for a in 0..3 {
                assert!((own[k][a] - full.get(k, 3 * v + a)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perturbing_another_head_leaves_a_vertex_unchanged() {
        let mut f = small_field(4);
        f.bind_target(&unit_cloud(6)).unwrap();
        let q = [Vec3::new(0.05, 0.1, -0.2)];
        let before = f.raw_offsets(&q).unwrap();
        let v = 0;
        let own = f.owner(v).0;
        let other = (own + 1) % 4;
        for (name, t) in f.params.iter_mut() {
            if name.starts_with(&head_prefix(other)) {
                t.data.iter_mut().for_each(|x| *x += 0.3);
            }
        }
        let after = f.raw_offsets(&q).unwrap();
        for w in f.members()[own].clone() {
            for a in 0..3 {
                assert_eq!(before.get(0, 3 * w + a), after.get(0, 3 * w + a));
            }
        }
        let moved = f.members()[other][0];
        assert_ne!(before.get(0, 3 * moved), after.get(0, 3 * moved));
    }

    #[test]
    fn single_head_equals_block_split_with_shared_hidden_layers() {
        let t = build_template(&SkeletonSpec::single_bone(1.0, 0.2), 8, 2).unwrap();
        let enc = EncoderConfig { base_resolution: 8, levels: 2 };
        let input = enc.feature_width();
        let single = HeadConfig { segments: 1, hidden: vec![12], reference_segments: 1, seed: 3 };
        let one = NeuralDeformationField::new(&t, &enc, &single, 0.05).unwrap();
        // One head per vertex, each reusing the shared hidden layer and its
        // own three output columns.
        let labels: Vec<usize> = (0..8).collect();
        let w0 = one.params.get("h0.w0").unwrap();
        let b0 = one.params.get("h0.b0").unwrap();
        let w1 = one.params.get("h0.w1").unwrap();
        let b1 = one.params.get("h0.b1").unwrap();
        let mut params = ParamStore::new();
        let mut specs = Vec::new();
        for v in 0..8 {
            specs.push(MlpSpec::new(vec![input, 12, 3]).unwrap());
            let p = head_prefix(v);
            params.insert(format!("{p}w0"), w0.clone()).unwrap();
            params.insert(format!("{p}b0"), b0.clone()).unwrap();
            let cols: Vec<f64> =
                (0..12).flat_map(|r| (0..3).map(move |c| (r, 3 * v + c))).map(|(r, c)| w1.get(r, c)).collect();
            params.insert(format!("{p}w1"), Tensor::from_vec(12, 3, cols)).unwrap();
            params.insert(format!("{p}b1"), Tensor::row(&b1.data[3 * v..3 * v + 3])).unwrap();
        }
        let seg = Segmentation::new(labels, 8).unwrap();
        let mut many = NeuralDeformationField::from_parts(&t, enc, seg, specs, params, 0.05).unwrap();
        let mut one = one;
        let target = unit_cloud(7);
        one.bind_target(&target).unwrap();
        many.bind_target(&target).unwrap();
        let queries: Vec<Vec3> = (0..10).map(|i| Vec3::new(0.05 * i as f64 - 0.25, 0.1, 0.0)).collect();
        assert_eq!(one.raw_offsets(&queries).unwrap(), many.raw_offsets(&queries).unwrap());
    }
}
