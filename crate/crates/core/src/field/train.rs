use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::fast::head_supervision;
use super::{features_with, head_prefix, NeuralDeformationField, DEFAULT_OFFSET_CAP};
use crate::error::{Error, Result};
use crate::geometry::{voxel_distance_pyramid, GridRegion, Vec3};
use crate::nn::{adam_step, cap_blocks_in_place, cosine_lr, grad, mlp_forward_tape, AdamState, ParamStore, Tensor};
use crate::template::{derive_seed, GroundTruthPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Decays the learning rate along a cosine to `lr / 100` over the run.
    pub cosine_decay: bool,
    /// Shapes per optimizer step.
    pub batch: usize,
    pub uniform_queries: usize,
    pub surface_queries: usize,
    /// Standard deviation of the noise added to surface queries.
    pub noise_sigma: f64,
    /// Maximum offset norm, applied to predictions and supervision alike.
    pub offset_cap: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-4,
            cosine_decay: false,
            batch: 1,
            uniform_queries: 400,
            surface_queries: 1800,
            noise_sigma: 0.05,
            offset_cap: DEFAULT_OFFSET_CAP,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("training.batch must be positive"));
        }
        if self.uniform_queries + self.surface_queries == 0 {
            return Err(Error::invalid("training needs at least one query per shape"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("training.lr must be >= 0, got {}", self.lr)));
        }
        if !(self.noise_sigma >= 0.0) || !(self.offset_cap > 0.0) {
            return Err(Error::invalid("training.noise_sigma must be >= 0 and training.offset_cap > 0"));
        }
        Ok(())
    }
}

/// Query points for one shape and their capped target offsets (`n × 3m`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingQueries {
    pub points: Vec<Vec3>,
    pub supervision: Tensor,
}

/// Uniform queries in the normalized region plus noisy copies of target points.
pub fn sample_query_points(pair: &GroundTruthPair, config: &TrainConfig, rng: &mut impl Rng) -> Vec<Vec3> {
    let region = GridRegion::normalized();
    let mut points = Vec::with_capacity(config.uniform_queries + config.surface_queries);
    for _ in 0..config.uniform_queries {
        points.push(region.min + Vec3::new(rng.random(), rng.random(), rng.random()) * region.side);
    }
    let noise = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
    let target = pair.target.points();
    for _ in 0..config.surface_queries {
        let p = target[rng.random_range(0..target.len())];
        points.push(p + Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng)));
    }
    points
}

/// [`sample_query_points`] with supervision: every ground-truth vertex minus
/// the query, capped.
pub fn sample_training_queries(pair: &GroundTruthPair, config: &TrainConfig, rng: &mut impl Rng) -> TrainingQueries {
    let points = sample_query_points(pair, config, rng);
    let m = pair.gt_vertices.len();
    let mut supervision = Tensor::zeros(points.len(), 3 * m);
    for (q, p) in points.iter().enumerate() {
        let row = supervision.row_slice_mut(q);
        for (v, g) in pair.gt_vertices.iter().enumerate() {
            let d = g - p;
            row[3 * v..3 * v + 3].copy_from_slice(d.as_slice());
        }
    }
    cap_blocks_in_place(&mut supervision.data, 3, config.offset_cap);
    TrainingQueries { points, supervision }
}

impl NeuralDeformationField {
    /// Mean per-vertex L1 distance between capped predictions and the
    /// supervision, with its gradient over every head parameter.
    pub fn training_loss(&self, features: &Tensor, supervision: &Tensor) -> Result<(f64, ParamStore)> {
        let n = features.rows;
        let m = self.segmentation.labels.len();
        if supervision.shape() != (n, 3 * m) {
            return Err(Error::invalid(format!("supervision is {:?}, expected ({n}, {})", supervision.shape(), 3 * m)));
        }
        let per_head: Vec<Tensor> = self
            .members()
            .iter()
            .map(|members| {
                let mut t = Tensor::zeros(n, 3 * members.len());
                for r in 0..n {
                    let src = supervision.row_slice(r);
                    let dst = t.row_slice_mut(r);
                    for (s, &v) in members.iter().enumerate() {
                        dst[3 * s..3 * s + 3].copy_from_slice(&src[3 * v..3 * v + 3]);
                    }
                }
                t
            })
            .collect();
        let cap = self.cap;
        Ok(grad(&self.params, |tape, vars| {
            let x = tape.constant(features.clone());
            let mut total = None;
            for (k, (spec, sup)) in self.specs.iter().zip(per_head).enumerate() {
                let out = mlp_forward_tape(tape, spec, vars, &head_prefix(k), x);
                let capped = tape.cap_blocks(out, 3, cap);
                let sup = tape.constant(sup);
                let diff = tape.sub(capped, sup);
                let abs = tape.abs(diff);
                let s = tape.sum(abs);
                total = Some(match total {
                    None => s,
                    Some(acc) => tape.add(acc, s),
                });
            }
            let total = total.expect("at least one head");
            tape.scale(total, 1.0 / (n * m) as f64)
        }))
    }
}

/// Progress report passed to the training callback after every step.
#[derive(Debug, Clone, Copy)]
pub struct TrainProgress {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Trains every head on the pairs and returns the mean loss of each epoch.
pub fn train_field(
    field: &mut NeuralDeformationField,
    pairs: &[GroundTruthPair],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    train_field_with(field, pairs, config, |_| {})
}

/// [`train_field`] with a callback invoked after every optimizer step.
///
/// Each shape keeps the same queries in every epoch; the shape order is
/// reshuffled per epoch.
pub fn train_field_with(
    field: &mut NeuralDeformationField,
    pairs: &[GroundTruthPair],
    config: &TrainConfig,
    mut progress: impl FnMut(TrainProgress),
) -> Result<Vec<f64>> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("training needs at least one shape"));
    }
    let m = field.segmentation.labels.len();
    if let Some(bad) = pairs.iter().find(|p| p.gt_vertices.len() != m) {
        return Err(Error::invalid(format!(
            "shape has {} ground-truth vertices, field predicts {m}",
            bad.gt_vertices.len()
        )));
    }
    let mut adam = AdamState::new(&field.params);
    // Queries are fixed per shape, so their features are reused across epochs.
    let mut cache: Vec<Option<Vec<f32>>> = if config.epochs > 1 { vec![None; pairs.len()] } else { Vec::new() };
    let mut history = Vec::with_capacity(config.epochs);
    let total_steps = config.epochs * pairs.len().div_ceil(config.batch);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64)));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch) {
            let mut batch_loss = 0.0;
            let mut batch_grad: Option<ParamStore> = None;
            for &i in chunk {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed ^ 0x5155_4552_5953, i as u64));
                let points = sample_query_points(&pairs[i], config, &mut rng);
                let features = match cache.get_mut(i) {
                    Some(Some(f)) => std::mem::take(f),
                    _ => {
                        let pyramid = voxel_distance_pyramid(
                            pairs[i].target.points(),
                            field.encoder.base_resolution,
                            field.encoder.levels,
                        )?;
                        features_with(&pyramid, &points).data.iter().map(|&x| x as f32).collect()
                    }
                };
                let supervision: Vec<Vec<f32>> = field
                    .members()
                    .iter()
                    .map(|mem| head_supervision(&points, &pairs[i].gt_vertices, mem, config.offset_cap))
                    .collect();
                let (loss, g) = field.training_loss_f32(&features, points.len(), &supervision)?;
                if let Some(slot) = cache.get_mut(i) {
                    *slot = Some(features);
                }
                batch_loss += loss;
                batch_grad = Some(match batch_grad {
                    None => g,
                    Some(mut acc) => {
                        for (name, t) in acc.iter_mut() {
                            t.add_assign(g.get(name).expect("same layout"));
                        }
                        acc
                    }
                });
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut g = batch_grad.expect("non-empty chunk");
            for (_, t) in g.iter_mut() {
                t.data.iter_mut().for_each(|v| *v *= scale);
            }
            let lr = if config.cosine_decay { cosine_lr(config.lr, step, total_steps) } else { config.lr };
            adam_step(&mut adam, &mut field.params, &g, lr)?;
            epoch_loss += batch_loss;
            progress(TrainProgress { epoch, step, loss: batch_loss * scale });
            step += 1;
        }
        history.push(epoch_loss / pairs.len() as f64);
    }
    field.snap_to_f32();
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{EncoderConfig, HeadConfig};
    use crate::template::{build_template, sample_training_shape, GeneratorConfig, SkeletonSpec, TemplateModel};

    fn setup(segments: usize) -> (TemplateModel, NeuralDeformationField, GroundTruthPair) {
        let t = build_template(&SkeletonSpec::humanoid(), 60, 0).unwrap();
        let heads = HeadConfig { segments, hidden: vec![32, 32], reference_segments: segments, seed: 2 };
        let f =
            NeuralDeformationField::new(&t, &EncoderConfig { base_resolution: 16, levels: 3 }, &heads, 0.05).unwrap();
        let cfg = GeneratorConfig { points: 1024, ..GeneratorConfig::default() };
        let pair = sample_training_shape(&t, 3, &cfg).unwrap();
        (t, f, pair)
    }

    fn small_train(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig { epochs, lr, uniform_queries: 40, surface_queries: 160, ..TrainConfig::default() }
    }

    #[test]
    fn default_query_counts_and_cap() {
        let (_, _, pair) = setup(2);
        let cfg = TrainConfig::default();
        let q = sample_training_queries(&pair, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!((cfg.uniform_queries, cfg.surface_queries), (400, 1800));
        assert_eq!(q.points.len(), 2200);
        for row in q.supervision.data.chunks_exact(3) {
            assert!((row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt() <= 0.05 + 1e-12);
        }
        let region = GridRegion::normalized();
        for p in &q.points[..400] {
            for a in 0..3 {
                assert!(p[a] >= region.min[a] && p[a] <= region.min[a] + region.side);
            }
        }
    }

    #[test]
    fn supervision_vanishes_at_a_ground_truth_vertex() {
        let (_, _, mut pair) = setup(2);
        let v = 17;
        let at = pair.gt_vertices[v];
        pair.target = crate::geometry::PointCloud::new(vec![at]).unwrap();
        let cfg = TrainConfig { uniform_queries: 0, surface_queries: 3, noise_sigma: 0.0, ..TrainConfig::default() };
        let q = sample_training_queries(&pair, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(&q.supervision.row_slice(0)[3 * v..3 * v + 3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_lr_keeps_the_loss_constant() {
        let (_, mut f, pair) = setup(3);
        let h = train_field(&mut f, &[pair.clone(), pair], &small_train(3, 0.0)).unwrap();
        assert_eq!(h.len(), 3);
        assert!(h.iter().all(|x| *x == h[0]));
    }

    #[test]
    fn training_is_deterministic() {
        let (_, f, pair) = setup(3);
        let (mut a, mut b) = (f.clone(), f);
        let pairs = vec![pair.clone(), pair];
        let ha = train_field(&mut a, &pairs, &small_train(2, 1e-3)).unwrap();
        let hb = train_field(&mut b, &pairs, &small_train(2, 1e-3)).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let (_, mut f, _) = setup(2);
        assert!(train_field(&mut f, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn small_steps_descend_on_a_fixed_batch() {
        let (_, mut f, pair) = setup(3);
        let cfg = small_train(1, 1e-6);
        let q = sample_training_queries(&pair, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        f.bind_target(&pair.target).unwrap();
        let features = f.features(&q.points).unwrap();
        let mut adam = AdamState::new(&f.params);
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let (loss, g) = f.training_loss(&features, &q.supervision).unwrap();
            assert!(loss <= last);
            last = loss;
            adam_step(&mut adam, &mut f.params, &g, 1e-6).unwrap();
        }
    }

    #[test]
    fn overfits_a_single_shape() {
        let (_, mut f, pair) = setup(2);
        let cfg =
            TrainConfig { epochs: 200, lr: 1e-3, uniform_queries: 100, surface_queries: 400, ..TrainConfig::default() };
        let h = train_field(&mut f, &[pair], &cfg).unwrap();
        assert!(h[199] < 0.25 * h[0], "{} -> {}", h[0], h[199]);
    }

    #[test]
    fn training_loss_gradient_matches_finite_differences() {
        let (_, mut f, pair) = setup(2);
        let cfg = small_train(1, 0.0);
        let q = sample_training_queries(
            &pair,
            &TrainConfig { uniform_queries: 4, surface_queries: 6, ..cfg },
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        f.bind_target(&pair.target).unwrap();
        let features = f.features(&q.points).unwrap();
        let (_, g) = f.training_loss(&features, &q.supervision).unwrap();
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let names: Vec<String> = f.params.names().map(String::from).collect();
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for _ in 0..60 {
            let name = &names[rng.random_range(0..names.len())];
            let i = rng.random_range(0..f.params.get(name).unwrap().len());
            let mut plus = f.clone();
            plus.params.get_mut(name).unwrap().data[i] += h;
            let mut minus = f.clone();
            minus.params.get_mut(name).unwrap().data[i] -= h;
            let fd = (plus.training_loss(&features, &q.supervision).unwrap().0
                - minus.training_loss(&features, &q.supervision).unwrap().0)
                / (2.0 * h);
            let an = g.get(name).unwrap().data[i];
            num += (fd - an).powi(2);
            den += an * an;
        }
        assert!(num.sqrt() / den.sqrt() < 1e-4);
    }
}
