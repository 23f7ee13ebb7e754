//! Inference-time self-supervised refinement of a deformation field, and
//! classical rigid ICP.

mod rigid;

pub use rigid::{kabsch, rigid_icp, IcpResult};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{head_prefix, DeformationField, NeuralDeformationField};
use crate::geometry::Vec3;
use crate::nn::{adam_step, grad, mlp_forward_tape, AdamState, ParamStore, Tensor};

/// The template vertex selected for each sample and its offset norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub indices: Vec<usize>,
    pub norms: Vec<f64>,
}

impl Correspondence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NicpConfig {
    pub steps: usize,
    pub lr: f64,
    /// Target points sampled per step, without replacement.
    pub max_samples: usize,
    /// Recompute correspondences every step instead of once.
    pub reselect: bool,
    pub seed: u64,
}

impl Default for NicpConfig {
    fn default() -> Self {
        Self { steps: 20, lr: 1e-5, max_samples: 2048, reselect: true, seed: 0 }
    }
}

impl NicpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("nicp.steps must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("nicp.lr must be positive, got {}", self.lr)));
        }
        if self.max_samples == 0 {
            return Err(Error::invalid("nicp.max_samples must be positive"));
        }
        Ok(())
    }
}

/// Sum and mean of the squared selected offset norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NicpLoss {
    pub sum: f64,
    pub mean: f64,
}

/// Pre-step losses of every refinement step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NicpTrace {
    pub steps: Vec<NicpLoss>,
}

impl NicpTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,sum_loss,mean_loss\n");
        for (i, l) in self.steps.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i + 1, l.sum, l.mean));
        }
        out
    }

    pub fn first(&self) -> Option<NicpLoss> {
        self.steps.first().copied()
    }

    pub fn last(&self) -> Option<NicpLoss> {
        self.steps.last().copied()
    }
}

/// Selects, for each sample, the vertex with the smallest uncapped offset.
/// Ties go to the lowest index.
pub fn nicp_pair<F: DeformationField + ?Sized>(field: &F, samples: &[Vec3]) -> Result<Correspondence> {
    let raw = field.raw_offsets(samples)?;
    let mut indices = Vec::with_capacity(samples.len());
    let mut norms = Vec::with_capacity(samples.len());
    for r in 0..samples.len() {
        let (mut best, mut best_sq) = (0, f64::INFINITY);
        for (i, c) in raw.row_slice(r).chunks_exact(3).enumerate() {
            let sq = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
            if sq < best_sq {
                best = i;
                best_sq = sq;
            }
        }
        indices.push(best);
        norms.push(best_sq.sqrt());
    }
    Ok(Correspondence { indices, norms })
}

/// The refinement loss at fixed correspondences and the gradient of its
/// mean over every head parameter. Only the owning head of each selected
/// vertex is evaluated.
pub fn nicp_loss(
    field: &NeuralDeformationField,
    samples: &[Vec3],
    corr: &Correspondence,
) -> Result<(NicpLoss, ParamStore)> {
    if samples.len() != corr.len() || samples.is_empty() {
        return Err(Error::invalid(format!("{} samples but {} correspondences", samples.len(), corr.len())));
    }
    let m = field.vertex_count();
    if let Some(bad) = corr.indices.iter().find(|&&i| i >= m) {
        return Err(Error::invalid(format!("correspondence index {bad} out of range for {m} vertices")));
    }
    let features = field.features(samples)?;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); field.head_count()];
    for (k, &v) in corr.indices.iter().enumerate() {
        groups[field.owner(v).0].push(k);
    }
    let n = samples.len();
    let mut sum = 0.0;
    let (mean, g) = grad(&field.params, |tape, vars| {
        let mut total = None;
        for (head, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let mut sub = Tensor::zeros(rows.len(), features.cols);
            let mut at = Vec::with_capacity(3 * rows.len());
            for (i, &r) in rows.iter().enumerate() {
                sub.row_slice_mut(i).copy_from_slice(features.row_slice(r));
                let s = field.owner(corr.indices[r]).1;
                at.extend([(i, 3 * s), (i, 3 * s + 1), (i, 3 * s + 2)]);
            }
            let x = tape.constant(sub);
            let out = mlp_forward_tape(tape, &field.specs[head], vars, &head_prefix(head), x);
            let picked = tape.gather_elems(out, &at);
            let sq = tape.sq_norm(picked);
            sum += tape.value(sq).item();
            total = Some(match total {
                None => sq,
                Some(acc) => tape.add(acc, sq),
            });
        }
        let total = total.expect("at least one sample");
        tape.scale(total, 1.0 / n as f64)
    });
    Ok((NicpLoss { sum, mean }, g))
}

/// One Adam step on the mean loss at fixed correspondences; returns the
/// pre-step loss.
pub fn nicp_step(
    field: &mut NeuralDeformationField,
    adam: &mut AdamState,
    samples: &[Vec3],
    corr: &Correspondence,
    lr: f64,
) -> Result<NicpLoss> {
    let (loss, g) = nicp_loss(field, samples, corr)?;
    adam_step(adam, &mut field.params, &g, lr)?;
    Ok(loss)
}

/// Alternates correspondence selection and field updates on the bound target.
pub fn nicp_refine(field: &mut NeuralDeformationField, config: &NicpConfig) -> Result<NicpTrace> {
    nicp_refine_with(field, config, config.lr)
}

/// [`nicp_refine`] with an explicit learning rate; zero is allowed.
pub fn nicp_refine_with(field: &mut NeuralDeformationField, config: &NicpConfig, lr: f64) -> Result<NicpTrace> {
    NicpConfig { lr: 1.0, ..config.clone() }.validate()?;
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("nicp learning rate must be >= 0, got {lr}")));
    }
    let target = field.target()?.points().to_vec();
    let count = config.max_samples.min(target.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(&field.params);
    let mut trace = NicpTrace::default();
    let mut frozen: Option<(Vec<Vec3>, Correspondence)> = None;
    for _ in 0..config.steps {
        let (samples, corr) = match (&frozen, config.reselect) {
            (Some((s, c)), false) => (s.clone(), c.clone()),
            _ => {
                let samples: Vec<Vec3> = sample(&mut rng, target.len(), count).into_iter().map(|i| target[i]).collect();
                let corr = nicp_pair(field, &samples)?;
                (samples, corr)
            }
        };
        let loss = nicp_step(field, &mut adam, &samples, &corr, lr)?;
        trace.steps.push(loss);
        if !config.reselect && frozen.is_none() {
            frozen = Some((samples, corr));
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::EncoderConfig;
    use crate::geometry::PointCloud;
    use crate::nn::MlpSpec;
    use crate::segmentation::Segmentation;
    use crate::template::TemplateConfig;
    use rand::Rng;

    struct StubField {
        rows: Vec<Vec<f64>>,
        target: PointCloud,
    }

    impl DeformationField for StubField {
        fn vertex_count(&self) -> usize {
            self.rows[0].len()
        }
        fn offset_cap(&self) -> f64 {
            0.05
        }
        fn target(&self) -> Result<&PointCloud> {
            Ok(&self.target)
        }
        fn raw_offsets(&self, queries: &[Vec3]) -> Result<Tensor> {
            let m = self.vertex_count();
            let mut t = Tensor::zeros(queries.len(), 3 * m);
            for q in 0..queries.len() {
                for (i, n) in self.rows[q].iter().enumerate() {
                    t.set(q, 3 * i + 1, *n);
                }
            }
            Ok(t)
        }
    }

    fn stub(rows: Vec<Vec<f64>>) -> StubField {
        StubField { rows, target: PointCloud::new(vec![Vec3::zeros()]).unwrap() }
    }

    #[test]
    fn pairing_picks_the_smallest_norm() {
        let f = stub(vec![vec![3.0, 1.0, 2.0]]);
        let c = nicp_pair(&f, &[Vec3::zeros()]).unwrap();
        assert_eq!(c.indices, vec![1]);
        assert_eq!(c.norms, vec![1.0]);
    }

    #[test]
    fn pairing_ties_go_to_the_lowest_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let mut row: Vec<f64> = (0..12).map(|_| rng.random_range(1.0..2.0)).collect();
            let (a, b) = (rng.random_range(0..6), rng.random_range(6..12));
            row[a] = -0.5;
            row[b] = 0.5;
            let c = nicp_pair(&stub(vec![row]), &[Vec3::zeros()]).unwrap();
            assert_eq!(c.indices, vec![a]);
        }
    }

    #[test]
    fn pairing_an_oracle_at_a_vertex_selects_it() {
        let gt: Vec<Vec3> = (0..7).map(|i| Vec3::new(i as f64 * 0.1, 0.0, -0.05)).collect();
        struct Oracle(Vec<Vec3>, PointCloud);
        impl DeformationField for Oracle {
            fn vertex_count(&self) -> usize {
                self.0.len()
            }
            fn offset_cap(&self) -> f64 {
                0.05
            }
            fn target(&self) -> Result<&PointCloud> {
                Ok(&self.1)
            }
            fn raw_offsets(&self, q: &[Vec3]) -> Result<Tensor> {
                let mut t = Tensor::zeros(q.len(), 3 * self.0.len());
                for (r, y) in q.iter().enumerate() {
                    for (v, g) in self.0.iter().enumerate() {
                        for a in 0..3 {
                            t.set(r, 3 * v + a, g[a] - y[a]);
                        }
                    }
                }
                Ok(t)
            }
        }
        let f = Oracle(gt.clone(), PointCloud::new(gt.clone()).unwrap());
        let c = nicp_pair(&f, &gt).unwrap();
        assert_eq!(c.indices, (0..7).collect::<Vec<_>>());
        assert!(c.norms.iter().all(|n| *n == 0.0));
    }

    pub(crate) fn bound_test_field(hidden: &[usize], segments: usize, seed: u64) -> NeuralDeformationField {
        let m = 12;
        let encoder = EncoderConfig { base_resolution: 8, levels: 2 };
        let labels: Vec<usize> = (0..m).map(|v| v % segments).collect();
        let seg = Segmentation::new(labels, segments).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let specs: Vec<MlpSpec> = seg
            .members()
            .iter()
            .enumerate()
            .map(|(k, mem)| {
                let mut w = vec![encoder.feature_width()];
                w.extend(hidden);
                w.push(3 * mem.len());
                let s = MlpSpec::new(w).unwrap();
                s.init_params(&head_prefix(k), &mut rng, &mut params).unwrap();
                s
            })
            .collect();
        let mut f = NeuralDeformationField::assemble(
            TemplateConfig::default(),
            String::new(),
            m,
            encoder,
            seg,
            specs,
            params,
            0.05,
        )
        .unwrap();
        f.bind_target(&crate::field::tests::unit_cloud(seed)).unwrap();
        f
    }

    #[test]
    fn zero_field_has_zero_loss_and_stays_put() {
        let mut f = bound_test_field(&[6], 3, 1);
        for (_, t) in f.params.iter_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let before = f.params.clone();
        let samples = f.target().unwrap().points()[..20].to_vec();
        let corr = nicp_pair(&f, &samples).unwrap();
        let mut adam = AdamState::new(&f.params);
        let loss = nicp_step(&mut f, &mut adam, &samples, &corr, 1e-3).unwrap();
        assert_eq!((loss.sum, loss.mean), (0.0, 0.0));
        assert_eq!(f.params, before);
    }

    #[test]
    fn zero_lr_computes_the_loss_only() {
        let mut f = bound_test_field(&[6], 3, 2);
        let before = f.params.clone();
        let samples = f.target().unwrap().points()[..20].to_vec();
        let corr = nicp_pair(&f, &samples).unwrap();
        let mut adam = AdamState::new(&f.params);
        let loss = nicp_step(&mut f, &mut adam, &samples, &corr, 0.0).unwrap();
        assert!(loss.sum > 0.0);
        let expected: f64 = corr.norms.iter().map(|n| n * n).sum();
        assert!((loss.sum - expected).abs() < 1e-12 * expected.max(1.0));
        assert!((loss.mean - expected / 20.0).abs() < 1e-12);
        assert_eq!(f.params, before);
    }

    #[test]
    fn mismatched_correspondences_are_rejected() {
        let mut f = bound_test_field(&[6], 3, 2);
        let samples = f.target().unwrap().points()[..5].to_vec();
        let corr = nicp_pair(&f, &samples[..4]).unwrap();
        let mut adam = AdamState::new(&f.params);
        assert!(matches!(nicp_step(&mut f, &mut adam, &samples, &corr, 1e-3), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn linear_head_step_matches_the_hand_derived_update() {
        let mut f = bound_test_field(&[], 1, 3);
        let sample = vec![f.target().unwrap().points()[7]];
        let corr = nicp_pair(&f, &sample).unwrap();
        let i = corr.indices[0];
        let feat = f.features(&sample).unwrap();
        let w = f.params.get("h0.w0").unwrap().clone();
        let b = f.params.get("h0.b0").unwrap().clone();
        // o = fW + b restricted to the selected vertex; dL/dW = 2 f oᵀ, dL/db = 2 o.
        let o: Vec<f64> = (0..3)
            .map(|a| b.data[3 * i + a] + (0..feat.cols).map(|r| feat.data[r] * w.get(r, 3 * i + a)).sum::<f64>())
            .collect();
        let lr = 1e-3;
        let adam_first = |g: f64| if g == 0.0 { 0.0 } else { lr * g / (g.abs() + 1e-8) };
        let mut adam = AdamState::new(&f.params);
        let loss = nicp_step(&mut f, &mut adam, &sample, &corr, lr).unwrap();
        assert!((loss.sum - o.iter().map(|x| x * x).sum::<f64>()).abs() < 1e-12);
        let w1 = f.params.get("h0.w0").unwrap();
        let b1 = f.params.get("h0.b0").unwrap();
        for c in 0..w.cols {
            let oa = if c / 3 == i { o[c % 3] } else { 0.0 };
            assert!((b1.data[c] - (b.data[c] - adam_first(2.0 * oa))).abs() < 1e-9);
            for r in 0..w.rows {
                let expected = w.get(r, c) - adam_first(2.0 * feat.data[r] * oa);
                assert!((w1.get(r, c) - expected).abs() < 1e-9);
            }
        }
        let (after, _) = nicp_loss(&f, &sample, &corr).unwrap();
        assert!(after.sum < loss.sum);
    }

    #[test]
    fn tiny_steps_never_increase_the_frozen_loss() {
        let mut f = bound_test_field(&[8, 8], 3, 4);
        let samples = f.target().unwrap().points()[..40].to_vec();
        let corr = nicp_pair(&f, &samples).unwrap();
        let mut adam = AdamState::new(&f.params);
        let mut last = f64::INFINITY;
        for _ in 0..5 {
            let l = nicp_step(&mut f, &mut adam, &samples, &corr, 1e-8).unwrap();
            assert!(l.sum <= last);
            last = l.sum;
        }
    }

    #[test]
    fn stored_norms_match_the_selected_rows() {
        let f = bound_test_field(&[8], 4, 5);
        let samples = f.target().unwrap().points()[..30].to_vec();
        let corr = nicp_pair(&f, &samples).unwrap();
        let own = f.own_offsets(&samples, &corr.indices).unwrap();
        let full = f.raw_offsets(&samples).unwrap();
        for (k, o) in own.iter().enumerate() {
            let i = corr.indices[k];
            let row = Vec3::new(full.get(k, 3 * i), full.get(k, 3 * i + 1), full.get(k, 3 * i + 2));
            assert_eq!(row.norm(), corr.norms[k]);
            assert!((o.norm() - corr.norms[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_with_zero_lr_keeps_the_field() {
        let mut f = bound_test_field(&[8], 2, 6);
        let before = f.clone();
        let cfg = NicpConfig { steps: 1, ..NicpConfig::default() };
        let trace = nicp_refine_with(&mut f, &cfg, 0.0).unwrap();
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(f, before);
    }

    #[test]
    fn refine_is_deterministic_and_leaves_features_alone() {
        let base = bound_test_field(&[8], 2, 7);
        let cfg = NicpConfig { steps: 4, lr: 1e-3, max_samples: 64, ..NicpConfig::default() };
        let (mut a, mut b) = (base.clone(), base.clone());
        let ta = nicp_refine(&mut a, &cfg).unwrap();
        let tb = nicp_refine(&mut b, &cfg).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, base.params);
        assert_eq!(a.pyramid().unwrap(), base.pyramid().unwrap());
        assert!(ta.to_csv().starts_with("step,sum_loss,mean_loss\n1,"));
    }

    #[test]
    fn frozen_mode_reuses_the_first_correspondence() {
        let mut f = bound_test_field(&[8], 2, 8);
        let cfg = NicpConfig { steps: 3, lr: 1e-3, max_samples: 32, reselect: false, ..NicpConfig::default() };
        let trace = nicp_refine(&mut f, &cfg).unwrap();
        assert_eq!(trace.steps.len(), 3);
        assert!(trace.last().unwrap().mean < trace.first().unwrap().mean);
    }

    #[test]
    fn refine_requires_a_bound_target() {
        let mut f = bound_test_field(&[4], 1, 9);
        f.unbind();
        assert!(matches!(nicp_refine(&mut f, &NicpConfig::default()), Err(Error::State(_))));
    }
}
