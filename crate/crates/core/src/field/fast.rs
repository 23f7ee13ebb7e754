//! Single-precision head pass used by the training loop. The tape-based
//! [`NeuralDeformationField::training_loss`] is the double-precision
//! reference for the same quantity.

use super::{head_prefix, NeuralDeformationField};
use crate::error::Result;
use crate::geometry::Vec3;
use crate::nn::{MlpSpec, ParamStore, Tensor};

/// `c = a·b + beta·c` on row-major buffers; `a` is `m×k` (or `k×m` when
/// `trans_a`), `b` is `k×n` (or `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
fn sgemm(m: usize, k: usize, n: usize, a: &[f32], trans_a: bool, b: &[f32], trans_b: bool, c: &mut [f32], beta: f32) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "sgemm buffer too small");
    if m == 0 || n == 0 || k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index the strides reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Capped offsets from each query to the given vertices, `n × 3·len`.
pub(crate) fn head_supervision(points: &[Vec3], gt: &[Vec3], members: &[usize], cap: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(points.len() * 3 * members.len());
    for p in points {
        for &v in members {
            let mut d = gt[v] - p;
            let norm = d.norm();
            if norm > cap {
                d *= cap / norm;
            }
            out.extend(d.iter().map(|&x| x as f32));
        }
    }
    out
}

/// Summed L1 error of one head and its parameter gradients scaled by `scale`.
#[allow(clippy::too_many_arguments)]
fn head_pass(
    spec: &MlpSpec,
    params: &ParamStore,
    prefix: &str,
    features: &[f32],
    n: usize,
    supervision: &[f32],
    cap: f32,
    scale: f32,
    grads: &mut ParamStore,
) -> Result<f64> {
    let layers = spec.layers(params, prefix)?;
    let weights: Vec<Vec<f32>> = layers.iter().map(|(w, _)| w.data.iter().map(|&x| x as f32).collect()).collect();
    let last = layers.len() - 1;
    let mut acts: Vec<Vec<f32>> = Vec::with_capacity(layers.len());
    for (l, (w, b)) in layers.iter().enumerate() {
        let input: &[f32] = if l == 0 { features } else { &acts[l - 1] };
        let mut z: Vec<f32> = Vec::with_capacity(n * w.cols);
        let bias: Vec<f32> = b.data.iter().map(|&x| x as f32).collect();
        for _ in 0..n {
            z.extend_from_slice(&bias);
        }
        sgemm(n, w.rows, w.cols, input, false, &weights[l], false, &mut z, 1.0);
        if l != last {
            z.iter_mut().for_each(|x| *x = x.max(0.0));
        }
        acts.push(z);
    }
    let out = acts.pop().expect("at least one layer");
    let mut loss = 0.0f64;
    let mut dz = vec![0.0f32; out.len()];
    for ((o, s), d) in out.chunks_exact(3).zip(supervision.chunks_exact(3)).zip(dz.chunks_exact_mut(3)) {
        let norm = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
        let k = if norm > cap { cap / norm } else { 1.0 };
        let mut g = [0.0f32; 3];
        for c in 0..3 {
            let diff = k * o[c] - s[c];
            loss += f64::from(diff.abs());
            g[c] = if diff > 0.0 {
                scale
            } else if diff < 0.0 {
                -scale
            } else {
                0.0
            };
        }
        if norm > cap {
            let dot = (o[0] * g[0] + o[1] * g[1] + o[2] * g[2]) / norm;
            for c in 0..3 {
                d[c] = k * (g[c] - o[c] / norm * dot);
            }
        } else {
            d.copy_from_slice(&g);
        }
    }
    for l in (0..layers.len()).rev() {
        let (w, _) = layers[l];
        let input: &[f32] = if l == 0 { features } else { &acts[l - 1] };
        let mut dw = vec![0.0f32; w.rows * w.cols];
        sgemm(w.rows, n, w.cols, input, true, &dz, false, &mut dw, 0.0);
        let mut db = vec![0.0f32; w.cols];
        for row in dz.chunks_exact(w.cols) {
            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let to_f64 = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<f64>>();
        *grads.get_mut(&MlpSpec::weight_name(prefix, l)).expect("gradient layout") =
            Tensor::from_vec(w.rows, w.cols, to_f64(dw));
        *grads.get_mut(&MlpSpec::bias_name(prefix, l)).expect("gradient layout") =
            Tensor::from_vec(1, w.cols, to_f64(db));
        if l > 0 {
            let mut dh = vec![0.0f32; n * w.rows];
            sgemm(n, w.cols, w.rows, &dz, false, &weights[l], true, &mut dh, 0.0);
            for (g, a) in dh.iter_mut().zip(&acts[l - 1]) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            dz = dh;
        }
    }
    Ok(loss)
}

impl NeuralDeformationField {
    /// Single-precision evaluation of [`Self::training_loss`] from f32
    /// features (`n × width`) and per-head supervision.
    pub(crate) fn training_loss_f32(
        &self,
        features: &[f32],
        n: usize,
        supervision: &[Vec<f32>],
    ) -> Result<(f64, ParamStore)> {
        let m = self.segmentation.labels.len();
        let scale = 1.0 / (n * m) as f64;
        let mut grads = self.params.zeros_like();
        let mut total = 0.0;
        for (k, (spec, sup)) in self.specs.iter().zip(supervision).enumerate() {
            total += head_pass(
                spec,
                &self.params,
                &head_prefix(k),
                features,
                n,
                sup,
                self.cap as f32,
                scale as f32,
                &mut grads,
            )?;
        }
        Ok((total * scale, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::train::sample_training_queries;
    use crate::field::{EncoderConfig, HeadConfig, TrainConfig};
    use crate::template::{build_template, sample_training_shape, GeneratorConfig, SkeletonSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_the_double_precision_tape() {
        let t = build_template(&SkeletonSpec::humanoid(), 60, 0).unwrap();
        for segments in [1, 3] {
            let heads = HeadConfig { segments, hidden: vec![16, 16], reference_segments: segments, seed: 4 };
            let mut f = NeuralDeformationField::new(&t, &EncoderConfig { base_resolution: 8, levels: 2 }, &heads, 0.05)
                .unwrap();
            let pair =
                sample_training_shape(&t, 5, &GeneratorConfig { points: 500, ..GeneratorConfig::default() }).unwrap();
            let cfg = TrainConfig { uniform_queries: 40, surface_queries: 80, ..TrainConfig::default() };
            let q = sample_training_queries(&pair, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
            f.bind_target(&pair.target).unwrap();
            let features = f.features(&q.points).unwrap();
            let (loss, grads) = f.training_loss(&features, &q.supervision).unwrap();
            let feats32: Vec<f32> = features.data.iter().map(|&x| x as f32).collect();
            let sup: Vec<Vec<f32>> = f
                .members()
                .iter()
                .map(|mem| head_supervision(&q.points, &pair.gt_vertices, mem, cfg.offset_cap))
                .collect();
            let (loss32, grads32) = f.training_loss_f32(&feats32, q.points.len(), &sup).unwrap();
            assert!((loss - loss32).abs() < 1e-5 * loss, "{loss} vs {loss32}");
            let (mut diff, mut norm) = (0.0f64, 0.0f64);
            for ((_, a), (_, b)) in grads.iter().zip(grads32.iter()) {
                for (x, y) in a.data.iter().zip(&b.data) {
                    diff += (x - y).powi(2);
                    norm += x * x;
                }
            }
            assert!(diff.sqrt() < 1e-4 * norm.sqrt(), "relative gradient error {}", diff.sqrt() / norm.sqrt());
        }
    }
}
