use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DeformationField;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Tracker updates in the default convergent inference.
pub const LVD_ITERATIONS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Trackers start at the origin and follow their own capped offsets.
    #[default]
    Lvd,
    /// Trackers start at random target points and take one uncapped step.
    Oneshot,
}

/// Predicts template vertex positions by following the field.
pub fn infer_vertices<F: DeformationField + ?Sized>(
    field: &F,
    mode: InferenceMode,
    iters: usize,
    seed: u64,
) -> Result<Vec<Vec3>> {
    let m = field.vertex_count();
    let vertices: Vec<usize> = (0..m).collect();
    match mode {
        InferenceMode::Lvd => {
            field.target()?;
            let cap = field.offset_cap();
            let mut trackers = vec![Vec3::zeros(); m];
            for _ in 0..iters {
                let offsets = field.own_offsets(&trackers, &vertices)?;
                for (x, o) in trackers.iter_mut().zip(offsets) {
                    let n = o.norm();
                    *x += if n > cap { o * (cap / n) } else { o };
                }
            }
            Ok(trackers)
        }
        InferenceMode::Oneshot => {
            let target = field.target()?;
            if iters == 0 {
                return Err(Error::invalid("oneshot inference takes exactly one update"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let starts: Vec<Vec3> = (0..m).map(|_| target.points()[rng.random_range(0..target.len())]).collect();
            let offsets = field.own_offsets(&starts, &vertices)?;
            Ok(starts.iter().zip(offsets).map(|(x, o)| x + o).collect())
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::PointCloud;
    use crate::nn::Tensor;

    /// Predicts the exact offset from each query to each ground-truth vertex.
    pub(crate) struct OracleField {
        pub gt: Vec<Vec3>,
        pub cap: f64,
        pub target: Option<PointCloud>,
    }

    impl DeformationField for OracleField {
        fn vertex_count(&self) -> usize {
            self.gt.len()
        }
        fn offset_cap(&self) -> f64 {
            self.cap
        }
        fn target(&self) -> Result<&PointCloud> {
            self.target.as_ref().ok_or_else(|| Error::State("unbound".into()))
        }
        fn raw_offsets(&self, queries: &[Vec3]) -> Result<Tensor> {
            self.target()?;
            let mut out = Tensor::zeros(queries.len(), 3 * self.gt.len());
            for (q, y) in queries.iter().enumerate() {
                for (v, g) in self.gt.iter().enumerate() {
                    for a in 0..3 {
                        out.set(q, 3 * v + a, g[a] - y[a]);
                    }
                }
            }
            Ok(out)
        }
    }

    fn oracle(gt: Vec<Vec3>, cap: f64) -> OracleField {
        let target = PointCloud::new(gt.clone()).unwrap();
        OracleField { gt, cap, target: Some(target) }
    }

    #[test]
    fn uncapped_oracle_converges_in_one_step() {
        let gt = vec![Vec3::new(0.3, -0.2, 0.1), Vec3::new(-0.4, 0.0, 0.25)];
        let f = oracle(gt.clone(), f64::INFINITY);
        assert_eq!(infer_vertices(&f, InferenceMode::Lvd, 1, 0).unwrap(), gt);
    }

    #[test]
    fn capped_oracle_needs_ceil_distance_over_cap_steps() {
        let gt = vec![Vec3::new(0.12, 0.0, 0.0), Vec3::new(0.0, -0.072, 0.096)];
        let f = oracle(gt.clone(), 0.05);
        for steps in 0..3 {
            let x = infer_vertices(&f, InferenceMode::Lvd, steps, 0).unwrap();
            assert!((x[0] - gt[0]).norm() > 1e-9);
            // Each step moves exactly one cap length.
            assert!(((x[0] - gt[0]).norm() - (0.12 - 0.05 * steps as f64)).abs() < 1e-12);
        }
        let x = infer_vertices(&f, InferenceMode::Lvd, 3, 0).unwrap();
        for (a, b) in x.iter().zip(&gt) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn zero_field_leaves_trackers_in_place() {
        let mut f = oracle(vec![Vec3::zeros(); 3], 0.05);
        f.target = Some(PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0)]).unwrap());
        assert_eq!(infer_vertices(&f, InferenceMode::Lvd, 50, 0).unwrap(), vec![Vec3::zeros(); 3]);
    }

    #[test]
    fn oneshot_takes_a_single_uncapped_step() {
        let gt = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0)];
        let mut f = oracle(gt.clone(), 0.05);
        f.target = Some(PointCloud::new(vec![Vec3::new(-1.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 3.0)]).unwrap());
        let x = infer_vertices(&f, InferenceMode::Oneshot, 1, 4).unwrap();
        for (a, b) in x.iter().zip(&gt) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn unbound_field_is_a_state_error() {
        let mut f = oracle(vec![Vec3::zeros()], 0.05);
        f.target = None;
        assert!(matches!(infer_vertices(&f, InferenceMode::Lvd, 5, 0), Err(Error::State(_))));
        assert!(matches!(infer_vertices(&f, InferenceMode::Oneshot, 1, 0), Err(Error::State(_))));
    }
}
