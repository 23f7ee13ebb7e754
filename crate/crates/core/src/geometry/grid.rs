//! Multi-resolution unsigned distance grids with gradient channels, and
//! trilinear sampling of them. This is the deterministic featurizer that
//! describes a target cloud to the deformation field.

use super::cloud::Vec3;
use super::spatial::NearestIndex;
use crate::error::{Error, Result};

/// Channels stored per cell: distance, ∂x, ∂y, ∂z.
pub const CHANNELS: usize = 4;

/// Half side of the cube covered by grids built for normalized clouds.
pub const NORMALIZED_HALF_EXTENT: f64 = 0.6;

/// Axis-aligned cube covered by a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridRegion {
    pub min: Vec3,
    pub side: f64,
}

impl GridRegion {
    /// Cube centered at the origin that holds normalized clouds.
    pub fn normalized() -> Self {
        Self { min: Vec3::repeat(-NORMALIZED_HALF_EXTENT), side: 2.0 * NORMALIZED_HALF_EXTENT }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceGrid {
    pub origin: Vec3,
    pub cell_size: f64,
    pub resolution: usize,
    /// x-fastest cell order.
    pub cells: Vec<[f64; CHANNELS]>,
}

impl DistanceGrid {
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution + j) * self.resolution + i
    }

    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.cell_size
    }

    pub fn cell(&self, i: usize, j: usize, k: usize) -> &[f64; CHANNELS] {
        &self.cells[self.index(i, j, k)]
    }

    fn build(region: &GridRegion, resolution: usize, index: &NearestIndex) -> Self {
        let cell_size = region.side / resolution as f64;
        let mut grid =
            DistanceGrid { origin: region.min, cell_size, resolution, cells: vec![[0.0; CHANNELS]; resolution.pow(3)] };
        let mut hint = 0;
        for k in 0..resolution {
            for j in 0..resolution {
                for i in 0..resolution {
                    let idx = grid.index(i, j, k);
                    let (near, d) = index.nearest_hinted(&grid.cell_center(i, j, k), hint);
                    grid.cells[idx][0] = d;
                    hint = near;
                }
            }
        }
        grid.fill_gradients();
        grid
    }

    /// Central differences of the distance channel, one-sided at the borders.
    fn fill_gradients(&mut self) {
        let r = self.resolution;
        let h = self.cell_size;
        let dist: Vec<f64> = self.cells.iter().map(|c| c[0]).collect();
        for k in 0..r {
            for j in 0..r {
                for i in 0..r {
                    let at = [i, j, k];
                    let mut grad = [0.0; 3];
                    for (axis, g) in grad.iter_mut().enumerate() {
                        let pos = at[axis];
                        let (lo, hi) = (pos.saturating_sub(1), (pos + 1).min(r - 1));
                        let mut a = at;
                        let mut b = at;
                        a[axis] = lo;
                        b[axis] = hi;
                        let span = (hi - lo) as f64 * h;
                        *g = (dist[self.index(b[0], b[1], b[2])] - dist[self.index(a[0], a[1], a[2])]) / span;
                    }
                    let idx = self.index(i, j, k);
                    self.cells[idx][1..].copy_from_slice(&grad);
                }
            }
        }
    }

    /// Trilinear interpolation of all channels. Points outside the lattice of
    /// cell centers are clamped onto it per axis.
    pub fn sample(&self, p: &Vec3) -> [f64; CHANNELS] {
        let r = self.resolution;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for axis in 0..3 {
            let u = ((p[axis] - self.origin[axis]) / self.cell_size - 0.5).clamp(0.0, (r - 1) as f64);
            let i0 = (u.floor() as usize).min(r - 2);
            base[axis] = i0;
            frac[axis] = u - i0 as f64;
        }
        let mut out = [0.0; CHANNELS];
        for corner in 0..8 {
            let (di, dj, dk) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            let w = (if di == 1 { frac[0] } else { 1.0 - frac[0] })
                * (if dj == 1 { frac[1] } else { 1.0 - frac[1] })
                * (if dk == 1 { frac[2] } else { 1.0 - frac[2] });
            if w == 0.0 {
                continue;
            }
            let c = self.cell(base[0] + di, base[1] + dj, base[2] + dk);
            for ch in 0..CHANNELS {
                out[ch] += w * c[ch];
            }
        }
        out
    }
}

/// Stack of distance grids, finest first, each level at half the previous
/// resolution over the same region.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceGridPyramid {
    pub levels: Vec<DistanceGrid>,
}

impl DistanceGridPyramid {
    pub fn feature_len(&self) -> usize {
        CHANNELS * self.levels.len()
    }

    /// Concatenated per-level samples, `4 × levels` values.
    pub fn sample_into(&self, p: &Vec3, out: &mut [f64]) {
        for (level, chunk) in self.levels.iter().zip(out.chunks_exact_mut(CHANNELS)) {
            chunk.copy_from_slice(&level.sample(p));
        }
    }
}

pub fn trilinear_sample(pyramid: &DistanceGridPyramid, point: &Vec3) -> Vec<f64> {
    let mut out = vec![0.0; pyramid.feature_len()];
    pyramid.sample_into(point, &mut out);
    out
}

/// Pyramid over the normalized region (see [`GridRegion::normalized`]).
pub fn voxel_distance_pyramid(cloud: &[Vec3], base_resolution: usize, levels: usize) -> Result<DistanceGridPyramid> {
    voxel_distance_pyramid_in(&GridRegion::normalized(), cloud, base_resolution, levels)
}

pub fn voxel_distance_pyramid_in(
    region: &GridRegion,
    cloud: &[Vec3],
    base_resolution: usize,
    levels: usize,
) -> Result<DistanceGridPyramid> {
    if base_resolution < 4 {
        return Err(Error::invalid(format!("base resolution must be at least 4 (got {base_resolution})")));
    }
    if levels == 0 || (base_resolution >> (levels - 1)) < 2 {
        return Err(Error::invalid(format!("{levels} levels cannot be halved from resolution {base_resolution}")));
    }
    let index = NearestIndex::build(cloud)?;
    let levels = (0..levels).map(|l| DistanceGrid::build(region, base_resolution >> l, &index)).collect();
    Ok(DistanceGridPyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5))).collect()
    }

    #[test]
    fn rejects_small_resolution() {
        assert!(voxel_distance_pyramid(&random_points(3, 0), 3, 1).is_err());
        assert!(voxel_distance_pyramid(&random_points(3, 0), 8, 4).is_err());
    }

    #[test]
    fn distance_is_zero_at_a_cloud_point_cell() {
        let pyr = voxel_distance_pyramid(&random_points(1, 0), 8, 1).unwrap();
        let c = pyr.levels[0].cell_center(3, 5, 1);
        let pyr = voxel_distance_pyramid(&[c], 8, 2).unwrap();
        assert_eq!(pyr.levels[0].cell(3, 5, 1)[0], 0.0);
        assert!(pyr.levels.iter().all(|g| g.cells.iter().all(|c| c[0] >= 0.0)));
    }

    #[test]
    fn grid_matches_brute_force_min_distance() {
        let pts = random_points(5, 1);
        let pyr = voxel_distance_pyramid(&pts, 8, 3).unwrap();
        assert_eq!(pyr.levels.iter().map(|g| g.resolution).collect::<Vec<_>>(), vec![8, 4, 2]);
        for g in &pyr.levels {
            for k in 0..g.resolution {
                for j in 0..g.resolution {
                    for i in 0..g.resolution {
                        let c = g.cell_center(i, j, k);
                        let expect = pts.iter().map(|p| (p - c).norm()).fold(f64::INFINITY, f64::min);
                        assert_eq!(g.cell(i, j, k)[0], expect);
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_channels_are_central_differences() {
        let pyr = voxel_distance_pyramid(&random_points(20, 2), 8, 1).unwrap();
        let g = &pyr.levels[0];
        let h = g.cell_size;
        let expect_x = (g.cell(4, 2, 3)[0] - g.cell(2, 2, 3)[0]) / (2.0 * h);
        assert!((g.cell(3, 2, 3)[1] - expect_x).abs() < 1e-15);
        let border_z = (g.cell(1, 1, 1)[0] - g.cell(1, 1, 0)[0]) / h;
        assert!((g.cell(1, 1, 0)[3] - border_z).abs() < 1e-15);
    }

    #[test]
    fn sampling_at_centers_midpoints_and_outside() {
        let pyr = voxel_distance_pyramid(&random_points(30, 3), 8, 2).unwrap();
        let g = &pyr.levels[0];
        let close = |a: [f64; CHANNELS], b: &[f64; CHANNELS]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        let c = g.cell_center(2, 3, 4);
        assert!(close(g.sample(&c), g.cell(2, 3, 4)));

        let d = g.cell_center(3, 3, 4);
        let mid = g.sample(&((c + d) / 2.0));
        for ch in 0..CHANNELS {
            let expect = (g.cell(2, 3, 4)[ch] + g.cell(3, 3, 4)[ch]) / 2.0;
            assert!((mid[ch] - expect).abs() < 1e-12);
        }

        let far = Vec3::new(100.0, -100.0, 0.0);
        let corner = g.cell_center(7, 0, 0);
        let mut probe = far;
        probe.z = corner.z;
        assert!(close(g.sample(&probe), g.cell(7, 0, 0)));
        assert_eq!(trilinear_sample(&pyr, &c).len(), 8);
    }

    #[test]
    fn sampling_is_continuous() {
        let pyr = voxel_distance_pyramid(&random_points(30, 4), 16, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut range = [0.0f64; CHANNELS];
        for ch in 0..CHANNELS {
            let (lo, hi) =
                pyr.levels[0].cells.iter().fold((f64::MAX, f64::MIN), |(lo, hi), c| (lo.min(c[ch]), hi.max(c[ch])));
            range[ch] = hi - lo;
        }
        for _ in 0..200 {
            let p = Vec3::from_fn(|_, _| rng.random_range(-0.7..0.7));
            let q = p + Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize() * 1e-6;
            let a = pyr.levels[0].sample(&p);
            let b = pyr.levels[0].sample(&q);
            for ch in 0..CHANNELS {
                assert!((a[ch] - b[ch]).abs() < 1e-3 * range[ch]);
            }
        }
    }
}
