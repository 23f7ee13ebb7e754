use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{random_unit, sample_capsule_union, TemplateConfig, TemplateModel};
use super::pose::{pose_unchecked, posed_capsules, PoseShapeParams};
use crate::error::{Error, Result};
use crate::geometry::{normalize_cloud, write_xyz, NearestIndex, Normalization, PointCloud, Vec3};

/// Degradations applied to a clean target, in field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSpec {
    /// Standard deviation of per-coordinate gaussian noise.
    pub jitter: f64,
    /// Fraction of points removed as one contiguous region.
    pub crop_fraction: f64,
    pub clutter_points: usize,
    /// Radius of the clutter ball, relative to the cloud's diagonal.
    pub clutter_radius: f64,
    /// Final point count; keeps the current count when absent.
    pub resample: Option<usize>,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::invalid(format!("corruption.jitter must be >= 0, got {}", self.jitter)));
        }
        if !(0.0..1.0).contains(&self.crop_fraction) {
            return Err(Error::invalid(format!(
                "corruption.crop_fraction must be in [0, 1), got {}",
                self.crop_fraction
            )));
        }
        if !(self.clutter_radius >= 0.0 && self.clutter_radius.is_finite()) {
            return Err(Error::invalid(format!("corruption.clutter_radius must be >= 0, got {}", self.clutter_radius)));
        }
        if self.resample == Some(0) {
            return Err(Error::invalid("corruption.resample must be positive"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.jitter == 0.0 && self.crop_fraction == 0.0 && self.clutter_points == 0 && self.resample.is_none()
    }
}

/// Applies jitter, a contiguous crop, clutter, and resampling, in that order.
pub fn corrupt_cloud(cloud: &PointCloud, spec: &CorruptionSpec, seed: u64) -> Result<PointCloud> {
    spec.validate()?;
    if spec.is_identity() {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diagonal = cloud.bbox_diagonal();
    let mut points = cloud.points().to_vec();

    if spec.jitter > 0.0 {
        let noise = Normal::new(0.0, spec.jitter).expect("validated sigma");
        for p in &mut points {
            *p += Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
        }
    }

    let removed = (spec.crop_fraction * points.len() as f64).floor() as usize;
    if removed > 0 {
        let seed_point = points[rng.random_range(0..points.len())];
        let far = *points
            .iter()
            .max_by(|a, b| (*a - seed_point).norm_squared().total_cmp(&(*b - seed_point).norm_squared()))
            .expect("non-empty cloud");
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&i, &j| {
            (points[i] - far).norm_squared().total_cmp(&(points[j] - far).norm_squared()).then(i.cmp(&j))
        });
        let mut keep = vec![true; points.len()];
        for &i in &order[..removed] {
            keep[i] = false;
        }
        points = points.into_iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p).collect();
    }

    if spec.clutter_points > 0 {
        let center = crate::geometry::centroid(&points) + random_unit(&mut rng) * (0.5 * diagonal);
        let radius = spec.clutter_radius * diagonal;
        for _ in 0..spec.clutter_points {
            let r = radius * rng.random::<f64>().cbrt();
            points.push(center + random_unit(&mut rng) * r);
        }
    }

    if let Some(target) = spec.resample {
        let n = points.len();
        let mut chosen: Vec<usize> = if target <= n {
            sample_indices(&mut rng, n, target).into_vec()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            all.extend((n..target).map(|_| rng.random_range(0..n)));
            all
        };
        chosen.sort_unstable();
        points = chosen.into_iter().map(|i| points[i]).collect();
    }
    PointCloud::new(points)
}

/// Distribution of synthetic shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub shapes: usize,
    pub seed: u64,
    /// Target points per shape.
    pub points: usize,
    /// Joint rotations are drawn uniformly within this fraction of each limit.
    pub pose_fraction: f64,
    /// Global rotation about the vertical axis is drawn from `[-yaw, yaw]`.
    pub yaw_range: f64,
    /// Bone length and radius scales are drawn uniformly from this range.
    pub scale_range: [f64; 2],
    pub corruption: CorruptionSpec,
    pub template: TemplateConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            shapes: 100,
            seed: 0,
            points: 4096,
            pose_fraction: 1.0,
            yaw_range: 0.5,
            scale_range: [0.9, 1.1],
            corruption: CorruptionSpec::default(),
            template: TemplateConfig::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.corruption.validate()?;
        if self.points == 0 {
            return Err(Error::invalid("generator.points must be positive"));
        }
        if !(0.0..=1.0).contains(&self.pose_fraction) {
            return Err(Error::invalid(format!(
                "generator.pose_fraction must be in [0, 1], got {}",
                self.pose_fraction
            )));
        }
        if !(self.yaw_range >= 0.0 && self.yaw_range.is_finite()) {
            return Err(Error::invalid("generator.yaw_range must be >= 0"));
        }
        let [lo, hi] = self.scale_range;
        if !(0.5 <= lo && lo <= hi && hi <= 2.0) {
            return Err(Error::invalid(format!(
                "generator.scale_range must satisfy 0.5 <= lo <= hi <= 2, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// A synthetic target with its registered ground truth, both in the
/// target's normalized frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthPair {
    pub target: PointCloud,
    pub gt_vertices: Vec<Vec3>,
    /// Parameters in template units; posing them and applying
    /// `normalization` gives `gt_vertices`.
    pub gt_params: PoseShapeParams,
    /// Nearest ground-truth vertex of each target point.
    pub gt_target_corr: Vec<usize>,
    pub normalization: Normalization,
}

/// Seed of the `index`-th item derived from a base seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws joint rotations, yaw, and scales according to `config`.
pub fn sample_params(template: &TemplateModel, config: &GeneratorConfig, rng: &mut impl Rng) -> PoseShapeParams {
    let j = template.bone_count();
    let mut p = PoseShapeParams::rest(j);
    for (r, bone) in p.joint_rotations.iter_mut().zip(&template.skeleton.bones) {
        for a in 0..3 {
            let lim = bone.limit[a] * config.pose_fraction;
            r[a] = if lim > 0.0 { rng.random_range(-lim..=lim) } else { 0.0 };
        }
    }
    if config.yaw_range > 0.0 {
        p.global_rotation[1] = rng.random_range(-config.yaw_range..=config.yaw_range);
    }
    let [lo, hi] = config.scale_range;
    for s in p.length_scales.iter_mut().chain(p.radius_scales.iter_mut()) {
        *s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    }
    p
}

/// Poses the template with random parameters, samples the posed capsule
/// surfaces, corrupts the samples, and normalizes everything by the target.
pub fn sample_training_shape(template: &TemplateModel, seed: u64, config: &GeneratorConfig) -> Result<GroundTruthPair> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = sample_params(template, config, &mut rng);
    let gt_raw = pose_unchecked(template, &params);
    let capsules = posed_capsules(&template.skeleton, &params);
    let surface: Vec<Vec3> =
        sample_capsule_union(&capsules, config.points, &mut rng)?.into_iter().map(|(p, _)| p).collect();
    let corruption_seed = rng.random();
    let target = corrupt_cloud(&PointCloud::new(surface)?, &config.corruption, corruption_seed)?;
    let (target, normalization) = normalize_cloud(&target)?;
    let gt_vertices = normalization.forward_all(&gt_raw);
    let gt_target_corr = NearestIndex::build(&gt_vertices)?.nearest_indices(target.points());
    Ok(GroundTruthPair { target, gt_vertices, gt_params: params, gt_target_corr, normalization })
}

/// Generates `config.shapes` pairs with per-shape seeds derived from `config.seed`.
pub fn generate_dataset(template: &TemplateModel, config: &GeneratorConfig) -> Result<Vec<GroundTruthPair>> {
    config.validate()?;
    (0..config.shapes)
        .into_par_iter()
        .map(|i| sample_training_shape(template, derive_seed(config.seed, i as u64), config))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub name: String,
    pub seed: u64,
}

/// Contents of a dataset directory's `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: GeneratorConfig,
    pub template_hash: String,
    pub shapes: Vec<ShapeEntry>,
}

pub fn shape_name(index: usize) -> String {
    format!("shape_{index:05}")
}

fn params_to_map(pair: &GroundTruthPair) -> BTreeMap<&'static str, Vec<f64>> {
    let p = &pair.gt_params;
    BTreeMap::from([
        ("joint_rotations", p.joint_rotations.iter().flatten().copied().collect()),
        ("global_rotation", p.global_rotation.to_vec()),
        ("translation", p.translation.to_vec()),
        ("length_scales", p.length_scales.clone()),
        ("radius_scales", p.radius_scales.clone()),
        ("normalization_centroid", pair.normalization.centroid.to_vec()),
        ("normalization_scale", vec![pair.normalization.scale]),
    ])
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes one shape directory: target.xyz, gt_vertices.xyz, params.json, corr.csv.
pub fn write_pair(dir: &Path, pair: &GroundTruthPair) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    pair.target.write_xyz(dir.join("target.xyz"))?;
    write_xyz(dir.join("gt_vertices.xyz"), &pair.gt_vertices)?;
    let json = serde_json::to_string_pretty(&params_to_map(pair)).expect("plain numeric map");
    write_text(&dir.join("params.json"), &(json + "\n"))?;
    let corr: String = pair.gt_target_corr.iter().map(|i| format!("{i}\n")).collect();
    write_text(&dir.join("corr.csv"), &corr)
}

/// Reads a shape directory written by [`write_pair`].
pub fn read_pair(dir: &Path, bones: usize) -> Result<GroundTruthPair> {
    let target = PointCloud::read_xyz(dir.join("target.xyz"))?;
    let gt_vertices = PointCloud::read_xyz(dir.join("gt_vertices.xyz"))?.into_points();
    let params_path = dir.join("params.json");
    let map: BTreeMap<String, Vec<f64>> = serde_json::from_str(&read_text(&params_path)?)
        .map_err(|e| Error::parse(params_path.display().to_string(), e.to_string()))?;
    let field = |key: &str, len: usize| -> Result<&Vec<f64>> {
        match map.get(key) {
            Some(v) if v.len() == len => Ok(v),
            Some(v) => Err(Error::parse(
                params_path.display().to_string(),
                format!("{key} has {} values, expected {len}", v.len()),
            )),
            None => Err(Error::parse(params_path.display().to_string(), format!("missing key {key}"))),
        }
    };
    let three = |v: &Vec<f64>| [v[0], v[1], v[2]];
    let joints = field("joint_rotations", 3 * bones)?;
    let gt_params = PoseShapeParams {
        joint_rotations: joints.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        global_rotation: three(field("global_rotation", 3)?),
        translation: three(field("translation", 3)?),
        length_scales: field("length_scales", bones)?.clone(),
        radius_scales: field("radius_scales", bones)?.clone(),
    };
    let normalization = Normalization {
        centroid: three(field("normalization_centroid", 3)?),
        scale: field("normalization_scale", 1)?[0],
    };
    let corr_path = dir.join("corr.csv");
    let gt_target_corr = read_text(&corr_path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim().parse::<usize>().map_err(|e| Error::parse(corr_path.display().to_string(), format!("{l:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if gt_target_corr.len() != target.len() {
        return Err(Error::parse(
            corr_path.display().to_string(),
            format!("{} indices for {} target points", gt_target_corr.len(), target.len()),
        ));
    }
    if let Some(bad) = gt_target_corr.iter().find(|&&i| i >= gt_vertices.len()) {
        return Err(Error::parse(corr_path.display().to_string(), format!("index {bad} out of range")));
    }
    Ok(GroundTruthPair { target, gt_vertices, gt_params, gt_target_corr, normalization })
}

/// Generates and writes a dataset directory; returns its manifest.
pub fn write_dataset(dir: &Path, template: &TemplateModel, config: &GeneratorConfig) -> Result<DatasetManifest> {
    let pairs = generate_dataset(template, config)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let shapes: Vec<ShapeEntry> = (0..config.shapes)
        .map(|i| ShapeEntry { name: shape_name(i), seed: derive_seed(config.seed, i as u64) })
        .collect();
    for (entry, pair) in shapes.iter().zip(&pairs) {
        write_pair(&dir.join(&entry.name), pair)?;
    }
    let manifest = DatasetManifest { generator: config.clone(), template_hash: template.content_hash(), shapes };
    let json = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    write_text(&dir.join("manifest.json"), &(json + "\n"))?;
    Ok(manifest)
}

/// A dataset loaded from disk with the template it was generated from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub template: TemplateModel,
    pub pairs: Vec<GroundTruthPair>,
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path: PathBuf = dir.join("manifest.json");
    serde_json::from_str(&read_text(&path)?).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

/// Loads a dataset directory and rebuilds its template.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let template = manifest.generator.template.build()?;
    if template.content_hash() != manifest.template_hash {
        return Err(Error::parse(
            dir.join("manifest.json").display().to_string(),
            "template hash does not match the rebuilt template",
        ));
    }
    let pairs = manifest
        .shapes
        .par_iter()
        .map(|s| read_pair(&dir.join(&s.name), template.bone_count()))
        .collect::<Result<Vec<_>>>()?;
    if let Some(bad) = pairs.iter().find(|p| p.gt_vertices.len() != template.vertex_count()) {
        return Err(Error::invalid(format!(
            "shape has {} ground-truth vertices, template has {}",
            bad.gt_vertices.len(),
            template.vertex_count()
        )));
    }
    Ok(Dataset { manifest, template, pairs })
}
